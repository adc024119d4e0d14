"""Charged-particle N-body trajectories and the on-disk dataset format."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometricGraph, fully_connected

MAGIC = b"VEGN1\n"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
FIELDS = ("seeds", "charges", "x_in", "v_in", "x_target")
SIM_CHUNK = 100  # trajectories integrated together


class DatasetFormatError(ValueError):
    pass


def _pair_charges(charges: np.ndarray) -> np.ndarray:
    cc = charges[..., :, None] * charges[..., None, :]
    n = charges.shape[-1]
    cc[..., np.arange(n), np.arange(n)] = 0.0
    return cc


def _accel(x: np.ndarray, cc: np.ndarray, eps2: float) -> np.ndarray:
    # squared distances from the Gram matrix; softening keeps r2 well away from 0
    sq = (x * x).sum(axis=-1)
    r2 = sq[..., :, None] + sq[..., None, :] - 2.0 * (x @ np.swapaxes(x, -1, -2))
    np.maximum(r2, 0.0, out=r2)
    r2 += eps2
    w = cc / (r2 * np.sqrt(r2))
    return x * w.sum(axis=-1)[..., None] - w @ x


def coulomb_accel(x: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    """a_i = sum_j c_i c_j (x_i - x_j) / (|x_i - x_j|^2 + eps^2)^(3/2), unit masses.

    Accepts leading batch dimensions; every system is computed the same way
    whatever the batch size, so batched and single runs agree bitwise.
    """
    x = np.asarray(x, dtype=np.float64)
    return _accel(x, _pair_charges(np.asarray(charges, dtype=np.float64)), softening * softening)


@dataclass
class Trajectory:
    X: np.ndarray  # frames x n x 3
    V: np.ndarray
    charges: np.ndarray

    @property
    def frames(self) -> int:
        return self.X.shape[0]


def simulate_from(
    x0: np.ndarray,
    v0: np.ndarray,
    charges: np.ndarray,
    frames: int,
    dt_sim: float = 1e-3,
    substeps: int = 10,
    softening: float = 0.1,
) -> Trajectory:
    """Kick-drift-kick leapfrog; frame 0 is the initial state.

    Inputs may carry a leading batch axis (B x n x 3); frames then come second.
    """
    if softening <= 0:
        raise ValueError("softening must be > 0")
    x = np.array(x0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    charges = np.asarray(charges, dtype=np.float64)
    X = np.empty(x.shape[:-2] + (frames,) + x.shape[-2:])
    V = np.empty_like(X)
    cc = _pair_charges(charges)
    eps2 = softening * softening
    a = _accel(x, cc, eps2)
    half = 0.5 * dt_sim
    for f in range(frames):
        X[..., f, :, :], V[..., f, :, :] = x, v
        if f == frames - 1:
            break
        for _ in range(substeps):
            v += half * a
            x += dt_sim * v
            a = _accel(x, cc, eps2)
            v += half * a
    return Trajectory(X, V, charges)


def initial_state(n: int, rng: np.random.Generator):
    x = rng.normal(0.0, 1.0, size=(n, 3))
    v = rng.normal(0.0, 0.5, size=(n, 3))
    charges = rng.choice(np.array([-1.0, 1.0]), size=n)
    return x, v, charges


def simulate(n: int, frames: int, dt_sim: float = 1e-3, substeps: int = 10, seed=0, softening: float = 0.1) -> Trajectory:
    if n < 2:
        raise ValueError("need at least two particles")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x, v, c = initial_state(n, rng)
    return simulate_from(x, v, c, frames, dt_sim, substeps, softening)


def charge_features(charges: np.ndarray) -> np.ndarray:
    """One-hot charge sign: +1 -> (1, 0), -1 -> (0, 1)."""
    charges = np.asarray(charges)
    return np.stack([(charges > 0), (charges < 0)], axis=-1).astype(np.float64)


@dataclass
class SamplePair:
    graph: GeometricGraph
    target: np.ndarray
    delta_t: int


@dataclass
class Split:
    seeds: np.ndarray
    charges: np.ndarray
    x_in: np.ndarray
    v_in: np.ndarray
    x_target: np.ndarray

    def __len__(self) -> int:
        return len(self.seeds)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f: getattr(self, f) for f in FIELDS}


@dataclass
class Dataset:
    meta: dict
    splits: dict[str, Split] = field(default_factory=dict)

    def samples(self, split: str) -> list[SamplePair]:
        s = self.splits[split]
        n = s.charges.shape[1]
        edges = fully_connected(n)
        out = []
        for k in range(len(s)):
            c = s.charges[k]
            attr = (c[edges[:, 0]] * c[edges[:, 1]]).reshape(-1, 1)
            g = GeometricGraph(s.x_in[k], s.v_in[k], charge_features(c), edges, attr)
            out.append(SamplePair(g, s.x_target[k].copy(), int(self.meta["delta_t"])))
        return out

    def equals(self, other: "Dataset") -> bool:
        if self.meta != other.meta or set(self.splits) != set(other.splits):
            return False
        for name, s in self.splits.items():
            o = other.splits[name]
            for f in FIELDS:
                a, b = getattr(s, f), getattr(o, f)
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def build_dataset(
    n_train: int = 1000,
    n_val: int = 200,
    n_test: int = 200,
    n_particles: int = 30,
    delta_t: int = 10,
    seed: int = 0,
    t_input: int = 30,
    dt_sim: float = 1e-3,
    substeps: int = 10,
    softening: float = 0.1,
) -> Dataset:
    """One (frame t_input -> frame t_input + delta_t) pair per trajectory.

    Trajectory k of the whole dataset uses generator ``default_rng([seed, k])``
    with k running through train, then val, then test, so split seeds are
    disjoint.
    """
    meta = {
        "n_particles": int(n_particles),
        "delta_t": int(delta_t),
        "t_input": int(t_input),
        "dt_sim": float(dt_sim),
        "substeps": int(substeps),
        "softening": float(softening),
        "seed": int(seed),
        "frame_dt": float(dt_sim * substeps),
    }
    ds = Dataset(meta)
    frames = t_input + delta_t + 1
    start = 0
    for name, count in zip(SPLITS, (n_train, n_val, n_test)):
        seeds = np.arange(start, start + count, dtype=np.int64)
        start += count
        charges = np.empty((count, n_particles))
        x_in = np.empty((count, n_particles, 3))
        v_in = np.empty_like(x_in)
        x_t = np.empty_like(x_in)
        for lo in range(0, count, SIM_CHUNK):
            init = [initial_state(n_particles, np.random.default_rng([seed, int(s)])) for s in seeds[lo:lo + SIM_CHUNK]]
            x0, v0, c0 = (np.stack(z) for z in zip(*init))
            traj = simulate_from(x0, v0, c0, frames, dt_sim, substeps, softening)
            hi = lo + len(init)
            charges[lo:hi] = c0
            x_in[lo:hi] = traj.X[:, t_input]
            v_in[lo:hi] = traj.V[:, t_input]
            x_t[lo:hi] = traj.X[:, t_input + delta_t]
        ds.splits[name] = Split(seeds.astype(np.float64), charges, x_in, v_in, x_t)
    return ds


# ---------------------------------------------------------------------------
# file format: magic, text manifest, raw little-endian float64 arrays
# ---------------------------------------------------------------------------


def _manifest(ds: Dataset) -> str:
    lines = [f"version={FORMAT_VERSION}"]
    for key in sorted(ds.meta):
        lines.append(f"meta {key}={ds.meta[key]!r}")
    for name in SPLITS:
        if name not in ds.splits:
            continue
        s = ds.splits[name]
        lines.append(f"count {name}={len(s)}")
        for f in FIELDS:
            shape = ",".join(str(d) for d in getattr(s, f).shape)
            lines.append(f"array {name}.{f} {shape}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    header = MAGIC + _manifest(ds).encode()
    with open(path, "wb") as fh:
        fh.write(header)
        for name in SPLITS:
            if name not in ds.splits:
                continue
            for f in FIELDS:
                fh.write(np.ascontiguousarray(getattr(ds.splits[name], f), dtype="<f8").tobytes())


def header_size(path: str | os.PathLike) -> int:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nend\n")
    return end + len(b"\nend\n")


def _parse_value(text: str):
    if text.startswith("'") and text.endswith("'"):
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        return float(text)


def read_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise DatasetFormatError(f"{path}: bad magic bytes, not a dataset file")
    end = raw.find(b"\nend\n")
    if end < 0:
        raise DatasetFormatError(f"{path}: manifest not terminated (truncated file?)")
    try:
        lines = raw[len(MAGIC):end].decode().splitlines()
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(f"{path}: corrupted manifest") from exc
    if not lines or not lines[0].startswith("version="):
        raise DatasetFormatError(f"{path}: missing version line")
    version = int(lines[0].split("=", 1)[1])
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    meta: dict = {}
    arrays: list[tuple[str, tuple[int, ...]]] = []
    for line in lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, v = rest.split("=", 1)
            meta[k] = _parse_value(v)
        elif kind == "array":
            name, dims = rest.rsplit(" ", 1)
            arrays.append((name, tuple(int(d) for d in dims.split(",") if d)))
        elif kind != "count":
            raise DatasetFormatError(f"{path}: unknown manifest entry {line!r}")
    off = end + len(b"\nend\n")
    expected = off + 8 * sum(math.prod(s) for _, s in arrays)
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    data: dict[str, dict[str, np.ndarray]] = {}
    for name, shape in arrays:
        n = math.prod(shape)
        arr = np.frombuffer(raw[off:off + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * n
        split, f = name.split(".", 1)
        data.setdefault(split, {})[f] = arr
    ds = Dataset(meta)
    for split in SPLITS:
        if split in data:
            ds.splits[split] = Split(**{f: data[split][f] for f in FIELDS})
    return ds


def charge_edge_attr(graph: GeometricGraph, edges: np.ndarray) -> np.ndarray:
    """e_ij = c_i c_j, reading the charge sign back from the one-hot features."""
    c = graph.H[:, 0] - graph.H[:, 1]
    return (c[edges[:, 0]] * c[edges[:, 1]]).reshape(-1, 1)


def uniform_cloud(n: int, radius: float, seed=0, horizon: float = 0.1) -> SamplePair:
    """Charged points uniform in the unit cube on a radius graph.

    The target is the ballistic position after ``horizon``; the sample exists
    to exercise sparse large graphs, not to model physics.
    """
    from .geometry import radius_graph

    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, 3))
    v = rng.normal(0.0, 0.1, size=(n, 3))
    c = rng.choice(np.array([-1.0, 1.0]), size=n)
    g = GeometricGraph(x, v, charge_features(c))
    edges = radius_graph(x, radius)
    g = g.with_edges(edges, charge_edge_attr(g, edges))
    return SamplePair(g, x + horizon * v, 1)
