"""Data-parallel-over-nodes runtime: partitions, local graphs, collectives.

Every device holds a slice of the nodes of each graph plus full replicas of
the parameters and of the virtual state.  The model code is shared with the
single-device path; the only difference is the ``reducer`` hook, which here
is an all-reduce recorded on the device's tape.
"""

from __future__ import annotations

import hashlib
import math
import socket
import struct
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Segments, Tape, Tensor
from .geometry import GeometricGraph, GraphBatch, radius_graph
from .losses import LossConfig, objective, sampler
from .model import Model, ModelConfig
from .nbody import SamplePair

PARTITIONERS = ("random", "grid")
TRANSPORTS = ("inproc", "socket")
CUTOFF_STEP = 0.001
CUTOFF_MAX_STEPS = 100


class CollectiveError(RuntimeError):
    pass


class ReplicaMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray
    D: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if self.D < 1:
            raise ValueError("device count must be >= 1")
        if a.size and (a.min() < 0 or a.max() >= self.D):
            raise ValueError("assignment outside [0, D)")
        if np.any(np.bincount(a, minlength=self.D) == 0):
            raise ValueError("every device needs at least one node")

    def nodes(self, device: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == device)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.D)


def partition_random(N: int, D: int, seed) -> Partition:
    """Seeded permutation, then node k of the permutation goes to device k mod D."""
    if D < 1:
        raise ValueError("device count must be >= 1")
    if N < D:
        raise ValueError(f"cannot split {N} nodes over {D} devices")
    perm = np.random.default_rng(seed).permutation(N)
    a = np.empty(N, dtype=np.int64)
    a[perm] = np.arange(N) % D
    return Partition(a, D)


def near_cubic_factors(D: int) -> tuple[int, int, int]:
    """(a, b, c) with a*b*c = D, a >= b >= c, as close to a cube as possible."""
    best = None
    for c in range(1, int(round(D ** (1 / 3))) + 2):
        if D % c:
            continue
        rest = D // c
        for b in range(c, int(math.isqrt(rest)) + 1):
            if rest % b:
                continue
            a = rest // b
            if a < b:
                continue
            key = (a - c, a)
            if best is None or key < best[0]:
                best = (key, (a, b, c))
    return best[1] if best else (D, 1, 1)


def partition_grid(X: np.ndarray, D: int, seed=0) -> Partition:
    """Axis-aligned bins from recursive quantile cuts.

    The axis with the widest spread gets the most cuts.  A slab whose cut axis
    is degenerate (all coordinates equal) is split at random instead.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N < D:
        raise ValueError(f"cannot split {N} nodes over {D} devices")
    factors = near_cubic_factors(D)
    axes = np.argsort(-np.ptp(X, axis=0), kind="stable")
    rng = np.random.default_rng(seed)
    a = np.empty(N, dtype=np.int64)

    def split(idx: np.ndarray, level: int, base: int, stride: int) -> None:
        if level == 3:
            a[idx] = base
            return
        k = factors[level]
        col = X[idx, axes[level]]
        if k > 1 and np.ptp(col) == 0:
            order = rng.permutation(idx.size)
        else:
            order = np.argsort(col, kind="stable")
        sub_stride = stride // k
        for j, part in enumerate(np.array_split(idx[order], k)):
            split(part, level + 1, base + j * sub_stride, sub_stride)

    split(np.arange(N), 0, 0, D)
    return Partition(a, D)


def make_partition(kind: str, graph: GeometricGraph, D: int, seed) -> Partition:
    if kind == "random":
        return partition_random(graph.n_nodes, D, seed)
    if kind == "grid":
        return partition_grid(graph.X, D, seed)
    raise ValueError(f"unknown partitioner {kind!r}; choose from {PARTITIONERS}")


# ---------------------------------------------------------------------------
# local graphs and the dynamic cutoff
# ---------------------------------------------------------------------------

EdgeAttrFn = Callable[[GeometricGraph, np.ndarray], np.ndarray]


def _default_attr(graph: GeometricGraph, edges: np.ndarray) -> np.ndarray:
    return np.zeros((len(edges), graph.edge_attr.shape[1]))


@dataclass
class LocalGraph:
    device: int
    nodes: np.ndarray  # global indices, ascending
    graph: GeometricGraph


def build_local_graph(
    graph: GeometricGraph,
    partition: Partition,
    device: int,
    r: float | None = None,
    edge_attr_fn: EdgeAttrFn | None = None,
) -> LocalGraph:
    """Nodes of one device with only the edges that stay on it.

    With ``r = None`` the local graph is the induced subgraph of the existing
    edges; otherwise it is the radius graph over the local nodes, with edge
    attributes from ``edge_attr_fn`` (zeros by default).
    """
    nodes = partition.nodes(device)
    if r is None:
        return LocalGraph(device, nodes, graph.subgraph(nodes))
    sub = GeometricGraph(graph.X[nodes], graph.V[nodes], graph.H[nodes])
    edges = radius_graph(sub.X, r)
    attr = (edge_attr_fn or _default_attr)(sub, edges) if len(edges) else np.zeros((0, graph.edge_attr.shape[1]))
    return LocalGraph(device, nodes, sub.with_edges(edges, attr))


def local_edge_count(X: np.ndarray, partition: Partition, r: float) -> int:
    return sum(len(radius_graph(X[partition.nodes(d)], r)) for d in range(partition.D))


def adjust_cutoff(
    X: np.ndarray,
    partition: Partition,
    r0: float,
    target_edges: int,
    step: float = CUTOFF_STEP,
    max_steps: int = CUTOFF_MAX_STEPS,
) -> float:
    """Smallest r = r0 + k*step (k <= max_steps) whose local edge total reaches the target."""
    if not r0 > 0:
        raise ValueError("r0 must be > 0")
    X = np.asarray(X, dtype=np.float64)
    r_max = r0 + max_steps * step
    # directed local pair distances up to the largest radius considered
    dists = []
    for d in range(partition.D):
        P = X[partition.nodes(d)]
        if len(P) < 2:
            continue
        pairs = cKDTree(P).query_pairs(r_max * (1.0 + 1e-9), output_type="ndarray")
        if len(pairs):
            dd = P[pairs[:, 0]] - P[pairs[:, 1]]
            dists.append(np.sqrt(np.einsum("ij,ij->i", dd, dd)))
    dist = np.sort(np.concatenate(dists)) if dists else np.zeros(0)
    dist = dist[dist > 0]
    for k in range(max_steps + 1):
        r = r0 + k * step
        if 2 * int(np.searchsorted(dist, r, side="right")) >= target_edges:
            return r
    warnings.warn(f"adjust_cutoff: {max_steps} steps reached without meeting {target_edges} edges", RuntimeWarning)
    return r_max


# ---------------------------------------------------------------------------
# collectives
# ---------------------------------------------------------------------------


@dataclass
class TransportStats:
    rounds: int = 0
    scalars: list[int] = field(default_factory=list)
    bytes: list[int] = field(default_factory=list)
    round_sizes: list[int] = field(default_factory=list)

    def reset(self) -> None:
        self.rounds = 0
        self.scalars = [0] * len(self.scalars)
        self.bytes = [0] * len(self.bytes)
        self.round_sizes.clear()


class InProcGroup:
    """Shared-memory all-reduce for D threads; sums in ascending device order."""

    kind = "inproc"

    def __init__(self, D: int, timeout: float = 600.0):
        self.D = D
        self._slots: list[np.ndarray | None] = [None] * D
        self._barrier = threading.Barrier(D, timeout=timeout)
        self.stats = TransportStats(scalars=[0] * D, bytes=[0] * D)

    def endpoint(self, rank: int) -> "Communicator":
        return Communicator(self, rank)

    def abort(self) -> None:
        self._barrier.abort()

    def close(self) -> None:
        pass

    def all_reduce(self, rank: int, arr: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        self._slots[rank] = arr
        self.stats.scalars[rank] += arr.size
        self.stats.bytes[rank] += arr.nbytes
        self._barrier.wait()
        shapes = {s.shape for s in self._slots}
        total = None
        if len(shapes) == 1:
            total = self._slots[0].copy()
            for d in range(1, self.D):
                total += self._slots[d]
        if rank == 0:
            self.stats.rounds += 1
            self.stats.round_sizes.append(arr.size)
        self._barrier.wait()
        if total is None:
            raise CollectiveError(f"all_reduce: shapes disagree across devices: {sorted(shapes)}")
        return total


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise CollectiveError("socket closed mid-message")
        buf += chunk
    return bytes(buf)


def _send_array(sock: socket.socket, arr: np.ndarray, flag: int = 0) -> None:
    head = struct.pack("<BI", flag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    sock.sendall(head + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _recv_array(sock: socket.socket) -> tuple[int, np.ndarray]:
    flag, ndim = struct.unpack("<BI", _recv_exact(sock, 5))
    shape = struct.unpack(f"<{ndim}Q", _recv_exact(sock, 8 * ndim)) if ndim else ()
    n = math.prod(shape)
    data = np.frombuffer(_recv_exact(sock, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return flag, data


class SocketGroup:
    """Byte-stream all-reduce with rank 0 as the hub.

    Non-hub ranks send their array and receive the total; the hub adds the
    arrays in ascending rank order, exactly like :class:`InProcGroup`.
    """

    kind = "socket"

    def __init__(self, D: int, timeout: float = 600.0):
        self.D = D
        self._hub: list[socket.socket | None] = [None] * D
        self._spoke: list[socket.socket | None] = [None] * D
        for r in range(1, D):
            a, b = socket.socketpair()
            a.settimeout(timeout)
            b.settimeout(timeout)
            self._hub[r], self._spoke[r] = a, b
        self.stats = TransportStats(scalars=[0] * D, bytes=[0] * D)

    def endpoint(self, rank: int) -> "Communicator":
        return Communicator(self, rank)

    def abort(self) -> None:
        self.close()

    def close(self) -> None:
        for s in self._hub + self._spoke:
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass

    def all_reduce(self, rank: int, arr: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        self.stats.scalars[rank] += arr.size
        self.stats.bytes[rank] += arr.nbytes
        try:
            if rank != 0:
                _send_array(self._spoke[rank], arr)
                flag, total = _recv_array(self._spoke[rank])
                if flag:
                    raise CollectiveError("all_reduce: shapes disagree across devices")
                return total
            parts = [arr] + [_recv_array(self._hub[r])[1] for r in range(1, self.D)]
            ok = len({p.shape for p in parts}) == 1
            total = parts[0].copy()
            if ok:
                for p in parts[1:]:
                    total += p
            for r in range(1, self.D):
                _send_array(self._hub[r], total if ok else np.zeros(0), flag=0 if ok else 1)
            self.stats.rounds += 1
            self.stats.round_sizes.append(arr.size)
            if not ok:
                raise CollectiveError("all_reduce: shapes disagree across devices")
            return total
        except OSError as exc:
            raise CollectiveError(f"socket transport failed: {exc}") from exc


def make_group(kind: str, D: int):
    if kind == "inproc":
        return InProcGroup(D)
    if kind == "socket":
        return SocketGroup(D)
    raise ValueError(f"unknown transport {kind!r}; choose from {TRANSPORTS}")


@dataclass
class Communicator:
    group: object
    rank: int

    @property
    def D(self) -> int:
        return self.group.D

    def all_reduce(self, arr: np.ndarray) -> np.ndarray:
        return self.group.all_reduce(self.rank, arr)


def all_reduce_sum(t: Tensor, comm: Communicator, tape: Tape | None = None) -> Tensor:
    """Replicated sum over devices; backward all-reduces the incoming gradients.

    The node is recorded even when no gradient reaches it on this device, so
    every device joins every backward round.
    """
    total = comm.all_reduce(t.data)
    if tape is None:
        tape = t.tape
    if tape is None:
        return Tensor(total)

    def back(g, n):
        return (comm.all_reduce(g),)

    return tape.record(total, (t,), back, always=True)


def run_workers(D: int, fn: Callable[[int, Communicator], object], transport: str = "inproc", group=None) -> list:
    """Run ``fn(rank, comm)`` on D threads; re-raise the first worker error."""
    group = group or make_group(transport, D)
    results: list = [None] * D
    errors: list[BaseException | None] = [None] * D

    def body(rank: int) -> None:
        try:
            results[rank] = fn(rank, group.endpoint(rank))
        except BaseException as exc:  # propagate to the caller below
            errors[rank] = exc
            group.abort()

    if D == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), daemon=True) for r in range(D)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    real = [e for e in errors if e is not None and not isinstance(e, threading.BrokenBarrierError)]
    if real:
        raise real[0]
    if any(e is not None for e in errors):
        raise CollectiveError("worker aborted")
    return results


# ---------------------------------------------------------------------------
# sharded samples and worker views
# ---------------------------------------------------------------------------


@dataclass
class Shard:
    """One sample cut into per-device local graphs."""

    n_nodes: int
    partition: Partition
    locals: list[LocalGraph]
    target: np.ndarray
    radius: float | None = None

    def union_graph(self, template: GeometricGraph) -> GeometricGraph:
        """Full node set with exactly the edges that survived on some device."""
        edges, attrs = [], []
        for lg in self.locals:
            edges.append(lg.nodes[lg.graph.edges])
            attrs.append(lg.graph.edge_attr)
        e = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
        a = np.concatenate(attrs) if attrs else np.zeros((0, template.edge_attr.shape[1]))
        order = np.lexsort((e[:, 1], e[:, 0]))
        return GeometricGraph(template.X, template.V, template.H, e[order], a[order])


def shard_sample(
    pair: SamplePair,
    D: int,
    partitioner: str = "random",
    seed=0,
    radius: float | None = None,
    edge_attr_fn: EdgeAttrFn | None = None,
    dynamic: bool = False,
) -> Shard:
    """Partition a sample and build every device's local graph.

    ``dynamic`` grows the radius until the local edge total matches the
    single-device radius graph at ``radius``.
    """
    part = make_partition(partitioner, pair.graph, D, seed)
    if dynamic:
        if radius is None:
            raise ValueError("the dynamic cutoff needs a starting radius")
        target = len(radius_graph(pair.graph.X, radius))
        radius = adjust_cutoff(pair.graph.X, part, radius, target)
    locs = [build_local_graph(pair.graph, part, d, radius, edge_attr_fn) for d in range(D)]
    return Shard(pair.graph.n_nodes, part, locs, pair.target, radius)


@dataclass
class WorkerView:
    """What one device sees of a mini-batch of sharded samples."""

    device: int
    batch: GraphBatch
    target: np.ndarray
    rows: np.ndarray  # row of each local node in the concatenated global batch
    counts_global: np.ndarray
    D: int

    @property
    def n_graphs(self) -> int:
        return self.batch.n_graphs


def worker_views(shards: Sequence[Shard], D: int) -> list[WorkerView]:
    offs = np.cumsum([0] + [s.n_nodes for s in shards])
    counts = np.array([float(s.n_nodes) for s in shards])
    views = []
    for d in range(D):
        locs = [s.locals[d] for s in shards]
        batch = GraphBatch.from_graphs([lg.graph for lg in locs])
        target = np.concatenate([s.target[lg.nodes] for s, lg in zip(shards, locs)])
        rows = np.concatenate([lg.nodes + offs[k] for k, lg in enumerate(locs)])
        views.append(WorkerView(d, batch, target, rows, counts, D))
    return views


# ---------------------------------------------------------------------------
# distributed forward, loss and gradient sync
# ---------------------------------------------------------------------------


def dist_forward(model: Model, view: WorkerView, comm: Communicator, tape: Tape | None = None):
    P = model.bind(tape)
    return model.forward(view.batch, P, reducer=lambda t: all_reduce_sum(t, comm, tape))


def dist_loss(out, view: WorkerView, loss_cfg: LossConfig, seed: int, step: int, C: int) -> Tensor:
    """(1/(3N)) SSE_d + (weight/D) MMD(Z, local ground-truth sample)."""
    return objective(
        out.X, view.target, out.Z, view.batch.node_graph, view.n_graphs, view.counts_global,
        loss_cfg, sampler(seed, step, view.device), C, mmd_scale=1.0 / view.D,
    )


def sync_param_grads(store: ad.ParamStore, comm: Communicator, extra: np.ndarray | None = None) -> np.ndarray | None:
    """Sum gradients over devices in one round; ``extra`` scalars ride along."""
    flat = store.flat_grads()
    if extra is not None:
        flat = np.concatenate([flat, np.asarray(extra, dtype=np.float64).reshape(-1)])
    total = comm.all_reduce(flat)
    n = store.size()
    store.set_flat_grads(total[:n])
    return total[n:] if extra is not None else None


def oracle_loss(model: Model, union: GraphBatch, views: Sequence[WorkerView], loss_cfg: LossConfig,
                seed: int, step: int, P=None) -> tuple[Tensor, object]:
    """Sum of every device's loss computed in one process on the union graph."""
    out = model.forward(union, P)
    seg_n = union.n_nodes
    total = None
    for v in views:
        sel = Segments(v.rows, seg_n)
        Xd = ad.gather(out.X, sel)
        Ld = objective(
            Xd, v.target, out.Z, union.node_graph[v.rows], union.n_graphs, v.counts_global,
            loss_cfg, sampler(seed, step, v.device), model.config.C, mmd_scale=1.0 / v.D,
        )
        total = Ld if total is None else ad.add(total, Ld)
    return total, out


def checksum(*arrays: np.ndarray | None) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is not None:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training engine
# ---------------------------------------------------------------------------


class DistEngine:
    """D replicas trained on node shards; plugs into ``trainer.train``."""

    def __init__(
        self,
        model: Model,
        adam,
        D: int,
        seed: int = 0,
        partitioner: str = "random",
        transport: str = "inproc",
        radius: float | None = None,
        edge_attr_fn: EdgeAttrFn | None = None,
        dynamic: bool = False,
    ):
        from .trainer import AdamState, loss_config

        if D < 1:
            raise ValueError("device count must be >= 1")
        self.model = model
        self.D = D
        self.seed = seed
        self.partitioner = partitioner
        self.radius = radius
        self.edge_attr_fn = edge_attr_fn
        self.dynamic = dynamic
        self.loss_cfg = loss_config(model.config)
        self.replicas = [model] + [Model(model.config, model.seed, model.params.copy()) for _ in range(D - 1)]
        self.adams = [adam] + [AdamState(adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay) for _ in range(D - 1)]
        self.group = make_group(transport, D)
        self._shards: dict[int, tuple[Shard, SamplePair]] = {}
        self.last_virtual_checksums: list[str] = []
        self._bytes_mark = 0

    def shard(self, pair: SamplePair) -> Shard:
        # keyed by identity; the pair is kept alive so ids are never reused
        hit = self._shards.get(id(pair))
        if hit is None:
            seed = [self.seed, len(self._shards)]
            s = shard_sample(pair, self.D, self.partitioner, seed, self.radius, self.edge_attr_fn, self.dynamic)
            hit = self._shards[id(pair)] = (s, pair)
        return hit[0]

    def views(self, pairs) -> list[WorkerView]:
        return worker_views([self.shard(p) for p in pairs], self.D)

    def step(self, pairs, step: int) -> float:
        from .trainer import DIVERGENCE_LIMIT, adam_step

        views = self.views(pairs)
        C = self.model.config.C

        def work(rank: int, comm: Communicator):
            rep = self.replicas[rank]
            rep.params.zero_grads()
            tape = Tape()
            out = dist_forward(rep, views[rank], comm, tape)
            L = dist_loss(out, views[rank], self.loss_cfg, self.seed, step, C)
            tape.backward(L)
            total = sync_param_grads(rep.params, comm, extra=[L.item()])
            value = float(total[0])
            if np.isfinite(value) and value <= DIVERGENCE_LIMIT:
                adam_step(rep.params, self.adams[rank])
            zs = checksum(out.Z.data if out.Z is not None else None, out.S.data if out.S is not None else None)
            return value, zs

        res = run_workers(self.D, work, group=self.group)
        self.last_virtual_checksums = [r[1] for r in res]
        self.check_replicas()
        return res[0][0]

    def check_replicas(self) -> None:
        if len(set(self.last_virtual_checksums)) > 1:
            raise ReplicaMismatch("virtual state replicas diverged")
        sums = {checksum(r.params.flat_values()) for r in self.replicas}
        if len(sums) > 1:
            raise ReplicaMismatch("parameter replicas diverged")

    def predict(self, pairs) -> np.ndarray:
        views = self.views(pairs)
        n = sum(p.graph.n_nodes for p in pairs)

        def work(rank, comm):
            return dist_forward(self.replicas[rank], views[rank], comm).X.data

        res = run_workers(self.D, work, group=self.group)
        out = np.empty((n, 3))
        for v, x in zip(views, res):
            out[v.rows] = x
        return out

    def metrics(self) -> dict:
        total = sum(self.group.stats.bytes)
        out = {
            "comm_bytes": total - self._bytes_mark,
            "comm_rounds": self.group.stats.rounds,
            "skipped_steps": self.adams[0].skipped,
        }
        self._bytes_mark = total
        return out
