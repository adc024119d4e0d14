"""Dense float64 tensors with a tape-based reverse mode.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`.  When
any input lives on a :class:`Tape` the op appends a node holding a backward
closure; :meth:`Tape.backward` replays those closures in exact reverse append
order and accumulates parameter gradients into a :class:`ParamStore`.

Inputs that are not on a tape are constants.  Parameters enter a tape through
:meth:`Tape.bind`, so inference simply binds the store without a tape.
"""

from __future__ import annotations

import contextlib
import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = "tape" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def const(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=DTYPE))


# ----------------------------------------------------------------------------
# tape
# ----------------------------------------------------------------------------


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self._backs: list[Callable | None] = []
        self._parents: list[tuple[int, ...]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._always: list[bool] = []
        self._leaves: dict[int, str | None] = {}
        self._store: ParamStore | None = None
        self.consumed = False

    def __len__(self) -> int:
        return len(self._backs)

    def _append(self, shape, parents, back, always=False) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self._backs.append(back)
        self._parents.append(parents)
        self._shapes.append(shape)
        self._always.append(always)
        return len(self._backs) - 1

    def leaf(self, data: np.ndarray, name: str | None = None) -> Tensor:
        node = self._append(data.shape, (), None)
        self._leaves[node] = name
        return Tensor(data, self, node)

    def bind(self, store: "ParamStore") -> "Bound":
        if self._store is not None and self._store is not store:
            raise TapeError("a tape can only bind one ParamStore")
        self._store = store
        return Bound(store, self)

    def record(self, data, inputs: Sequence[Tensor], back, always=False) -> Tensor:
        parents = tuple(t.node if t.tape is self else -1 for t in inputs)
        node = self._append(data.shape, parents, back, always)
        return Tensor(data, self, node)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(param) into the bound store.

        Returns the raw gradients of every leaf node (keyed by node id), which
        tests use for non-parameter leaves.
        """
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.tape is not self:
            raise TapeError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._backs)
        grads[loss.node] = np.ones_like(loss.data)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            back = self._backs[i]
            if back is None:
                continue
            if g is None:
                if not self._always[i]:
                    continue
                g = np.zeros(self._shapes[i], dtype=DTYPE)
            parents = self._parents[i]
            needs = tuple(p >= 0 for p in parents)
            outs = back(g, needs)
            for p, need, gp in zip(parents, needs, outs):
                if not need or gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
            grads[i] = None
        leaf_grads = {}
        for node, name in self._leaves.items():
            g = grads[node]
            if g is None:
                continue
            leaf_grads[node] = g
            if name is not None and self._store is not None and name in self._store:
                self._store.grad(name)[...] += g
        self._backs = []
        return leaf_grads


class Bound:
    """Parameter lookup for one forward pass; caches one leaf per name."""

    def __init__(self, store: "ParamStore", tape: Tape | None):
        self.store = store
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            value = self.store.value(name)
            t = self.tape.leaf(value, name) if self.tape is not None else Tensor(value)
            self._cache[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.store


def bind(store: "ParamStore", tape: Tape | None = None) -> Bound:
    return tape.bind(store) if tape is not None else Bound(store, None)


# ----------------------------------------------------------------------------
# op plumbing
# ----------------------------------------------------------------------------

_NEGATIVE_CONTROL = {"silu_sign": 1.0}


@contextlib.contextmanager
def corrupted_silu_gradient():
    """Flip the sign of the SiLU derivative; gradient checks must then fail."""
    _NEGATIVE_CONTROL["silu_sign"] = -1.0
    try:
        yield
    finally:
        _NEGATIVE_CONTROL["silu_sign"] = 1.0


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError("inputs are recorded on different tapes")
    return tape


def _out(data: np.ndarray, inputs: Sequence[Tensor], back) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, back)


def _need_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _need_2d(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{op}: expected a 2-d tensor, got shape {t.shape}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same("add", a, b)
    return _out(a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same("sub", a, b)
    return _out(a.data - b.data, (a, b), lambda g, n: (g, -g if n[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _need_same("mul", a, b)
    ad, bd = a.data, b.data

    def back(g, n):
        return (g * bd if n[0] else None, g * ad if n[1] else None)

    return _out(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _out(a.data * c, (a,), lambda g, n: (g * c,))


def divide(a: Tensor, c: float) -> Tensor:
    """a / c; exact where a multiply by 1/c would round."""
    c = float(c)
    return _out(a.data / c, (a,), lambda g, n: (g / c,))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """a (n x k) plus a row vector broadcast over rows (1 x k or k)."""
    _need_2d("add_row", a)
    r = row.data.reshape(1, -1)
    if r.shape[1] != a.shape[1]:
        raise ShapeError(f"add_row: shape mismatch {a.shape} vs {row.shape}")
    rshape = row.shape

    def back(g, n):
        return (g, g.sum(axis=0).reshape(rshape) if n[1] else None)

    return _out(a.data + r, (a, row), back)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a (n x k) by the scalar s[i] (s is n x 1)."""
    _need_2d("scale_rows", a, s)
    if s.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows: shape mismatch {a.shape} vs {s.shape}")
    ad, sd = a.data, s.data

    def back(g, n):
        ga = g * sd if n[0] else None
        gs = np.einsum("ij,ij->i", g, ad)[:, None] if n[1] else None
        return ga, gs

    return _out(ad * sd, (a, s), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 1 / (1 + exp(-x)) with in-place steps; exp overflow gives the exact limit 0
    s = np.negative(x)
    with np.errstate(over="ignore"):
        np.exp(s, out=s)
    s += 1.0
    return np.reciprocal(s, out=s)


def silu(a: Tensor) -> Tensor:
    ad = a.data
    sig = _sigmoid(ad)
    out = ad * sig

    def back(g, n):
        d = 1.0 - sig
        d *= ad
        d += 1.0
        d *= sig
        d *= g
        if _NEGATIVE_CONTROL["silu_sign"] != 1.0:
            d *= _NEGATIVE_CONTROL["silu_sign"]
        return (d,)

    return _out(out, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _out(out, (a,), lambda g, n: (g * out,))


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def back(g, n):
        return (g @ bd.T if n[0] else None, ad.T @ g if n[1] else None)

    return _out(ad @ bd, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    _need_2d("transpose", a)
    return _out(np.ascontiguousarray(a.data.T), (a,), lambda g, n: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _out(out, (a,), lambda g, n: (g.reshape(old),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    _need_2d("concat_cols", *parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row mismatch {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g, n):
        return tuple(g[:, offsets[k]:offsets[k + 1]] if n[k] else None for k in range(len(parts)))

    return _out(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _need_2d("slice_cols", a)
    shape = a.shape

    def back(g, n):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _out(a.data[:, start:stop], (a,), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _need_2d("slice_rows", a)
    shape = a.shape

    def back(g, n):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _out(a.data[start:stop], (a,), back)


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------


def row_sqnorm(a: Tensor) -> Tensor:
    _need_2d("row_sqnorm", a)
    ad = a.data
    return _out(np.einsum("ij,ij->i", ad, ad)[:, None], (a,), lambda g, n: (2.0 * g * ad,))


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    _need_same("row_dot", a, b)
    _need_2d("row_dot", a)
    ad, bd = a.data, b.data

    def back(g, n):
        return (g * bd if n[0] else None, g * ad if n[1] else None)

    return _out(np.einsum("ij,ij->i", ad, bd)[:, None], (a, b), back)


def _ordered_row_sum(x: np.ndarray) -> np.ndarray:
    # axis-0 reduction of a C-contiguous array accumulates rows in ascending order
    return np.add.reduce(np.ascontiguousarray(x), axis=0, keepdims=True)


def sum_rows(a: Tensor) -> Tensor:
    _need_2d("sum_rows", a)
    n_rows = a.shape[0]
    return _out(_ordered_row_sum(a.data), (a,), lambda g, n: (np.repeat(g, n_rows, axis=0),))


def mean_rows(a: Tensor) -> Tensor:
    _need_2d("mean_rows", a)
    n_rows = a.shape[0]
    if n_rows == 0:
        raise ShapeError("mean_rows: empty tensor")
    inv = 1.0 / n_rows
    return _out(_ordered_row_sum(a.data) * inv, (a,), lambda g, n: (np.repeat(g * inv, n_rows, axis=0),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    total = _ordered_row_sum(a.data.reshape(-1, 1))
    return _out(total, (a,), lambda g, n: (np.full(shape, g.reshape(-1)[0]),))


# ----------------------------------------------------------------------------
# index ops
# ----------------------------------------------------------------------------


class Segments:
    """An index vector mapping m items onto n slots, with a cached CSR matrix.

    ``gather`` reads ``x[idx]``; ``scatter`` sums items into their slots in
    ascending item order.
    """

    def __init__(self, idx, n: int):
        self.idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.n = int(n)
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.n):
            raise IndexError(f"segment index out of range [0, {self.n})")
        self._csr = None
        self._counts = None

    def __len__(self) -> int:
        return self.idx.size

    @property
    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            m = self.idx.size
            self._csr = sp.csr_matrix(
                (np.ones(m, dtype=DTYPE), (self.idx, np.arange(m))), shape=(self.n, m)
            )
            self._csr.sort_indices()
        return self._csr

    @property
    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.idx, minlength=self.n).astype(DTYPE)
        return self._counts

    def sum(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] == 0:
            return np.zeros((self.n, 0), dtype=DTYPE)
        return np.asarray(self.csr @ x)


def gather(a: Tensor, seg: Segments) -> Tensor:
    _need_2d("gather", a)
    if a.shape[0] != seg.n:
        raise ShapeError(f"gather: source has {a.shape[0]} rows, index expects {seg.n}")
    return _out(a.data[seg.idx], (a,), lambda g, n: (seg.sum(g),))


def scatter(a: Tensor, seg: Segments) -> Tensor:
    _need_2d("scatter", a)
    if a.shape[0] != len(seg):
        raise ShapeError(f"scatter: source has {a.shape[0]} rows, index has {len(seg)}")
    return _out(seg.sum(a.data), (a,), lambda g, n: (g[seg.idx],))


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {where}")
    return t


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameters with gradients, iterated in name order."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def names(self) -> list[str]:
        return sorted(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        v = self._values[name]
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != v.shape:
            raise ShapeError(f"set_value {name}: shape {value.shape} != {v.shape}")
        v[...] = value

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def size(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self._values[name].copy())
            out._grads[name][...] = self._grads[name]
        return out

    def flat_values(self) -> np.ndarray:
        return np.concatenate([self._values[n].reshape(-1) for n in self.names()]) if self._values else np.zeros(0)

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([self._grads[n].reshape(-1) for n in self.names()]) if self._grads else np.zeros(0)

    def set_flat_grads(self, flat: np.ndarray) -> None:
        off = 0
        for n in self.names():
            g = self._grads[n]
            g[...] = flat[off:off + g.size].reshape(g.shape)
            off += g.size

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, self._values[n].shape) for n in self.names()]

    # checkpoint: text manifest + raw little-endian float64 in name order

    def save(self, path: str | os.PathLike) -> None:
        lines = ["VEGNCKPT1", str(len(self._values))]
        for name, shape in self.manifest():
            lines.append(f"{name} {','.join(str(d) for d in shape)}")
        header = ("\n".join(lines) + "\n").encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for name in self.names():
                fh.write(self._values[name].astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParamStore":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 8:
            raise ValueError(f"{path}: truncated checkpoint")
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = raw[8:8 + hlen].decode(errors="replace").splitlines()
        if not header or header[0] != "VEGNCKPT1":
            raise ValueError(f"{path}: not a checkpoint file")
        count = int(header[1])
        store = cls()
        off = 8 + hlen
        for line in header[2:2 + count]:
            name, dims = line.rsplit(" ", 1)
            shape = tuple(int(d) for d in dims.split(",") if d != "")
            n = math.prod(shape)
            chunk = raw[off:off + 8 * n]
            if len(chunk) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint at {name}")
            store.add(name, np.frombuffer(chunk, dtype="<f8").reshape(shape))
            off += 8 * n
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return store


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class MLP:
    """SiLU hidden layers, linear output; weights registered under ``prefix``."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        widths: Sequence[int],
        rng: np.random.Generator,
        out_gain: float = 1.0,
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.prefix = prefix
        self.widths = list(widths)
        last = len(widths) - 2
        for k in range(len(widths) - 1):
            w = glorot(rng, widths[k], widths[k + 1])
            store.add(f"{prefix}.w{k}", w * out_gain if k == last else w)
            store.add(f"{prefix}.b{k}", np.zeros((1, widths[k + 1])))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def __call__(self, P: Bound, x: Tensor) -> Tensor:
        return self.apply_parts(P, [x])

    def apply_parts(self, P: Bound, parts: Sequence) -> Tensor:
        """Apply to the column concatenation of ``parts`` without building it.

        Each part is a Tensor or ``(Tensor, Segments)``; the latter means the
        part's rows are gathered through the segments after projection, which
        is the same as projecting the gathered rows.
        """
        w0 = P[f"{self.prefix}.w0"]
        acc = None
        off = 0
        for part in parts:
            t, seg = part if isinstance(part, tuple) else (part, None)
            width = t.shape[1]
            if width == 0:
                continue
            block = w0 if (off == 0 and width == self.n_in) else slice_rows(w0, off, off + width)
            proj = matmul(t, block)
            if seg is not None:
                proj = gather(proj, seg)
            acc = proj if acc is None else add(acc, proj)
            off += width
        if off != self.n_in:
            raise ShapeError(f"{self.prefix}: inputs have {off} columns, layer expects {self.n_in}")
        if acc is None:
            rows = _rows_of(parts)
            acc = Tensor(np.zeros((rows, self.widths[1]), dtype=DTYPE))
        h = add_row(acc, P[f"{self.prefix}.b0"])
        for k in range(1, len(self.widths) - 1):
            h = silu(h)
            h = add_row(matmul(h, P[f"{self.prefix}.w{k}"]), P[f"{self.prefix}.b{k}"])
        return h


def _rows_of(parts) -> int:
    for part in parts:
        t, seg = part if isinstance(part, tuple) else (part, None)
        return len(seg) if seg is not None else t.shape[0]
    raise ShapeError("no inputs")


def mlp_reference(store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    """Plain numpy evaluation of an MLP on an explicitly concatenated input."""
    k = 0
    h = x
    while f"{prefix}.w{k}" in store:
        if k > 0:
            h = h * expit(h)
        h = h @ store.value(f"{prefix}.w{k}") + store.value(f"{prefix}.b{k}")
        k += 1
    return h


# ----------------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def format(self) -> str:
        buf = io.StringIO()
        for e in self.entries:
            flag = "ok" if e.passed else "FAIL"
            buf.write(f"{e.name:40s} abs={e.max_abs_err:.3e} rel={e.max_rel_err:.3e} {flag}\n")
        return buf.getvalue()


def grad_check(
    f: Callable[[Bound], Tensor],
    store: ParamStore,
    tolerance: float = 1e-6,
    h: float = 1e-5,
    atol: float = 1e-8,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    The relative error of a parameter is ``max|a - n| / max(max|a|, max|n|)``
    over its entries; a parameter passes if that is below ``tolerance`` or the
    absolute error is below ``atol``.
    """
    names = list(names) if names is not None else store.names()
    saved = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grads()
    tape = Tape()
    loss = f(tape.bind(store))
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("grad_check: objective is not finite")
    tape.backward(loss)
    analytic = {n: store.grad(n).copy() for n in names}

    def value() -> float:
        out = f(bind(store)).item()
        if not math.isfinite(out):
            raise NonFiniteError("grad_check: objective is not finite")
        return out

    report = GradCheckReport(tolerance)
    for name in names:
        v = store.value(name)
        numeric = np.zeros_like(v)
        flat = v.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = value()
            flat[k] = orig - h
            fm = value()
            flat[k] = orig
            nflat[k] = (fp - fm) / (2.0 * h)
        a = analytic[name]
        abs_err = float(np.max(np.abs(a - numeric))) if a.size else 0.0
        scale_ = float(max(np.max(np.abs(a)) if a.size else 0.0, np.max(np.abs(numeric)) if a.size else 0.0))
        rel = abs_err / scale_ if scale_ > 0 else 0.0
        report.entries.append(GradCheckEntry(name, abs_err, rel, rel < tolerance or abs_err < atol))
    for n, g in saved.items():
        store.grad(n)[...] = g
    return report
