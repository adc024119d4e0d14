"""Property suites behind ``vegn check``: equivariance, gradients, dist oracle, MMD.

Each suite returns a :class:`CheckReport`.  ``negative_control=True`` plants a
known defect (a sign flip somewhere) so the suite must fail; that proves the
check can detect the kind of error it is meant for.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dist
from .autodiff import Tensor
from .geometry import (
    E3Transform, GeometricGraph, GraphBatch, apply_transform, drop_longest_edges, fully_connected, random_rotation,
)
from .losses import LossConfig, mmd_loss, mse_loss, objective, rbf_kernel, total_loss
from .model import Model, ModelConfig, plain_egnn_forward
from .nbody import charge_features
from .trainer import loss_config

SUITES = ("equivariance", "gradcheck", "dist-oracle", "mmd")


@dataclass
class CheckRow:
    label: str
    value: float
    tolerance: float
    ok: bool | None = None  # set when the verdict is not just value < tolerance

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tolerance) if self.ok is None else self.ok


@dataclass
class CheckReport:
    suite: str
    rows: list[CheckRow] = field(default_factory=list)

    def add(self, label: str, value: float, tolerance: float, ok: bool | None = None) -> None:
        self.rows.append(CheckRow(label, float(value), tolerance, ok))

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    @property
    def worst(self) -> float:
        return max((r.value for r in self.rows), default=0.0)

    def format(self) -> str:
        lines = [f"[{self.suite}]"]
        for r in self.rows:
            lines.append(f"  {r.label:48s} {r.value:10.3e}  < {r.tolerance:.0e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"  {'PASS' if self.passed else 'FAIL'} ({len(self.rows)} checks)")
        return "\n".join(lines)


def random_graph(n: int, seed, edge_features: int = 1, drop_rate: float = 0.0) -> GeometricGraph:
    """Random charged system on a fully connected graph (then optionally sparsified)."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    V = rng.normal(size=(n, 3))
    c = rng.choice(np.array([-1.0, 1.0]), size=n)
    e = fully_connected(n)
    attr = np.repeat((c[e[:, 0]] * c[e[:, 1]]).reshape(-1, 1), edge_features, axis=1)
    g = GeometricGraph(X, V, charge_features(c), e, attr)
    return drop_longest_edges(g, drop_rate) if drop_rate else g


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------


def equivariance(
    backbone: str = "fast_egnn",
    n_graphs: int = 20,
    n_transforms: int = 100,
    n_permutations: int = 50,
    n_nodes: int = 32,
    virtual_nodes: int = 3,
    layers: int = 4,
    hidden: int = 32,
    tolerance: float = 1e-9,
    seed: int = 0,
    negative_control: bool = False,
    reflections: bool = True,
) -> CheckReport:
    """max |f(gG).X - g f(G).X| per graph over random E(3) maps, plus Z permutation invariance.

    The negative control compares against the map with its translation negated.
    """
    rep = CheckReport("equivariance")
    C = virtual_nodes if backbone != "egnn" else 0
    cfg = ModelConfig(backbone=backbone, layers=layers, hidden=hidden, virtual_nodes=C)
    model = Model(cfg, seed)
    for k in range(n_graphs):
        G = random_graph(n_nodes, [seed, k])
        base = model.forward(GraphBatch.from_graphs([G]), check=False)
        X0 = base.X.data
        gs = [random_rotation(np.random.default_rng([seed, k, j]), reflections) for j in range(n_transforms)]
        moved = GraphBatch.from_graphs([apply_transform(G, g) for g in gs])
        out = model.forward(moved, check=False)
        worst = 0.0
        for j, g in enumerate(gs):
            t = -g.t if negative_control else g.t
            expect = X0 @ g.O + t
            got = out.X.data[j * n_nodes:(j + 1) * n_nodes]
            worst = max(worst, float(np.max(np.abs(got - expect))))
        rep.add(f"graph {k}: max |f(gG) - g f(G)|", worst, tolerance)
        if C:
            zrows = base.Z.data
            perms = [np.random.default_rng([seed, k, 10_000 + j]).permutation(n_nodes) for j in range(n_permutations)]
            permuted = GraphBatch.from_graphs([_permute(G, p) for p in perms])
            Zp = model.forward(permuted, check=False).Z.data
            dz = max(float(np.max(np.abs(Zp[j * C:(j + 1) * C] - zrows))) for j in range(n_permutations))
            rep.add(f"graph {k}: max |Z(PG) - Z(G)|", dz, tolerance)
    return rep


def _permute(G: GeometricGraph, perm: np.ndarray) -> GeometricGraph:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    edges = inv[G.edges]
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return GeometricGraph(G.X[perm], G.V[perm], G.H[perm], edges[order], G.edge_attr[order])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def gradcheck(
    backbone: str = "fast_egnn",
    n_nodes: int = 6,
    virtual_nodes: int = 2,
    layers: int = 2,
    hidden: int = 8,
    tolerance: float = 1e-4,
    seed: int = 0,
    negative_control: bool = False,
) -> CheckReport:
    """Tape gradients of MSE + weight * MMD against central differences."""
    C = virtual_nodes if backbone != "egnn" else 0
    cfg = ModelConfig(backbone=backbone, layers=layers, hidden=hidden, virtual_nodes=C, mmd_weight=0.03, mmd_sigma=1.5)
    model = Model(cfg, seed)
    G = random_graph(n_nodes, [seed, 1])
    target = G.X + 0.1 * G.V + 0.05 * np.random.default_rng([seed, 2]).normal(size=G.X.shape)
    batch = GraphBatch.from_graphs([G])
    lc = loss_config(cfg)

    def f(P):
        out = model.forward(batch, P, check=False)
        return total_loss(out.X, target, out.Z, lc, seed, C)

    if negative_control:
        with ad.corrupted_silu_gradient():
            report = ad.grad_check(f, model.params, tolerance)
    else:
        report = ad.grad_check(f, model.params, tolerance)
    rep = CheckReport("gradcheck")
    for e in report.entries:
        rep.add(f"{e.name} (abs {e.max_abs_err:.1e})", e.max_rel_err, tolerance, e.passed)
    return rep


# ---------------------------------------------------------------------------
# distributed oracle
# ---------------------------------------------------------------------------


def _dist_grads(model: Model, views, loss_cfg, seed: int, step: int, flip_device: int | None = None):
    D = len(views)
    reps = [Model(model.config, model.seed, model.params.copy()) for _ in range(D)]
    C = model.config.C

    def work(rank, comm):
        rep = reps[rank]
        rep.params.zero_grads()
        tape = ad.Tape()
        out = dist.dist_forward(rep, views[rank], comm, tape)
        L = dist.dist_loss(out, views[rank], loss_cfg, seed, step, C)
        tape.backward(L)
        if flip_device == rank:
            rep.params.set_flat_grads(-rep.params.flat_grads())
        dist.sync_param_grads(rep.params, comm)
        return rep.params.flat_grads(), out.X.data, L.item()

    return dist.run_workers(D, work)


def dist_oracle(
    devices=(2, 4),
    virtual_nodes=(1, 3),
    layers=(1, 2),
    sizes=(12, 24),
    hidden: int = 8,
    tolerance: float = 1e-8,
    independence_tolerance: float = 1e-9,
    seed: int = 0,
    negative_control: bool = False,
) -> CheckReport:
    """Summed device gradients vs one process on the union graph; p = 1 partition independence."""
    rep = CheckReport("dist-oracle")
    for D, C, L, N in itertools.product(devices, virtual_nodes, layers, sizes):
        cfg = ModelConfig(layers=L, hidden=hidden, virtual_nodes=C)
        model = Model(cfg, seed)
        pairs = [_pair(N, [seed, D, C, L, N, k]) for k in range(2)]
        shards = [dist.shard_sample(p, D, "random", [seed, k]) for k, p in enumerate(pairs)]
        views = dist.worker_views(shards, D)
        lc = loss_config(cfg)
        res = _dist_grads(model, views, lc, seed, 3, flip_device=1 if negative_control else None)
        union = GraphBatch.from_graphs([s.union_graph(p.graph) for s, p in zip(shards, pairs)])
        model.params.zero_grads()
        tape = ad.Tape()
        Lo, _ = dist.oracle_loss(model, union, views, lc, seed, 3, model.bind(tape))
        tape.backward(Lo)
        oracle = model.params.flat_grads()
        rel = float(np.max(np.abs(res[0][0] - oracle)) / max(np.max(np.abs(oracle)), 1e-300))
        rep.add(f"grad D={D} C={C} L={L} N={N}", rel, tolerance)

        # p = 1: no real edges, so partitioning loses nothing
        dropped = [type(p)(drop_longest_edges(p.graph, 1.0), p.target, p.delta_t) for p in pairs]
        single = model.forward(GraphBatch.from_graphs([p.graph for p in dropped]), check=False).X.data
        shards1 = [dist.shard_sample(p, D, "random", [seed, 7, k]) for k, p in enumerate(dropped)]
        views1 = dist.worker_views(shards1, D)
        res1 = _dist_grads(model, views1, lc, seed, 3)
        full = np.empty_like(single)
        for v, r in zip(views1, res1):
            full[v.rows] = r[1]
        if negative_control:
            full = -full
        rep.add(f"p=1 outputs D={D} C={C} L={L} N={N}", float(np.max(np.abs(full - single))), independence_tolerance)
    return rep


def _pair(n: int, seed):
    from .nbody import SamplePair

    g = random_graph(n, seed)
    target = g.X + 0.1 * g.V
    return SamplePair(g, target, 1)


# ---------------------------------------------------------------------------
# MMD invariance and analytic zero cases
# ---------------------------------------------------------------------------


def mmd(n_transforms: int = 100, tolerance: float = 1e-12, sigma: float = 1.5, seed: int = 0,
        negative_control: bool = False) -> CheckReport:
    """MMD(OZ + t, OX + t) = MMD(Z, X) and the exact-zero identities.

    The negative control transforms Z with the inverse rotation instead.
    """
    rep = CheckReport("mmd")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j in range(n_transforms):
        Z = rng.normal(size=(3, 3))
        X = rng.normal(size=(3, 3))
        g = random_rotation(rng, allow_reflection=True)
        gz = E3Transform(g.O.T, g.t) if negative_control else g
        a = mmd_loss(Tensor(Z), X, sigma).item()
        b = mmd_loss(Tensor(gz.points(Z)), g.points(X), sigma).item()
        worst = max(worst, abs(a - b))
    rep.add(f"max |MMD(gZ, gX) - MMD(Z, X)| over {n_transforms}", worst, tolerance)

    z = rng.normal(size=(1, 3))
    rep.add("C=1, X_ref={z}: MMD", abs(mmd_loss(Tensor(z), z, sigma).item()), tolerance)
    rep.add("C=2, z1=z2=x1: MMD", abs(mmd_loss(Tensor(np.vstack([z, z])), z, sigma).item()), tolerance)
    X = rng.normal(size=(7, 3))
    rep.add("mse(X, X)", abs(mse_loss(Tensor(X), X).item()), tolerance)
    rep.add("mse(X + 1, X) - 1", abs(mse_loss(Tensor(X + 1.0), X).item() - 1.0), tolerance)
    rep.add("k(x, x) - 1", abs(rbf_kernel(X[0], X[0], sigma) - 1.0), tolerance)
    Y = X + rng.normal(size=X.shape)
    Zs = rng.normal(size=(2, 3))
    off = total_loss(Tensor(Y), X, Tensor(Zs), LossConfig(mmd_weight=0.0), seed, 2).item()
    rep.add("weight 0: total - mse", abs(off - mse_loss(Tensor(Y), X).item()), tolerance)
    return rep


# ---------------------------------------------------------------------------
# C = 0 path against the standalone EGNN
# ---------------------------------------------------------------------------


def c0_bitwise(n_graphs: int = 10, n_nodes: int = 16, layers: int = 4, hidden: int = 16, seed: int = 0) -> CheckReport:
    """Count of graphs where the C = 0 path differs in any bit from plain EGNN."""
    rep = CheckReport("c0-bitwise")
    model = Model(ModelConfig(backbone="egnn", layers=layers, hidden=hidden, virtual_nodes=0), seed)
    for k in range(n_graphs):
        batch = GraphBatch.from_graphs([random_graph(n_nodes, [seed, 50, k], drop_rate=0.3 * (k % 3))])
        a = model.forward(batch)
        X, H = plain_egnn_forward(model, batch)
        same = a.X.data.tobytes() == X.data.tobytes() and a.H.data.tobytes() == H.data.tobytes()
        rep.add(f"graph {k}: bits differ", 0.0 if same else 1.0, 0.5)
    return rep


def run_suite(name: str, negative_control: bool = False, tolerance: float | None = None,
              backbone: str = "fast_egnn") -> CheckReport:
    kw = {"negative_control": negative_control}
    if tolerance is not None:
        kw["tolerance"] = tolerance
    if name == "equivariance":
        return equivariance(backbone=backbone, **kw)
    if name == "gradcheck":
        return gradcheck(backbone=backbone, **kw)
    if name == "dist-oracle":
        return dist_oracle(**kw)
    if name == "mmd":
        return mmd(**kw)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
