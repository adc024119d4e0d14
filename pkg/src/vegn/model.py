"""FastEGNN layer stack and its RF / SchNet variants.

A forward pass runs on a :class:`~vegn.geometry.GraphBatch`.  Every graph in
the batch gets its own ordered set of ``C`` virtual nodes, stored as rows
``g*C + c`` of ``Z`` (coordinates) and ``S`` (features).  Real-virtual pair
quantities live on rows ``i*C + c``.

Sums that must span the whole graph (centre of mass, virtual aggregation) go
through a ``reducer`` hook.  On one device it is the identity; the distributed
runtime passes an all-reduce, which is the only difference between the two
code paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Bound, ParamStore, Tensor, glorot
from .geometry import GraphBatch

BACKBONES = ("egnn", "fast_egnn", "fast_rf", "fast_schnet")
VIRTUAL_MESSAGES = ("pair", "global")

# scalar heads that multiply a displacement or the velocity start near zero so
# that stacked coordinate updates do not blow up at initialisation
COORD_GAIN = 1e-3

Reducer = Callable[[Tensor], Tensor]


def _identity(t: Tensor) -> Tensor:
    return t


@dataclass
class ModelConfig:
    backbone: str = "fast_egnn"
    layers: int = 4
    hidden: int = 64
    virtual_nodes: int = 3
    drop_rate: float = 0.0
    mmd_weight: float = 0.03
    mmd_sigma: float = 1.5
    mmd_samples: int = 3
    node_features: int = 2
    edge_features: int = 1
    virtual_message: str = "pair"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.virtual_nodes < 0:
            raise ValueError("virtual_nodes must be >= 0")
        if self.backbone == "egnn" and self.virtual_nodes != 0:
            raise ValueError("backbone 'egnn' is the plain model and needs virtual_nodes = 0")
        if self.backbone == "fast_rf" and self.virtual_nodes == 0:
            raise ValueError("fast_rf needs at least one virtual node")
        if self.layers < 0 or self.hidden < 1:
            raise ValueError("layers must be >= 0 and hidden >= 1")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError("drop_rate must be in [0, 1]")
        if self.mmd_weight < 0 or self.mmd_sigma <= 0 or self.mmd_samples < 1:
            raise ValueError("need mmd_weight >= 0, mmd_sigma > 0, mmd_samples >= 1")
        if self.virtual_message not in VIRTUAL_MESSAGES:
            raise ValueError(f"virtual_message must be one of {VIRTUAL_MESSAGES}")

    @property
    def C(self) -> int:
        return self.virtual_nodes

    @property
    def uses_features(self) -> bool:
        return self.backbone != "fast_rf"

    @property
    def feature_width(self) -> int:
        return self.hidden if self.uses_features else 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    X: Tensor
    H: Tensor
    Z: Tensor | None
    S: Tensor | None
    layer_states: list = field(default_factory=list)


class Model:
    """Parameters plus the forward pass for one backbone."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: ParamStore | None = None):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        self._build(rng)
        if params is not None:
            self.load_params(params)

    # ------------------------------------------------------------------ setup

    def _mlp(self, name: str, widths, rng, out_gain: float = 1.0) -> MLP:
        return MLP(self.params, name, widths, rng, out_gain)

    def _build(self, rng) -> None:
        cfg = self.config
        F = cfg.feature_width
        M = cfg.hidden
        C = cfg.C
        Ed = cfg.edge_features if cfg.uses_features else 0
        self.embed = self._mlp("embed", [cfg.node_features, F], rng) if F else None
        self.layers: list[dict[str, MLP]] = []
        for l in range(cfg.layers):
            p = f"layer{l}"
            mods: dict[str, MLP] = {}
            if cfg.backbone == "fast_schnet":
                mods["coord"] = self._mlp(f"{p}.coord", [2 * F + Ed, M, 1], rng, COORD_GAIN)
                mods["filter"] = self._mlp(f"{p}.filter", [1, M, F], rng)
                mods["lin_in"] = self._mlp(f"{p}.lin_in", [F, F], rng)
            else:
                mods["phi1"] = self._mlp(f"{p}.phi1", [2 * F + 1 + Ed, M, M], rng)
                mods["phix_r"] = self._mlp(f"{p}.phix_r", [M, M, 1], rng, COORD_GAIN)
            mods["phi_v"] = self._mlp(f"{p}.phi_v", [F, M, 1], rng, COORD_GAIN)
            if F:
                agg_width = F if cfg.backbone == "fast_schnet" else M
                mods["phi_h"] = self._mlp(f"{p}.phi_h", [F + agg_width + (M if C else 0), M, F], rng)
            if C:
                if cfg.virtual_message == "pair":
                    n_in = 2 * F + 1 + C
                else:
                    n_in = F + C * F + C + C * C
                mods["phi2"] = self._mlp(f"{p}.phi2", [n_in, M, M], rng)
                mods["phix_v"] = self._mlp(f"{p}.phix_v", [M, M, 1], rng, COORD_GAIN)
                mods["phiZ"] = self._mlp(f"{p}.phiZ", [M, M, 1], rng, COORD_GAIN)
                if F:
                    mods["phiS"] = self._mlp(f"{p}.phiS", [F + M, M, F], rng)
            self.layers.append(mods)
        if C and F:
            self.params.add("virtual.s0", glorot(rng, F, C))

    def load_params(self, store: ParamStore) -> None:
        if store.manifest() != self.params.manifest():
            raise ValueError("checkpoint parameters do not match the model configuration")
        for name in self.params.names():
            self.params.set_value(name, store.value(name))

    def bind(self, tape: ad.Tape | None = None) -> Bound:
        return ad.bind(self.params, tape)

    # ----------------------------------------------------------------- stages

    def embed_features(self, P: Bound, batch: GraphBatch) -> Tensor:
        if self.embed is None:
            return Tensor(np.zeros((batch.n_nodes, 0)))
        return self.embed(P, Tensor(batch.H))

    def center(self, batch: GraphBatch, X: Tensor, reducer: Reducer) -> tuple[Tensor, np.ndarray]:
        """Per-graph centre of mass and 1/N_g (N_g after reduction)."""
        counts = Tensor(batch.graph_seg.counts.reshape(-1, 1))
        num = reducer(ad.concat_cols([ad.scatter(X, batch.graph_seg), counts]))
        inv_n = 1.0 / num.data[:, 3:4]
        return ad.scale_rows(ad.slice_cols(num, 0, 3), Tensor(inv_n)), inv_n

    def real_real_messages(self, l: int, P: Bound, batch: GraphBatch, X: Tensor, H: Tensor):
        """m_ij = phi1(h_i, h_j, |x_i - x_j|^2, e_ij) and the offsets x_i - x_j."""
        mods = self.layers[l]
        d = ad.sub(ad.gather(X, batch.rows), ad.gather(X, batch.cols))
        e = Tensor(batch.edge_attr if self.config.uses_features else np.zeros((batch.n_edges, 0)))
        if self.config.backbone == "fast_schnet":
            return None, d
        r = ad.row_sqnorm(d)
        m = mods["phi1"].apply_parts(P, [(H, batch.rows), (H, batch.cols), r, e])
        return m, d

    def virtual_global_message(self, batch: GraphBatch, Z: Tensor, xbar: Tensor) -> Tensor:
        """Row g*C + c holds column c of (Z_g - xbar_g)^T (Z_g - xbar_g)."""
        vi = batch.virtual_index(self.config.C)
        zc = ad.sub(Z, ad.gather(xbar, vi["virt_graph"]))
        cols = [ad.row_dot(zc, ad.gather(zc, peer)) for peer in vi["virt_peer"]]
        return cols[0] if len(cols) == 1 else ad.concat_cols(cols)

    def real_virtual_messages(self, l, P, batch, X, H, Z, S, mv):
        """Per-pair messages m_ic and offsets x_i - z_c."""
        cfg = self.config
        C = cfg.C
        vi = batch.virtual_index(C)
        dz = ad.sub(ad.gather(X, vi["pair_node"]), ad.gather(Z, vi["pair_virt"]))
        rz = ad.row_sqnorm(dz)
        phi2 = self.layers[l]["phi2"]
        if cfg.virtual_message == "pair":
            parts = [(H, vi["pair_node"])]
            if S is not None:
                parts.append((S, vi["pair_virt"]))
            parts += [rz, (mv, vi["pair_virt"])]
            mic = phi2.apply_parts(P, parts)
        else:
            G, N = batch.n_graphs, batch.n_nodes
            node_graph = ad.Segments(batch.node_graph, G)
            parts = [H]
            if S is not None:
                parts.append((ad.reshape(S, (G, C * S.shape[1])), node_graph))
            parts += [ad.reshape(rz, (N, C)), (ad.reshape(mv, (G, C * C)), node_graph)]
            mi = phi2.apply_parts(P, parts)
            mic = ad.gather(mi, vi["pair_node"])
        return mic, dz

    def virtual_displacement(self, l, P, batch, mic, dz) -> Tensor:
        """(1/C) sum_c (x_i - z_c) phi_x^v(m_ic) for every real node."""
        vi = batch.virtual_index(self.config.C)
        w = self.layers[l]["phix_v"](P, mic)
        return ad.scale(ad.scatter(ad.scale_rows(dz, w), vi["pair_node"]), 1.0 / self.config.C)

    def real_aggregate(self, l, P, batch, X, H, V0, m, d, mic, dz):
        cfg = self.config
        mods = self.layers[l]
        inv_deg = Tensor(batch.inv_deg)
        if cfg.backbone == "fast_schnet":
            e = Tensor(batch.edge_attr)
            coef = mods["coord"].apply_parts(P, [(H, batch.rows), (H, batch.cols), e])
            shift = ad.scale_rows(ad.scatter(ad.scale_rows(d, coef), batch.rows), inv_deg) if batch.n_edges else None
            filt = mods["filter"](P, ad.row_sqnorm(d))
            msg = ad.mul(filt, ad.gather(mods["lin_in"](P, H), batch.cols))
            agg_m = ad.scale_rows(ad.scatter(msg, batch.rows), inv_deg)
        else:
            if batch.n_edges:
                w = mods["phix_r"](P, m)
                shift = ad.scale_rows(ad.scatter(ad.scale_rows(d, w), batch.rows), inv_deg)
                agg_m = ad.scale_rows(ad.scatter(m, batch.rows), inv_deg)
            else:
                shift = None
                agg_m = Tensor(np.zeros((batch.n_nodes, cfg.hidden)))
        X_new = X if shift is None else ad.add(X, shift)
        if cfg.C:
            X_new = ad.add(X_new, self.virtual_displacement(l, P, batch, mic, dz))
        X_new = ad.add(X_new, ad.scale_rows(Tensor(V0), mods["phi_v"](P, H)))
        if "phi_h" not in mods:
            return X_new, H
        parts = [H, agg_m]
        if cfg.C:
            vi = batch.virtual_index(cfg.C)
            parts.append(ad.scale(ad.scatter(mic, vi["pair_node"]), 1.0 / cfg.C))
        H_new = ad.add(H, mods["phi_h"].apply_parts(P, parts))
        return X_new, H_new

    def virtual_aggregate(self, l, P, batch, Z, S, mic, dz, inv_n, reducer: Reducer):
        """z_c += (1/N) sum_i (z_c - x_i) phi_Z(m_ic); s_c += phi_S(s_c, (1/N) sum_i m_ic)."""
        mods = self.layers[l]
        vi = batch.virtual_index(self.config.C)
        w = mods["phiZ"](P, mic)
        zsum = ad.scatter(ad.scale_rows(ad.scale(dz, -1.0), w), vi["pair_virt"])
        if S is not None:
            local = ad.concat_cols([zsum, ad.scatter(mic, vi["pair_virt"])])
        else:
            local = zsum
        total = reducer(local)
        inv_v = Tensor(inv_n[vi["virt_graph"].idx])
        Z_new = ad.add(Z, ad.scale_rows(ad.slice_cols(total, 0, 3), inv_v))
        if S is None:
            return Z_new, None
        mean_m = ad.scale_rows(ad.slice_cols(total, 3, total.shape[1]), inv_v)
        S_new = ad.add(S, mods["phiS"].apply_parts(P, [S, mean_m]))
        return Z_new, S_new

    # ---------------------------------------------------------------- forward

    def forward(
        self,
        batch: GraphBatch,
        P: Bound | None = None,
        reducer: Reducer = _identity,
        keep_states: bool = False,
        check: bool = True,
    ) -> ForwardResult:
        cfg = self.config
        P = P if P is not None else self.bind()
        C = cfg.C
        X = Tensor(batch.X)
        V0 = batch.V
        H = self.embed_features(P, batch)
        Z = S = None
        states = []
        for l in range(cfg.layers):
            m, d = self.real_real_messages(l, P, batch, X, H)
            if check and m is not None:
                _finite(m, l, "real-real message")
            mic = dz = inv_n = None
            if C:
                xbar, inv_n = self.center(batch, X, reducer)
                vi = batch.virtual_index(C)
                if Z is None:
                    Z = ad.gather(xbar, vi["virt_graph"])
                    if "virtual.s0" in P:
                        S = ad.gather(ad.transpose(P["virtual.s0"]), vi["virt_channel"])
                mv = self.virtual_global_message(batch, Z, xbar)
                mic, dz = self.real_virtual_messages(l, P, batch, X, H, Z, S, mv)
                if check:
                    _finite(mv, l, "virtual global message")
                    _finite(mic, l, "real-virtual message")
            X_new, H_new = self.real_aggregate(l, P, batch, X, H, V0, m, d, mic, dz)
            if check:
                _finite(X_new, l, "real aggregation")
                _finite(H_new, l, "real aggregation")
            if C:
                Z, S = self.virtual_aggregate(l, P, batch, Z, S, mic, dz, inv_n, reducer)
                if check:
                    _finite(Z, l, "virtual aggregation")
                    if S is not None:
                        _finite(S, l, "virtual aggregation")
            X, H = X_new, H_new
            if keep_states:
                states.append((X, H, Z, S))
        if C and Z is None:
            # L = 0: virtual nodes still start at the centre of mass
            xbar, _ = self.center(batch, X, reducer)
            vi = batch.virtual_index(C)
            Z = ad.gather(xbar, vi["virt_graph"])
            if "virtual.s0" in P:
                S = ad.gather(ad.transpose(P["virtual.s0"]), vi["virt_channel"])
        return ForwardResult(X, H, Z, S, states)

    def predict(self, batch: GraphBatch) -> np.ndarray:
        return self.forward(batch).X.data


def _finite(t: Tensor, layer: int, stage: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise ad.NonFiniteError(f"non-finite values at layer {layer}, stage '{stage}'")


def init_virtual(X: np.ndarray, C: int, learned_S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Virtual coordinates (3 x C, every column the centre of mass) and features."""
    if C < 1:
        raise ValueError("init_virtual needs C >= 1; skip the virtual path for C = 0")
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 1:
        raise ValueError("need at least one real node")
    com = X.mean(axis=0)
    learned_S = np.asarray(learned_S, dtype=np.float64)
    if learned_S.shape[1] != C:
        raise ValueError(f"learned_S has {learned_S.shape[1]} channels, expected {C}")
    return np.repeat(com[:, None], C, axis=1), learned_S.copy()


def virtual_global_message(Z: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """(Z - xbar 1^T)^T (Z - xbar 1^T) for Z given as 3 x C."""
    Zc = np.asarray(Z, dtype=np.float64) - np.asarray(xbar, dtype=np.float64).reshape(3, 1)
    return Zc.T @ Zc


def relative_gram_from_invariants(Y: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Rebuild (Z - x_i)^T (Z - x_i) from |z_c - x_i|^2 (Y) and the centred Gram D.

    A_mn = D_mn + ((Y_m - D_mm) + (Y_n - D_nn)) / 2.
    """
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    diag = np.diag(D)
    u = Y - diag
    return D + 0.5 * (u[:, None] + u[None, :])


def plain_egnn_forward(model: Model, batch: GraphBatch, P: Bound | None = None) -> tuple[Tensor, Tensor]:
    """EGNN without any virtual machinery (reference path for C = 0)."""
    cfg = model.config
    if cfg.C != 0 or cfg.backbone not in ("egnn", "fast_egnn"):
        raise ValueError("plain_egnn_forward needs an EGNN-style model with C = 0")
    P = P if P is not None else model.bind()
    X = Tensor(batch.X)
    H = model.embed(P, Tensor(batch.H))
    e = Tensor(batch.edge_attr)
    inv_deg = Tensor(batch.inv_deg)
    for mods in model.layers:
        d = ad.sub(ad.gather(X, batch.rows), ad.gather(X, batch.cols))
        m = mods["phi1"].apply_parts(P, [(H, batch.rows), (H, batch.cols), ad.row_sqnorm(d), e])
        if batch.n_edges:
            w = mods["phix_r"](P, m)
            X_new = ad.add(X, ad.scale_rows(ad.scatter(ad.scale_rows(d, w), batch.rows), inv_deg))
            agg = ad.scale_rows(ad.scatter(m, batch.rows), inv_deg)
        else:
            X_new = X
            agg = Tensor(np.zeros((batch.n_nodes, cfg.hidden)))
        X_new = ad.add(X_new, ad.scale_rows(Tensor(batch.V), mods["phi_v"](P, H)))
        H = ad.add(H, mods["phi_h"].apply_parts(P, [H, agg]))
        X = X_new
    return X, H
