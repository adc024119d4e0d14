"""Geometric graphs, E(3) transforms, radius graphs and edge dropping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Segments


@dataclass
class GeometricGraph:
    """One sample: positions, velocities, node features and directed edges.

    ``edges`` is an (E, 2) integer array of (i, j) pairs where j is a
    neighbour of i; messages for the pair are aggregated at i.
    """

    X: np.ndarray
    V: np.ndarray
    H: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_attr: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.H.ndim == 1:
            self.H = self.H.reshape(len(self.X), -1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edge_attr is None:
            self.edge_attr = np.zeros((len(self.edges), 0))
        self.edge_attr = np.asarray(self.edge_attr, dtype=np.float64)
        if self.edge_attr.ndim == 1:
            self.edge_attr = self.edge_attr.reshape(-1, 1)
        if self.edge_attr.shape[0] != len(self.edges):
            raise ValueError("edge_attr must have one row per edge")
        self.validate()

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def validate(self) -> None:
        n = self.X.shape[0]
        if self.X.shape != (n, 3) or self.V.shape != (n, 3):
            raise ValueError(f"X and V must be N x 3, got {self.X.shape} and {self.V.shape}")
        if self.H.shape[0] != n:
            raise ValueError(f"H has {self.H.shape[0]} rows for {n} nodes")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.V))):
            raise ValueError("non-finite positions or velocities")
        if self.n_edges:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loops are not allowed")

    def with_edges(self, edges: np.ndarray, edge_attr: np.ndarray | None = None) -> "GeometricGraph":
        return replace(self, edges=edges, edge_attr=edge_attr)

    def subgraph(self, nodes: np.ndarray) -> "GeometricGraph":
        """Induced subgraph on ``nodes`` (kept in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        e = self.edges
        keep = (remap[e[:, 0]] >= 0) & (remap[e[:, 1]] >= 0) if len(e) else np.zeros(0, bool)
        return GeometricGraph(
            self.X[nodes], self.V[nodes], self.H[nodes],
            remap[e[keep]], self.edge_attr[keep],
        )


@dataclass(frozen=True)
class E3Transform:
    """x -> x O + t acting on row vectors."""

    O: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        O = np.asarray(self.O, dtype=np.float64)
        if O.shape != (3, 3):
            raise ValueError("O must be 3 x 3")
        if np.max(np.abs(O.T @ O - np.eye(3))) >= 1e-12:
            raise ValueError("O is not orthogonal")
        object.__setattr__(self, "O", O)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "E3Transform":
        return cls(np.eye(3), np.zeros(3))

    def points(self, X: np.ndarray) -> np.ndarray:
        return X @ self.O + self.t

    def vectors(self, V: np.ndarray) -> np.ndarray:
        return V @ self.O

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.O))


def center_of_mass(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("center_of_mass needs at least one point")
    return X.mean(axis=0)


def _pair_dist(X: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    d = X[i] - X[j]
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def radius_graph(X: np.ndarray, r: float) -> np.ndarray:
    """Directed edges (i, j), i != j, with 0 < |x_i - x_j| <= r, sorted by (i, j)."""
    if not r > 0:
        raise ValueError("radius must be positive")
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite coordinates")
    if len(X) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    if math.isinf(r):
        i, j = np.nonzero(~np.eye(len(X), dtype=bool))
        pairs = np.stack([i, j], axis=1)
        d = _pair_dist(X, i, j)
        return pairs[d > 0]
    # candidate pairs from a KD-tree with a slack margin, then the exact rule
    tree = cKDTree(X)
    cand = tree.query_pairs(r * (1.0 + 1e-9) + 1e-300, output_type="ndarray")
    if len(cand) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = _pair_dist(X, cand[:, 0], cand[:, 1])
    cand = cand[(d > 0) & (d <= r)]
    both = np.concatenate([cand, cand[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order].astype(np.int64)


def fully_connected(n: int) -> np.ndarray:
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return np.stack([i, j], axis=1).astype(np.int64)


def drop_longest_edges(graph: GeometricGraph, p: float) -> GeometricGraph:
    """Remove the ceil(p * U) longest undirected pairs (U = number of pairs).

    Both directions of a pair are dropped together; an edge without its
    reverse counts as its own pair.  Pairs are ranked by (length, lo, hi).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop rate must be in [0, 1], got {p}")
    e = graph.edges
    if len(e) == 0 or p == 0.0:
        return graph.with_edges(e.copy(), graph.edge_attr.copy())
    lo = np.minimum(e[:, 0], e[:, 1])
    hi = np.maximum(e[:, 0], e[:, 1])
    keys = lo * graph.n_nodes + hi
    uniq, inverse = np.unique(keys, return_inverse=True)
    ulo, uhi = uniq // graph.n_nodes, uniq % graph.n_nodes
    length = _pair_dist(graph.X, ulo, uhi)
    order = np.lexsort((uhi, ulo, length))
    n_drop = math.ceil(p * len(uniq) - 1e-12)
    kept = np.ones(len(uniq), dtype=bool)
    if n_drop:
        kept[order[len(uniq) - n_drop:]] = False
    mask = kept[inverse.reshape(-1)]
    return graph.with_edges(e[mask].copy(), graph.edge_attr[mask].copy())


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    # polish to orthogonality at machine precision
    u, _, vt = np.linalg.svd(R)
    return u @ vt


def random_rotation(seed, allow_reflection: bool = False, t_max: float = 10.0) -> E3Transform:
    """Uniform rotation from a normalised Gaussian quaternion, plus a uniform shift."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    O = _quat_to_matrix(rng.normal(size=4))
    flip = rng.random() < 0.5
    if allow_reflection and flip:
        O = O @ np.diag([-1.0, 1.0, 1.0])
    t = rng.uniform(-t_max, t_max, size=3)
    return E3Transform(O, t)


def apply_transform(graph: GeometricGraph, g: E3Transform) -> GeometricGraph:
    return replace(graph, X=g.points(graph.X), V=g.vectors(graph.V))


def pairwise_distances(X: np.ndarray) -> np.ndarray:
    d = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(d * d, axis=-1))


@dataclass
class GraphBatch:
    """Disjoint union of graphs with the index structures the model needs."""

    X: np.ndarray
    V: np.ndarray
    H: np.ndarray
    edges: np.ndarray
    edge_attr: np.ndarray
    node_graph: np.ndarray
    n_graphs: int

    def __post_init__(self):
        n = self.X.shape[0]
        self.rows = Segments(self.edges[:, 0], n)
        self.cols = Segments(self.edges[:, 1], n)
        self.graph_seg = Segments(self.node_graph, self.n_graphs)
        deg = self.rows.counts
        self.inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0).reshape(-1, 1)
        self._virtual: dict[int, dict] = {}

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[GeometricGraph]) -> "GraphBatch":
        offs = np.cumsum([0] + [g.n_nodes for g in graphs])
        edges = [g.edges + offs[k] for k, g in enumerate(graphs)]
        node_graph = np.concatenate([np.full(g.n_nodes, k, dtype=np.int64) for k, g in enumerate(graphs)])
        return cls(
            np.concatenate([g.X for g in graphs]),
            np.concatenate([g.V for g in graphs]),
            np.concatenate([g.H for g in graphs]),
            np.concatenate(edges).astype(np.int64) if edges else np.zeros((0, 2), np.int64),
            np.concatenate([g.edge_attr for g in graphs]),
            node_graph,
            len(graphs),
        )

    def virtual_index(self, C: int) -> dict:
        """Index structures for C virtual channels per graph.

        Virtual row ``g*C + c``; real-virtual pair row ``i*C + c``.
        """
        cached = self._virtual.get(C)
        if cached is not None:
            return cached
        G, N = self.n_graphs, self.n_nodes
        pair_node = np.repeat(np.arange(N), C)
        pair_virt = self.node_graph[pair_node] * C + np.tile(np.arange(C), N)
        virt_graph = np.repeat(np.arange(G), C)
        base = virt_graph * C
        out = {
            "pair_node": Segments(pair_node, N),
            "pair_virt": Segments(pair_virt, G * C),
            "virt_graph": Segments(virt_graph, G),
            "virt_channel": Segments(np.tile(np.arange(C), G), C),
            "virt_peer": [Segments(base + c, G * C) for c in range(C)],
        }
        self._virtual[C] = out
        return out
