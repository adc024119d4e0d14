"""Position MSE, the virtual/real RBF MMD term and the combined objective.

The MMD term omits the real-real kernel sum, which does not depend on the
virtual coordinates.  Its value is therefore not a true squared MMD and can be
negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor


@dataclass
class LossConfig:
    mmd_weight: float = 0.03
    mmd_sigma: float = 1.5
    mmd_samples: int = 3

    def __post_init__(self):
        if self.mmd_weight < 0:
            raise ValueError("mmd_weight must be >= 0")
        if self.mmd_sigma <= 0:
            raise ValueError("mmd_sigma must be > 0")
        if self.mmd_samples < 1:
            raise ValueError("mmd_samples must be >= 1")


def rbf_kernel(x, y, sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return math.exp(-float(d @ d) / (2.0 * sigma * sigma))


def mse_loss(X_pred: Tensor, X_gt) -> Tensor:
    """Mean over all 3N entries of the squared error."""
    gt = X_gt if isinstance(X_gt, Tensor) else Tensor(np.asarray(X_gt, dtype=np.float64))
    if X_pred.shape != gt.shape:
        raise ad.ShapeError(f"mse_loss: shape mismatch {X_pred.shape} vs {gt.shape}")
    return ad.divide(ad.sum_all(ad.row_sqnorm(ad.sub(X_pred, gt))), 3.0 * X_pred.shape[0])


def _kernel_sum(a: Tensor, b: Tensor, ia: np.ndarray, ib: np.ndarray, seg_to: Segments, sigma: float) -> Tensor:
    diff = ad.sub(ad.gather(a, Segments(ia, a.shape[0])), ad.gather(b, Segments(ib, b.shape[0])))
    k = ad.exp(ad.scale(ad.row_sqnorm(diff), -1.0 / (2.0 * sigma * sigma)))
    return ad.scatter(k, seg_to)


def mmd_loss(Z: Tensor, X_ref, sigma: float) -> Tensor:
    """(1/C^2) sum k(z, z') - (1/(N_s C)) sum k(x, z) for one graph.

    ``Z`` is C x 3 (rows are virtual nodes), ``X_ref`` is N_s x 3.
    """
    ref = X_ref if isinstance(X_ref, Tensor) else Tensor(np.asarray(X_ref, dtype=np.float64))
    C, Ns = Z.shape[0], ref.shape[0]
    if C < 1 or Ns < 1:
        raise ValueError("mmd_loss needs C >= 1 and N_s >= 1")
    return batched_mmd(Z, ref, np.zeros(1, dtype=np.int64), np.zeros(Ns, dtype=np.int64), C, sigma)


def batched_mmd(Z: Tensor, X_ref: Tensor, graphs: np.ndarray, ref_graph: np.ndarray, C: int, sigma: float) -> Tensor:
    """Per-graph MMD values (len(graphs) x 1).

    ``Z`` rows are ``g*C + c`` for every g in ``graphs``' index space; only
    graphs listed in ``graphs`` are evaluated, in that order.  ``X_ref`` rows
    belong to the graphs named by ``ref_graph`` (values index into ``graphs``).
    """
    n_eval = len(graphs)
    cc = np.arange(C)
    # virtual-virtual pairs
    g_vv = np.repeat(np.arange(n_eval), C * C)
    zi = (np.repeat(graphs, C * C) * C + np.tile(np.repeat(cc, C), n_eval))
    zj = (np.repeat(graphs, C * C) * C + np.tile(np.tile(cc, C), n_eval))
    vv = _kernel_sum(Z, Z, zi, zj, Segments(g_vv, n_eval), sigma)
    # real-virtual pairs
    ref_graph = np.asarray(ref_graph, dtype=np.int64)
    xi = np.repeat(np.arange(X_ref.shape[0]), C)
    g_xv = np.repeat(ref_graph, C)
    zc = graphs[g_xv] * C + np.tile(cc, X_ref.shape[0])
    xv = _kernel_sum(X_ref, Z, xi, zc, Segments(g_xv, n_eval), sigma)
    n_ref = np.bincount(ref_graph, minlength=n_eval).astype(np.float64)
    first = ad.scale(vv, 1.0 / (C * C))
    second = ad.scale_rows(xv, Tensor((1.0 / (np.maximum(n_ref, 1.0) * C)).reshape(-1, 1)))
    return ad.sub(first, second)


def sample_reference_rows(node_graph: np.ndarray, n_graphs: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Pick up to ``n_samples`` rows per graph, uniformly without replacement."""
    picks = []
    for g in range(n_graphs):
        rows = np.flatnonzero(node_graph == g)
        if rows.size == 0:
            continue
        k = min(n_samples, rows.size)
        picks.append(np.sort(rng.choice(rows, size=k, replace=False)))
    return np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)


def sampler(seed: int, step: int, device: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, step, device])


def objective(
    X_pred: Tensor,
    X_gt: np.ndarray,
    Z: Tensor | None,
    node_graph: np.ndarray,
    n_graphs: int,
    n_nodes_global: np.ndarray,
    config: LossConfig,
    rng: np.random.Generator,
    C: int,
    mmd_scale: float = 1.0,
) -> Tensor:
    """Mean over graphs of SSE_g / (3 N_g) + mmd_scale * weight * MMD_g.

    ``n_nodes_global`` holds N_g for every graph; on a device holding only
    part of each graph the SSE covers local rows while N_g stays global, so
    per-device values add up to the global objective.
    """
    gt = Tensor(np.asarray(X_gt, dtype=np.float64))
    if X_pred.shape != gt.shape:
        raise ad.ShapeError(f"objective: shape mismatch {X_pred.shape} vs {gt.shape}")
    w_node = 1.0 / (3.0 * n_nodes_global[node_graph] * n_graphs)
    sq = ad.row_sqnorm(ad.sub(X_pred, gt))
    total = ad.sum_all(ad.scale_rows(sq, Tensor(w_node.reshape(-1, 1))))
    if config.mmd_weight > 0 and C > 0 and Z is not None:
        rows = sample_reference_rows(node_graph, n_graphs, config.mmd_samples, rng)
        if rows.size:
            ref_graph_abs = node_graph[rows]
            graphs = np.unique(ref_graph_abs)
            ref_graph = np.searchsorted(graphs, ref_graph_abs)
            mmd = batched_mmd(Z, Tensor(gt.data[rows]), graphs, ref_graph, C, config.mmd_sigma)
            weight = mmd_scale * config.mmd_weight / n_graphs
            total = ad.add(total, ad.scale(ad.sum_all(mmd), weight))
    return total


def total_loss(X_pred: Tensor, X_gt, Z: Tensor | None, config: LossConfig, seed: int, C: int) -> Tensor:
    """MSE + weight * MMD for a single graph, MMD reference rows from ``X_gt``."""
    X_gt = np.asarray(X_gt, dtype=np.float64)
    n = X_gt.shape[0]
    node_graph = np.zeros(n, dtype=np.int64)
    return objective(X_pred, X_gt, Z, node_graph, 1, np.array([float(n)]), config,
                     np.random.default_rng(seed), C)
