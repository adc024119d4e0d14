"""AdamW, the mini-batch training loop with early stopping, and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .geometry import GeometricGraph, GraphBatch, apply_transform, drop_longest_edges, random_rotation
from .losses import LossConfig, objective, sampler
from .model import Model, ModelConfig
from .nbody import SamplePair

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-12
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(params: ParamStore, state: AdamState, grads: dict[str, np.ndarray] | None = None) -> bool:
    """One bias-corrected Adam step with decoupled weight decay.

    Gradients default to the ones stored in ``params``.  A non-finite gradient
    anywhere skips the whole step (moments and step count untouched) and
    returns False.
    """
    names = params.names()
    gs = {n: (grads[n] if grads is not None else params.grad(n)) for n in names}
    if not all(np.all(np.isfinite(g)) for g in gs.values()):
        state.skipped += 1
        return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for n in names:
        g = gs[n]
        m = state.m.setdefault(n, np.zeros_like(g))
        v = state.v.setdefault(n, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta = params.value(n)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * theta
        theta -= state.lr * update
    return True


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def loss_config(cfg: ModelConfig) -> LossConfig:
    return LossConfig(cfg.mmd_weight, cfg.mmd_sigma, cfg.mmd_samples)


def sparsify(pairs: Sequence[SamplePair], drop_rate: float) -> list[SamplePair]:
    if drop_rate == 0.0:
        return list(pairs)
    return [SamplePair(drop_longest_edges(p.graph, drop_rate), p.target, p.delta_t) for p in pairs]


def make_batch(pairs: Sequence[SamplePair]) -> tuple[GraphBatch, np.ndarray]:
    batch = GraphBatch.from_graphs([p.graph for p in pairs])
    return batch, np.concatenate([p.target for p in pairs])


# ---------------------------------------------------------------------------
# engines: one optimizer step on a mini-batch
# ---------------------------------------------------------------------------


class Engine(Protocol):
    model: Model

    def step(self, pairs: Sequence[SamplePair], step: int) -> float: ...

    def predict(self, pairs: Sequence[SamplePair]) -> np.ndarray: ...

    def metrics(self) -> dict: ...


class LocalEngine:
    """Single-process forward/backward plus Adam."""

    def __init__(self, model: Model, adam: AdamState, seed: int = 0):
        self.model = model
        self.adam = adam
        self.seed = seed
        self.loss_cfg = loss_config(model.config)

    def loss(self, pairs: Sequence[SamplePair], step: int, P) -> ad.Tensor:
        batch, target = make_batch(pairs)
        out = self.model.forward(batch, P)
        return objective(
            out.X, target, out.Z, batch.node_graph, batch.n_graphs, batch.graph_seg.counts,
            self.loss_cfg, sampler(self.seed, step, 0), self.model.config.C,
        )

    def step(self, pairs, step: int) -> float:
        params = self.model.params
        params.zero_grads()
        tape = ad.Tape()
        L = self.loss(pairs, step, self.model.bind(tape))
        value = L.item()
        if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
            return value
        tape.backward(L)
        adam_step(params, self.adam)
        return value

    def predict(self, pairs) -> np.ndarray:
        batch, _ = make_batch(pairs)
        return self.model.forward(batch).X.data

    def metrics(self) -> dict:
        return {"skipped_steps": self.adam.skipped}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 2500
    patience: int = 200
    batch_size: int = 16
    eval_period: int = 1
    seed: int = 0
    lr: float = 5e-4
    weight_decay: float = 1e-12

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_period < 1:
            raise ValueError("epochs, batch_size and eval_period must be >= 1")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError("patience must be in [0, epochs]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_val_mse: float
    stopped_early: bool


def batch_mse(engine: Engine, pairs: Sequence[SamplePair], batch_size: int) -> float:
    """Mean over samples of the per-sample position MSE."""
    total = 0.0
    for k in range(0, len(pairs), batch_size):
        chunk = pairs[k:k + batch_size]
        pred = engine.predict(chunk)
        off = 0
        for p in chunk:
            n = p.target.shape[0]
            total += float(np.mean((pred[off:off + n] - p.target) ** 2))
            off += n
    return total / max(len(pairs), 1)


def train(
    train_pairs: Sequence[SamplePair],
    val_pairs: Sequence[SamplePair],
    model_config: ModelConfig,
    config: TrainConfig,
    engine_factory: Callable[[Model, AdamState], Engine] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train with early stopping on validation MSE; returns the best model."""
    if not train_pairs or not val_pairs:
        raise ValueError("training needs non-empty train and val splits")
    model = Model(model_config, seed=config.seed)
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    engine = engine_factory(model, adam) if engine_factory else LocalEngine(model, adam, config.seed)
    train_pairs = sparsify(train_pairs, model_config.drop_rate)
    val_pairs = sparsify(val_pairs, model_config.drop_rate)
    order_rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    best_val, best_epoch, best_params = float("inf"), 0, engine.model.params.flat_values()
    since_best = 0
    step = 0
    stopped_early = False
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_pairs))
        losses = []
        for k in range(0, len(order), config.batch_size):
            chunk = [train_pairs[i] for i in order[k:k + config.batch_size]]
            value = engine.step(chunk, step)
            step += 1
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                record = {"epoch": epoch, "step": step, "train_loss": value, "status": "diverged"}
                history.append(record)
                raise TrainingDiverged(f"loss {value:.3e} at epoch {epoch}, step {step}", history)
            losses.append(value)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % config.eval_period == 0 or epoch == config.epochs:
            val = batch_mse(engine, val_pairs, config.batch_size)
            record["val_mse"] = val
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_params = engine.model.params.flat_values()
                since_best = 0
            else:
                since_best += config.eval_period
        record["seconds"] = time.perf_counter() - t0
        record.update(engine.metrics())
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if since_best >= config.patience and "val_mse" in record:
            stopped_early = epoch < config.epochs
            break
    best = Model(model_config, seed=config.seed)
    _set_flat_values(best.params, best_params)
    return TrainResult(best, history, best_epoch, best_val, stopped_early)


def _set_flat_values(store: ParamStore, flat: np.ndarray) -> None:
    off = 0
    for n in store.names():
        v = store.value(n)
        store.set_value(n, flat[off:off + v.size].reshape(v.shape))
        off += v.size


def write_metrics(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    mse: float
    seconds: float
    n_samples: int
    per_sample: np.ndarray


def evaluate(
    model: Model,
    pairs: Sequence[SamplePair],
    n_rot: int = 1,
    seed: int = 0,
    batch_size: int = 16,
    translations: bool = False,
    reflections: bool = False,
    warmup: bool = True,
) -> EvalResult:
    """Transform-augmented test MSE and wall time.

    Each (round, sample) draws its own transform, applied to input and target.
    The timed region covers edge sparsification and the forward pass; a
    warm-up forward on the first batch runs before timing.
    """
    if n_rot < 1:
        raise ValueError("n_rot must be >= 1")
    t_max = 10.0 if translations else 0.0
    moved: list[SamplePair] = []
    for r in range(n_rot):
        for k, p in enumerate(pairs):
            g = random_rotation(np.random.default_rng([seed, r, k]), reflections, t_max)
            moved.append(SamplePair(apply_transform(p.graph, g), g.points(p.target), p.delta_t))
    drop = model.config.drop_rate
    if warmup and moved:
        model.predict(make_batch(sparsify(moved[:batch_size], drop))[0])
    per_sample = np.empty(len(moved))
    seconds = 0.0
    for k in range(0, len(moved), batch_size):
        chunk = moved[k:k + batch_size]
        t0 = time.perf_counter()
        batch, target = make_batch(sparsify(chunk, drop))
        pred = model.predict(batch)
        seconds += time.perf_counter() - t0
        off = 0
        for j, p in enumerate(chunk):
            n = p.target.shape[0]
            per_sample[k + j] = np.mean((pred[off:off + n] - target[off:off + n]) ** 2)
            off += n
    return EvalResult(float(per_sample.mean()) if len(moved) else 0.0, seconds, len(moved), per_sample)


def rollout(model: Model, pair: SamplePair, steps: int, frame_dt: float) -> np.ndarray:
    """Feed predictions back as inputs; returns steps x N x 3 positions.

    The velocity for the next step is the finite difference of the last two
    position estimates over the prediction horizon.
    """
    if steps < 1:
        raise ValueError("rollout needs steps >= 1")
    horizon = pair.delta_t * frame_dt
    g = pair.graph
    out = np.empty((steps,) + g.X.shape)
    x, v = g.X, g.V
    for k in range(steps):
        cur = GeometricGraph(x, v, g.H, g.edges, g.edge_attr)
        cur = drop_longest_edges(cur, model.config.drop_rate) if model.config.drop_rate else cur
        x_new = model.predict(GraphBatch.from_graphs([cur]))
        out[k] = x_new
        v = (x_new - x) / horizon
        x = x_new
    return out
