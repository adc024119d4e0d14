import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vegn import autodiff as ad
from vegn.autodiff import Tape, Tensor
from vegn.geometry import random_rotation
from vegn.losses import LossConfig, mmd_loss, mse_loss, objective, rbf_kernel, total_loss


def mmd_oracle(Z, X, sigma):
    C, Ns = len(Z), len(X)
    vv = sum(rbf_kernel(a, b, sigma) for a in Z for b in Z)
    xv = sum(rbf_kernel(x, z, sigma) for x in X for z in Z)
    return vv / C**2 - xv / (Ns * C)


def test_rbf_kernel():
    x = np.array([0.3, -1.0, 2.0])
    assert rbf_kernel(x, x, 1.5) == 1.0
    sigma = 1.5
    y = x + np.array([math.sqrt(2) * sigma, 0, 0])
    assert rbf_kernel(x, y, sigma) == pytest.approx(math.exp(-1), rel=1e-14)
    assert math.exp(-1) == pytest.approx(0.367879, abs=1e-6)
    with pytest.raises(ValueError):
        rbf_kernel(x, y, 0.0)


def test_default_loss_constants():
    cfg = LossConfig()
    assert (cfg.mmd_weight, cfg.mmd_sigma, cfg.mmd_samples) == (0.03, 1.5, 3)


def test_mmd_zero_cases_are_exact():
    z = np.array([[0.4, 1.0, -2.0]])
    assert mmd_loss(Tensor(z), z, 1.5).item() == 0.0
    Z2 = np.vstack([z, z])
    assert mmd_loss(Tensor(Z2), z, 1.5).item() == 0.0


def test_mmd_matches_double_loop():
    rng = np.random.default_rng(0)
    Z, X = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    assert mmd_loss(Tensor(Z), X, 1.5).item() == pytest.approx(mmd_oracle(Z, X, 1.5), rel=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mmd_is_e3_invariant(seed):
    rng = np.random.default_rng(seed)
    Z, X = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    g = random_rotation(rng, allow_reflection=True)
    a = mmd_loss(Tensor(Z), X, 1.5).item()
    b = mmd_loss(Tensor(g.points(Z)), g.points(X), 1.5).item()
    assert abs(a - b) < 1e-12


def test_mmd_separates_coincident_channels():
    z = np.zeros((1, 3))
    X = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, -1.0]])
    tape = Tape()
    Z = tape.leaf(np.vstack([z, z]))
    grads = tape.backward(mmd_loss(Z, X, 1.5))
    assert np.max(np.abs(grads[Z.node])) > 1e-3


def test_mse_examples():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(6, 3))
    assert mse_loss(Tensor(gt), gt).item() == 0.0
    assert mse_loss(Tensor(gt + 1.0), gt).item() == pytest.approx(1.0, rel=1e-15)
    for n in range(1, 60):
        grid = rng.integers(-16, 16, size=(n, 3)) / 4.0
        assert mse_loss(Tensor(grid + 1.0), grid).item() == 1.0
    g = random_rotation(5, allow_reflection=True)
    pred = rng.normal(size=(6, 3))
    a = mse_loss(Tensor(pred), gt).item()
    b = mse_loss(Tensor(g.points(pred)), g.points(gt)).item()
    assert a == pytest.approx(b, rel=1e-12)
    with pytest.raises(ad.ShapeError):
        mse_loss(Tensor(pred), gt[:5])


def test_zero_weight_disables_mmd_exactly():
    rng = np.random.default_rng(2)
    gt, pred, Z = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.normal(size=(2, 3))
    cfg = LossConfig(mmd_weight=0.0)
    assert total_loss(Tensor(pred), gt, Tensor(Z), cfg, 0, 2).item() == mse_loss(Tensor(pred), gt).item()


def test_total_loss_uses_sampled_ground_truth_rows():
    rng = np.random.default_rng(3)
    gt, pred, Z = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), rng.normal(size=(2, 3))
    cfg = LossConfig()
    got = total_loss(Tensor(pred), gt, Tensor(Z), cfg, 7, 2).item()
    rows = np.sort(np.random.default_rng(7).choice(8, size=3, replace=False))
    want = np.mean((pred - gt) ** 2) + 0.03 * mmd_oracle(Z, gt[rows], 1.5)
    assert got == pytest.approx(want, rel=1e-13)


def test_objective_is_mean_over_graphs():
    rng = np.random.default_rng(4)
    sizes = [3, 5]
    gt, pred = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    ng = np.repeat([0, 1], sizes)
    got = objective(Tensor(pred), gt, None, ng, 2, np.array(sizes, float), LossConfig(), rng, 0).item()
    want = np.mean([np.mean((pred[ng == k] - gt[ng == k]) ** 2) for k in (0, 1)])
    assert got == pytest.approx(want, rel=1e-14)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(mmd_sigma=0)
    with pytest.raises(ValueError):
        LossConfig(mmd_weight=-1)
    with pytest.raises(ValueError):
        mmd_loss(Tensor(np.zeros((0, 3))), np.zeros((1, 3)), 1.0)
