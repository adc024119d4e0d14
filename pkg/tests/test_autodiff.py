import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vegn import autodiff as ad
from vegn.autodiff import MLP, ParamStore, Segments, Tape, Tensor, grad_check, mlp_reference


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, x):
    tape = Tape()
    leaf = tape.leaf(x.copy(), None)
    out = build(leaf)
    grads = tape.backward(out)
    return grads.get(leaf.node, np.zeros_like(x))


def test_sum_of_squares_gradient():
    x = np.array([[1.0, -2.0, 3.0]])
    g = tape_grad(lambda t: ad.sum_all(ad.mul(t, t)), x)
    np.testing.assert_array_equal(g, 2 * x)


OPS = {
    "silu": lambda t: ad.sum_all(ad.silu(t)),
    "exp": lambda t: ad.sum_all(ad.exp(ad.scale(t, 0.3))),
    "row_sqnorm": lambda t: ad.sum_all(ad.row_sqnorm(t)),
    "matmul": lambda t: ad.sum_all(ad.matmul(t, ad.transpose(t))),
    "scale_rows": lambda t: ad.sum_all(ad.scale_rows(t, ad.slice_cols(t, 0, 1))),
    "row_dot": lambda t: ad.sum_all(ad.row_dot(t, ad.silu(t))),
    "concat_slice": lambda t: ad.sum_all(ad.mul(ad.concat_cols([t, t]), ad.concat_cols([t, ad.scale(t, 2.0)]))),
    "mean_rows": lambda t: ad.sum_all(ad.mul(ad.mean_rows(t), ad.sum_rows(t))),
    "reshape": lambda t: ad.sum_all(ad.row_sqnorm(ad.reshape(t, (t.shape[1], t.shape[0])))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    build = OPS[name]
    g = tape_grad(build, x)
    n = numeric_grad(lambda v: build(Tensor(v)).item(), x.copy())
    np.testing.assert_allclose(g, n, rtol=1e-6, atol=1e-8)


def test_gather_scatter_are_adjoint():
    rng = np.random.default_rng(1)
    idx = np.array([2, 0, 2, 1, 2])
    seg = Segments(idx, 3)
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(5, 2))
    # <gather(a), b> == <a, scatter(b)>
    lhs = np.sum(ad.gather(Tensor(a), seg).data * b)
    rhs = np.sum(a * ad.scatter(Tensor(b), seg).data)
    assert lhs == pytest.approx(rhs, rel=1e-14)


def test_scatter_sums_in_ascending_row_order():
    seg = Segments(np.array([0, 0, 0]), 1)
    x = np.array([[1e16], [1.0], [-1e16]])
    # sequential order: (1e16 + 1) - 1e16 = 0 in float64
    assert ad.scatter(Tensor(x), seg).data[0, 0] == (1e16 + 1.0) - 1e16


def test_scatter_of_empty_segment_is_zero():
    seg = Segments(np.array([0, 0]), 3)
    out = ad.scatter(Tensor(np.ones((2, 2))), seg).data
    np.testing.assert_array_equal(out, [[2, 2], [0, 0], [0, 0]])


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_twice_raises():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1)))
    y = ad.sum_all(ad.mul(x, x))
    tape.backward(y)
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ad.ShapeError):
        tape.backward(ad.mul(x, x))


def test_mixing_tapes_raises():
    a = Tape().leaf(np.ones((1, 1)))
    b = Tape().leaf(np.ones((1, 1)))
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


def test_check_finite_names_the_stage():
    with pytest.raises(ad.NonFiniteError, match="stage-x"):
        ad.check_finite(Tensor(np.array([[np.nan]])), "stage-x")


def test_untaped_ops_return_plain_tensors():
    t = ad.silu(Tensor(np.zeros((2, 2))))
    assert t.tape is None


def test_mlp_matches_reference_and_parts():
    rng = np.random.default_rng(2)
    store = ParamStore()
    mlp = MLP(store, "f", [5, 7, 3], rng)
    x = rng.normal(size=(6, 5))
    out = mlp(ad.bind(store), Tensor(x)).data
    np.testing.assert_allclose(out, mlp_reference(store, "f", x), rtol=1e-13, atol=1e-14)
    idx = np.array([1, 0, 1, 1, 0, 0])
    seg = Segments(idx, 2)
    h = rng.normal(size=(2, 3))
    rest = rng.normal(size=(6, 2))
    via_parts = mlp.apply_parts(ad.bind(store), [(Tensor(h), seg), Tensor(rest)]).data
    direct = mlp_reference(store, "f", np.hstack([h[idx], rest]))
    np.testing.assert_allclose(via_parts, direct, rtol=1e-13, atol=1e-14)


def test_mlp_width_mismatch_raises():
    store = ParamStore()
    mlp = MLP(store, "f", [4, 3], np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        mlp(ad.bind(store), Tensor(np.zeros((2, 5))))


def test_param_store_order_and_duplicates():
    store = ParamStore()
    store.add("b", np.zeros(2))
    store.add("a", np.ones(3))
    assert store.names() == ["a", "b"]
    np.testing.assert_array_equal(store.flat_values(), [1, 1, 1, 0, 0])
    with pytest.raises(KeyError):
        store.add("a", np.zeros(1))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    store = ParamStore()
    MLP(store, "net", [3, 4, 2], rng)
    path = tmp_path / "ck.bin"
    store.save(path)
    back = ParamStore.load(path)
    assert back.manifest() == store.manifest()
    assert back.flat_values().tobytes() == store.flat_values().tobytes()


def test_truncated_checkpoint_raises(tmp_path):
    store = ParamStore()
    store.add("w", np.ones((3, 3)))
    path = tmp_path / "ck.bin"
    store.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        ParamStore.load(path)


def test_grad_check_passes_and_negative_control_fails():
    rng = np.random.default_rng(4)
    store = ParamStore()
    mlp = MLP(store, "f", [3, 6, 1], rng)
    x = Tensor(rng.normal(size=(5, 3)))

    def f(P):
        return ad.sum_all(ad.row_sqnorm(mlp(P, x)))

    assert grad_check(f, store, 1e-6).passed
    with ad.corrupted_silu_gradient():
        assert not grad_check(f, store, 1e-6).passed
    # the context restores the true derivative
    assert grad_check(f, store, 1e-6).passed


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-5, 5)))
def test_linear_ops_have_exact_gradients(x):
    # d/dx sum(2x + x) = 3 exactly
    g = tape_grad(lambda t: ad.sum_all(ad.add(ad.scale(t, 2.0), t)), x)
    np.testing.assert_array_equal(g, np.full_like(x, 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
def test_silu_is_finite_for_large_inputs(x):
    out = ad.silu(Tensor(x * 20)).data
    assert np.all(np.isfinite(out))
