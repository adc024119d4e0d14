import numpy as np
import pytest

from vegn.geometry import random_rotation
from vegn.nbody import (
    DatasetFormatError,
    MAGIC,
    build_dataset,
    charge_edge_attr,
    coulomb_accel,
    header_size,
    initial_state,
    read_dataset,
    simulate,
    simulate_from,
    uniform_cloud,
    write_dataset,
)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(6, 3, 3, n_particles=5, seed=4)


def accel_oracle(x, c, eps):
    a = np.zeros_like(x)
    for i in range(len(x)):
        for j in range(len(x)):
            if i != j:
                d = x[i] - x[j]
                a[i] += c[i] * c[j] * d / (d @ d + eps * eps) ** 1.5
    return a


def test_accel_matches_pairwise_loop_and_is_antisymmetric():
    rng = np.random.default_rng(0)
    x, _, c = initial_state(7, rng)
    a = coulomb_accel(x, c, 0.1)
    np.testing.assert_allclose(a, accel_oracle(x, c, 0.1), rtol=1e-10, atol=1e-12)
    assert np.max(np.abs(a.sum(axis=0))) < 1e-10


def test_equal_charges_repel():
    x0 = np.array([[-0.5, 0, 0], [0.5, 0, 0]])
    tr = simulate_from(x0, np.zeros((2, 3)), np.array([1.0, 1.0]), frames=20)
    sep = np.linalg.norm(tr.X[:, 0] - tr.X[:, 1], axis=1)
    assert np.all(np.diff(sep) > 0)


def test_momentum_drift_per_thousand_steps():
    tr = simulate(10, frames=101, substeps=10, seed=1)
    p = tr.V.sum(axis=1)
    assert np.max(np.abs(p - p[0])) < 1e-9


def test_step_refinement_converges_at_second_order():
    x0, v0, c = initial_state(6, np.random.default_rng(2))
    T = 0.2

    def run(dt):
        return simulate_from(x0, v0, c, 2, dt_sim=dt, substeps=round(T / dt)).X[-1]

    ref = run(1e-3 / 8)
    e1 = np.max(np.abs(run(1e-3) - ref))
    e2 = np.max(np.abs(run(5e-4) - ref))
    # second order: halving the step divides the error by about four
    assert e2 < e1 / 3


def test_simulation_is_e3_covariant():
    x0, v0, c = initial_state(8, np.random.default_rng(3))
    g = random_rotation(5, allow_reflection=True)
    a = simulate_from(x0, v0, c, 20)
    b = simulate_from(g.points(x0), g.vectors(v0), c, 20)
    np.testing.assert_allclose(b.X, g.points(a.X), atol=1e-9)
    np.testing.assert_allclose(b.V, g.vectors(a.V), atol=1e-9)


def test_batched_simulation_is_bitwise_identical():
    states = [initial_state(5, np.random.default_rng(s)) for s in range(3)]
    x0, v0, c = (np.stack(z) for z in zip(*states))
    batched = simulate_from(x0, v0, c, 6)
    for k in range(3):
        single = simulate_from(*states[k], 6)
        assert single.X.tobytes() == batched.X[k].tobytes()


def test_simulate_rejects_bad_input():
    with pytest.raises(ValueError):
        simulate(1, 3)
    with pytest.raises(ValueError):
        simulate(3, 3, softening=0.0)


def test_dataset_pairs_match_trajectories(small_ds):
    meta = small_ds.meta
    assert meta["delta_t"] == 10 and meta["t_input"] == 30
    s = small_ds.splits["val"]
    for k, seed in enumerate(s.seeds.astype(int)):
        rng = np.random.default_rng([4, seed])
        x0, v0, c = initial_state(5, rng)
        tr = simulate_from(x0, v0, c, 41)
        np.testing.assert_array_equal(s.x_in[k], tr.X[30])
        np.testing.assert_array_equal(s.x_target[k], tr.X[40])
        np.testing.assert_array_equal(s.charges[k], c)


def test_split_seeds_are_disjoint(small_ds):
    seen = [set(small_ds.splits[n].seeds.tolist()) for n in ("train", "val", "test")]
    assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])


def test_samples_carry_features_and_full_edges(small_ds):
    pair = small_ds.samples("train")[0]
    g = pair.graph
    assert g.n_edges == 5 * 4
    c = small_ds.splits["train"].charges[0]
    np.testing.assert_array_equal(g.H, np.stack([c > 0, c < 0], axis=1).astype(float))
    np.testing.assert_array_equal(g.edge_attr, charge_edge_attr(g, g.edges))
    assert pair.delta_t == 10


def test_default_sizes():
    import inspect

    sig = inspect.signature(build_dataset).parameters
    assert [sig[k].default for k in ("n_train", "n_val", "n_test", "n_particles")] == [1000, 200, 200, 30]


def test_generation_is_deterministic(small_ds):
    again = build_dataset(6, 3, 3, n_particles=5, seed=4)
    assert small_ds.equals(again)
    assert not small_ds.equals(build_dataset(6, 3, 3, n_particles=5, seed=5))


def test_round_trip_and_size(small_ds, tmp_path):
    path = tmp_path / "d.bin"
    write_dataset(small_ds, path)
    back = read_dataset(path)
    assert back.equals(small_ds)
    for name, split in small_ds.splits.items():
        for f, arr in split.arrays().items():
            assert getattr(back.splits[name], f).tobytes() == arr.tobytes()
    count = sum(a.size for s in small_ds.splits.values() for a in s.arrays().values())
    assert path.stat().st_size == header_size(path) + 8 * count


def test_corrupted_files_raise(small_ds, tmp_path):
    path = tmp_path / "d.bin"
    write_dataset(small_ds, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(bad)
    bad.write_bytes(raw[:-16])
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(bad)
    bad.write_bytes(raw.replace(b"version=1", b"version=9", 1))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(bad)
    assert raw.startswith(MAGIC)


def test_uniform_cloud_is_sparse_radius_graph():
    pair = uniform_cloud(500, 0.15, seed=0)
    g = pair.graph
    d = np.linalg.norm(g.X[g.edges[:, 0]] - g.X[g.edges[:, 1]], axis=1)
    assert np.all(d <= 0.15) and g.n_edges > 0
    np.testing.assert_allclose(pair.target, g.X + 0.1 * g.V)
