import warnings

import numpy as np
import pytest

from vegn import autodiff as ad
from vegn.autodiff import Tape, Tensor
from vegn.checks import random_graph
from vegn.dist import (
    CollectiveError,
    DistEngine,
    Partition,
    adjust_cutoff,
    all_reduce_sum,
    build_local_graph,
    dist_forward,
    dist_loss,
    local_edge_count,
    make_group,
    near_cubic_factors,
    oracle_loss,
    partition_grid,
    partition_random,
    run_workers,
    shard_sample,
    sync_param_grads,
    worker_views,
)
from vegn.geometry import GeometricGraph, GraphBatch, radius_graph
from vegn.losses import LossConfig, objective, sampler
from vegn.model import Model, ModelConfig
from vegn.nbody import SamplePair, charge_edge_attr, uniform_cloud
from vegn.trainer import AdamState, loss_config


def sample(n=12, seed=0, drop=0.0):
    g = random_graph(n, seed, drop_rate=drop)
    target = g.X + 0.1 * np.random.default_rng([seed, 9]).normal(size=g.X.shape)
    return SamplePair(g, target, 1)


# ------------------------------------------------------------------ partitions


def test_random_partition_sizes_and_determinism():
    p = partition_random(10, 2, 0)
    assert sorted(p.sizes().tolist()) == [5, 5]
    np.testing.assert_array_equal(p.assignment, partition_random(10, 2, 0).assignment)
    sizes = partition_random(11, 4, 3).sizes()
    assert sizes.max() - sizes.min() <= 1
    with pytest.raises(ValueError):
        partition_random(3, 4, 0)


def test_random_partition_is_uniform_over_seeds():
    counts = np.zeros(10)
    for s in range(10_000):
        counts += partition_random(10, 2, s).assignment == 0
    freq = counts / 10_000
    assert np.all((freq >= 0.47) & (freq <= 0.53))


def test_partition_rejects_empty_device():
    with pytest.raises(ValueError):
        Partition(np.zeros(4, dtype=int), 2)


def test_near_cubic_factors():
    assert near_cubic_factors(1) == (1, 1, 1)
    assert near_cubic_factors(8) == (2, 2, 2)
    assert near_cubic_factors(12) == (3, 2, 2)
    assert near_cubic_factors(7) == (7, 1, 1)


def test_grid_partition_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    assert np.all(partition_grid(X, 1).assignment == 0)
    a = rng.normal(0, 0.1, size=(20, 3))
    clusters = np.vstack([a - [5, 0, 0], a + [5, 0, 0]])
    p = partition_grid(clusters, 2)
    assert len(set(p.assignment[:20])) == 1 and len(set(p.assignment[20:])) == 1
    assert p.assignment[0] != p.assignment[20]


def test_grid_partition_handles_degenerate_axis():
    X = np.zeros((16, 3))
    p = partition_grid(X, 4, seed=1)
    assert sorted(p.sizes().tolist()) == [4, 4, 4, 4]


def test_grid_keeps_more_edges_than_random_on_clustered_data():
    rng = np.random.default_rng(1)
    centres = rng.uniform(-5, 5, size=(8, 3))
    X = np.vstack([c + rng.normal(0, 0.3, size=(25, 3)) for c in centres])
    r = 0.8
    g = GeometricGraph(X, np.zeros_like(X), np.zeros((200, 1)), radius_graph(X, r))
    for D in (2, 4, 8):
        grid = local_edge_count(X, partition_grid(X, D), r)
        rand = local_edge_count(X, partition_random(200, D, 0), r)
        assert grid >= rand
    assert g.n_edges > 0


# ---------------------------------------------------------------- local graphs


def test_local_graph_single_device_is_identity():
    pair = uniform_cloud(300, 0.2, seed=0)
    p = partition_random(300, 1, 0)
    lg = build_local_graph(pair.graph, p, 0, 0.2, charge_edge_attr)
    np.testing.assert_array_equal(lg.graph.edges, pair.graph.edges)
    np.testing.assert_array_equal(lg.graph.edge_attr, pair.graph.edge_attr)


def test_union_of_local_edges_is_subset():
    pair = uniform_cloud(300, 0.2, seed=1)
    full = {tuple(e) for e in pair.graph.edges}
    for D in (1, 2, 4):
        shard = shard_sample(pair, D, seed=0, radius=0.2, edge_attr_fn=charge_edge_attr)
        union = {tuple(e) for e in shard.union_graph(pair.graph).edges}
        assert union <= full
        crossing = np.any(shard.partition.assignment[pair.graph.edges[:, 0]]
                          != shard.partition.assignment[pair.graph.edges[:, 1]])
        assert (union == full) == (not crossing)


def test_local_degree_shrinks_like_one_over_d():
    pair = uniform_cloud(3000, 0.12, seed=2)
    deg1 = pair.graph.n_edges / 3000
    prev = deg1
    for D in (2, 4, 8):
        p = partition_random(3000, D, 0)
        deg = local_edge_count(pair.graph.X, p, 0.12) / 3000
        assert deg < prev
        assert deg == pytest.approx(deg1 / D, rel=0.1)
        prev = deg


def test_adjust_cutoff_examples():
    X = np.random.default_rng(3).uniform(size=(1500, 3))
    r0 = 0.08
    target = len(radius_graph(X, r0))
    assert adjust_cutoff(X, partition_random(1500, 1, 0), r0, target) == r0
    radii = []
    for D in (2, 4, 8):
        p = partition_random(1500, D, 0)
        r = adjust_cutoff(X, p, r0, target)
        assert local_edge_count(X, p, r) >= target
        assert local_edge_count(X, p, r - 0.001) < target
        radii.append(r)
    assert radii == sorted(radii) and radii[0] > r0
    counts = [local_edge_count(X, partition_random(1500, 4, 0), r0 + k * 0.01) for k in range(6)]
    assert counts == sorted(counts)


def test_adjust_cutoff_warns_at_the_cap():
    X = np.random.default_rng(4).uniform(size=(200, 3))
    p = partition_random(200, 4, 0)
    with pytest.warns(RuntimeWarning):
        r = adjust_cutoff(X, p, 0.01, 10**9, max_steps=5)
    assert r == pytest.approx(0.015)


# ----------------------------------------------------------------- collectives


@pytest.mark.parametrize("transport", ["inproc", "socket"])
def test_all_reduce_forward_and_backward(transport):
    group = make_group(transport, 2)
    inputs = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
    weights = [1.0, 2.0]

    def work(rank, comm):
        tape = Tape()
        x = tape.leaf(inputs[rank])
        y = all_reduce_sum(x, comm, tape)
        grads = tape.backward(ad.scale(ad.sum_all(ad.slice_cols(y, 0, 1)), weights[rank]))
        return y.data, grads[x.node]

    out = run_workers(2, work, group=group)
    group.close()
    for y, g in out:
        np.testing.assert_array_equal(y, [[4.0, 6.0]])
        np.testing.assert_array_equal(g, [[3.0, 0.0]])


@pytest.mark.parametrize("transport", ["inproc", "socket"])
def test_all_reduce_sums_in_rank_order(transport):
    group = make_group(transport, 3)
    vals = [1e16, 1.0, -1e16]
    out = run_workers(3, lambda r, c: c.all_reduce(np.array([vals[r]])), group=group)
    group.close()
    want = (1e16 + 1.0) - 1e16
    assert all(o[0] == want for o in out)


@pytest.mark.parametrize("transport", ["inproc", "socket"])
def test_all_reduce_shape_mismatch_raises(transport):
    group = make_group(transport, 2)
    with pytest.raises(CollectiveError):
        run_workers(2, lambda r, c: c.all_reduce(np.zeros(2 + r)), group=group)
    group.close()


def test_sync_of_zero_gradients_is_zero():
    models = [Model(ModelConfig(hidden=4, layers=1, virtual_nodes=1), 0) for _ in range(2)]

    def work(rank, comm):
        models[rank].params.zero_grads()
        sync_param_grads(models[rank].params, comm)
        return models[rank].params.flat_grads()

    for g in run_workers(2, work):
        assert not np.any(g)


# ------------------------------------------------------------ distributed math


def run_dist(model, views, loss_cfg, step=0, seed=0):
    D = len(views)
    reps = [Model(model.config, model.seed, model.params.copy()) for _ in range(D)]

    def work(rank, comm):
        rep = reps[rank]
        rep.params.zero_grads()
        tape = Tape()
        out = dist_forward(rep, views[rank], comm, tape)
        L = dist_loss(out, views[rank], loss_cfg, seed, step, model.config.C)
        tape.backward(L)
        sync_param_grads(rep.params, comm)
        return out, L.item(), rep.params.flat_grads()

    return run_workers(D, work)


def test_single_device_matches_plain_forward_and_loss():
    pair = sample(10, 1, drop=0.3)
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=2), 0)
    views = worker_views([shard_sample(pair, 1)], 1)
    (out, L, _), = run_dist(model, views, loss_config(model.config), step=5, seed=3)
    ref = model.forward(GraphBatch.from_graphs([pair.graph]))
    assert out.X.data.tobytes() == ref.X.data.tobytes()
    # the single-device sampler is default_rng([seed, step, 0])
    want = objective(ref.X, pair.target, ref.Z, np.zeros(10, int), 1, np.array([10.0]),
                     loss_config(model.config), sampler(3, 5, 0), 2).item()
    assert L == pytest.approx(want, rel=1e-14)


def test_summed_mse_parts_equal_global_mse():
    pair = sample(16, 2)
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=2), 0)
    views = worker_views([shard_sample(pair, 4, seed=1)], 4)
    res = run_dist(model, views, LossConfig(mmd_weight=0.0))
    pred = np.empty((16, 3))
    for v, (out, _, _) in zip(views, res):
        pred[v.rows] = out.X.data
    total = sum(L for _, L, _ in res)
    assert total == pytest.approx(np.mean((pred - pair.target) ** 2), rel=1e-12)


def test_perfect_prediction_gives_zero_loss():
    pair = sample(8, 3)
    model = Model(ModelConfig(hidden=4, layers=1, virtual_nodes=1), 0)
    shard = shard_sample(pair, 2, seed=0)
    views = worker_views([shard], 2)

    def work(rank, comm):
        out = dist_forward(model, views[rank], comm)
        out.X = Tensor(views[rank].target.copy())
        return dist_loss(out, views[rank], LossConfig(mmd_weight=0.0), 0, 0, 1).item()

    assert run_workers(2, work) == [0.0, 0.0]


@pytest.mark.parametrize("D,C", [(2, 1), (3, 3), (4, 2)])
def test_gradients_match_single_process_oracle(D, C):
    pairs = [sample(14, 10 + k, drop=0.3) for k in range(2)]
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=C), 1)
    shards = [shard_sample(p, D, seed=[4, k]) for k, p in enumerate(pairs)]
    views = worker_views(shards, D)
    cfg = loss_config(model.config)
    res = run_dist(model, views, cfg, step=2, seed=7)
    union = GraphBatch.from_graphs([s.union_graph(p.graph) for s, p in zip(shards, pairs)])
    model.params.zero_grads()
    tape = Tape()
    L, _ = oracle_loss(model, union, views, cfg, 7, 2, model.bind(tape))
    tape.backward(L)
    want = model.params.flat_grads()
    for _, _, g in res:
        assert np.max(np.abs(g - want)) / np.max(np.abs(want)) < 1e-8
    assert sum(l for _, l, _ in res) == pytest.approx(L.item(), rel=1e-12)
    assert len({g.tobytes() for _, _, g in res}) == 1


def test_no_edges_means_partition_independence():
    pair = sample(20, 5, drop=1.0)
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=3), 2)
    ref = model.forward(GraphBatch.from_graphs([pair.graph])).X.data
    for D in (2, 4):
        views = worker_views([shard_sample(pair, D, seed=D)], D)
        res = run_dist(model, views, loss_config(model.config))
        pred = np.empty((20, 3))
        for v, (out, _, _) in zip(views, res):
            pred[v.rows] = out.X.data
        assert np.max(np.abs(pred - ref)) < 1e-9
        assert len({out.Z.data.tobytes() for out, _, _ in res}) == 1


def test_message_volume_per_layer():
    C, M, L = 3, 8, 2
    pair = sample(16, 6)
    model = Model(ModelConfig(hidden=M, layers=L, virtual_nodes=C), 0)
    group = make_group("inproc", 2)
    views = worker_views([shard_sample(pair, 2)], 2)
    run_workers(2, lambda r, c: dist_forward(model, views[r], c), group=group)
    # one round for the centre of mass and one for the virtual update, per layer
    assert group.stats.rounds == 2 * L
    assert group.stats.scalars == [L * ((3 + 1) + C * 3 + C * M)] * 2


def test_dist_forward_is_equivariant():
    from vegn.geometry import apply_transform, random_rotation

    pair = sample(12, 7, drop=0.5)
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=2), 0)
    shard = shard_sample(pair, 3, seed=0)
    t = random_rotation(1, allow_reflection=True)
    moved = SamplePair(apply_transform(pair.graph, t), t.points(pair.target), 1)
    moved_shard = shard_sample(moved, 3, seed=0)
    a = run_dist(model, worker_views([shard], 3), loss_config(model.config))
    b = run_dist(model, worker_views([moved_shard], 3), loss_config(model.config))
    for (oa, _, _), (ob, _, _) in zip(a, b):
        assert np.max(np.abs(ob.X.data - t.points(oa.X.data))) < 1e-9


@pytest.mark.parametrize("transport", ["inproc", "socket"])
def test_engine_replicas_stay_bitwise_identical(transport):
    pairs = [sample(12, 20 + k, drop=0.2) for k in range(4)]
    model = Model(ModelConfig(hidden=8, layers=2, virtual_nodes=2), 0)
    eng = DistEngine(model, AdamState(lr=1e-3), 4, seed=0, transport=transport)
    for step in range(3):
        eng.step(pairs, step)
    sums = {r.params.flat_values().tobytes() for r in eng.replicas}
    assert len(sums) == 1
    assert len(set(eng.last_virtual_checksums)) == 1
    m = eng.metrics()
    assert m["comm_bytes"] > 0 and m["skipped_steps"] == 0
    eng.group.close()


def test_dynamic_shard_restores_edge_count():
    pair = uniform_cloud(800, 0.1, seed=3)
    target = pair.graph.n_edges
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        shard = shard_sample(pair, 4, seed=0, radius=0.1, edge_attr_fn=charge_edge_attr, dynamic=True)
    assert sum(lg.graph.n_edges for lg in shard.locals) >= target
    assert shard.radius > 0.1
