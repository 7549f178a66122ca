import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dense_conv3d

from panograph.edgenet import (
    PARAM_SHAPES,
    TrainConfig,
    TrainSample,
    TrainState,
    edge_mlp_forward,
    forward_prepared,
    init_params,
    load_checkpoint,
    loss_and_grad_prepared,
    prepare_input,
    sage_conv_forward,
    save_checkpoint,
    sgd_step,
    sparse_conv_forward,
    train,
    voxelize,
)
from panograph.edgenet.checkpoint import decode_checkpoint, encode_checkpoint
from panograph.edgenet.model import cluster_avg_pool, neighbor_mean
from panograph.edgenet.sparse import conv_preactivation
from panograph.errors import FormatError, ShapeError, TrainingError
from panograph.oversegmentation import ClusterAssignment
from panograph.scene_io import CAR, PEDESTRIAN, SYNTHETIC_CLASSES, PointCloudFrame


def toy_frame(per_cluster=5, seed=3):
    rng = np.random.default_rng(seed)
    centers = np.array([[2.0, 0, -1.0], [2.6, 0.3, -1.0], [5.0, 1.0, -0.5]])
    xyz = np.concatenate([c + rng.normal(0, 0.08, (per_cluster, 3)) for c in centers])
    sem = np.repeat([CAR, CAR, PEDESTRIAN], per_cluster).astype(np.uint16)
    inst = np.repeat([1, 1, 2], per_cluster).astype(np.uint16)
    frame = PointCloudFrame(xyz.astype(np.float32), rng.uniform(0, 1, len(xyz)).astype(np.float32), sem, inst, SYNTHETIC_CLASSES)
    return frame, ClusterAssignment(np.repeat([0, 1, 2], per_cluster), 3)


TOY_LABELS = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], bool)


def params64(seed=1):
    return {k: v.astype(np.float64) for k, v in init_params(seed).items()}


# sparse convolution


def test_voxelize_averages_points_per_site():
    pts = np.array([[0.01, 0.02, 0.03], [0.05, 0.05, 0.05], [0.25, 0, 0]])
    t = voxelize(pts, np.array([[1.0], [3.0], [5.0]]), 0.1)
    assert t.coords.tolist() == [[0, 0, 0], [2, 0, 0]]
    assert t.features[:, 0].tolist() == [2.0, 5.0]
    assert t.point_site.tolist() == [0, 0, 1]


def test_voxelize_negative_coordinates_floor():
    t = voxelize(np.array([[-0.05, 0, 0]]), np.ones((1, 1)), 0.1)
    assert t.coords.tolist() == [[-1, 0, 0]]


def test_voxelize_rejects_bad_input():
    with pytest.raises(ValueError):
        voxelize(np.zeros((1, 3)), np.zeros((1, 1)), 0.0)
    with pytest.raises(ShapeError):
        voxelize(np.zeros((2, 3)), np.zeros((3, 1)), 0.1)


def test_isolated_site_sees_only_center_tap(rng):
    t = voxelize(np.array([[0.0, 0, 0], [5.0, 5, 5]]), rng.normal(size=(2, 4)), 1.0)
    w = rng.normal(size=(27, 4, 3))
    out = sparse_conv_forward(t, w, np.zeros(3), relu=False)
    np.testing.assert_allclose(out.features, t.features @ w[13], atol=1e-12)


def test_zero_weights_give_bias(rng):
    t = voxelize(rng.uniform(0, 1, (30, 3)), rng.normal(size=(30, 2)), 0.2)
    out = sparse_conv_forward(t, np.zeros((27, 2, 5)), np.arange(5.0), relu=False)
    assert np.all(out.features == np.arange(5.0))


def random_active_grid(rng, side):
    shape = tuple(int(s) for s in rng.integers(4, side + 1, 3))
    active = rng.random(shape) < rng.uniform(0.1, 0.7)
    active.flat[0] = True
    return shape, active


def sparse_vs_dense(rng, side=8, fin=3, fout=4):
    shape, active = random_active_grid(rng, side)
    coords = np.argwhere(active)
    feats = rng.normal(size=(len(coords), fin))
    grid = np.zeros(shape + (fin,))
    grid[tuple(coords.T)] = feats
    w = rng.normal(size=(27, fin, fout))
    b = rng.normal(size=fout)
    # one point per voxel center so sites map 1:1
    t = voxelize((coords + 0.5) * 0.1, feats, 0.1)
    got = sparse_conv_forward(t, w, b, relu=False).features
    want = dense_conv3d(grid, w, b)[tuple(t.coords.T)]
    return np.max(np.abs(got - want))


def test_sparse_matches_dense_oracle(rng):
    assert max(sparse_vs_dense(rng) for _ in range(10)) <= 1e-9


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6))
def test_gather_and_loop_paths_agree(seed):
    rng = np.random.default_rng(seed)
    t = voxelize(rng.uniform(0, 1, (200, 3)), rng.normal(size=(200, 6)), 0.15)
    w = rng.normal(size=(27, 6, 4))
    b = rng.normal(size=4)
    pairs = t.neighbor_pairs()
    np.testing.assert_allclose(conv_preactivation(t.features, pairs, w, b), conv_preactivation(t.features, pairs, w, b, t.gather_index()), atol=1e-10)


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6), shift=st.tuples(st.integers(-5, 5), st.integers(-5, 5), st.integers(-5, 5)))
def test_conv_commutes_with_voxel_shift(seed, shift):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (60, 3))
    feats = rng.normal(size=(60, 2))
    w = rng.normal(size=(27, 2, 3))
    a = sparse_conv_forward(voxelize(pts, feats, 0.2), w, np.zeros(3))
    b = sparse_conv_forward(voxelize(pts + 0.2 * np.array(shift), feats, 0.2), w, np.zeros(3))
    np.testing.assert_allclose(a.features, b.features, atol=1e-9)
    assert np.array_equal(a.coords + shift, b.coords)


def test_conv_rejects_wrong_width(rng):
    t = voxelize(rng.uniform(0, 1, (5, 3)), rng.normal(size=(5, 2)), 0.5)
    with pytest.raises(ShapeError):
        sparse_conv_forward(t, np.zeros((27, 3, 1)), np.zeros(1))


# pooling, SAGE and the edge MLP


def test_avg_pool_counts_points_not_sites():
    t = voxelize(np.array([[0, 0, 0], [0.01, 0, 0], [0.5, 0, 0]]), np.array([[1.0], [1.0], [4.0]]), 0.1)
    pooled = cluster_avg_pool(t, np.array([0, 0, 0]), 1)
    assert pooled[0, 0] == pytest.approx(2.0)


def test_sage_by_hand():
    h = np.array([[1.0, 0], [0, 1.0], [1.0, 1.0]])
    out = sage_conv_forward(h, np.eye(2), 2 * np.eye(2), np.zeros(2), relu=False)
    # neighbor mean of node 0 is (0.5, 1)
    np.testing.assert_allclose(out[0], [2.0, 2.0])


def test_single_node_has_zero_neighbor_mean():
    assert np.all(neighbor_mean(np.ones((1, 4))) == 0)


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 9))
def test_sage_is_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n, 5))
    ws, wn, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=3)
    perm = rng.permutation(n)
    np.testing.assert_allclose(sage_conv_forward(h, ws, wn, b, True)[perm], sage_conv_forward(h[perm], ws, wn, b, True), atol=1e-12)


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 7))
def test_edge_mlp_rows_are_distributions(seed, n):
    rng = np.random.default_rng(seed)
    p = params64(seed % 7)
    h = rng.normal(size=(n, 32)) * 10
    out = edge_mlp_forward(h, p["mlp1.weight"], p["mlp1.bias"], p["mlp2.weight"], p["mlp2.bias"])
    assert out.shape == (n, n, 2)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)
    edges = np.argwhere(np.ones((n, n)))
    sub = edge_mlp_forward(h, p["mlp1.weight"], p["mlp1.bias"], p["mlp2.weight"], p["mlp2.bias"], edges)
    np.testing.assert_allclose(sub, out.reshape(-1, 2), atol=1e-12)


def test_edge_mlp_zero_weights_give_half():
    out = edge_mlp_forward(np.ones((3, 32)), np.zeros((64, 32)), np.zeros(32), np.zeros((32, 2)), np.zeros(2))
    assert np.all(out == 0.5)


def test_edge_mlp_is_ordered():
    p = params64(2)
    h = np.random.default_rng(0).normal(size=(2, 32))
    out = edge_mlp_forward(h, p["mlp1.weight"], p["mlp1.bias"], p["mlp2.weight"], p["mlp2.bias"])
    assert not np.allclose(out[0, 1], out[1, 0])


# full network


def test_forward_shapes_and_determinism():
    frame, a = toy_frame()
    inp = prepare_input(frame, a)
    p = init_params(0)
    out = forward_prepared(inp, p)
    assert out.shape == (3, 3, 2)
    assert np.array_equal(out, forward_prepared(inp, p))


def test_forward_single_cluster():
    frame, _ = toy_frame()
    one = ClusterAssignment(np.zeros(len(frame), np.int64), 1)
    out = forward_prepared(prepare_input(frame, one), init_params(0))
    assert out.shape == (1, 1, 2)


def test_forward_is_cluster_permutation_equivariant():
    frame, a = toy_frame()
    perm = np.array([2, 0, 1])
    # relabel cluster c as perm_inv[c]; output rows follow
    inv = np.argsort(perm)
    b = ClusterAssignment(inv[a.labels], 3)
    p = init_params(4)
    out_a = forward_prepared(prepare_input(frame, a), p)
    out_b = forward_prepared(prepare_input(frame, b), p)
    np.testing.assert_allclose(out_a[np.ix_(perm, perm)], out_b, atol=1e-10)


def test_loss_at_uniform_prediction_is_ln2():
    frame, a = toy_frame()
    p = params64()
    p["mlp2.weight"][:] = 0
    loss, grads, _ = loss_and_grad_prepared(prepare_input(frame, a), TOY_LABELS, p)
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    assert set(grads) == set(PARAM_SHAPES)


def test_loss_without_clusters_is_zero():
    frame, _ = toy_frame()
    a = ClusterAssignment(np.full(len(frame), -1), 0)
    loss, grads, _ = loss_and_grad_prepared(prepare_input(frame, a), np.zeros((0, 0), bool), params64())
    assert loss == 0 and all(not g.any() for g in grads.values())


def test_loss_rejects_wrong_label_shape():
    frame, a = toy_frame()
    with pytest.raises(ShapeError):
        loss_and_grad_prepared(prepare_input(frame, a), np.ones((2, 2), bool), params64())


@pytest.mark.parametrize("weighted", [False, True])
def test_gradient_spot_check(weighted):
    """Central differences on a random sample of entries per group; the full sweep is an acceptance check."""
    frame, a = toy_frame(per_cluster=4)
    inp = prepare_input(frame, a)
    p = params64()
    _, grads, _ = loss_and_grad_prepared(inp, TOY_LABELS, p, class_weights=weighted)
    rng = np.random.default_rng(0)
    h = 1e-5
    for name, theta in p.items():
        flat = theta.reshape(-1)
        for i in rng.choice(flat.size, min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            hi = loss_and_grad_prepared(inp, TOY_LABELS, p, class_weights=weighted, need_grad=False)[0]
            flat[i] = old - h
            lo = loss_and_grad_prepared(inp, TOY_LABELS, p, class_weights=weighted, need_grad=False)[0]
            flat[i] = old
            num = (hi - lo) / (2 * h)
            assert grads[name].reshape(-1)[i] == pytest.approx(num, rel=1e-4, abs=1e-8), name


# optimizer


def one_param_state(theta, v=0.0, lr=0.1, mu=0.9, wd=0.01):
    params = {k: np.zeros(s, np.float64) for k, s in PARAM_SHAPES.items()}
    params["mlp2.bias"] = np.array([theta, 0.0])
    mom = {k: np.zeros_like(x) for k, x in params.items()}
    mom["mlp2.bias"] = np.array([v, 0.0])
    return TrainState(params, mom, lr=lr, momentum_coef=mu, weight_decay=wd)


def grads_with(g):
    grads = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    grads["mlp2.bias"] = np.array([g, 0.0])
    return grads


def test_sgd_two_steps_by_hand():
    s = one_param_state(1.0)
    s1 = sgd_step(s, grads_with(0.5))
    # v1 = 0.5 + 0.01 = 0.51, theta1 = 1 - 0.051
    assert s1.momentum["mlp2.bias"][0] == pytest.approx(0.51)
    assert s1.params["mlp2.bias"][0] == pytest.approx(0.949)
    s2 = sgd_step(s1, grads_with(-0.2))
    v2 = 0.9 * 0.51 + (-0.2 + 0.01 * 0.949)
    assert s2.momentum["mlp2.bias"][0] == pytest.approx(v2)
    assert s2.params["mlp2.bias"][0] == pytest.approx(0.949 - 0.1 * v2)
    assert s2.step == 2


def test_sgd_zero_gradient_only_decays():
    s = sgd_step(one_param_state(2.0, mu=0.0), grads_with(0.0))
    assert s.params["mlp2.bias"][0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)


def test_sgd_rejects_bad_gradients():
    s = one_param_state(1.0)
    with pytest.raises(TrainingError):
        sgd_step(s, grads_with(np.nan))
    bad = grads_with(0.0)
    bad["mlp2.bias"] = np.zeros(3)
    with pytest.raises(TrainingError):
        sgd_step(s, bad)
    del bad["mlp2.bias"]
    with pytest.raises(TrainingError):
        sgd_step(s, bad)


def toy_sample(labels=TOY_LABELS, seed=3):
    frame, a = toy_frame(per_cluster=8, seed=seed)
    return TrainSample(prepare_input(frame, a), labels, f"toy{seed}")


def test_training_memorizes_one_frame():
    result = train([toy_sample()], TrainConfig(epochs=60, lr=0.01))
    losses = [h.mean_loss for h in result.history]
    assert losses[-1] < 0.5 * losses[0]
    assert result.history[-1].edge_accuracy == 1.0


def test_all_true_labels_drive_probability_up():
    sample = toy_sample(np.ones((3, 3), bool))
    result = train([sample], TrainConfig(epochs=150, lr=0.01, class_weights=False))
    p = forward_prepared(sample.inp, result.state.params)[..., 1]
    assert p[~np.eye(3, dtype=bool)].min() > 0.99


def test_training_is_deterministic():
    samples = [toy_sample(seed=s) for s in (3, 4, 5)]
    cfg = TrainConfig(epochs=3, batch_size=2, seed=9)
    a, b = train(samples, cfg), train(samples, cfg)
    for k in PARAM_SHAPES:
        assert np.array_equal(a.state.params[k], b.state.params[k])


def test_resume_matches_uninterrupted_run(tmp_path):
    samples = [toy_sample(seed=s) for s in (3, 4)]
    cfg = TrainConfig(epochs=4, seed=2)
    full = train(samples, cfg).state
    half = train(samples, TrainConfig(epochs=2, seed=2)).state
    save_checkpoint(tmp_path / "h.ckpt", half)
    loaded, _ = load_checkpoint(tmp_path / "h.ckpt")
    resumed = train(samples, cfg, state=loaded).state
    assert resumed.step == full.step and resumed.epoch == 4
    for k in PARAM_SHAPES:
        assert np.array_equal(resumed.params[k], full.params[k])
        assert np.array_equal(resumed.momentum[k], full.momentum[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_and_dumps(tmp_path):
    p = params64()
    state = TrainState.fresh(p, lr=1e300, momentum_coef=0.0, weight_decay=0.0)
    with pytest.raises(TrainingError):
        train([toy_sample(), toy_sample(seed=4)], TrainConfig(epochs=1), state=state, dump_dir=tmp_path)
    assert list(tmp_path.glob("diverged_step*.ckpt"))


def test_empty_training_set():
    with pytest.raises(TrainingError):
        train([], TrainConfig())


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    state = sgd_step(TrainState.fresh(init_params(5)), {k: np.ones(s) for k, s in PARAM_SHAPES.items()})
    save_checkpoint(tmp_path / "c.ckpt", state, {"note": "x"})
    got, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x"} and got.step == 1 and got.lr == state.lr
    for k in PARAM_SHAPES:
        assert np.array_equal(got.params[k], state.params[k])
        assert np.array_equal(got.momentum[k], state.momentum[k])
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_corruption():
    blob = encode_checkpoint(TrainState.fresh(init_params(0)))
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTANET\0" + blob[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-4])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\0\0\0\0")
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:8] + (2).to_bytes(4, "little") + blob[12:])


def test_checkpoint_rejects_wrong_shapes():
    p = init_params(0)
    p["mlp2.bias"] = np.zeros(3, np.float32)
    state = TrainState(p, {k: np.zeros_like(v) for k, v in p.items()})
    with pytest.raises(ShapeError):
        decode_checkpoint(encode_checkpoint(state))
