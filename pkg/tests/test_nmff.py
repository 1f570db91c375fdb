import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatflow import geometry, nmff
from splatflow.errors import ValidationError
from splatflow.nmff import FlowMLP, MotionFlowField


def make_field(n_pairs=2, seed=0, zero_last=True, scale=0.1):
    rng = np.random.default_rng(seed)
    mlps = []
    for _ in range(n_pairs):
        m = FlowMLP(rng=rng, zero_last=zero_last)
        if not zero_last:
            m.weights[-1] = rng.normal(size=m.weights[-1].shape) * scale
        mlps.append(m)
    return MotionFlowField(mlps=mlps, bounds_center=np.zeros(3),
                           bounds_half=np.ones(3) * 5.0,
                           timestamps=np.arange(n_pairs + 1) * 0.1)


# ---------------------------------------------------------------------------
# MLP and field basics
# ---------------------------------------------------------------------------

def test_layer_shapes():
    m = FlowMLP()
    shapes = m.layer_shapes
    assert shapes[0] == (128, 3)
    assert all(s == (128, 128) for s in shapes[1:-1])
    assert shapes[-1] == (6, 128)
    assert len(shapes) == 8


def test_zero_init_is_identity_warp():
    f = make_field()
    pts = np.random.default_rng(1).uniform(-4, 4, size=(50, 3))
    dmu, dq = f.flow_eval(0, pts)
    assert not dmu.any()
    np.testing.assert_allclose(dq, np.tile([0.0, 0.0, 0.0, 1.0], (50, 1)))


def test_flow_eval_deterministic():
    f = make_field(zero_last=False)
    pts = np.random.default_rng(2).uniform(-4, 4, size=(30, 3))
    a1, b1 = f.flow_eval(1, pts)
    a2, b2 = f.flow_eval(1, pts)
    assert np.array_equal(a1, a2)
    assert np.array_equal(b1, b2)


def test_pair_index_out_of_range():
    f = make_field(n_pairs=2)
    with pytest.raises(ValidationError):
        f.eval_raw(2, np.zeros((1, 3)))


def test_mlp_backward_matches_fd():
    rng = np.random.default_rng(3)
    m = FlowMLP(rng=rng, zero_last=False)
    m.weights[-1] = rng.normal(size=m.weights[-1].shape) * 0.1
    x = rng.normal(size=(5, 3))
    d_out = rng.normal(size=(5, 6))
    out, cache = m.forward(x, want_cache=True)
    d_x, grads = m.backward(cache, d_out)
    h = 1e-6

    def loss():
        return float(np.sum(m.forward(x)[0] * d_out))

    for layer in (0, 3, 7):
        W = m.weights[layer]
        idx = (1, 2)
        old = W[idx]
        W[idx] = old + h
        fp = loss()
        W[idx] = old - h
        fm = loss()
        W[idx] = old
        assert grads[layer][0][idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)
    xi = (2, 1)
    old = x[xi]
    x[xi] = old + h
    fp = loss()
    x[xi] = old - h
    fm = loss()
    x[xi] = old
    assert d_x[xi] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def test_chamfer_identical_is_zero():
    pts = np.random.default_rng(4).uniform(-2, 2, size=(40, 3))
    assert nmff.chamfer(pts, pts.copy()) == 0.0


def test_chamfer_two_singletons():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert nmff.chamfer(a, b) == pytest.approx(2.0)


def test_chamfer_empty_rejected():
    with pytest.raises(ValidationError):
        nmff.chamfer(np.zeros((0, 3)), np.ones((3, 3)))


def test_chamfer_matches_brute_force_exactly():
    rng = np.random.default_rng(5)
    for _ in range(25):
        a = rng.uniform(-5, 5, size=(rng.integers(1, 100), 3))
        b = rng.uniform(-5, 5, size=(rng.integers(1, 100), 3))
        fast = nmff.chamfer(a, b)
        brute = nmff.chamfer_brute(a, b)
        assert abs(fast - brute) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10_000))
def test_chamfer_symmetric(na, nb, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-3, 3, size=(na, 3))
    b = rng.uniform(-3, 3, size=(nb, 3))
    assert nmff.chamfer(a, b) == pytest.approx(nmff.chamfer(b, a), rel=1e-12)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def test_warp_zero_field_is_identity():
    f = make_field(n_pairs=3)
    rng = np.random.default_rng(6)
    mu = rng.uniform(-3, 3, size=(20, 3))
    quat = geometry.normalize_quat(rng.normal(size=(20, 4)))
    mu2, q2 = nmff.warp_gaussians(f, mu, quat, 0, 3)
    np.testing.assert_array_equal(mu2, mu)
    np.testing.assert_allclose(q2, quat, atol=1e-15)


def test_warp_single_pair_translation():
    f = make_field(n_pairs=1)
    # bias-only field: constant translation (1, 0, 0), identity rotation
    f.mlps[0].biases[-1] = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    mu = np.array([[0.5, 0.5, 0.5]])
    quat = np.array([[0.0, 0.0, 0.0, 1.0]])
    mu2, q2 = nmff.warp_gaussians(f, mu, quat, 0, 1)
    np.testing.assert_allclose(mu2, [[1.5, 0.5, 0.5]])
    np.testing.assert_allclose(q2, quat)


def test_two_step_rotation_chain_matches_quat_product():
    f = make_field(n_pairs=2)
    wa = np.array([0.0, 0.0, 0.3])
    wb = np.array([0.0, 0.0, 0.5])
    f.mlps[0].biases[-1] = np.concatenate([np.zeros(3), wa])
    f.mlps[1].biases[-1] = np.concatenate([np.zeros(3), wb])
    rng = np.random.default_rng(7)
    quat = geometry.normalize_quat(rng.normal(size=(5, 4)))
    mu = rng.uniform(-2, 2, size=(5, 3))
    _, q2 = nmff.warp_gaussians(f, mu, quat, 0, 2)
    expect = geometry.quat_multiply(
        geometry.quat_multiply(quat, geometry.quat_from_axis_angle(wa)),
        geometry.quat_from_axis_angle(wb))
    np.testing.assert_allclose(q2, expect, atol=1e-6)


def test_warp_backward_in_time_rejected():
    f = make_field(n_pairs=2)
    with pytest.raises(ValidationError):
        nmff.warp_gaussians(f, np.zeros((1, 3)), np.array([[0, 0, 0, 1.0]]), 2, 0)


def test_aggregate_identity_at_source_time():
    f = make_field(n_pairs=2, zero_last=False, scale=0.05)
    pts = np.random.default_rng(8).uniform(-2, 2, size=(15, 3))
    out = nmff.aggregate_points(f, [(1, pts)], 1)
    np.testing.assert_array_equal(out.points, pts)


def test_aggregate_chaining_is_composition():
    f = make_field(n_pairs=2, zero_last=False, scale=0.05)
    pts = np.random.default_rng(9).uniform(-2, 2, size=(15, 3))
    direct = nmff.aggregate_points(f, [(0, pts)], 2).points
    mid = nmff.aggregate_points(f, [(0, pts)], 1).points
    two_step = nmff.aggregate_points(f, [(1, mid)], 2).points
    np.testing.assert_allclose(direct, two_step, atol=1e-12)


def test_aggregate_backward_euler_inverse():
    f = make_field(n_pairs=1)
    f.mlps[0].biases[-1] = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
    pts = np.array([[1.0, 1.0, 1.0]])
    back = nmff.aggregate_points(f, [(1, pts)], 0).points
    np.testing.assert_allclose(back, [[0.5, 1.0, 1.0]])


# ---------------------------------------------------------------------------
# ground removal and decomposition labels
# ---------------------------------------------------------------------------

def test_ransac_finds_horizontal_plane():
    rng = np.random.default_rng(10)
    ground = np.column_stack([rng.uniform(-5, 5, 400), rng.uniform(-5, 5, 400),
                              rng.normal(0, 0.01, 400)])
    wall = np.column_stack([rng.uniform(-5, 5, 150), np.full(150, 4.0),
                            rng.uniform(0, 3, 150)])
    pts = np.concatenate([ground, wall])
    mask = nmff.ransac_ground_plane(pts, seed=0)
    assert mask[:400].mean() > 0.98
    # wall points above the 0.15 m band must survive
    high_wall = wall[:, 2] > 0.3
    assert not mask[400:][high_wall].any()


def test_ransac_ignores_vertical_plane():
    rng = np.random.default_rng(11)
    wall = np.column_stack([rng.uniform(-5, 5, 300), np.full(300, 2.0),
                            rng.uniform(0, 4, 300)])
    assert not nmff.ransac_ground_plane(wall, seed=0).any()


def test_decompose_labels_order_invariant():
    f = make_field(n_pairs=1, zero_last=False, scale=0.3)
    pts = np.random.default_rng(12).uniform(-3, 3, size=(60, 3))
    t1, _, _ = f.eval_raw(0, pts)
    lab1 = np.linalg.norm(t1, axis=1) > 0.05
    perm = np.random.default_rng(13).permutation(60)
    t2, _, _ = f.eval_raw(0, pts[perm])
    lab2 = np.linalg.norm(t2, axis=1) > 0.05
    assert np.array_equal(lab1[perm], lab2)


# ---------------------------------------------------------------------------
# field checkpoint
# ---------------------------------------------------------------------------

def test_field_checkpoint_roundtrip(tmp_path):
    f = make_field(n_pairs=3, zero_last=False, scale=0.2)
    path = tmp_path / "field.sfmf"
    nmff.save_field(f, path)
    g = nmff.load_field(path)
    assert g.n_pairs == 3
    np.testing.assert_allclose(g.bounds_center, f.bounds_center)
    pts = np.random.default_rng(14).uniform(-3, 3, size=(10, 3))
    a, _ = f.flow_eval(1, pts)
    b, _ = g.flow_eval(1, pts)
    # weights round-trip through float32
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_field_bad_magic(tmp_path):
    p = tmp_path / "x.sfmf"
    p.write_bytes(b"junkjunkjunk")
    from splatflow.errors import FormatError
    with pytest.raises(FormatError):
        nmff.load_field(p)


# ---------------------------------------------------------------------------
# pretraining on a tiny rigid toy (smoke; the full criterion runs in acceptance)
# ---------------------------------------------------------------------------

def _toy_manifest(tmp_path, n_frames=3, velocity=(1.0, 0.0, 0.0)):
    from splatflow import scenegraph
    from splatflow.scenegraph import PointCloud

    rng = np.random.default_rng(15)
    base = rng.uniform(-0.5, 0.5, size=(160, 3)) + np.array([0.0, 0.0, 2.0])
    # vertical wall, dense enough that no near-horizontal plane reaches the
    # RANSAC inlier floor: ground removal must leave this scene alone
    static = rng.uniform(-4, 4, size=(700, 3)) * np.array([1, 0.05, 0.4]) \
        + np.array([0.0, 6.0, 1.6])
    (tmp_path / "lidar").mkdir(exist_ok=True)
    (tmp_path / "images").mkdir(exist_ok=True)
    frames = []
    for i in range(n_frames):
        obj = base + np.asarray(velocity) * i
        pts = np.concatenate([obj, static])
        path = tmp_path / "lidar" / f"{i}.sfpc"
        scenegraph.save_point_cloud(PointCloud(points=pts), path)
        img = tmp_path / "images" / f"{i}.png"
        scenegraph.save_image(np.zeros((4, 4, 3)), img)
        frames.append(scenegraph.FrameRecord(
            timestamp=0.1 * i,
            cameras=[scenegraph.CameraView(intrinsics=(10.0, 10.0, 2.0, 2.0),
                                           extrinsic=np.eye(4), image=img,
                                           width=4, height=4)],
            lidar_points=path, lidar_extrinsic=np.eye(4)))
    return scenegraph.SceneManifest(
        frames=frames, scene_bounds=(np.array([-6.0, -2.0, -1.0]),
                                     np.array([8.0, 8.0, 3.0])),
        camera_count=1, root=tmp_path).validate()


def test_pretrain_fits_rigid_translation(tmp_path):
    m = _toy_manifest(tmp_path)
    f = MotionFlowField.create(m, seed=0)
    cfg = nmff.PretrainConfig(max_iters=700, seed=0)
    result = nmff.pretrain(f, m, cfg)
    assert len(result["loss_curves"]) == 2
    obj = m.lidar_world(0).points[:160]
    t, _, _ = f.eval_raw(0, obj)
    epe = np.linalg.norm(t - np.array([1.0, 0.0, 0.0]), axis=1).mean()
    assert epe < 0.08


def test_pretrain_static_scene_beats_raw_chamfer(tmp_path):
    m = _toy_manifest(tmp_path, velocity=(0.0, 0.0, 0.0))
    f = MotionFlowField.create(m, seed=0)
    raw = []
    for i in range(2):
        a = m.lidar_world(i).points
        b = m.lidar_world(i + 1).points
        raw.append(nmff.chamfer(a, b) / (len(a) + len(b)))
    nmff.pretrain(f, m, nmff.PretrainConfig(max_iters=300, seed=0))
    for i in range(2):
        a = m.lidar_world(i).points
        t, _, _ = f.eval_raw(i, a)
        b = m.lidar_world(i + 1).points
        fitted = nmff.chamfer(a + t, b) / (len(a) + len(b))
        assert fitted <= raw[i] + 1e-9


def test_pretrain_best_curve_monotone(tmp_path):
    m = _toy_manifest(tmp_path)
    f = MotionFlowField.create(m, seed=0)
    result = nmff.pretrain(f, m, nmff.PretrainConfig(max_iters=200, seed=0))
    for curve in result["loss_curves"]:
        best = np.minimum.accumulate(curve)
        assert np.all(np.diff(best) <= 0.0)
        assert len(curve) <= 200
