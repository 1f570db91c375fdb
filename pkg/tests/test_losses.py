import numpy as np
import pytest

from splatflow import losses
from splatflow.errors import ValidationError
from splatflow.losses import LossReport, LossWeights


def fd_grad(f, arr, picks, h=1e-6):
    out = {}
    for idx in picks:
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# image loss / SSIM / PSNR
# ---------------------------------------------------------------------------

def test_image_loss_zero_on_identical():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (16, 20, 3))
    assert losses.image_loss(img, img, 0.2) == pytest.approx(0.0, abs=1e-12)


def test_image_loss_pure_l1_constant_offset():
    a = np.full((8, 8, 3), 0.6)
    b = np.full((8, 8, 3), 0.5)
    assert losses.image_loss(a, b, 0.0) == pytest.approx(0.1)


def test_image_loss_dimension_mismatch():
    with pytest.raises(ValidationError):
        losses.image_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 0.2)


def test_default_weights_match_supplementary():
    w = LossWeights()
    assert w.ssim == 0.2
    assert w.flow_distill == 0.8
    assert (w.depth, w.flow, w.sky, w.reg) == (0.1, 0.005, 0.05, 0.001)


def test_psnr_closed_forms():
    img = np.random.default_rng(1).uniform(0, 1, (12, 12, 3))
    assert losses.psnr(img, img) == 100.0
    a = np.full((10, 10), 0.4)
    assert losses.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).uniform(0, 1, (20, 20))
    assert losses.ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_of_negative_image_is_negative():
    x, y = np.meshgrid(np.linspace(0, 1, 24), np.linspace(0, 1, 24))
    img = 0.5 + 0.4 * np.sin(7 * x) * np.cos(5 * y)
    assert losses.ssim(img, 1.0 - img) < 0.0


def test_image_loss_grad_matches_fd():
    rng = np.random.default_rng(3)
    rendered = rng.uniform(0.1, 0.9, (14, 10, 3))
    target = rng.uniform(0.1, 0.9, (14, 10, 3))
    g = losses.image_loss_vjp(rendered, target, 0.2)
    picks = [tuple(v) for v in rng.integers(0, (14, 10, 3), size=(12, 3))]
    num = fd_grad(lambda: losses.image_loss(rendered, target, 0.2), rendered, picks)
    for idx, n in num.items():
        assert g[idx] == pytest.approx(n, rel=1e-5, abs=1e-9)


# ---------------------------------------------------------------------------
# depth loss
# ---------------------------------------------------------------------------

def test_depth_loss_zero_when_equal():
    d = np.full((6, 6), 3.0)
    v = np.ones((6, 6), dtype=bool)
    val, warned = losses.depth_loss(d, d, v)
    assert val == 0.0 and not warned


def test_depth_loss_single_pixel_inverse():
    rendered = np.zeros((3, 3))
    lidar = np.zeros((3, 3))
    valid = np.zeros((3, 3), dtype=bool)
    rendered[1, 1] = 4.0
    lidar[1, 1] = 2.0
    valid[1, 1] = True
    val, _ = losses.depth_loss(rendered, lidar, valid)
    assert val == pytest.approx(abs(0.5 - 0.25))


def test_depth_loss_empty_mask_warns():
    val, warned = losses.depth_loss(np.ones((2, 2)), np.ones((2, 2)),
                                    np.zeros((2, 2), dtype=bool))
    assert val == 0.0 and warned


def test_depth_loss_literal_form():
    rendered = np.full((2, 2), 4.0)
    lidar = np.full((2, 2), 2.5)
    valid = np.ones((2, 2), dtype=bool)
    val, _ = losses.depth_loss(rendered, lidar, valid, inverse=False)
    assert val == pytest.approx(1.5)


def test_depth_grad_matches_fd():
    rng = np.random.default_rng(4)
    rendered = rng.uniform(1.0, 6.0, (8, 8))
    lidar = rng.uniform(1.0, 6.0, (8, 8))
    valid = rng.uniform(size=(8, 8)) > 0.4
    g = losses.depth_loss_vjp(rendered, lidar, valid)
    picks = [tuple(v) for v in rng.integers(0, 8, size=(10, 2))]
    num = fd_grad(lambda: losses.depth_loss(rendered, lidar, valid)[0],
                  rendered, picks)
    for idx, n in num.items():
        assert g[idx] == pytest.approx(n, rel=1e-5, abs=1e-10)


def test_project_lidar_depth_nearest_wins():
    pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 2.0]])
    depth, valid = losses.project_lidar_depth(pts, np.eye(4),
                                              (10.0, 10.0, 4.0, 4.0), 8, 8)
    assert valid[4, 4]
    assert depth[4, 4] == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# flow loss
# ---------------------------------------------------------------------------

def test_flow_loss_zero_when_exact_and_static():
    img = np.random.default_rng(5).uniform(0, 1, (6, 6, 3))
    flow = np.zeros((6, 6, 2))
    val, flags = losses.flow_loss(flow, flow.copy(), img, img.copy(), 0.8)
    assert val == pytest.approx(0.0, abs=1e-12)
    assert flags == ()


def test_flow_warp_term_equals_shifted_l1():
    # uniform 1-px x-flow on a vertical-edge image
    img = np.zeros((4, 4, 3))
    img[:, :2] = 0.9            # bright left half, vertical edge
    nxt = np.random.default_rng(6).uniform(0, 1, (4, 4, 3))
    flow = np.zeros((4, 4, 2))
    flow[..., 0] = 1.0
    val, _ = losses.flow_loss(flow, None, img, nxt, distill_weight=0.0)
    hand = np.mean(np.abs(nxt[:, 1:] - img[:, :3]))
    assert val == pytest.approx(hand, abs=1e-12)


def test_flow_loss_missing_pseudo_flagged():
    img = np.zeros((4, 4, 3))
    val, flags = losses.flow_loss(np.zeros((4, 4, 2)), None, img, None, 0.8)
    assert "flow_pseudo_missing" in flags
    assert "flow_warp_skipped" in flags
    assert val == 0.0


def test_flow_grad_matches_fd():
    rng = np.random.default_rng(7)
    h, w = 8, 9
    flow = rng.normal(size=(h, w, 2)) * 1.3 + 0.37   # keep away from integers
    pseudo = rng.normal(size=(h, w, 2))
    img = rng.uniform(0.2, 0.8, (h, w, 3))
    nxt = rng.uniform(0.2, 0.8, (h, w, 3))
    gf, gi = losses.flow_loss_vjp(flow, pseudo, img, nxt, 0.8)
    picks_f = [tuple(v) for v in rng.integers(0, (h, w, 2), size=(10, 3))]
    num_f = fd_grad(lambda: losses.flow_loss(flow, pseudo, img, nxt, 0.8)[0],
                    flow, picks_f)
    for idx, n in num_f.items():
        assert gf[idx] == pytest.approx(n, rel=1e-4, abs=1e-8)
    picks_i = [tuple(v) for v in rng.integers(0, (h, w, 3), size=(10, 3))]
    num_i = fd_grad(lambda: losses.flow_loss(flow, pseudo, img, nxt, 0.8)[0],
                    img, picks_i)
    for idx, n in num_i.items():
        assert gi[idx] == pytest.approx(n, rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------
# sky loss
# ---------------------------------------------------------------------------

def test_sky_loss_confident_correct_is_tiny():
    o = np.array([[1.0, 0.0], [1.0, 0.0]])
    mask = np.array([[False, True], [False, True]])
    assert losses.sky_loss(o, mask) == pytest.approx(0.0, abs=1e-5)


def test_sky_loss_half_is_ln2():
    o = np.full((5, 5), 0.5)
    mask = np.random.default_rng(8).uniform(size=(5, 5)) > 0.5
    assert losses.sky_loss(o, mask) == pytest.approx(np.log(2.0))


def test_sky_loss_all_sky_zero_opacity():
    o = np.zeros((4, 4))
    mask = np.ones((4, 4), dtype=bool)
    assert losses.sky_loss(o, mask) == pytest.approx(0.0, abs=1e-5)


def test_sky_grad_matches_fd():
    rng = np.random.default_rng(9)
    o = rng.uniform(0.05, 0.95, (7, 7))
    mask = rng.uniform(size=(7, 7)) > 0.5
    g = losses.sky_loss_vjp(o, mask)
    picks = [tuple(v) for v in rng.integers(0, 7, size=(10, 2))]
    num = fd_grad(lambda: losses.sky_loss(o, mask), o, picks)
    for idx, n in num.items():
        assert g[idx] == pytest.approx(n, rel=1e-5)


# ---------------------------------------------------------------------------
# regularizer
# ---------------------------------------------------------------------------

def test_reg_zero_for_static_isotropic():
    scales = np.full((5, 3), 0.2)
    assert losses.reg_loss(np.zeros((3, 3)), scales) == 0.0


def test_reg_motion_unit():
    motion = np.array([[1.0, 0.0, 0.0]])
    scales = np.full((1, 3), 0.1)
    assert losses.reg_loss(motion, scales) == pytest.approx(1.0)


def test_reg_ratio_boundary():
    scales = np.array([[10.0, 1.0, 1.0]])
    assert losses.reg_loss(None, scales) == 0.0
    scales = np.array([[20.0, 1.0, 1.0]])
    assert losses.reg_loss(None, scales) > 0.0


def test_reg_grad_matches_fd():
    rng = np.random.default_rng(10)
    motion = rng.normal(size=(4, 3))
    scales = np.abs(rng.normal(size=(6, 3))) + 0.05
    scales[2] = (1.4, 0.1, 0.09)  # one above the ratio limit
    gm, gs = losses.reg_loss_vjp(motion, scales)
    picks = [tuple(v) for v in rng.integers(0, (6, 3), size=(10, 2))]
    num = fd_grad(lambda: losses.reg_loss(motion, scales), scales, picks, h=1e-7)
    for idx, n in num.items():
        assert gs[idx] == pytest.approx(n, rel=1e-4, abs=1e-9)
    picks_m = [tuple(v) for v in rng.integers(0, (4, 3), size=(6, 2))]
    num_m = fd_grad(lambda: losses.reg_loss(motion, scales), motion, picks_m)
    for idx, n in num_m.items():
        assert gm[idx] == pytest.approx(n, rel=1e-6)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_total_recomputes_exactly():
    w = LossWeights()
    r = LossReport.combine(0.3, 0.2, 0.1, 0.05, 0.01, w)
    assert r.total == 0.3 + w.depth * 0.2 + w.flow * 0.1 + w.sky * 0.05 + w.reg * 0.01


def test_weights_validate():
    with pytest.raises(ValidationError):
        LossWeights(depth=-0.1)
    with pytest.raises(ValidationError):
        LossWeights(ssim=1.5)


def test_pixel_permutation_equivariance():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 1, (6, 6, 3))
    b = rng.uniform(0, 1, (6, 6, 3))
    base = losses.image_loss(a, b, 0.0)
    perm = rng.permutation(36)
    ap = a.reshape(36, 3)[perm].reshape(6, 6, 3)
    bp = b.reshape(36, 3)[perm].reshape(6, 6, 3)
    assert losses.image_loss(ap, bp, 0.0) == pytest.approx(base)
