import numpy as np
import pytest

from splatflow import rasterizer as R
from splatflow.geometry import invert_cov2
from splatflow.rasterizer import SkyModel, SplatPrimitives


def make_prims(center, depth, opacity, color, conic=None, flow=None):
    n = len(depth)
    center = np.asarray(center, dtype=np.float64).reshape(n, 2)
    if conic is None:
        conic = np.tile([1.0, 0.0, 1.0], (n, 1))
    conic = np.asarray(conic, dtype=np.float64).reshape(n, 3)
    flow = np.zeros((n, 2)) if flow is None else np.asarray(flow, dtype=np.float64)
    return SplatPrimitives(center=center, conic=conic,
                           depth=np.asarray(depth, dtype=np.float64),
                           opacity=np.asarray(opacity, dtype=np.float64),
                           color=np.asarray(color, dtype=np.float64).reshape(n, 3),
                           flow=flow, radius=R.conic_radius(conic))


def random_prims(rng, n, width, height):
    L = rng.normal(size=(n, 2, 2)) * 2.0
    cov = L @ np.swapaxes(L, -1, -2) + 0.3 * np.eye(2)
    Q = invert_cov2(cov)
    conic = np.stack([Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 1]], axis=-1)
    return SplatPrimitives(
        center=np.column_stack([rng.uniform(-6, width + 6, n),
                                rng.uniform(-6, height + 6, n)]),
        conic=conic,
        depth=rng.uniform(0.3, 12.0, n),
        opacity=rng.uniform(0.0, 1.0, n),
        color=rng.uniform(0.0, 1.0, (n, 3)),
        flow=rng.normal(size=(n, 2)) * 4.0,
        radius=R.conic_radius(conic))


# ---------------------------------------------------------------------------
# eval_density
# ---------------------------------------------------------------------------

def test_density_at_center_is_opacity():
    p = make_prims([[5.0, 5.0]], [1.0], [0.7], [[1, 0, 0]])
    assert R.eval_density(p, (5.0, 5.0))[0] == pytest.approx(0.7)


def test_density_clamped_at_099():
    p = make_prims([[5.0, 5.0]], [1.0], [1.0], [[1, 0, 0]])
    assert R.eval_density(p, (5.0, 5.0))[0] == pytest.approx(0.99)


def test_density_unit_offset_isotropic():
    p = make_prims([[5.0, 5.0]], [1.0], [1.0], [[1, 0, 0]])
    assert R.eval_density(p, (6.0, 5.0))[0] == pytest.approx(np.exp(-0.5))


def test_density_zero_opacity_everywhere_zero():
    p = make_prims([[5.0, 5.0]], [1.0], [0.0], [[1, 0, 0]])
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert R.eval_density(p, rng.uniform(0, 10, 2))[0] == 0.0


# ---------------------------------------------------------------------------
# render_naive hand blends
# ---------------------------------------------------------------------------

def test_single_opaque_primitive():
    # opacity high enough that alpha clamps to 0.99 at the center pixel
    p = make_prims([[4.5, 4.5]], [5.0], [1.0], [[0.2, 0.9, 0.4]],
                   conic=[[50.0, 0.0, 50.0]])
    out = R.render_naive(p, 9, 9)
    np.testing.assert_allclose(out.color[4, 4], 0.99 * np.array([0.2, 0.9, 0.4]),
                               atol=1e-12)
    assert out.depth[4, 4] == pytest.approx(0.99 * 5.0)
    assert out.opacity[4, 4] == pytest.approx(0.99)


def test_front_red_over_back_blue_hand_blend():
    p = make_prims([[4.5, 4.5], [4.5, 4.5]], [1.0, 2.0], [0.5, 0.5],
                   [[1, 0, 0], [0, 0, 1]])
    out = R.render_naive(p, 9, 9)
    np.testing.assert_allclose(out.color[4, 4], [0.5, 0.0, 0.25], atol=1e-12)
    assert out.opacity[4, 4] == pytest.approx(0.75)
    assert out.depth[4, 4] == pytest.approx(0.5 * 1.0 + 0.25 * 2.0)


def test_empty_scene_is_background():
    p = make_prims(np.zeros((0, 2)), [], [], np.zeros((0, 3)),
                   conic=np.zeros((0, 3)))
    out = R.render_naive(p, 4, 3, background=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(out.color, np.broadcast_to([0.1, 0.2, 0.3], (3, 4, 3)))
    assert not out.opacity.any()
    assert not out.depth.any()


def test_order_independence():
    rng = np.random.default_rng(8)
    p = random_prims(rng, 30, 24, 20)
    perm = rng.permutation(30)
    q = SplatPrimitives(center=p.center[perm], conic=p.conic[perm],
                        depth=p.depth[perm], opacity=p.opacity[perm],
                        color=p.color[perm], flow=p.flow[perm],
                        radius=p.radius[perm])
    a = R.render_naive(p, 24, 20)
    b = R.render_naive(q, 24, 20)
    np.testing.assert_allclose(a.color, b.color, atol=1e-12)
    np.testing.assert_allclose(a.depth, b.depth, atol=1e-12)


def test_zero_opacity_primitive_is_invisible():
    rng = np.random.default_rng(9)
    p = random_prims(rng, 20, 24, 20)
    extra = make_prims([[12.0, 10.0]], [1.0], [0.0], [[1.0, 1.0, 1.0]])
    q = SplatPrimitives(
        center=np.concatenate([p.center, extra.center]),
        conic=np.concatenate([p.conic, extra.conic]),
        depth=np.concatenate([p.depth, extra.depth]),
        opacity=np.concatenate([p.opacity, extra.opacity]),
        color=np.concatenate([p.color, extra.color]),
        flow=np.concatenate([p.flow, extra.flow]),
        radius=np.concatenate([p.radius, extra.radius]))
    a = R.render_naive(p, 24, 20)
    b = R.render_naive(q, 24, 20)
    for f in ("color", "depth", "flow", "opacity"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_opacity_buffer_in_unit_interval():
    rng = np.random.default_rng(10)
    for _ in range(5):
        p = random_prims(rng, 80, 32, 24)
        out = R.render_naive(p, 32, 24)
        assert out.opacity.min() >= 0.0
        assert out.opacity.max() <= 1.0


# ---------------------------------------------------------------------------
# tiled oracle equivalence
# ---------------------------------------------------------------------------

def test_tiled_matches_naive_randomized():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = rng.integers(1, 120)
        p = random_prims(rng, n, 40, 28)
        bg = rng.uniform(0, 1, 3)
        a = R.render_naive(p, 40, 28, bg)
        b = R.render_tiled(p, 40, 28, bg, tile_size=16)
        for f in ("color", "depth", "flow", "opacity", "transmittance"):
            assert np.abs(getattr(a, f) - getattr(b, f)).max() < 1e-6


def test_gaussian_straddling_tile_boundary():
    p = make_prims([[16.0, 10.0]], [2.0], [0.8], [[0.9, 0.1, 0.3]],
                   conic=[[0.08, 0.0, 0.08]])
    a = R.render_naive(p, 48, 24)
    b = R.render_tiled(p, 48, 24, tile_size=16)
    assert np.abs(a.color - b.color).max() < 1e-6
    assert np.abs(a.opacity - b.opacity).max() < 1e-6


def test_single_tile_degenerates_to_naive():
    rng = np.random.default_rng(12)
    p = random_prims(rng, 50, 30, 22)
    a = R.render_naive(p, 30, 22)
    b = R.render_tiled(p, 30, 22, tile_size=max(30, 22))
    for f in ("color", "depth", "flow", "opacity"):
        assert np.abs(getattr(a, f) - getattr(b, f)).max() < 1e-6


# ---------------------------------------------------------------------------
# sky compositing
# ---------------------------------------------------------------------------

def _const_sky(value):
    sky = SkyModel()
    from splatflow.scene import logit
    sky.grid[:] = logit(value)
    return sky  # sigmoid(logit(v)) == v everywhere, bilinear of constant is constant


def _dummy_out(opacity, color):
    h, w = opacity.shape
    return R.RenderOutput(color=color, depth=np.zeros((h, w)),
                          flow=np.zeros((h, w, 2)), opacity=opacity,
                          transmittance=1.0 - opacity)


def _rays(h, w):
    rays = np.zeros((h, w, 3))
    rays[..., 2] = 1.0
    return rays


def test_sky_composite_saturated_pixel_unchanged():
    out = _dummy_out(np.ones((2, 2)), np.full((2, 2, 3), 0.2))
    res = R.composite_sky(out, _const_sky(0.8), _rays(2, 2))
    np.testing.assert_allclose(res.color, 0.2)


def test_sky_composite_empty_pixel_is_sky():
    out = _dummy_out(np.zeros((2, 2)), np.zeros((2, 2, 3)))
    res = R.composite_sky(out, _const_sky(0.8), _rays(2, 2))
    np.testing.assert_allclose(res.color, 0.8, atol=1e-9)


def test_sky_composite_half_mix():
    out = _dummy_out(np.full((1, 1), 0.5), np.full((1, 1, 3), 0.2))
    res = R.composite_sky(out, _const_sky(0.8), _rays(1, 1))
    np.testing.assert_allclose(res.color[0, 0], 0.2 + 0.5 * 0.8, atol=1e-9)


def test_sky_contributes_no_depth_or_flow():
    out = _dummy_out(np.zeros((2, 2)), np.zeros((2, 2, 3)))
    res = R.composite_sky(out, _const_sky(0.5), _rays(2, 2))
    assert not res.depth.any()
    assert not res.flow.any()


def test_sky_grid_gradient_matches_fd():
    rng = np.random.default_rng(13)
    sky = SkyModel(rng.normal(size=(SkyModel.GRID_H, SkyModel.GRID_W, 3)) * 0.3)
    dirs = rng.normal(size=(40, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    dcol = rng.normal(size=(40, 3))
    ana = sky.sample_vjp(dirs, dcol)
    picks = [tuple(v) for v in rng.integers(0, (64, 128, 3), size=(8, 3))]
    nz = np.argwhere(np.abs(ana) > 1e-12)
    picks += [tuple(v) for v in nz[rng.choice(len(nz), size=min(8, len(nz)))]]
    for idx in picks:
        old = sky.grid[idx]
        h = 1e-6
        sky.grid[idx] = old + h
        fp = float(np.sum(sky.sample(dirs) * dcol))
        sky.grid[idx] = old - h
        fm = float(np.sum(sky.sample(dirs) * dcol))
        sky.grid[idx] = old
        num = (fp - fm) / (2 * h)
        assert num == pytest.approx(ana[idx], abs=1e-6)
