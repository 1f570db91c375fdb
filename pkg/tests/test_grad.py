import numpy as np
import pytest

from splatflow import grad, losses, rasterizer as R
from splatflow.errors import NumericError, ValidationError


@pytest.fixture(scope="module")
def fixture():
    return grad.make_gradcheck_fixture()


# ---------------------------------------------------------------------------
# harness sanity: quadratic toy and negative control
# ---------------------------------------------------------------------------

def test_quadratic_toy_central_difference():
    # the harness machinery on ||theta||^2/2: analytic gradient is theta
    rng = np.random.default_rng(0)
    theta = rng.normal(size=12)
    h = 1e-5
    worst = 0.0
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + h
        fp = 0.5 * float(theta @ theta)
        theta[i] = old - h
        fm = 0.5 * float(theta @ theta)
        theta[i] = old
        num = (fp - fm) / (2 * h)
        err = abs(num - theta[i]) / max(abs(num), abs(theta[i]), 1e-8)
        worst = max(worst, err)
    assert worst < 1e-8


def test_corrupted_gradient_fails_check(fixture):
    scene, fieldm, frames, weights = fixture
    analytic = grad.total_gradients(scene, fieldm, frames, weights)
    report = grad.finite_diff_check(scene, fieldm, frames, weights,
                                    samples_per_class=6, seed=1)
    assert report.passed
    # now corrupt one class by 1% and verify the same check trips
    analytic2 = grad.total_gradients(scene, fieldm, frames, weights)
    analytic2.static["pos"] *= 1.01
    analytic2.dynamic["pos"] *= 1.01
    report2 = grad.finite_diff_check(scene, fieldm, frames, weights,
                                     samples_per_class=6, seed=1,
                                     analytic=analytic2)
    assert not report2.passed
    assert report2.max_rel_err["mu"] > 1e-4


# ---------------------------------------------------------------------------
# zero-loss and single-primitive closed forms
# ---------------------------------------------------------------------------

def test_zero_loss_gives_zero_gradients(fixture):
    scene, fieldm, frames, _ = fixture
    weights = losses.LossWeights(depth=0.0, flow=0.0, sky=0.0, reg=0.0, ssim=0.2)
    fi = frames[0]
    out, _, _ = grad.forward(scene, fieldm, fi, weights)
    from dataclasses import replace
    fi_self = replace(fi, target_image=out.color, lidar_depth=None,
                      lidar_valid=None, sky_mask=None, flow_pseudo=None,
                      next_image=None)
    _, report, state = grad.forward(scene, fieldm, fi_self, weights)
    assert report.total == pytest.approx(0.0, abs=1e-12)
    g = grad.backward(scene, fieldm, state)
    for grp in (g.static, g.dynamic):
        for arr in grp.values():
            np.testing.assert_allclose(arr, 0.0, atol=1e-12)
    np.testing.assert_allclose(g.sky_grid, 0.0, atol=1e-12)


def test_single_primitive_opacity_gradient_hand_chain():
    """One Gaussian, one-pixel image, pure L1 color loss.

    At the primitive's center alpha = opacity, C = alpha * c, so
    dL/d(opacity) = sum_ch sign(C - target) * c_ch / 3.
    """
    conic = np.array([[1.0, 0.0, 1.0]])
    prims = R.SplatPrimitives(center=np.array([[0.5, 0.5]]), conic=conic,
                              depth=np.array([2.0]), opacity=np.array([0.6]),
                              color=np.array([[0.8, 0.4, 0.1]]),
                              flow=np.zeros((1, 2)), radius=R.conic_radius(conic))
    target = np.array([[[0.2, 0.9, 0.3]]])
    out, binned = R._render_tiled_binned(prims, 1, 1, np.zeros(3), 16)
    d_color = losses.image_loss_vjp(out.color, target, 0.0)
    g = R.render_tiled_backward(prims, binned, out, d_color, np.zeros((1, 1)),
                                np.zeros((1, 1, 2)), np.zeros((1, 1)), 1, 1)
    c = prims.color[0]
    rendered = 0.6 * c
    hand = float(np.sum(np.sign(rendered - target[0, 0]) * c) / 3.0)
    assert g["opacity"][0] == pytest.approx(hand, rel=1e-12)


# ---------------------------------------------------------------------------
# full-pipeline finite differences (the acceptance criterion runs a larger
# sample; this is the fast regression version)
# ---------------------------------------------------------------------------

def test_full_pipeline_gradcheck_small(fixture):
    scene, fieldm, frames, weights = fixture
    report = grad.finite_diff_check(scene, fieldm, frames, weights,
                                    samples_per_class=16, seed=5)
    assert report.passed, report.to_json()
    assert set(report.max_rel_err) == {"mu", "quat", "scale", "opacity", "sh",
                                       "sky", "mlp"}


def test_every_parameter_class_has_gradient_path(fixture):
    scene, fieldm, frames, weights = fixture
    g = grad.total_gradients(scene, fieldm, frames, weights)
    assert np.abs(g.static["pos"]).max() > 0
    assert np.abs(g.dynamic["pos"]).max() > 0
    assert np.abs(g.static["quat"]).max() > 0
    assert np.abs(g.static["log_scale"]).max() > 0
    assert np.abs(g.static["opacity_logit"]).max() > 0
    assert np.abs(g.static["sh"]).max() > 0
    assert np.abs(g.sky_grid).max() > 0
    assert g.mlp, "motion MLPs received no gradients"
    for layers in g.mlp.values():
        assert any(np.abs(gw).max() > 0 for gw, _ in layers)


def test_backward_requires_loss_forward(fixture):
    scene, fieldm, frames, _ = fixture
    _, _, state = grad.forward(scene, fieldm, frames[0], weights=None)
    with pytest.raises(ValidationError):
        grad.backward(scene, fieldm, state)


def test_nan_gradient_guard(fixture):
    scene, fieldm, frames, weights = fixture
    _, _, state = grad.forward(scene, fieldm, frames[0], weights)
    g = grad.backward(scene, fieldm, state)
    g.static["pos"][0, 0] = np.nan
    with pytest.raises(NumericError, match="static.pos"):
        g.check_finite()


def test_report_serializes(fixture):
    scene, fieldm, frames, weights = fixture
    report = grad.finite_diff_check(scene, fieldm, frames, weights,
                                    samples_per_class=4, seed=2)
    import json
    doc = json.loads(report.to_json())
    assert doc["tolerance"] == 1e-4
    assert "mu" in doc["max_rel_err"]
