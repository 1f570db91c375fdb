import numpy as np
import pytest

from splatflow import sh


def test_dc_only_is_view_independent():
    coeffs = np.zeros((1, 16, 3))
    coeffs[0, 0, :] = (0.7, -0.2, 1.1)
    rng = np.random.default_rng(0)
    base = None
    for _ in range(5):
        d = rng.normal(size=(1, 3))
        d /= np.linalg.norm(d)
        c = sh.eval_sh_color(coeffs, d)
        expect = np.maximum(coeffs[0, 0] * sh.SH_C0 + 0.5, 0.0)
        np.testing.assert_allclose(c[0], expect, atol=1e-12)
        base = c if base is None else base
        np.testing.assert_allclose(c, base)


def test_degree_one_z_antisymmetry():
    coeffs = np.zeros((1, 16, 3))
    coeffs[0, 2, 0] = 0.3   # the z-linear band
    up = sh.eval_sh_color(coeffs, np.array([[0.0, 0.0, 1.0]]))[0, 0]
    down = sh.eval_sh_color(coeffs, np.array([[0.0, 0.0, -1.0]]))[0, 0]
    assert up - 0.5 == pytest.approx(-(down - 0.5), abs=1e-12)
    assert up != pytest.approx(down)


def test_zero_coeffs_render_mid_gray():
    c = sh.eval_sh_color(np.zeros((4, 16, 3)), np.tile([0.0, 1.0, 0.0], (4, 1)))
    np.testing.assert_allclose(c, 0.5)


def test_color_clamped_at_zero():
    coeffs = np.zeros((1, 16, 3))
    coeffs[0, 0, :] = -10.0
    c = sh.eval_sh_color(coeffs, np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(c, 0.0)


def test_basis_gradient_matches_fd():
    rng = np.random.default_rng(1)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    g = sh.sh_basis_grad(d)
    h = 1e-6
    for axis in range(3):
        dp = d.copy(); dp[axis] += h
        dm = d.copy(); dm[axis] -= h
        num = (sh.sh_basis(dp) - sh.sh_basis(dm)) / (2 * h)
        np.testing.assert_allclose(g[:, axis], num, atol=1e-8)


def test_rgb_dc_round_trip():
    rgb = np.array([[0.3, 0.8, 0.55]])
    np.testing.assert_allclose(sh.dc_to_rgb(sh.rgb_to_dc(rgb)), rgb, atol=1e-12)
