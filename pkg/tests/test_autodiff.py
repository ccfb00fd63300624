import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenes import front_camera, orbit_cameras, random_gaussians
from splatlm.autodiff import Linearization, gn_apply, jtj_diag, jvp, vjp
from splatlm.core import SH_C0, GaussianSet, logit
from splatlm.sampling import SamplePlan, SampleView, build_sample_plan, full_plan


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(0)
    gs = random_gaussians(4, rng)
    cams = orbit_cameras(2, width=32)
    plan = build_sample_plan(cams, 32, "uniform", np.random.default_rng(1))
    gt = [rng.random((32, 32, 3)) for _ in cams]
    return gs, cams, plan, gt, Linearization(gs, cams, plan)


def explicit_jacobian(lin):
    return np.stack([lin.jvp(e) for e in np.eye(lin.num_params)], axis=1)


def single_pixel_setup():
    gs = GaussianSet(
        means=[[0.05, -0.03, 0.0]], log_scales=[[np.log(0.3), np.log(0.2), np.log(0.25)]],
        rotations=[[0.9, 0.1, -0.2, 0.3]], opacity_logits=[[logit(0.7)]], colors=[[0.4, -0.2, 0.9]],
    )
    cam = front_camera(16)
    plan = SamplePlan([SampleView(0, [[9, 7]], [1.0], [0])], 32, "uniform")
    return gs, cam, plan


def test_jvp_zero_tangent(small):
    _, _, _, _, lin = small
    assert not lin.jvp(np.zeros(lin.num_params)).any()


def test_jvp_color_coefficient_closed_form():
    gs, cam, plan = single_pixel_setup()
    lin = Linearization(gs, [cam], plan)
    sp = lin.splats[0]
    dx, dy = sp.mean_x[0] - 9.5, sp.mean_y[0] - 7.5
    alpha = 0.7 * np.exp(-0.5 * (sp.conic_a[0] * dx**2 + sp.conic_c[0] * dy**2) - sp.conic_b[0] * dx * dy)
    e = np.zeros(14)
    e[12] = 1.0
    assert np.allclose(lin.jvp(e), [0.0, alpha * SH_C0, 0.0], rtol=1e-14, atol=0)


def test_vjp_single_pixel_closed_form():
    gs, cam, plan = single_pixel_setup()
    lin = Linearization(gs, [cam], plan)
    g = lin.vjp(np.ones(3))
    alpha = lin.rendered[0, 0] / (0.5 + SH_C0 * 0.4)
    color = 0.5 + SH_C0 * gs.colors[0]
    # one term: rgb = o * falloff * color, T = 1
    assert np.allclose(g[11:14], alpha * SH_C0, rtol=1e-13)
    assert np.isclose(g[10], alpha * (1 - 0.7) * color.sum(), rtol=1e-12)
    eps = 1e-6
    for k in range(10):
        d = np.zeros(14)
        d[k] = eps
        fd = (Linearization(GaussianSet.from_vector(gs.to_vector() + d), [cam], plan).rendered.sum()
              - Linearization(GaussianSet.from_vector(gs.to_vector() - d), [cam], plan).rendered.sum()) / (2 * eps)
        assert np.isclose(g[k], fd, rtol=1e-6, atol=1e-10)


def test_jvp_matches_central_differences(small):
    gs, cams, plan, gt, lin = small
    rng = np.random.default_rng(2)
    eps = 1e-6
    for _ in range(5):
        v = rng.normal(size=lin.num_params)
        base = gs.to_vector()
        plus = Linearization(GaussianSet.from_vector(base + eps * v), cams, plan).residuals(gt)
        minus = Linearization(GaussianSet.from_vector(base - eps * v), cams, plan).residuals(gt)
        fd = (plus - minus) / (2 * eps)
        jv = lin.jvp(v)
        assert np.linalg.norm(fd - jv) <= 1e-5 * np.linalg.norm(jv)


def test_vjp_zero_and_length_check(small):
    _, _, _, _, lin = small
    assert not lin.vjp(np.zeros(lin.num_residuals)).any()
    with pytest.raises(ValueError):
        lin.vjp(np.zeros(lin.num_residuals + 1))
    with pytest.raises(ValueError):
        lin.jvp(np.zeros(3))


def test_adjoint_identity(small):
    _, _, _, _, lin = small
    rng = np.random.default_rng(3)
    for _ in range(30):
        v, u = rng.normal(size=lin.num_params), rng.normal(size=lin.num_residuals)
        a, b = lin.jvp(v) @ u, v @ lin.vjp(u)
        assert abs(a - b) <= 1e-10 * abs(a)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_jvp_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    gs = random_gaussians(3, np.random.default_rng(7))
    lin = Linearization(gs, [front_camera(16)], full_plan([front_camera(16)]))
    v1, v2 = rng.normal(size=42), rng.normal(size=42)
    lhs = lin.jvp(a * v1 + b * v2)
    rhs = a * lin.jvp(v1) + b * lin.jvp(v2)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(rhs).max()))


def test_jtj_diag_matches_explicit_jacobian(small):
    _, _, _, _, lin = small
    jac = explicit_jacobian(lin)
    w = np.repeat(lin.weights, 3)
    want = (w[:, None] * jac**2).sum(axis=0)
    got = lin.jtj_diag()
    assert np.all(got >= 0)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12 * want.max())


def test_jtj_diag_with_residual_scale(small):
    _, _, _, _, lin = small
    jac = explicit_jacobian(lin)
    scale = np.random.default_rng(4).uniform(0.5, 2.0, lin.num_residuals)
    want = ((np.repeat(lin.weights, 3) * scale)[:, None] * jac**2).sum(axis=0)
    assert np.allclose(lin.jtj_diag(scale), want, rtol=1e-10, atol=1e-12 * want.max())


def test_jtj_diag_empty_plan():
    gs = random_gaussians(3, np.random.default_rng(5))
    out = jtj_diag(gs, [front_camera(16)], SamplePlan([], 32, "uniform"))
    assert out.shape == (42,) and not out.any()


def test_gn_apply_matches_dense(small):
    _, _, _, _, lin = small
    jac = explicit_jacobian(lin)
    w = np.repeat(lin.weights, 3)
    rng = np.random.default_rng(6)
    for lam in (0.0, 0.1, 10.0):
        p = rng.normal(size=lin.num_params)
        want = jac.T @ (w * (jac @ p)) + lam * p
        assert np.allclose(lin.gn_apply(p, lam), want, rtol=1e-10, atol=1e-10 * np.abs(want).max())


def test_gn_apply_psd_and_symmetric(small):
    _, _, _, _, lin = small
    rng = np.random.default_rng(8)
    lam = 0.1
    assert not lin.gn_apply(np.zeros(lin.num_params), lam).any()
    for _ in range(10):
        p1, p2 = rng.normal(size=lin.num_params), rng.normal(size=lin.num_params)
        assert p1 @ lin.gn_apply(p1, lam) >= lam * (p1 @ p1) * (1 - 1e-12)
        a, b = p1 @ lin.gn_apply(p2, lam), p2 @ lin.gn_apply(p1, lam)
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)


def test_sampled_loss_gradient_matches_finite_differences(small):
    gs, cams, plan, gt, lin = small
    w = lin.weights[:, None]

    def loss(vec):
        r = Linearization(GaussianSet.from_vector(vec), cams, plan).residuals(gt).reshape(-1, 3)
        return float(np.sum(w * r**2))

    grad = lin.vjp(2 * w * lin.residuals(gt).reshape(-1, 3))
    rng = np.random.default_rng(9)
    eps = 1e-6
    for _ in range(5):
        d = rng.normal(size=lin.num_params)
        fd = (loss(gs.to_vector() + eps * d) - loss(gs.to_vector() - eps * d)) / (2 * eps)
        assert abs(fd - grad @ d) <= 1e-4 * abs(fd)


def test_function_wrappers_agree(small):
    gs, cams, plan, _, lin = small
    rng = np.random.default_rng(10)
    v, u = rng.normal(size=lin.num_params), rng.normal(size=lin.num_residuals)
    assert np.array_equal(jvp(gs, cams, plan, v), lin.jvp(v))
    assert np.array_equal(vjp(gs, cams, plan, u), lin.vjp(u))
    assert np.array_equal(gn_apply(gs, cams, plan, 0.5, v), lin.gn_apply(v, 0.5))
    with pytest.raises(ValueError):
        gn_apply(gs, cams, plan, -1.0, v)


def test_culled_gaussian_has_zero_derivatives():
    gs = random_gaussians(3, np.random.default_rng(11))
    rows = gs.to_matrix()
    rows[1, :3] = [0.0, 0.0, -10.0]  # behind the camera
    cam = front_camera(16)
    lin = Linearization(GaussianSet.from_matrix(rows), [cam], full_plan([cam]))
    g = lin.vjp(np.ones(lin.num_residuals)).reshape(3, 14)
    assert not g[1].any()
    assert not lin.jtj_diag().reshape(3, 14)[1].any()
