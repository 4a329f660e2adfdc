import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pulmoreg.errors import FoldError, ValidationError
from pulmoreg.image import Image3D
from pulmoreg.objective import ObjectiveConfig, ObjectiveInputs, full_objective, psi, psi_prime
from pulmoreg.optimize import (AffineTransform, InverseMetric, LbfgsOptions, LevelSchedule, affine_mask_registration,
                               apply_inverse_metric, lbfgs_minimize, mask_centroid, preregister, run_multilevel)
from pulmoreg.phantom import make_phantom
from pulmoreg.transform import BSplineTransform, min_jacobian_term, prolong

from conftest import dense_laplacian


# -- metric ---------------------------------------------------------------------

def test_metric_zero_and_constant():
    g = np.zeros((4, 4, 4, 3))
    assert_array_equal(apply_inverse_metric(g, (2.0, 2.0, 2.0), tau=10.0), 0.0)
    c = np.broadcast_to([1.0, -2.0, 3.0], (4, 5, 3, 3)).copy()
    assert_allclose(apply_inverse_metric(c, (1.0, 2.0, 3.0), tau=10.0), c / 10.0, atol=1e-12)


def test_metric_against_dense_oracle(rng):
    h = (2.0, 1.5, 3.0)
    L = dense_laplacian((4, 4, 4), h)
    A = 2.0 * np.prod(h) * L.T @ L + 10.0 * np.eye(64)
    g = rng.normal(size=(4, 4, 4, 3))
    p = apply_inverse_metric(g, h, tau=10.0, weight=2.0)
    res = A @ p.reshape(64, 3) - g.reshape(64, 3)
    assert np.linalg.norm(res) / np.linalg.norm(g) < 1e-8
    assert_allclose(p.reshape(64, 3), np.linalg.solve(A, g.reshape(64, 3)), rtol=1e-6, atol=1e-9)


def test_metric_symmetric_and_linear(rng):
    op = InverseMetric((5, 4, 4, 3), (1.0, 1.0, 2.0), tau=10.0, weight=2.0)
    g1, g2 = rng.normal(size=(2, 5, 4, 4, 3))
    assert np.sum(op(g1) * g2) == pytest.approx(np.sum(g1 * op(g2)), rel=1e-8)
    assert_allclose(op(2 * g1 - g2), 2 * op(g1) - op(g2), atol=1e-8)
    with pytest.raises(ValueError):
        InverseMetric((3, 3, 3, 3), (1, 1, 1), tau=0.0)


# -- L-BFGS -------------------------------------------------------------------------

def test_lbfgs_quadratic(rng):
    Q = rng.normal(size=(10, 10))
    A = Q @ Q.T + 10 * np.eye(10)
    b = rng.normal(size=10)
    fun = lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b)  # noqa: E731
    opts = LbfgsOptions(gtol=1e-12, xtol=0.0, max_iter=500)
    res = lbfgs_minimize(fun, np.zeros(10), options=opts)
    assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-6)
    assert all(a >= b for a, b in zip(res.state.values, res.state.values[1:]))
    assert len(res.state.pairs) <= 5


def test_lbfgs_stationary_start():
    x0 = np.array([1.0, -2.0])
    res = lbfgs_minimize(lambda x: (float(np.sum((x - x0) ** 2)), 2 * (x - x0)), x0)
    assert res.iterations == 0
    assert_array_equal(res.x, x0)


def test_lbfgs_barrier_keeps_feasible():
    seen = []

    def fun(x):
        t = 1.0 + x[0]
        v = psi(t) + (x[0] - 5.0) ** 2
        if not np.isfinite(v):
            return np.inf, np.zeros(1)
        return float(v), np.array([psi_prime(t) + 2 * (x[0] - 5.0)])

    # a huge first step would jump across the barrier; the line search must reject it
    res = lbfgs_minimize(fun, np.array([-0.5]), metric=lambda g: 50.0 * g,
                         options=LbfgsOptions(gtol=1e-10, xtol=1e-12, max_iter=200),
                         callback=lambda it, v, x: seen.append(x[0]))
    assert all(1.0 + x > 0 for x in seen)
    t = 1.0 + res.x[0]
    assert abs(psi_prime(t) + 2 * (res.x[0] - 5.0)) < 1e-6
    assert res.state.rejected > 0


def test_lbfgs_infinite_start():
    with pytest.raises(FoldError):
        lbfgs_minimize(lambda x: (np.inf, np.zeros_like(x)), np.zeros(3))


# -- multilevel ---------------------------------------------------------------------

def test_level_schedule():
    s = LevelSchedule.create((1.0, 1.0, 1.0))
    assert s.n_levels == 4
    assert s.cells == [(128, 128, 128), (64, 64, 64), (32, 32, 32), (16, 16, 16)]
    assert s.spacings[0] == (1.0, 1.0, 1.0)
    assert s.spacings[3] == (8.0, 8.0, 8.0)


def small_phantom(amplitude=0.0, seed=0):
    return make_phantom(seed=seed, size=32, spacing=4.0, warp_amplitude_mm=amplitude, n_landmarks=20)


def run_small(p, targets=None, sources=None, **kw):
    F = p.fixed.with_values(p.fixed.values.astype(float))
    M = p.moving.with_values(p.moving.values.astype(float))
    sched = LevelSchedule.create(F.spacing, finest_cells=8, n_levels=3)
    prereg = BSplineTransform.for_image(F, 8)
    return run_multilevel(F, M, p.fixed_mask, p.moving_mask, ObjectiveConfig(), sched, prereg,
                          sources=sources, targets=targets, **kw)


def test_multilevel_identity():
    p = small_phantom()
    F = p.fixed.with_values(p.fixed.values.astype(float))
    p.moving, p.moving_mask = F, p.fixed_mask
    pts = F.voxel_centers(p.fixed_mask.values != 0)[::50]
    res = run_small(p, sources=pts, targets=pts)
    disp = res.transform.displacement(F.voxel_centers(p.fixed_mask.values != 0))
    assert np.linalg.norm(disp, axis=1).mean() < 0.1


def test_multilevel_accepted_iterates_fold_free():
    p = small_phantom(amplitude=6.0)
    checked = []

    def cb(level, it, value, parts):
        checked.append(np.isfinite(value) and np.isfinite(parts.get("V", 0.0)))

    res = run_small(p, callback=cb)
    assert checked and all(checked)
    assert min_jacobian_term(res.transform) > 0
    for rec in res.levels:
        assert all(a >= b for a, b in zip(rec.values, rec.values[1:]))
        assert rec.min_jacobian_term > 0


def test_multilevel_deterministic():
    p = small_phantom(amplitude=4.0)
    a = run_small(p).transform
    b = run_small(p).transform
    assert_array_equal(a.coeffs, b.coeffs)


def test_prolongation_preserves_objective():
    # a coarse-level solution, then the same objective on the finest images
    p = small_phantom(amplitude=4.0)
    F = p.fixed.with_values(p.fixed.values.astype(float))
    M = p.moving.with_values(p.moving.values.astype(float))
    sched = LevelSchedule.create(F.spacing, finest_cells=8, n_levels=3)
    res = run_multilevel(F, M, p.fixed_mask, p.moving_mask, ObjectiveConfig(), sched, levels=[1, 2])
    coarse = res.transform
    fine = prolong(coarse, (9, 9, 9))
    Jc = full_objective(coarse, res.config, ObjectiveInputs.build(coarse, 12.0, F, M, p.fixed_mask, p.moving_mask))
    Jf = full_objective(fine, res.config, ObjectiveInputs.build(fine, 12.0, F, M, p.fixed_mask, p.moving_mask))
    # the represented function is unchanged, so the image terms agree exactly
    assert Jf.parts["D"] == pytest.approx(Jc.parts["D"], rel=1e-12)
    assert Jf.parts["B"] == pytest.approx(Jc.parts["B"], rel=1e-12)
    # curvature and the volume bound are grid dependent
    assert Jf.value == pytest.approx(Jc.value, rel=0.01)


# -- pre-registration -----------------------------------------------------------------

def ball(dims, center, radius, spacing=(2.0, 2.0, 2.0), scale=(1.0, 1.0, 1.0)):
    img = Image3D(np.zeros(dims, np.uint8), spacing)
    x = img.voxel_centers()
    q = (x - center) / (np.asarray(radius) * np.asarray(scale))
    return img.with_values((np.sum(q * q, axis=1) <= 1).reshape(dims).astype(np.uint8))


def egg(dims, center, spacing=(2.0, 2.0, 2.0), scale=1.0):
    """Asymmetric solid so the affine fit has a unique answer."""
    img = Image3D(np.zeros(dims, np.uint8), spacing)
    x = img.voxel_centers() - center
    r = np.array([14.0, 18.0, 22.0]) * scale
    q = x / r
    rho = 1.0 - 0.2 * q[:, 2] / np.maximum(np.linalg.norm(q, axis=1), 1e-9) + 0.1 * np.sign(q[:, 0]) * q[:, 1]
    inside = np.linalg.norm(q, axis=1) <= rho
    return img.with_values(inside.reshape(dims).astype(np.uint8))


def test_centroid_translation_exact():
    dims = (40, 40, 40)
    a = ball(dims, (36.0, 40.0, 38.0), 14.0)
    b = ball(dims, (46.0, 40.0, 38.0), 14.0)
    assert_allclose(mask_centroid(b) - mask_centroid(a), [10.0, 0.0, 0.0], atol=1e-12)


def test_identical_masks_give_identity():
    m = egg((36, 36, 36), (36.0, 36.0, 36.0))
    pre = preregister(m, m, schedule=LevelSchedule.create(m.spacing, finest_cells=8, n_levels=2))
    assert_allclose(pre.translation, 0.0, atol=1e-12)
    assert_allclose(pre.affine.matrix, np.eye(3), atol=1e-3)
    pts = m.voxel_centers(m.values != 0)
    # only b_M is smoothed, so the rim leaves a small residual force
    d = np.linalg.norm(pre.evaluate(pts) - pts, axis=1)
    assert d.mean() < 0.1
    assert d.max() < 0.5


def test_affine_recovers_scale():
    dims = (48, 48, 48)
    c = np.array([48.0, 48.0, 48.0])
    a = ball(dims, c, 24.0)
    b = ball(dims, c, 24.0, scale=(1.2, 1.2, 1.2))
    aff = affine_mask_registration(a, b, mask_centroid(b) - mask_centroid(a), mask_centroid(a))
    assert_allclose(np.diag(aff.matrix), 1.2, rtol=0.02)
    off = aff.matrix - np.diag(np.diag(aff.matrix))
    assert np.abs(off).max() < 0.03


def test_affine_transform_roundtrip(rng):
    A = AffineTransform(np.eye(3) + rng.normal(scale=0.1, size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
    shell = BSplineTransform.zeros((0, 0, 0), (10, 10, 10), (3, 3, 3))
    t = shell.with_coeffs(A.coefficients(shell))
    x = rng.uniform(0, 10, (10, 3))
    assert_allclose(t.evaluate(x), A.evaluate(x), atol=1e-12)


def test_empty_mask_rejected():
    m = Image3D(np.zeros((8, 8, 8), np.uint8))
    with pytest.raises(ValidationError):
        mask_centroid(m)
    with pytest.raises(ValidationError):
        preregister(m, m)
