"""L-BFGS with a curvature metric, the multilevel driver and mask pre-registration."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import FoldError, ValidationError
from .image import Image3D, downsample, level_spacings, smooth_gaussian, trilinear_sample
from .objective import ObjectiveConfig, laplacian_matrix, ObjectiveInputs, adapt_weights, full_objective
from .transform import (BSplineTransform, affine_coefficients, min_jacobian_term, prolong,
                        resample_displacement)

log = logging.getLogger(__name__)


# -- metric ---------------------------------------------------------------------

class InverseMetric:
    """Applies ``(weight * R + tau I)^-1`` by conjugate gradients on the assembled sparse matrix.

    ``R`` is the Hessian of the curvature penalty on a control grid with the
    given spacing.
    """

    def __init__(self, grid_shape, spacing, tau=10.0, weight=1.0, rtol=1e-8, maxiter=200):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.shape = tuple(grid_shape)
        self.tau = float(tau)
        self.rtol = rtol
        self.maxiter = maxiter
        L = laplacian_matrix(self.shape[:3], spacing)
        A = (float(weight) * float(np.prod(spacing))) * (L.T @ L).tocsr()
        A = (A + self.tau * sparse.identity(A.shape[0], format="csr")).tocsr()
        nc = int(np.prod(self.shape[3:]))
        n = A.shape[0] * nc

        def matvec(v):
            return (A @ v.reshape(-1, nc)).ravel()

        self.operator = LinearOperator((n, n), matvec=matvec, dtype=float)

    def __call__(self, g):
        g = np.asarray(g, dtype=float)
        b = g.ravel()
        if not np.any(b):
            return np.zeros_like(g)
        p, info = cg(self.operator, b, x0=b / self.tau, rtol=self.rtol, atol=0.0, maxiter=self.maxiter)
        if info != 0:
            log.warning("metric CG stopped without reaching tolerance (info=%d)", info)
        return p.reshape(g.shape)


def apply_inverse_metric(g, spacing, tau=10.0, weight=1.0):
    """Solve ``(weight R + tau I) p = g`` for a coefficient-shaped gradient ``g``."""
    g = np.asarray(g, dtype=float)
    return InverseMetric(g.shape, spacing, tau, weight)(g)


# -- L-BFGS -------------------------------------------------------------------------

@dataclass
class LbfgsOptions:
    memory: int = 5
    c1: float = 1e-4
    gtol: float = 1e-3
    xtol: float = 1e-5
    max_iter: int = 100
    max_backtracks: int = 40


@dataclass
class LbfgsState:
    """Iteration record: curvature pairs, counters and the objective trace."""

    pairs: deque = field(default_factory=lambda: deque(maxlen=5))
    iterations: int = 0
    evaluations: int = 0
    rejected: int = 0
    values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    reason: str = ""


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    state: LbfgsState

    @property
    def iterations(self):
        return self.state.iterations


def _two_loop(g, pairs, h0):
    q = g.ravel().copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    r = h0(q)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ r)
        r += (a - b) * s
    return r


def lbfgs_minimize(fun, x0, metric=None, options=None, callback=None):
    """Minimise ``fun(x) -> (value, grad)`` by L-BFGS with Armijo backtracking.

    Parameters
    ----------
    fun : callable
        Returns the objective and its gradient (same shape as ``x``). An
        infinite value marks an infeasible point and rejects the trial step.
    x0 : ndarray
    metric : callable, optional
        Initial inverse Hessian ``g -> H0 g``. Without it the usual scaled
        identity ``(s'y / y'y) I`` is used.
    options : LbfgsOptions
    callback : callable, optional
        Called as ``callback(iteration, value, x)`` after every accepted step.

    Returns
    -------
    LbfgsResult
        Stops when ``||g|| / ||g0|| < gtol``, when the accepted step has
        max-norm below ``xtol``, after ``max_iter`` iterations, or when the
        line search cannot decrease the objective.
    """
    opt = options or LbfgsOptions()
    state = LbfgsState(pairs=deque(maxlen=opt.memory))
    shape = np.shape(x0)
    x = np.array(x0, dtype=float).ravel()
    f, g = fun(x.reshape(shape))
    state.evaluations += 1
    if not np.isfinite(f):
        raise FoldError("objective is infinite at the starting point")
    g = np.asarray(g, dtype=float).ravel()
    g0 = np.linalg.norm(g)
    state.values.append(float(f))
    state.grad_norms.append(float(g0))
    if g0 == 0.0:
        state.reason = "stationary start"
        return LbfgsResult(x.reshape(shape), float(f), g.reshape(shape), state)

    gamma = [None]

    def h0(v):
        if metric is not None:
            return np.asarray(metric(v.reshape(shape)), dtype=float).ravel()
        if gamma[0] is None:
            return v / max(np.abs(v).max(), 1e-300)
        return gamma[0] * v

    while state.iterations < opt.max_iter:
        p = -_two_loop(g, state.pairs, h0)
        slope = g @ p
        if not slope < 0:
            state.pairs.clear()
            p = -h0(g)
            slope = g @ p
            if not slope < 0:
                state.reason = "no descent direction"
                break
        step = 1.0
        accepted = False
        for _ in range(opt.max_backtracks):
            xt = x + step * p
            ft, gt = fun(xt.reshape(shape))
            state.evaluations += 1
            if np.isfinite(ft) and ft <= f + opt.c1 * step * slope:
                accepted = True
                break
            state.rejected += 1
            step *= 0.5
        if not accepted:
            state.reason = "line search failed"
            break
        gt = np.asarray(gt, dtype=float).ravel()
        s = xt - x
        yv = gt - g
        sy = s @ yv
        if sy > 0:
            state.pairs.append((s, yv, 1.0 / sy))
            gamma[0] = sy / (yv @ yv)
        x, f, g = xt, float(ft), gt
        state.steps.append(step)
        state.iterations += 1
        state.values.append(f)
        gn = float(np.linalg.norm(g))
        state.grad_norms.append(gn)
        if callback is not None:
            callback(state.iterations, f, x.reshape(shape))
        if gn / g0 < opt.gtol:
            state.reason = "gradient reduced"
            break
        if np.abs(s).max() < opt.xtol:
            state.reason = "step small"
            break
    else:
        state.reason = "iteration limit"
    return LbfgsResult(x.reshape(shape), f, g.reshape(shape), state)


# -- multilevel ------------------------------------------------------------------

@dataclass
class LevelSchedule:
    """Image spacing and control-grid cells per level, finest first."""

    spacings: list
    cells: list

    @classmethod
    def create(cls, spacing, finest_cells=128, n_levels=4):
        fc = np.broadcast_to(np.asarray(finest_cells, dtype=int), (3,))
        cells = [tuple(int(c) for c in np.maximum(fc // 2 ** lvl, 1)) for lvl in range(n_levels)]
        return cls(level_spacings(spacing, n_levels), cells)

    @property
    def n_levels(self):
        return len(self.cells)


@dataclass
class LevelRecord:
    level: int
    spacing: tuple
    cells: tuple
    iterations: int
    evaluations: int
    reason: str
    start: dict
    end: dict
    seconds: float
    min_jacobian_term: float
    values: list


@dataclass
class MultilevelResult:
    transform: BSplineTransform
    config: ObjectiveConfig
    levels: list

    @property
    def accepted_values(self):
        return [v for rec in self.levels for v in rec.values]


def _level_images(img, spacing, mask=False):
    if img is None:
        return None
    if np.allclose(img.spacing, spacing):
        return img
    return downsample(img, spacing, mask=mask)


def run_multilevel(F, M, fixed_mask, moving_mask, config=None, schedule=None, prereg=None,
                   sources=None, targets=None, use_ngf=True, adapt=True,
                   boundary_multiplier=1.0, tau=10.0, options=None, levels=None,
                   callback=None, check_folds=True):
    """Coarse-to-fine minimisation of ``D + alpha R + beta B + gamma V + delta K``.

    Parameters
    ----------
    F, M : Image3D
        Fixed and moving images (``F`` may be None when ``use_ngf`` is False).
    fixed_mask, moving_mask : Image3D
    config : ObjectiveConfig
        ``beta`` and ``delta`` are replaced by adapted values when ``adapt``.
    schedule : LevelSchedule
    prereg : BSplineTransform, optional
        Pre-registration; used as curvature reference and starting point.
    sources, targets : (n, 3) arrays, optional
        Keypoint correspondences (fixed frame to moving frame).
    adapt : bool
        Balance ``beta`` and ``delta`` once on the coarsest level.
    levels : sequence of int, optional
        Subset of level indices to run (default all, coarsest first).
    callback : callable, optional
        ``callback(level, iteration, value, parts)`` after accepted steps.

    Returns
    -------
    MultilevelResult
    """
    config = config or ObjectiveConfig()
    grid_img = F if F is not None else fixed_mask
    schedule = schedule or LevelSchedule.create(grid_img.spacing)
    options = options or LbfgsOptions()
    run = sorted(range(schedule.n_levels) if levels is None else levels, reverse=True)
    cfg = ObjectiveConfig(config.alpha, config.beta, config.gamma, config.delta, config.eta)
    base = BSplineTransform.for_image(grid_img, schedule.cells[run[0]])
    t = None
    records = []
    for n_run, lvl in enumerate(run):
        t0 = time.perf_counter()
        sp = schedule.spacings[lvl]
        dims = tuple(c + 1 for c in schedule.cells[lvl])
        shell = BSplineTransform.zeros(base.origin, base.extent, dims)
        ref = resample_displacement(prereg, shell) if prereg is not None else np.zeros(dims + (3,))
        if t is None:
            t = BSplineTransform(base.origin, base.extent, np.zeros(dims + (3,)), ref)
        else:
            fine = prolong(t, dims)
            t = BSplineTransform(base.origin, base.extent, fine.total - ref, ref)
        Fl = _level_images(F, sp) if use_ngf else None
        Ml = _level_images(M, sp) if use_ngf else None
        bF = _level_images(fixed_mask, sp, mask=True)
        bM = _level_images(moving_mask, sp, mask=True)
        inputs = ObjectiveInputs.build(t, cfg.eta, Fl, Ml, bF, bM, sources, targets)
        if n_run == 0 and adapt:
            D0 = inputs.ngf(t.total)[0] if inputs.ngf is not None else 0.0
            B0 = inputs.boundary(t.total)[0] if inputs.boundary is not None else 0.0
            K0 = inputs.keypoints(t.total)[0] if inputs.keypoints is not None else 0.0
            beta, delta = adapt_weights(D0, B0, K0)
            cfg = ObjectiveConfig(cfg.alpha, beta * boundary_multiplier, cfg.gamma,
                                  delta if inputs.keypoints is not None else 0.0, cfg.eta)
            log.info("adapted weights: beta=%.4g delta=%.4g (D0=%.4g B0=%.4g K0=%.4g)",
                     cfg.beta, cfg.delta, D0, B0, K0)

        last_parts = {}

        def fun(c, _t=t, _inputs=inputs):
            tv = full_objective(_t.with_coeffs(c), cfg, _inputs)
            last_parts["parts"] = tv.parts
            return tv.value, tv.gradient

        start = full_objective(t, cfg, inputs)
        if not np.isfinite(start.value):
            raise FoldError(f"starting transform folds on level {lvl}")
        metric = InverseMetric(t.coeffs.shape, t.spacing, tau, cfg.alpha)
        values = []

        def cb(it, val, x, _lvl=lvl):
            if check_folds and not np.isfinite(val):
                raise FoldError("accepted an infeasible iterate")
            values.append(val)
            if callback is not None:
                callback(_lvl, it, val, dict(last_parts.get("parts", {})))

        res = lbfgs_minimize(fun, t.coeffs, metric, options, cb)
        t = t.with_coeffs(res.x)
        end = full_objective(t, cfg, inputs)
        mj = min_jacobian_term(t)
        if check_folds and cfg.gamma > 0 and not mj > 0:
            raise FoldError(f"level {lvl} produced a folding transform")
        records.append(LevelRecord(lvl, tuple(sp), schedule.cells[lvl], res.iterations,
                                   res.state.evaluations, res.state.reason,
                                   {"J": start.value, **start.parts}, {"J": end.value, **end.parts},
                                   time.perf_counter() - t0, mj, values))
        log.info("level %d: %d iterations (%s), J %.5g -> %.5g", lvl, res.iterations,
                 res.state.reason, start.value, end.value)
    return MultilevelResult(t, cfg, records)


# -- pre-registration ---------------------------------------------------------------

@dataclass(frozen=True)
class AffineTransform:
    """``x -> matrix (x - center) + center + translation``."""

    matrix: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)):
        return cls(np.eye(3), np.zeros(3), np.asarray(center, dtype=float))

    def evaluate(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.center) @ np.asarray(self.matrix).T + self.center + self.translation

    def coefficients(self, target):
        return affine_coefficients(self.matrix, self.translation, self.center, target)


@dataclass
class PreRegistration:
    """Centroid translation, affine mask alignment and the deformable mask transform ``y_hat``."""

    translation: np.ndarray
    affine: AffineTransform
    transform: BSplineTransform
    levels: list = field(default_factory=list)

    def evaluate(self, points):
        return self.transform.evaluate(points)

    def warp(self, img, grid, mask=None):
        """``img(y_hat(x))`` on the voxel centres of ``grid``, zeroed outside ``mask``."""
        pts = grid.voxel_centers()
        vals = trilinear_sample(img, self.transform.evaluate(pts)).reshape(grid.dims)
        if mask is not None:
            vals = vals * (np.asarray(mask.values) != 0)
        return Image3D(vals, grid.spacing, grid.origin)


def mask_centroid(mask):
    sel = np.asarray(mask.values) != 0
    if not sel.any():
        raise ValidationError("mask is empty")
    return mask.voxel_centers(sel).mean(axis=0)


def _affine_stage(fixed_mask, moving_mask, theta0, c, L, spacing, smooth_voxels, options):
    sp = np.maximum(np.asarray(fixed_mask.spacing), spacing)
    bF = downsample(fixed_mask, sp, mask=True)
    bM = downsample(moving_mask, np.maximum(np.asarray(moving_mask.spacing), spacing), mask=True)
    f = smooth_gaussian(bF.with_values((np.asarray(bF.values) != 0).astype(float)), smooth_voxels * sp)
    m = smooth_gaussian(bM.with_values((np.asarray(bM.values) != 0).astype(float)),
                        smooth_voxels * np.asarray(bM.spacing))
    rel = f.voxel_centers() - c
    target = f.values.ravel()
    vol = f.voxel_volume

    def fun(theta):
        A = np.eye(3) + theta[:9].reshape(3, 3) / L
        y = rel @ A.T + c + theta[9:]
        v, dv = trilinear_sample(m, y, derivative=True)
        r = v - target
        gy = vol * r[:, None] * dv
        gA = gy.T @ rel
        return 0.5 * vol * float(r @ r), np.concatenate([(gA / L).ravel(), gy.sum(axis=0)])

    return lbfgs_minimize(fun, theta0, None, options).x


def affine_mask_registration(fixed_mask, moving_mask, translation, center,
                             stages=((8.0, 2.0), (4.0, 2.0)), options=None):
    """12-parameter affine alignment minimising the SSD of smoothed masks.

    The matrix is parameterised as ``I + P / L`` with ``L`` the RMS radius of
    the fixed mask, so matrix and translation updates act on comparable
    millimetre scales. ``stages`` lists (voxel size in mm, Gaussian sigma in
    voxels) from coarse to fine; each stage starts from the previous result.
    """
    c = np.asarray(center, dtype=float)
    sel = np.asarray(fixed_mask.values) != 0
    L = float(np.sqrt(np.mean(np.sum((fixed_mask.voxel_centers(sel) - mask_centroid(fixed_mask)) ** 2,
                                     axis=1)))) or 1.0
    theta = np.concatenate([np.zeros(9), np.asarray(translation, dtype=float)])
    opts = options or LbfgsOptions(memory=5, gtol=1e-6, xtol=1e-6, max_iter=200)
    for spacing, smooth in stages:
        theta = _affine_stage(fixed_mask, moving_mask, theta, c, L, spacing, smooth, opts)
    return AffineTransform(np.eye(3) + theta[:9].reshape(3, 3) / L, theta[9:].copy(), c)


def preregister(fixed_mask, moving_mask, config=None, schedule=None, deformable=True,
                tau=10.0, options=None, levels=None, callback=None):
    """Mask-driven pre-registration: centroids, affine SSD, then deformable mask matching.

    Returns a :class:`PreRegistration` whose ``transform`` is ``y_hat`` on the
    control grid of the finest level run.
    """
    c_f = mask_centroid(fixed_mask)
    c_m = mask_centroid(moving_mask)
    translation = c_m - c_f
    affine = affine_mask_registration(fixed_mask, moving_mask, translation, c_f)
    schedule = schedule or LevelSchedule.create(fixed_mask.spacing)
    run = list(range(schedule.n_levels)) if levels is None else list(levels)
    finest = min(run)
    shell = BSplineTransform.for_image(fixed_mask, schedule.cells[finest])
    yhat = BSplineTransform(shell.origin, shell.extent, affine.coefficients(shell))
    records = []
    if deformable:
        cfg = config or ObjectiveConfig()
        mask_cfg = ObjectiveConfig(cfg.alpha, 1.0, cfg.gamma, 0.0, cfg.eta)
        res = run_multilevel(None, None, fixed_mask, moving_mask, mask_cfg, schedule, yhat,
                             use_ngf=False, adapt=False, tau=tau, options=options, levels=run,
                             callback=callback)
        t = res.transform
        yhat = BSplineTransform(t.origin, t.extent, t.total)
        records = res.levels
    return PreRegistration(translation, affine, yhat, records)
