"""Energy terms of the dense registration model and their analytic gradients.

All gradients are taken with respect to the optimised control coefficients
``t.coeffs``; since the reference is a constant offset this equals the
gradient with respect to the full coefficients for every term but the
curvature penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ._kernels import vcc_cells
from .image import TrilinearField, gradient, smooth_gaussian
from .transform import PointSampler


@dataclass
class ObjectiveConfig:
    """Weights of ``D + alpha R + beta B + gamma V + delta K``.

    ``beta`` and ``delta`` are normally set by :func:`adapt_weights`.
    """

    alpha: float = 2.0
    beta: float = 0.0
    gamma: float = 1e-3
    delta: float = 0.0
    eta: float = 12.0

    def __post_init__(self):
        if self.alpha <= 0 or self.eta <= 0:
            raise ValueError("alpha and eta must be positive")
        if self.gamma < 0 or self.beta < 0 or self.delta < 0:
            raise ValueError("beta, gamma and delta must be non-negative")


@dataclass
class TermValue:
    value: float
    gradient: np.ndarray
    parts: dict = field(default_factory=dict)


# -- normalised gradient fields ----------------------------------------------

def ngf_residual(f, g, eta):
    """Pointwise ``1 - <g, f>_eta^2 / (||g||_eta^2 ||f||_eta^2)`` for (..., 3) arrays."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    e2 = eta * eta
    a = e2 + np.sum(f * g, axis=-1)
    b = e2 + np.sum(g * g, axis=-1)
    c = e2 + np.sum(f * f, axis=-1)
    return 1.0 - a * a / (b * c)


def normalized_gradient(grad, eta):
    """Unit 4-vectors ``(grad, eta) / sqrt(|grad|^2 + eta^2)``; their squared dot is ``1 - residual``."""
    g = np.asarray(grad, dtype=float)
    n = np.concatenate([g, np.full(g.shape[:-1] + (1,), float(eta))], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


class NGFTerm:
    """NGF distance over the fixed-mask voxels for a fixed control grid.

    Moving gradients are precomputed once and sampled trilinearly at y(x);
    the chain rule runs through the exact derivative of that interpolant.
    """

    def __init__(self, fixed, moving, t, mask, eta):
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.eta = float(eta)
        sel = np.asarray(mask.values) != 0 if mask is not None else np.ones(fixed.dims, bool)
        self.grad_fixed = gradient(fixed).values[sel]
        self.grad_moving = TrilinearField(gradient(moving))
        self.sampler = PointSampler(t, fixed.voxel_centers(sel))
        self.weight = fixed.voxel_volume

    def __call__(self, total):
        y = self.sampler.evaluate(total)
        g, dg = self.grad_moving(y, derivative=True)  # (n,3), (n,3,3)
        f = self.grad_fixed
        e2 = self.eta ** 2
        a = e2 + np.sum(f * g, axis=1)
        b = e2 + np.sum(g * g, axis=1)
        c = e2 + np.sum(f * f, axis=1)
        value = self.weight * float(np.sum(1.0 - a * a / (b * c)))
        dr_dg = -(2.0 * a / (b * c))[:, None] * (f - (a / b)[:, None] * g)
        dr_dy = np.einsum("ni,nij->nj", dr_dg, dg)
        return value, self.sampler.scatter(self.weight * dr_dy)


def ngf_distance(F, M, t, mask, eta):
    """Discretised NGF distance between ``F`` and ``M`` warped by ``t``."""
    value, grad = NGFTerm(F, M, t, mask, eta)(t.total)
    return TermValue(value, grad)


# -- curvature ------------------------------------------------------------------

def _second_difference(u, axis, h):
    """Per-axis second difference, zero on the first and last node of that axis."""
    out = np.zeros_like(u)
    n = u.shape[axis]
    if n < 3:
        return out
    sl = [slice(None)] * u.ndim
    lo, mid, hi = list(sl), list(sl), list(sl)
    lo[axis], mid[axis], hi[axis] = slice(0, n - 2), slice(1, n - 1), slice(2, n)
    out[tuple(mid)] = (u[tuple(lo)] - 2.0 * u[tuple(mid)] + u[tuple(hi)]) / (h * h)
    return out


def _second_difference_adjoint(v, axis, h):
    n = v.shape[axis]
    out = np.zeros_like(v)
    if n < 3:
        return out
    sl = [slice(None)] * v.ndim
    mid = list(sl)
    mid[axis] = slice(1, n - 1)
    inner = v[tuple(mid)] / (h * h)
    lo, hi, ct = list(sl), list(sl), list(sl)
    lo[axis], ct[axis], hi[axis] = slice(0, n - 2), slice(1, n - 1), slice(2, n)
    out[tuple(lo)] += inner
    out[tuple(ct)] -= 2.0 * inner
    out[tuple(hi)] += inner
    return out


def laplacian(u, spacing):
    """7-point Laplacian of each component of a (gx, gy, gz, ...) array.

    The second difference along an axis is dropped at the two end nodes of
    that axis, which keeps every affine field in the null space.
    """
    return sum(_second_difference(u, a, spacing[a]) for a in range(3))


def laplacian_adjoint(v, spacing):
    return sum(_second_difference_adjoint(v, a, spacing[a]) for a in range(3))


def laplacian_matrix(grid_dims, spacing):
    """Sparse matrix of :func:`laplacian` acting on C-ordered scalar grid values."""
    mats = []
    for n, h in zip(grid_dims, spacing):
        d2 = sparse.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="lil")
        d2[0, :] = 0.0
        d2[n - 1, :] = 0.0
        mats.append(sparse.csr_matrix(d2) / (h * h))
    eye = [sparse.identity(n, format="csr") for n in grid_dims]
    return (sparse.kron(sparse.kron(mats[0], eye[1]), eye[2])
            + sparse.kron(sparse.kron(eye[0], mats[1]), eye[2])
            + sparse.kron(sparse.kron(eye[0], eye[1]), mats[2])).tocsr()


class CurvatureOperator:
    """Hessian of ``weight * R``: ``weight * C * L^T L`` applied matrix-free."""

    def __init__(self, spacing, weight=1.0):
        self.spacing = tuple(float(s) for s in spacing)
        self.scale = float(weight) * float(np.prod(self.spacing))

    def __call__(self, u):
        return self.scale * laplacian_adjoint(laplacian(u, self.spacing), self.spacing)


def curvature(t):
    """``R = 1/2 sum_j ||Lap(c_j)||^2 * cell volume`` on the control grid, c = coeffs."""
    lap = laplacian(t.coeffs, t.spacing)
    vol = t.cell_volume
    value = 0.5 * vol * float(np.sum(lap * lap))
    return TermValue(value, vol * laplacian_adjoint(lap, t.spacing))


# -- lung boundary --------------------------------------------------------------

class BoundaryTerm:
    """Mask SSD ``1/2 sum_x (b_M(y(x)) - b_F(x))^2`` over all fixed voxels.

    ``b_M`` is smoothed with sigma = 1 voxel so the term has a useful gradient.
    ``b_F`` gets the same blur; otherwise identical masks would not make the
    identity a stationary point and the rim would pull the outline inwards.
    """

    def __init__(self, fixed_mask, moving_mask, t, smooth=True):
        fixed = fixed_mask.with_values((np.asarray(fixed_mask.values) != 0).astype(float))
        moving = moving_mask.with_values((np.asarray(moving_mask.values) != 0).astype(float))
        if smooth:
            fixed = smooth_gaussian(fixed, np.asarray(fixed.spacing))
            moving = smooth_gaussian(moving, np.asarray(moving.spacing))
        self.target = np.asarray(fixed.values, dtype=float).ravel()
        self.moving = TrilinearField(moving)
        self.sampler = PointSampler(t, fixed_mask.voxel_centers())
        self.weight = fixed_mask.voxel_volume

    def __call__(self, total):
        y = self.sampler.evaluate(total)
        m, dm = self.moving(y, derivative=True)
        r = m - self.target
        value = 0.5 * self.weight * float(np.sum(r * r))
        return value, self.sampler.scatter(self.weight * r[:, None] * dm)


def boundary_term(b_F, b_M, t):
    value, grad = BoundaryTerm(b_F, b_M, t)(t.total)
    return TermValue(value, grad)


# -- volume change control -------------------------------------------------------

def psi(t):
    """``(t - 1)^2 / t`` for t > 0, ``+inf`` otherwise."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(t > 0, (t - 1.0) ** 2 / np.where(t > 0, t, 1.0), np.inf)
    return out if out.ndim else float(out)


def psi_prime(t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(t > 0, 1.0 - 1.0 / np.where(t > 0, t, 1.0) ** 2, np.nan)
    return out if out.ndim else float(out)


def vcc(t):
    """Upper bound ``C sum_i sum_l psi(d_il)`` of the volume change penalty.

    Returns ``+inf`` (with a zero gradient) when any ``d_il <= 0``.
    """
    T = np.ascontiguousarray(t.total, dtype=float)
    grad = np.zeros_like(T)
    value, _ = vcc_cells(T, np.asarray(t.spacing, dtype=float), grad)
    if not np.isfinite(value):
        return TermValue(np.inf, np.zeros_like(T))
    C = t.cell_volume
    return TermValue(C * value, C * grad)


# -- keypoint penalty -----------------------------------------------------------

class KeypointTerm:
    """``sum_i ||y(x_i) - target_i||^2`` over sparse correspondences."""

    def __init__(self, sources, targets, t):
        self.sampler = PointSampler(t, sources)
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float))

    def __call__(self, total):
        r = self.sampler.evaluate(total) - self.targets
        return float(np.sum(r * r)), self.sampler.scatter(2.0 * r)


def keypoint_penalty(t, corr):
    value, grad = KeypointTerm(corr.sources, corr.targets, t)(t.total)
    return TermValue(value, grad)


# -- weights and the full model -------------------------------------------------

def adapt_weights(D0, B0, K0, eps=1e-12):
    """Balance data terms at the start: ``D0 = delta K0`` and ``D0 = 100 beta B0``."""
    delta = D0 / K0 if K0 >= eps else 0.0
    beta = D0 / (100.0 * B0) if B0 >= eps else 0.0
    return beta, delta


@dataclass
class ObjectiveInputs:
    """Prepared terms for one control grid. Absent terms contribute nothing."""

    ngf: NGFTerm | None = None
    boundary: BoundaryTerm | None = None
    keypoints: KeypointTerm | None = None

    @classmethod
    def build(cls, t, eta, fixed=None, moving=None, fixed_mask=None, moving_mask=None,
              sources=None, targets=None):
        ngf = NGFTerm(fixed, moving, t, fixed_mask, eta) if fixed is not None else None
        bnd = None
        if fixed_mask is not None and moving_mask is not None:
            bnd = BoundaryTerm(fixed_mask, moving_mask, t)
        kp = KeypointTerm(sources, targets, t) if sources is not None and len(sources) else None
        return cls(ngf, bnd, kp)


def full_objective(t, config, inputs):
    """``J = D + alpha R + beta B + gamma V + delta K`` with its gradient.

    Terms with zero weight (or no prepared input) are skipped entirely; in
    particular ``gamma = 0`` switches the fold barrier off.
    """
    T = t.total
    grad = np.zeros_like(T)
    parts = {}
    value = 0.0
    if inputs.ngf is not None:
        v, g = inputs.ngf(T)
        parts["D"] = v
        value += v
        grad += g
    r = curvature(t)
    parts["R"] = r.value
    value += config.alpha * r.value
    grad += config.alpha * r.gradient
    if inputs.boundary is not None and config.beta > 0:
        v, g = inputs.boundary(T)
        parts["B"] = v
        value += config.beta * v
        grad += config.beta * g
    if config.gamma > 0:
        vc = vcc(t)
        parts["V"] = vc.value
        if not np.isfinite(vc.value):
            return TermValue(np.inf, grad, parts)
        value += config.gamma * vc.value
        grad += config.gamma * vc.gradient
    if inputs.keypoints is not None and config.delta > 0:
        v, g = inputs.keypoints(T)
        parts["K"] = v
        value += config.delta * v
        grad += config.delta * g
    return TermValue(value, grad, parts)
