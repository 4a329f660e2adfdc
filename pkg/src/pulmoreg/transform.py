"""First-order B-spline (piecewise trilinear) transformations.

A transform maps fixed-image points to moving-image points,

    y(x) = x + B(reference + coeffs)(x),

where ``B`` is trilinear interpolation of control-point displacements. The
``reference`` coefficients hold the pre-registration, so the curvature
penalty acts on ``coeffs`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import gather_points, scatter_points
from .image import Image3D

_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


@dataclass(frozen=True)
class BSplineTransform:
    """Displacement coefficients on a regular control grid.

    Parameters
    ----------
    origin : 3-tuple
        World position (mm) of control point ``(0, 0, 0)``.
    extent : 3-tuple
        Physical size (mm) of the control domain; control point ``j`` sits at
        ``origin + j * extent / (dims - 1)``.
    coeffs : ndarray, shape (gx, gy, gz, 3)
        Optimised displacement (mm).
    reference : ndarray or None
        Fixed displacement added to ``coeffs`` (the pre-registration).
    """

    origin: tuple
    extent: tuple
    coeffs: np.ndarray
    reference: np.ndarray | None = None

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.ndim != 4 or coeffs.shape[3] != 3 or min(coeffs.shape[:3]) < 2:
            raise ValueError(f"coefficients must have shape (gx, gy, gz, 3) with g >= 2, got {coeffs.shape}")
        if self.reference is not None:
            ref = np.asarray(self.reference, dtype=float)
            if ref.shape != coeffs.shape:
                raise ValueError("reference and coefficients must share a grid")
            object.__setattr__(self, "reference", ref)
        if min(self.extent) <= 0:
            raise ValueError("control domain extent must be positive")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    @classmethod
    def zeros(cls, origin, extent, dims, reference=None):
        return cls(origin, extent, np.zeros(tuple(dims) + (3,)), reference)

    @classmethod
    def for_image(cls, img, cells, reference=None):
        """Identity transform whose control domain spans the voxel centres of ``img``."""
        cells = np.broadcast_to(np.asarray(cells, dtype=int), (3,))
        extent = (np.asarray(img.dims) - 1) * np.asarray(img.spacing)
        return cls.zeros(img.origin, tuple(extent), tuple(cells + 1), reference)

    @property
    def grid_dims(self):
        return self.coeffs.shape[:3]

    @property
    def spacing(self):
        return tuple(np.asarray(self.extent) / (np.asarray(self.grid_dims) - 1))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def total(self):
        """Coefficients of the full displacement (reference included)."""
        if self.reference is None:
            return self.coeffs
        return self.reference + self.coeffs

    def with_coeffs(self, coeffs):
        return BSplineTransform(self.origin, self.extent, coeffs, self.reference)

    def control_points(self):
        idx = np.indices(self.grid_dims).reshape(3, -1).T
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def displacement(self, points):
        return PointSampler(self, points).displacement(self.total)

    def evaluate(self, points):
        """y(x) for world points of shape (n, 3)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts + self.displacement(pts)


def compose_displacement(outer, point):
    """Map a point through ``outer`` (used to carry keypoint targets back through the pre-registration)."""
    pts = np.asarray(point, dtype=float)
    out = outer.evaluate(np.atleast_2d(pts))
    return out[0] if pts.ndim == 1 else out


def identity_like(t):
    return BSplineTransform(t.origin, t.extent, np.zeros_like(t.coeffs))


def _grid_coords(t, points):
    """Cell index (clamped) and local coordinate in [0, 1] per point."""
    u = (np.asarray(points, dtype=float) - np.asarray(t.origin)) / np.asarray(t.spacing)
    g = np.asarray(t.grid_dims)
    cell = np.clip(np.floor(u).astype(np.int64), 0, g - 2)
    frac = np.clip(u - cell, 0.0, 1.0)
    inside = (u >= 0) & (u <= g - 1)
    return cell, frac, inside


class PointSampler:
    """Fixed trilinear weights of a point set on a control grid.

    Because ``y(x) = x + sum_c w_c(x) T_c`` with weights depending only on
    ``x``, precomputing them turns evaluation into a gather and gradient
    accumulation into a deterministic scatter.
    """

    def __init__(self, t, points):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))
        self.grid_dims = tuple(t.grid_dims)
        cell, frac, _ = _grid_coords(t, self.points)
        corner = cell[:, None, :] + _CORNERS[None, :, :]
        g = self.grid_dims
        self.index = np.ascontiguousarray((corner[..., 0] * g[1] + corner[..., 1]) * g[2] + corner[..., 2])
        w1 = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        self.weights = np.ascontiguousarray(w1.prod(axis=2))

    @property
    def n_coeffs(self):
        return int(np.prod(self.grid_dims))

    def displacement(self, total):
        flat = np.ascontiguousarray(np.asarray(total, dtype=float).reshape(-1, 3))
        out = np.empty((len(self.points), 3))
        gather_points(flat, self.index, self.weights, out)
        return out

    def evaluate(self, total):
        return self.points + self.displacement(total)

    def scatter(self, vectors):
        """Adjoint of :meth:`displacement`: accumulate per-point vectors onto control points."""
        vectors = np.ascontiguousarray(np.asarray(vectors, dtype=float))
        out = np.zeros((self.n_coeffs, 3))
        scatter_points(vectors, self.index, self.weights, out)
        return out.reshape(self.grid_dims + (3,))


# -- Jacobian machinery -------------------------------------------------------

def edge_vectors(total, spacing, cells=None):
    """Normalised edge differences of y across every cell.

    Returns ``(v0, v1, v2)`` where ``v_a`` has shape (cx, cy, cz, 2, 2, 3):
    the four edges of a cell along axis ``a`` (indexed by the corner offsets
    in the other two axes, in increasing axis order), each equal to
    ``e_a + (T[hi] - T[lo]) / h_a``. ``cells`` optionally restricts axis 0
    to a slice of cell indices.
    """
    T = np.asarray(total)
    h = np.asarray(spacing, dtype=float)
    if cells is not None:
        T = T[cells.start:cells.stop + 1]
    d0 = (T[1:] - T[:-1]) / h[0]
    d1 = (T[:, 1:] - T[:, :-1]) / h[1]
    d2 = (T[:, :, 1:] - T[:, :, :-1]) / h[2]
    d0 = d0.copy()
    d1 = d1.copy()
    d2 = d2.copy()
    d0[..., 0] += 1.0
    d1[..., 1] += 1.0
    d2[..., 2] += 1.0
    # axis-0 edges, indexed by (j, k) offsets
    v0 = np.stack([np.stack([d0[:, j:d0.shape[1] - 1 + j, k:d0.shape[2] - 1 + k] for k in (0, 1)], axis=-2)
                   for j in (0, 1)], axis=-3)
    v1 = np.stack([np.stack([d1[i:d1.shape[0] - 1 + i, :, k:d1.shape[2] - 1 + k] for k in (0, 1)], axis=-2)
                   for i in (0, 1)], axis=-3)
    v2 = np.stack([np.stack([d2[i:d2.shape[0] - 1 + i, j:d2.shape[1] - 1 + j, :] for j in (0, 1)], axis=-2)
                   for i in (0, 1)], axis=-3)
    return v0, v1, v2


def jacobian_terms_from_edges(v0, v1, v2):
    """The 64 determinants ``det[v0_e0, v1_e1, v2_e2]`` per cell, shape (..., 4, 4, 4)."""
    a = v0.reshape(v0.shape[:-3] + (4, 3))
    b = v1.reshape(v1.shape[:-3] + (4, 3))
    c = v2.reshape(v2.shape[:-3] + (4, 3))
    bc = np.cross(b[..., :, None, :], c[..., None, :, :])  # (..., 4, 4, 3)
    return np.einsum("...ax,...bcx->...abc", a, bc)


@dataclass(frozen=True)
class CellJacobianTerms:
    """The 64 local volume ratios ``d_l`` of one control cell."""

    cell_index: tuple
    d: np.ndarray

    @property
    def min(self):
        return float(self.d.min())

    @property
    def max(self):
        return float(self.d.max())


def cell_jacobian_terms(t, cell):
    """Bounding determinants of det(grad y) over one cell.

    Inside a cell, column ``a`` of grad y is a bilinear blend of the four
    edge differences of y along axis ``a``. Determinants are multilinear in
    the columns, so det(grad y) is a convex combination of the 64
    determinants formed by picking one edge per axis.
    """
    i, j, k = (int(c) for c in cell)
    g = t.grid_dims
    if not (0 <= i < g[0] - 1 and 0 <= j < g[1] - 1 and 0 <= k < g[2] - 1):
        raise IndexError(f"cell {cell} outside grid of {tuple(np.subtract(g, 1))} cells")
    sub = t.total[i:i + 2, j:j + 2, k:k + 2]
    v0, v1, v2 = edge_vectors(sub, t.spacing)
    d = jacobian_terms_from_edges(v0[0, 0, 0], v1[0, 0, 0], v2[0, 0, 0])
    return CellJacobianTerms((i, j, k), d.reshape(64))


def all_jacobian_terms(t):
    """Array of shape (cx, cy, cz, 4, 4, 4) with every cell's 64 determinants."""
    return jacobian_terms_from_edges(*edge_vectors(t.total, t.spacing))


def jacobian_matrices(t, points):
    """Analytic grad y at world points, shape (n, 3, 3) with ``J[n, i, a] = dy_i / dx_a``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cell, frac, inside = _grid_coords(t, pts)
    h = np.asarray(t.spacing)
    g = t.grid_dims
    corner = cell[:, None, :] + _CORNERS[None, :, :]
    flat = (corner[..., 0] * g[1] + corner[..., 1]) * g[2] + corner[..., 2]
    vals = t.total.reshape(-1, 3)[flat]  # (n, 8, 3)
    w1 = np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    sign = np.where(_CORNERS == 1, 1.0, -1.0)
    dw = np.empty_like(w1)
    dw[..., 0] = sign[None, :, 0] * w1[..., 1] * w1[..., 2]
    dw[..., 1] = sign[None, :, 1] * w1[..., 0] * w1[..., 2]
    dw[..., 2] = sign[None, :, 2] * w1[..., 0] * w1[..., 1]
    dw = dw / h * inside[:, None, :]  # clamped axes carry constant displacement
    J = np.einsum("nka,nki->nia", dw, vals)
    J += np.eye(3)
    return J


def det_jacobian_field(t, grid):
    """det(grad y) at every voxel centre of ``grid`` (analytic, no finite differences)."""
    pts = grid.voxel_centers()
    det = np.empty(len(pts))
    step = 1 << 18
    for s in range(0, len(pts), step):
        det[s:s + step] = np.linalg.det(jacobian_matrices(t, pts[s:s + step]))
    return Image3D(det.reshape(grid.dims), grid.spacing, grid.origin)


def min_jacobian_term(t):
    """Smallest ``d_l`` over all cells: positive iff the transform is fold-free."""
    lo = np.inf
    for sl in _cell_chunks(t.grid_dims):
        v = edge_vectors(t.total, t.spacing, sl)
        lo = min(lo, float(jacobian_terms_from_edges(*v).min()))
    return lo


def _cell_chunks(grid_dims, max_cells=1 << 16):
    ncx = grid_dims[0] - 1
    per_slab = max(1, (grid_dims[1] - 1) * (grid_dims[2] - 1))
    step = max(1, max_cells // per_slab)
    for s in range(0, ncx, step):
        yield slice(s, min(ncx, s + step))


def prolong(t, finer_dims):
    """Re-express ``t`` on a finer control grid over the same domain.

    Coefficients (and the reference) are sampled from the coarse trilinear
    interpolant, so the displacement function is unchanged whenever the fine
    grid refines every coarse cell.
    """
    finer_dims = tuple(int(d) for d in finer_dims)
    if any(f < c for f, c in zip(finer_dims, t.grid_dims)):
        raise ValueError("prolongation needs a grid at least as fine as the current one")
    fine = BSplineTransform.zeros(t.origin, t.extent, finer_dims)
    sampler = PointSampler(t, fine.control_points())
    coeffs = sampler.displacement(t.coeffs).reshape(finer_dims + (3,))
    ref = None
    if t.reference is not None:
        ref = sampler.displacement(t.reference).reshape(finer_dims + (3,))
    return BSplineTransform(t.origin, t.extent, coeffs, ref)


def resample_displacement(t, target):
    """Sample the full displacement of ``t`` at the control points of ``target``."""
    return t.displacement(target.control_points()).reshape(target.grid_dims + (3,))


def affine_coefficients(matrix, translation, center, target):
    """Control-point displacements reproducing ``x -> A (x - c) + c + t`` exactly."""
    pts = target.control_points()
    A = np.asarray(matrix, dtype=float)
    c = np.asarray(center, dtype=float)
    y = (pts - c) @ A.T + c + np.asarray(translation, dtype=float)
    return (y - pts).reshape(target.grid_dims + (3,))


def displacement_field(t, grid):
    """Dense displacement y(x) - x on ``grid`` as a 3-channel image."""
    d = t.displacement(grid.voxel_centers())
    return Image3D(d.reshape(tuple(grid.dims) + (3,)), grid.spacing, grid.origin)
