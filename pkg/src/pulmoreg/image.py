"""Voxel grids, interpolation, smoothing, resampling and distance maps.

Arrays are indexed ``[x, y, z]`` (axis 0 is x). The world coordinate of voxel
index ``v`` is ``origin + v * spacing``; everything is in millimetres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._kernels import dt_lines, trilinear_with_gradient


@dataclass(frozen=True)
class Image3D:
    """Scalar (or 3-channel vector) image on a regular grid.

    Parameters
    ----------
    values : ndarray, shape (nx, ny, nz) or (nx, ny, nz, c)
    spacing : 3-tuple of float
        Voxel size in mm, all positive.
    origin : 3-tuple of float
        World position (mm) of voxel ``(0, 0, 0)``.
    """

    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim not in (3, 4):
            raise ValueError(f"expected a 3D grid (optionally with channels), got shape {values.shape}")
        if min(values.shape[:3]) < 2:
            raise ValueError(f"every grid dimension must be >= 2, got {values.shape[:3]}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must have three components")
        if min(spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self):
        return self.values.shape[:3]

    @property
    def channels(self):
        return 1 if self.values.ndim == 3 else self.values.shape[3]

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def with_values(self, values):
        return Image3D(values, self.spacing, self.origin)

    def index_to_world(self, index):
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def world_to_index(self, points):
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_centers(self, mask=None):
        """World coordinates of all voxel centres, shape (n, 3), x-slowest.

        With ``mask`` only the centres of nonzero mask voxels are returned.
        """
        if mask is None:
            idx = np.indices(self.dims).reshape(3, -1).T
        else:
            idx = np.argwhere(np.asarray(mask) != 0)
        return self.index_to_world(idx)

    def same_grid(self, other):
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.origin, other.origin))


GradientField = Image3D
"""A 3-channel :class:`Image3D` holding spatial derivatives (units per mm)."""


# -- interpolation -----------------------------------------------------------

class TrilinearField:
    """An image prepared for repeated trilinear sampling (contiguous float64 data)."""

    def __init__(self, img):
        values = np.asarray(img.values, dtype=float)
        self.scalar = values.ndim == 3
        self.data = np.ascontiguousarray(values[..., None] if self.scalar else values)
        self.origin = np.asarray(img.origin, dtype=float)
        self.spacing = np.asarray(img.spacing, dtype=float)

    def __call__(self, points, derivative=False):
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        nc = self.data.shape[3]
        vals = np.empty((len(pts), nc))
        grads = np.empty((len(pts), nc, 3))
        trilinear_with_gradient(self.data, self.origin, self.spacing, pts, vals, grads)
        if self.scalar:
            vals, grads = vals[:, 0], grads[:, 0]
        return (vals, grads) if derivative else vals


def trilinear_sample(img, points, derivative=False):
    """Trilinear interpolation of ``img`` at world points.

    The grid is zero-padded: a point more than one voxel outside the grid
    samples 0, and within the last cell outside the border the value blends
    towards 0. The interpolant is therefore continuous everywhere.

    Parameters
    ----------
    img : Image3D
        Scalar or multi-channel image.
    points : array_like, shape (n, 3) or (3,)
    derivative : bool
        Also return the exact spatial derivative of the interpolant.

    Returns
    -------
    values : ndarray, shape (n,) or (n, c)
    grad : ndarray, shape (n, 3) or (n, c, 3), only if ``derivative``
    """
    single = np.ndim(points) == 1
    out = TrilinearField(img)(points, derivative)
    if not single:
        return out
    return (out[0][0], out[1][0]) if derivative else out[0]


def nearest_sample(img, points):
    """Nearest-voxel lookup; points outside the grid sample 0."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    idx = np.rint(img.world_to_index(pts)).astype(np.int64)
    dims = np.asarray(img.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    idx = np.clip(idx, 0, dims - 1)
    vals = img.values[idx[:, 0], idx[:, 1], idx[:, 2]]
    mask = inside if vals.ndim == 1 else inside[:, None]
    return np.where(mask, vals, 0)


# -- derivatives and smoothing -----------------------------------------------

def gradient(img):
    """Central differences in the interior, one-sided at the borders, per mm."""
    if img.values.ndim != 3:
        raise ValueError("gradient expects a scalar image")
    parts = np.gradient(np.asarray(img.values, dtype=float), *img.spacing, edge_order=1)
    return Image3D(np.stack(parts, axis=-1), img.spacing, img.origin)


def gaussian_kernel1d(sigma):
    """Sampled Gaussian truncated at 3 sigma and renormalised to unit sum."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_gaussian(img, sigma_mm):
    """Separable Gaussian smoothing with per-axis sigma ``sigma_mm / spacing``.

    Borders are handled by clamping (edge replication). A scalar ``sigma_mm``
    applies to all axes; a 3-sequence sets each axis separately.
    """
    sig = np.broadcast_to(np.asarray(sigma_mm, dtype=float), (3,))
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    out = np.asarray(img.values, dtype=float)
    for axis in range(3):
        s = sig[axis] / img.spacing[axis]
        if s <= 0:
            continue
        k = gaussian_kernel1d(s)
        if k.size == 1:
            continue
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    if out is img.values:
        out = out.copy()
    return img.with_values(out)


# -- resampling ---------------------------------------------------------------

def resample(img, new_spacing, interpolation="trilinear"):
    """Resample onto a grid covering the same physical box.

    The box of ``img`` spans ``dims * spacing`` starting half a voxel before
    the origin; the new grid has ``ceil(extent / new_spacing)`` voxels whose
    first centre sits half a new voxel inside the box.
    """
    new_spacing = np.broadcast_to(np.asarray(new_spacing, dtype=float), (3,))
    if np.any(new_spacing <= 0):
        raise ValueError("new spacing must be positive")
    spacing = np.asarray(img.spacing)
    extent = np.asarray(img.dims) * spacing
    new_dims = np.maximum(np.ceil(extent / new_spacing - 1e-9).astype(int), 2)
    box_start = np.asarray(img.origin) - spacing / 2
    new_origin = box_start + new_spacing / 2
    target = Image3D(np.zeros(tuple(new_dims)), tuple(new_spacing), tuple(new_origin))
    return sample_onto(img, target, interpolation)


def sample_onto(img, grid, interpolation="trilinear", points=None):
    """Sample ``img`` at the voxel centres of ``grid`` (or at ``points`` laid out on it)."""
    pts = grid.voxel_centers() if points is None else points
    if interpolation == "trilinear":
        vals = trilinear_sample(img, pts)
    elif interpolation == "nearest":
        vals = nearest_sample(img, pts)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    shape = tuple(grid.dims) + img.values.shape[3:]
    return Image3D(np.asarray(vals).reshape(shape), grid.spacing, grid.origin)


def downsample(img, new_spacing, mask=False):
    """Pyramid step: anti-alias with sigma = 0.5 x factor voxels, then resample.

    Masks are resampled by nearest neighbour without smoothing.
    """
    new_spacing = np.broadcast_to(np.asarray(new_spacing, dtype=float), (3,))
    if mask:
        return resample(img, new_spacing, "nearest")
    factor = new_spacing / np.asarray(img.spacing)
    sigma_mm = np.where(factor > 1.0, 0.5 * new_spacing, 0.0)
    return resample(smooth_gaussian(img, sigma_mm), new_spacing, "trilinear")


def level_spacings(spacing, n_levels):
    """Isotropic-leaning spacing for each pyramid level, finest first.

    Level ``l`` uses ``max(s_a, min(s) * 2**l)`` per axis so coarse levels
    approach isotropic voxels without ever upsampling an axis.
    """
    s = np.asarray(spacing, dtype=float)
    return [tuple(np.maximum(s, s.min() * 2 ** lvl)) for lvl in range(n_levels)]


# -- distance maps ------------------------------------------------------------

def min_convolve_axis(f, weight, axis):
    """``g[..q..] = min_p f[..p..] + weight * (q - p)^2`` along one axis.

    Returns the convolved array and the per-axis arg-min index array.
    """
    f = np.moveaxis(np.asarray(f, dtype=float), axis, -1)
    shape = f.shape
    flat = np.ascontiguousarray(f.reshape(-1, shape[-1]))
    out = np.empty_like(flat)
    arg = np.empty(flat.shape, np.int64)
    dt_lines(flat, float(weight), out, arg)
    out = np.moveaxis(out.reshape(shape), -1, axis)
    arg = np.moveaxis(arg.reshape(shape), -1, axis)
    return out, arg


def euclidean_distance_transform(mask):
    """Exact Euclidean distance (mm) from every voxel to the nearest labelled voxel.

    Uses the separable lower-envelope algorithm on squared distances with the
    per-axis spacing. An empty mask yields ``+inf`` everywhere.
    """
    f = np.where(np.asarray(mask.values) != 0, 0.0, np.inf)
    for axis in range(3):
        f, _ = min_convolve_axis(f, mask.spacing[axis] ** 2, axis)
    return mask.with_values(np.sqrt(f))
