"""Registration accuracy measures: landmark error, fissure distance, Jacobian statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .image import Image3D, euclidean_distance_transform, trilinear_sample
from .transform import BSplineTransform, det_jacobian_field


def _map_points(field, points):
    """y(x) for a displacement image (trilinear) or a transform."""
    if isinstance(field, BSplineTransform):
        return field.evaluate(points)
    return points + trilinear_sample(field, points)


def _inside(grid, points):
    u = grid.world_to_index(points)
    return np.all((u >= -1e-9) & (u <= np.asarray(grid.dims) - 1 + 1e-9), axis=1)


@dataclass
class TREReport:
    distances: np.ndarray
    mean: float
    std: float
    thresholds: np.ndarray
    cumulative: np.ndarray
    n_outside: int
    valid: np.ndarray

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "n": int(len(self.distances)),
                "n_outside": self.n_outside, "distances": self.distances.tolist(),
                "cumulative": {"thresholds": self.thresholds.tolist(),
                               "fraction": self.cumulative.tolist()}}


def eval_tre(fixed_points, moving_points, field, snap=False, moving_grid=None, step=0.5):
    """Target registration error of landmark pairs under ``field``.

    Parameters
    ----------
    fixed_points, moving_points : (n, 3) arrays
        Row-aligned landmark pairs (mm).
    field : Image3D (3 channels, displacement in mm on the fixed grid) or BSplineTransform
    snap : bool
        Move each transformed landmark to the nearest voxel centre of
        ``moving_grid`` before measuring.
    moving_grid : Image3D, optional
        Grid used for snapping (defaults to the field grid).
    step : float
        Resolution (mm) of the reported cumulative distribution.

    Returns
    -------
    TREReport
        Landmarks outside the field domain are flagged and excluded.
    """
    fp = np.atleast_2d(np.asarray(fixed_points, dtype=float))
    mp = np.atleast_2d(np.asarray(moving_points, dtype=float))
    if fp.shape != mp.shape or fp.shape[1] != 3:
        raise ValidationError("landmark lists must be row-aligned (n, 3) arrays")
    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(mp))):
        raise ValidationError("landmark coordinates must be finite")
    if isinstance(field, BSplineTransform):
        valid = np.ones(len(fp), bool)
    else:
        valid = _inside(field, fp)
    y = _map_points(field, fp[valid])
    if snap:
        grid = moving_grid if moving_grid is not None else field
        if isinstance(grid, BSplineTransform):
            raise ValidationError("snapping needs a voxel grid")
        idx = np.rint(grid.world_to_index(y))
        y = grid.index_to_world(idx)
    d = np.linalg.norm(y - mp[valid], axis=1)
    top = step * (np.ceil(d.max() / step) + 1) if len(d) else step
    thr = np.arange(0.0, top + step / 2, step)
    cum = np.array([(d <= t).mean() if len(d) else 0.0 for t in thr])
    mean = float(d.mean()) if len(d) else float("nan")
    std = float(d.std()) if len(d) else float("nan")
    return TREReport(d, mean, std, thr, cum, int((~valid).sum()), valid)


def eval_fissure(fixed_fissure, moving_fissure, field):
    """Mean and std distance (mm) of warped fixed fissure voxels to the moving fissure.

    The moving fissure is distance-transformed, the distance map is sampled
    trilinearly at ``y(x)`` for every fixed fissure voxel ``x``; positions
    outside the moving grid are clamped to its border.
    """
    fsel = np.asarray(fixed_fissure.values) != 0
    if not fsel.any() or not np.any(np.asarray(moving_fissure.values) != 0):
        raise ValidationError("fissure masks must be nonempty")
    dist = euclidean_distance_transform(moving_fissure)
    y = _map_points(field, fixed_fissure.voxel_centers(fsel))
    u = np.clip(dist.world_to_index(y), 0, np.asarray(dist.dims) - 1)
    vals = trilinear_sample(dist, dist.index_to_world(u))
    return float(vals.mean()), float(vals.std())


@dataclass
class JacobianReport:
    mean: float
    std: float
    min: float
    q01: float
    q99: float
    max: float
    n: int

    def to_dict(self):
        return asdict(self)


def nearest_rank(sorted_values, q):
    n = len(sorted_values)
    rank = max(1, int(np.ceil(q * n)))
    return float(sorted_values[rank - 1])


def jacobian_determinants(field, grid=None):
    """det(grad y) per voxel: analytic for transforms, central differences for fields."""
    if isinstance(field, BSplineTransform):
        if grid is None:
            raise ValidationError("a voxel grid is needed to evaluate a transform")
        return det_jacobian_field(field, grid).values
    u = np.asarray(field.values, dtype=float)
    J = np.empty(u.shape[:3] + (3, 3))
    for i in range(3):
        parts = np.gradient(u[..., i], *field.spacing, edge_order=1)
        for a in range(3):
            J[..., i, a] = parts[a] + (1.0 if i == a else 0.0)
    return np.linalg.det(J)


def eval_jacobian(field, lung_mask):
    """Statistics of det(grad y) over the nonzero voxels of ``lung_mask``."""
    sel = np.asarray(lung_mask.values) != 0
    if not sel.any():
        raise ValidationError("lung mask is empty")
    det = jacobian_determinants(field, lung_mask)
    if det.shape != sel.shape:
        raise ValidationError("field and mask grids differ")
    v = np.sort(det[sel])
    return JacobianReport(float(v.mean()), float(v.std()), float(v[0]), nearest_rank(v, 0.01),
                          nearest_rank(v, 0.99), float(v[-1]), int(len(v)))
