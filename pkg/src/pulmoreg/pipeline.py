"""End-to-end registration: mask pre-registration, keypoint matching, dense optimisation."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .evaluation import eval_jacobian, eval_tre
from .image import Image3D, resample, trilinear_sample
from .keypoints import ALPHA_KP, CorrespondenceSet, DisplacementLattice, match_keypoints
from .objective import ObjectiveConfig
from .optimize import LbfgsOptions, LevelSchedule, preregister, run_multilevel
from .transform import displacement_field, min_jacobian_term

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    """All tunable settings of :func:`register` (JSON-serialisable)."""

    alpha: float = 2.0
    alpha_kp: float = ALPHA_KP
    gamma: float = 1e-3
    eta: float = 12.0
    tau: float = 10.0
    n_levels: int = 4
    finest_cells: int = 128
    lattice_step: float = 2.0
    lattice_radius: float = 32.0
    keypoint_spacing: float = 1.0
    keypoint_sigma: float = 1.4
    nms_radius: int = 3
    max_keypoints: int | None = None
    knn: int = 10
    sigma_i: float = 150.0
    use_keypoints: bool = True
    symmetric: bool = True
    boundary_weight_multiplier: float = 1.0
    prereg_deformable: bool = True
    prereg_levels: int = 3
    max_iter: int = 100
    gtol: float = 1e-3
    xtol: float = 1e-5
    seed: int = 0

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def objective(self):
        return ObjectiveConfig(alpha=self.alpha, gamma=self.gamma, eta=self.eta)

    def schedule(self, spacing):
        return LevelSchedule.create(spacing, self.finest_cells, self.n_levels)

    def lbfgs(self):
        return LbfgsOptions(gtol=self.gtol, xtol=self.xtol, max_iter=self.max_iter)


@dataclass
class RegistrationResult:
    transform: object
    prereg: object
    correspondences: CorrespondenceSet | None
    multilevel: object
    grid: Image3D
    report: dict = field(default_factory=dict)

    def field(self):
        """Total displacement on the fixed grid (mm)."""
        return displacement_field(self.transform, self.grid)

    def warped_moving(self, moving):
        pts = self.grid.voxel_centers()
        vals = trilinear_sample(moving, self.transform.evaluate(pts))
        return Image3D(vals.reshape(self.grid.dims), self.grid.spacing, self.grid.origin)


def _check_inputs(fixed, moving, fixed_mask, moving_mask):
    for name, img in (("fixed", fixed), ("moving", moving), ("fixed mask", fixed_mask),
                      ("moving mask", moving_mask)):
        if img is None:
            raise ValidationError(f"{name} image is required")
        if img.channels != 1:
            raise ValidationError(f"{name} image must be scalar")
    if not fixed.same_grid(fixed_mask):
        raise ValidationError("fixed image and fixed mask must share a grid")
    if not moving.same_grid(moving_mask):
        raise ValidationError("moving image and moving mask must share a grid")
    for name, m in (("fixed", fixed_mask), ("moving", moving_mask)):
        if not np.any(np.asarray(m.values) != 0):
            raise ValidationError(f"{name} mask is empty")


def masked(img, mask):
    """Intensities inside the mask, 0 outside."""
    return img.with_values(np.where(np.asarray(mask.values) != 0, np.asarray(img.values, dtype=float), 0.0))


def preprocess(fixed, moving, fixed_mask, moving_mask, config=None, callback=None):
    """Masked images and the mask-driven pre-registration."""
    config = config or RegistrationConfig()
    _check_inputs(fixed, moving, fixed_mask, moving_mask)
    schedule = config.schedule(fixed.spacing)
    n = min(config.prereg_levels, schedule.n_levels)
    levels = list(range(schedule.n_levels - n, schedule.n_levels))
    prereg = preregister(fixed_mask, moving_mask, config.objective(), schedule,
                         deformable=config.prereg_deformable, tau=config.tau,
                         options=config.lbfgs(), levels=levels, callback=callback)
    return masked(fixed, fixed_mask), masked(moving, moving_mask), prereg


def keypoint_stage(F, M, fixed_mask, prereg, config=None):
    """Sparse correspondences on 1 mm isotropic resamples in the pre-aligned frame."""
    config = config or RegistrationConfig()
    sp = config.keypoint_spacing
    F1 = resample(F, sp)
    mask1 = resample(fixed_mask, sp, "nearest")
    M1 = prereg.warp(M, F1)
    lattice = DisplacementLattice(config.lattice_step, config.lattice_radius)
    keys, corr = match_keypoints(F1, M1, mask1, lattice, config.eta, config.alpha_kp, prereg.transform,
                                 config.keypoint_sigma, config.nms_radius, config.max_keypoints,
                                 config.knn, config.sigma_i, config.symmetric)
    return keys, corr


def register(fixed, moving, fixed_mask, moving_mask, config=None, callback=None):
    """Full registration of ``moving`` onto ``fixed``.

    Returns
    -------
    RegistrationResult
        ``transform`` maps fixed-image points into the moving image; the
        report holds weights, per-level term values, timings and Jacobian
        statistics.
    """
    config = config or RegistrationConfig()
    timings = {}
    t0 = time.perf_counter()
    F, M, prereg = preprocess(fixed, moving, fixed_mask, moving_mask, config)
    timings["preregistration"] = time.perf_counter() - t0

    corr = None
    n_keys = 0
    if config.use_keypoints:
        t1 = time.perf_counter()
        keys, corr = keypoint_stage(F, M, fixed_mask, prereg, config)
        n_keys = len(keys)
        timings["keypoints"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    sources = corr.sources if corr is not None and len(corr) else None
    targets = corr.targets if corr is not None and len(corr) else None
    ml = run_multilevel(F, M, fixed_mask, moving_mask, config.objective(), config.schedule(fixed.spacing),
                        prereg.transform, sources, targets,
                        boundary_multiplier=config.boundary_weight_multiplier, tau=config.tau,
                        options=config.lbfgs(), callback=callback)
    timings["dense"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0

    t = ml.transform
    result = RegistrationResult(t, prereg, corr, ml, fixed)
    jac = eval_jacobian(t, fixed_mask)
    result.report = {
        "config": config.to_dict(),
        "weights": dataclasses.asdict(ml.config),
        "n_keypoints": n_keys,
        "affine": {"matrix": prereg.affine.matrix, "translation": prereg.affine.translation,
                   "center": prereg.affine.center},
        "levels": [{"level": r.level, "spacing": r.spacing, "cells": r.cells, "iterations": r.iterations,
                    "evaluations": r.evaluations, "stop": r.reason, "start": r.start, "end": r.end,
                    "seconds": r.seconds, "min_jacobian_term": r.min_jacobian_term} for r in ml.levels],
        "timings": timings,
        "jacobian": jac.to_dict(),
        "min_jacobian_term": min_jacobian_term(t),
    }
    return result


SWEEP_PARAMETERS = ("alpha", "alpha_kp", "gamma", "eta")
SWEEP_FACTORS = tuple(10.0 ** k for k in range(-5, 6))


def sweep(fixed, moving, fixed_mask, moving_mask, landmarks_fixed, landmarks_moving, config=None,
          parameters=SWEEP_PARAMETERS, factors=SWEEP_FACTORS, out_dir=None, snap=False):
    """One-at-a-time sensitivity of the mean landmark error.

    Each cell multiplies one parameter by one factor and re-runs
    :func:`register`. Failed cells are recorded with their error message.
    Returns ``{parameter: {factor: {"mean": .., "std": .., "error": ..}}}``.
    """
    config = config or RegistrationConfig()
    table = {}
    for name in parameters:
        if name not in SWEEP_PARAMETERS:
            raise ValidationError(f"cannot sweep {name!r}; choose from {SWEEP_PARAMETERS}")
        row = {}
        for f in factors:
            cfg = config.replace(**{name: getattr(config, name) * f})
            cell = {"factor": f, "value": getattr(cfg, name)}
            try:
                res = register(fixed, moving, fixed_mask, moving_mask, cfg)
                tre = eval_tre(landmarks_fixed, landmarks_moving, res.transform, snap=snap,
                               moving_grid=moving if snap else None)
                cell.update(mean=tre.mean, std=tre.std, min_jacobian=res.report["jacobian"]["min"])
                if out_dir is not None:
                    from .io import write_json
                    cdir = os.path.join(out_dir, f"{name}_{f:g}")
                    os.makedirs(cdir, exist_ok=True)
                    write_json(res.report, os.path.join(cdir, "report.json"))
            except Exception as exc:  # a failing cell must not stop the sweep
                log.warning("sweep cell %s x %g failed: %s", name, f, exc)
                cell.update(mean=None, std=None, error=str(exc))
            row[f] = cell
        table[name] = row
    return table


def format_sweep_table(table, factors=SWEEP_FACTORS):
    """Rows = parameters, columns = factors, entries = mean TRE (mm) or 'fail'."""
    head = "param    " + " ".join(f"{f:>8g}" for f in factors)
    lines = [head]
    for name, row in table.items():
        cells = []
        for f in factors:
            c = row.get(f)
            if c is None:
                cells.append(f"{'':>8}")
            elif c.get("mean") is None:
                cells.append(f"{'fail':>8}")
            else:
                cells.append(f"{c['mean']:8.2f}")
        lines.append(f"{name:<9}" + " ".join(cells))
    return "\n".join(lines)
