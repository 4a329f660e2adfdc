"""Command line entry point: ``pulmoreg <verb> ...``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import NumericalError, ValidationError
from .io import read_json, read_landmark_pairs, read_metaimage, write_json, write_landmarks, write_metaimage
from .keypoints import write_correspondences_csv
from .pipeline import (SWEEP_FACTORS, SWEEP_PARAMETERS, RegistrationConfig, format_sweep_table, keypoint_stage,
                       preprocess, register, sweep)
from .transform import displacement_field

log = logging.getLogger("pulmoreg")


def _config(args):
    data = {}
    if args.config:
        try:
            data = read_json(args.config)
        except OSError as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        except ValueError as exc:
            raise ValidationError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("config file must hold a JSON object")
    cfg = RegistrationConfig.from_dict(data)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.boundary_weight_multiplier is not None:
        cfg = cfg.replace(boundary_weight_multiplier=args.boundary_weight_multiplier)
    return cfg


def _read(path, what):
    if path is None:
        raise ValidationError(f"{what} is required")
    try:
        return read_metaimage(path)
    except FileNotFoundError:
        raise ValidationError(f"{what} not found: {path}") from None


def _inputs(args):
    return (_read(args.fixed, "fixed image"), _read(args.moving, "moving image"),
            _read(args.fixed_mask, "fixed mask"), _read(args.moving_mask, "moving mask"))


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_register(args):
    cfg = _config(args)
    fixed, moving, fmask, mmask = _inputs(args)
    res = register(fixed, moving, fmask, mmask, cfg)
    out = _out_dir(args.out)
    write_metaimage(res.field(), os.path.join(out, "field.mhd"))
    warped = res.warped_moving(moving)
    write_metaimage(warped.with_values(warped.values.astype(np.float32)), os.path.join(out, "warped_moving.mhd"))
    if res.correspondences is not None and args.correspondences:
        write_correspondences_csv(res.correspondences, os.path.join(out, "correspondences.csv"))
    write_json(res.report, os.path.join(out, "report.json"))
    jac = res.report["jacobian"]
    print(f"registered: {len(res.multilevel.levels)} levels, {res.report['n_keypoints']} keypoints, "
          f"det grad y in [{jac['min']:.3f}, {jac['max']:.3f}], {res.report['timings']['total']:.1f} s")
    return 0


def cmd_preprocess(args):
    cfg = _config(args)
    fixed, moving, fmask, mmask = _inputs(args)
    F, M, pre = preprocess(fixed, moving, fmask, mmask, cfg)
    out = _out_dir(args.out)
    write_metaimage(F.with_values(F.values.astype(np.float32)), os.path.join(out, "fixed_masked.mhd"))
    write_metaimage(M.with_values(M.values.astype(np.float32)), os.path.join(out, "moving_masked.mhd"))
    write_metaimage(displacement_field(pre.transform, fixed), os.path.join(out, "prereg_field.mhd"))
    write_json({"translation": pre.translation, "affine": {"matrix": pre.affine.matrix,
                                                           "translation": pre.affine.translation,
                                                           "center": pre.affine.center}},
               os.path.join(out, "prereg.json"))
    print(f"pre-registration written to {out}")
    return 0


def cmd_keypoints(args):
    cfg = _config(args)
    fixed, moving, fmask, mmask = _inputs(args)
    F, M, pre = preprocess(fixed, moving, fmask, mmask, cfg)
    keys, corr = keypoint_stage(F, M, fmask, pre, cfg)
    write_correspondences_csv(corr, args.out)
    print(f"{len(corr)} correspondences written to {args.out}")
    return 0


def _field_arg(path):
    field = _read(path, "displacement field")
    if field.channels != 3:
        raise ValidationError(f"{path}: a displacement field needs 3 channels")
    return field


def cmd_eval_tre(args):
    from .evaluation import eval_tre
    fp, mp = read_landmark_pairs(args.fixed_landmarks, args.moving_landmarks)
    field = _field_arg(args.field)
    grid = _read(args.moving_image, "moving image") if args.moving_image else None
    rep = eval_tre(fp, mp, field, snap=args.snap, moving_grid=grid)
    print(f"TRE {rep.mean:.3f} +- {rep.std:.3f} mm over {len(rep.distances)} landmarks"
          + (f" ({rep.n_outside} outside the field domain)" if rep.n_outside else ""))
    if args.out:
        write_json(rep.to_dict(), args.out)
    return 0


def cmd_eval_fissure(args):
    from .evaluation import eval_fissure
    mean, std = eval_fissure(_read(args.fixed_fissure, "fixed fissure mask"),
                             _read(args.moving_fissure, "moving fissure mask"), _field_arg(args.field))
    print(f"fissure distance {mean:.3f} +- {std:.3f} mm")
    if args.out:
        write_json({"mean": mean, "std": std}, args.out)
    return 0


def cmd_eval_jacobian(args):
    from .evaluation import eval_jacobian
    rep = eval_jacobian(_field_arg(args.field), _read(args.mask, "lung mask"))
    print("  ".join(f"{k} {v:.4f}" if isinstance(v, float) else f"{k} {v}" for k, v in rep.to_dict().items()))
    if args.out:
        write_json(rep.to_dict(), args.out)
    return 0


def cmd_phantom(args):
    from .phantom import make_phantom
    seed = args.seed if args.seed is not None else 0
    p = make_phantom(seed, args.size, args.spacing, args.amplitude, args.landmarks, args.hu_shift, args.twist,
                     noise_hu=args.noise, texture_hu=args.texture)
    out = _out_dir(args.out)
    for name, img in (("fixed", p.fixed), ("moving", p.moving)):
        write_metaimage(img.with_values(np.asarray(img.values).astype(np.int16)), os.path.join(out, f"{name}.mhd"))
    write_metaimage(p.fixed_mask, os.path.join(out, "fixed_mask.mhd"))
    write_metaimage(p.moving_mask, os.path.join(out, "moving_mask.mhd"))
    write_metaimage(p.field, os.path.join(out, "true_field.mhd"))
    write_landmarks(p.landmarks_fixed, os.path.join(out, "fixed_landmarks.csv"))
    write_landmarks(p.landmarks_moving, os.path.join(out, "moving_landmarks.csv"))
    print(f"phantom (seed {seed}) written to {out}")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    fixed, moving, fmask, mmask = _inputs(args)
    fp, mp = read_landmark_pairs(args.fixed_landmarks, args.moving_landmarks)
    factors = tuple(args.factors) if args.factors else SWEEP_FACTORS
    out = _out_dir(args.out)
    table = sweep(fixed, moving, fmask, mmask, fp, mp, cfg, tuple(args.parameters), factors, out, args.snap)
    text = format_sweep_table(table, factors)
    print(text)
    with open(os.path.join(out, "sweep.txt"), "w") as fh:
        fh.write(text + "\n")
    write_json({name: {f"{f:g}": cell for f, cell in row.items()} for name, row in table.items()},
               os.path.join(out, "sweep.json"))
    return 0


def _add_inputs(p):
    p.add_argument("--fixed", required=True, help="fixed image (.mhd)")
    p.add_argument("--moving", required=True, help="moving image (.mhd)")
    p.add_argument("--fixed-mask", required=True, help="fixed lung mask (.mhd)")
    p.add_argument("--moving-mask", required=True, help="moving lung mask (.mhd)")


def build_parser():
    parser = argparse.ArgumentParser(prog="pulmoreg", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with RegistrationConfig fields")
    parser.add_argument("--threads", type=int, help="numba worker threads")
    parser.add_argument("--seed", type=int, help="random seed (phantoms, recorded in reports)")
    parser.add_argument("--boundary-weight-multiplier", type=float,
                        help="extra factor on the adapted boundary weight")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="full registration; writes field, warped image and report")
    _add_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--correspondences", action="store_true", help="also write the keypoint matches as CSV")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("preprocess", help="masked images and mask pre-registration")
    _add_inputs(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("keypoints", help="sparse keypoint correspondences as CSV")
    _add_inputs(p)
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_keypoints)

    p = sub.add_parser("eval-tre", help="landmark error of a displacement field")
    p.add_argument("--fixed-landmarks", required=True)
    p.add_argument("--moving-landmarks", required=True)
    p.add_argument("--field", required=True, help="3-channel displacement field (.mhd, mm)")
    p.add_argument("--snap", action="store_true", help="snap warped landmarks to moving voxel centres")
    p.add_argument("--moving-image", help="grid used for snapping (default: the field grid)")
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_eval_tre)

    p = sub.add_parser("eval-fissure", help="mean distance between warped and target fissures")
    p.add_argument("--fixed-fissure", required=True)
    p.add_argument("--moving-fissure", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_eval_fissure)

    p = sub.add_parser("eval-jacobian", help="det grad y statistics inside a mask")
    p.add_argument("--field", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", help="JSON report")
    p.set_defaults(func=cmd_eval_jacobian)

    p = sub.add_parser("phantom", help="synthetic lung pair with known warp and landmarks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--spacing", type=float, default=2.0)
    p.add_argument("--amplitude", type=float, default=10.0, help="peak displacement (mm)")
    p.add_argument("--twist", type=float, default=0.0, help="share of the peak due to interior swirls")
    p.add_argument("--landmarks", type=int, default=200)
    p.add_argument("--hu-shift", type=float, default=150.0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian acquisition noise (HU)")
    p.add_argument("--texture", type=float, default=40.0, help="parenchyma texture amplitude (HU)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sweep", help="one-at-a-time parameter sensitivity table")
    _add_inputs(p)
    p.add_argument("--fixed-landmarks", required=True)
    p.add_argument("--moving-landmarks", required=True)
    p.add_argument("--parameters", nargs="+", default=list(SWEEP_PARAMETERS), choices=SWEEP_PARAMETERS)
    p.add_argument("--factors", nargs="+", type=float, help="multipliers (default 1e-5 ... 1e5)")
    p.add_argument("--snap", action="store_true")
    p.add_argument("--out", required=True, help="output directory (one subdirectory per cell)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ValidationError("--threads must be positive")
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        return args.func(args)
    except ValidationError as exc:
        print(f"pulmoreg: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"pulmoreg: numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"pulmoreg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
