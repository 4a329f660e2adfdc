import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pulmoreg.cli import build_parser, main
from pulmoreg.image import Image3D
from pulmoreg.io import read_landmarks, read_metaimage, write_landmarks, write_metaimage

FAST = {"finest_cells": 8, "n_levels": 3, "prereg_levels": 2, "keypoint_spacing": 2.0, "lattice_radius": 12.0,
        "max_iter": 30}


@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantom")
    assert main(["--seed", "0", "phantom", "--out", str(out), "--size", "32", "--spacing", "4",
                 "--amplitude", "6", "--landmarks", "30"]) == 0
    cfg = out / "config.json"
    cfg.write_text(json.dumps(FAST))
    return out


def inputs(d):
    return ["--fixed", str(d / "fixed.mhd"), "--moving", str(d / "moving.mhd"),
            "--fixed-mask", str(d / "fixed_mask.mhd"), "--moving-mask", str(d / "moving_mask.mhd")]


def test_verbs_present():
    parser = build_parser()
    verbs = parser._subparsers._group_actions[0].choices
    assert set(verbs) == {"register", "preprocess", "keypoints", "eval-tre", "eval-fissure", "eval-jacobian",
                          "phantom", "sweep"}


def test_phantom_outputs(phantom_dir):
    for name in ("fixed", "moving", "fixed_mask", "moving_mask", "true_field"):
        assert (phantom_dir / f"{name}.mhd").exists()
    fp = read_landmarks(phantom_dir / "fixed_landmarks.csv")
    assert fp.shape == (30, 3)
    assert read_metaimage(phantom_dir / "true_field.mhd").channels == 3


def test_eval_tre_true_field(phantom_dir, tmp_path, capsys):
    out = tmp_path / "tre.json"
    code = main(["eval-tre", "--fixed-landmarks", str(phantom_dir / "fixed_landmarks.csv"),
                 "--moving-landmarks", str(phantom_dir / "moving_landmarks.csv"),
                 "--field", str(phantom_dir / "true_field.mhd"), "--out", str(out)])
    assert code == 0
    assert "TRE" in capsys.readouterr().out
    # the stored field is float32 and sampled trilinearly, so only close to zero
    assert json.loads(out.read_text())["mean"] < 0.5


def test_register_and_evaluate(phantom_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["--config", str(phantom_dir / "config.json"), "register", *inputs(phantom_dir),
                 "--out", str(out), "--correspondences"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["jacobian"]["min"] > 0
    field = read_metaimage(out / "field.mhd")
    assert field.channels == 3 and field.dims == (32, 32, 32)
    assert (out / "warped_moving.mhd").exists() and (out / "correspondences.csv").exists()
    assert main(["eval-jacobian", "--field", str(out / "field.mhd"),
                 "--mask", str(phantom_dir / "fixed_mask.mhd")]) == 0


def test_preprocess_and_keypoints(phantom_dir, tmp_path):
    cfg = ["--config", str(phantom_dir / "config.json")]
    assert main([*cfg, "preprocess", *inputs(phantom_dir), "--out", str(tmp_path / "pre")]) == 0
    assert read_metaimage(tmp_path / "pre" / "prereg_field.mhd").channels == 3
    assert main([*cfg, "keypoints", *inputs(phantom_dir), "--out", str(tmp_path / "kp.csv")]) == 0
    assert len((tmp_path / "kp.csv").read_text().splitlines()) > 1


def test_eval_fissure(tmp_path, capsys):
    v = np.zeros((8, 8, 8), np.uint8)
    v[:, :, 3] = 1
    w = np.zeros_like(v)
    w[:, :, 5] = 1
    write_metaimage(Image3D(v), tmp_path / "a.mhd")
    write_metaimage(Image3D(w), tmp_path / "b.mhd")
    write_metaimage(Image3D(np.zeros((8, 8, 8, 3), np.float32)), tmp_path / "f.mhd")
    assert main(["eval-fissure", "--fixed-fissure", str(tmp_path / "a.mhd"), "--moving-fissure",
                 str(tmp_path / "b.mhd"), "--field", str(tmp_path / "f.mhd"), "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["mean"] == pytest.approx(2.0)


def test_validation_exit_code(tmp_path, capsys):
    # missing file
    assert main(["eval-jacobian", "--field", str(tmp_path / "none.mhd"), "--mask", str(tmp_path / "x.mhd")]) == 1
    # scalar image where a field is expected
    write_metaimage(Image3D(np.zeros((4, 4, 4), np.float32)), tmp_path / "s.mhd")
    assert main(["eval-jacobian", "--field", str(tmp_path / "s.mhd"), "--mask", str(tmp_path / "s.mhd")]) == 1
    # unknown configuration key
    (tmp_path / "bad.json").write_text('{"nonsense": 1}')
    write_landmarks(np.zeros((2, 3)), tmp_path / "l.csv")
    assert main(["--config", str(tmp_path / "bad.json"), "preprocess", "--fixed", "a", "--moving", "b",
                 "--fixed-mask", "c", "--moving-mask", "d", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_numerical_failure_exit_code(monkeypatch, capsys):
    from pulmoreg import cli
    from pulmoreg.errors import FoldError

    def boom(args):
        raise FoldError("synthetic fold")

    monkeypatch.setattr(cli, "cmd_eval_jacobian", boom)
    assert main(["eval-jacobian", "--field", "x", "--mask", "y"]) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_bad_usage_is_a_validation_error(capsys):
    assert main(["register"]) == 1
    assert "required" in capsys.readouterr().err
    assert main(["--help"]) == 0


def test_threads_flag(phantom_dir, tmp_path):
    assert main(["--threads", "1", "eval-jacobian", "--field", str(phantom_dir / "true_field.mhd"),
                 "--mask", str(phantom_dir / "fixed_mask.mhd")]) == 0
    assert main(["--threads", "0", "eval-jacobian", "--field", str(phantom_dir / "true_field.mhd"),
                 "--mask", str(phantom_dir / "fixed_mask.mhd")]) == 1


def test_field_values_match_library(phantom_dir):
    from pulmoreg.phantom import make_phantom
    p = make_phantom(0, 32, 4.0, 6.0, 30)
    stored = read_metaimage(phantom_dir / "true_field.mhd")
    assert_allclose(stored.values, p.field.values, atol=1e-4)
    assert_array_equal(read_metaimage(phantom_dir / "fixed_mask.mhd").values, p.fixed_mask.values)
