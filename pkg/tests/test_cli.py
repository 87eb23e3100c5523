import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from volcap import io
from volcap.cli import FitResult, main

TINY = {"n_cameras": 2, "n_frames": 2, "image_size": [48, 36], "shape_train": 8, "shape_dim": 4}
QUICK = ["--set", "stage1_iter=3", "--set", "stage2_iter=3", "--set", "joint_sigmas=[0.2]"]


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_project(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scen.json").write_text(json.dumps(TINY))
    assert main(["synth", str(root / "scen.json"), "-o", str(root / "proj")]) == 0
    return root


def run_pipeline(root, threads):
    proj = root / "proj"
    assert main(["fit", str(proj / "manifest.json"), "--shape-space", str(proj / "shape_space.bin"),
                 "-o", str(root / "fit"), "--threads", str(threads)] + QUICK) == 0
    assert main(["eval", str(root / "fit"), str(proj / "ground_truth"), "-o", str(root / "eval.csv")]) == 0


def test_synth_layout(tiny_project):
    proj = tiny_project / "proj"
    m = io.load_manifest(proj / "manifest.json")
    assert (m.n_cameras, m.n_frames) == (2, 2)
    assert m.heatmap_index is not None and len(m.extra["gradients"]) == 2
    gt, init = FitResult(proj / "ground_truth"), FitResult(proj / "init")
    assert np.allclose(init.P[:, 6:] - gt.P[:, 6:], np.deg2rad(5.0))
    assert len(gt.s) == 4


def test_pipeline_byte_identical(tiny_project, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for root, threads in ((a, 1), (b, 3)):
        root.mkdir()
        assert main(["synth", str(tiny_project / "scen.json"), "-o", str(root / "proj")]) == 0
        run_pipeline(root, threads)
    fa, fb = files(a), files(b)
    assert fa.keys() == fb.keys()
    assert [k for k in fa if fa[k] != fb[k]] == []
    rows = list(csv.reader((a / "eval.csv").read_text().splitlines()))
    assert rows[0] == ["group", "metric", "value"]
    names = {r[1] for r in rows[1:]}
    assert {"mean_error_mm", "precision", "recall", "waist_error_cm"} <= names


def test_stage2_without_init_is_input_error(tiny_project, tmp_path, capsys):
    proj = tiny_project / "proj"
    code = main(["fit", str(proj / "manifest.json"), "--stage", "2", "-o", str(tmp_path / "f")])
    assert code == 3
    assert "--init" in capsys.readouterr().err


def test_stage2_from_init(tiny_project, tmp_path):
    proj = tiny_project / "proj"
    trace = tmp_path / "trace.csv"
    code = main(["fit", str(proj / "manifest.json"), "--shape-space", str(proj / "shape_space.bin"),
                 "--stage", "2", "--init", str(proj / "init"), "-o", str(tmp_path / "f"),
                 "--trace", str(trace)] + QUICK)
    assert code == 0
    r = FitResult(tmp_path / "f")
    assert r.stages == [2]
    assert len(trace.read_text().splitlines()) > 1


def test_render_silhouette_empty_model(ref_model, tmp_path):
    d = io.model_to_dict(ref_model)
    d["gaussians"] = []
    (tmp_path / "empty.json").write_text(json.dumps(d))
    from volcap.evaluation import ring_cameras

    io.save_cameras(tmp_path / "cams.txt", ring_cameras(2, (20, 16)))
    code = main(["render", str(tmp_path / "empty.json"), str(tmp_path / "cams.txt"), "--what", "silhouette",
                 "-o", str(tmp_path / "out")])
    assert code == 0
    masks = sorted((tmp_path / "out").glob("*.pgm"))
    assert len(masks) == 2
    assert all(not io.load_pgm(p).any() for p in masks)


def test_render_visibility_and_contour(tiny_project, tmp_path):
    proj = tiny_project / "proj"
    for what in ("visibility", "contour"):
        assert main(["render", str(proj / "ground_truth"), str(proj / "cameras.txt"), "--what", what,
                     "--frame", "1", "-o", str(tmp_path)]) == 0
    B = io.load_pfm(tmp_path / "visibility_c0_t1.pfm")
    assert B.shape == (36, 48) and 0 <= B.min() < 0.5 and B.max() <= 1
    assert io.load_pfm(tmp_path / "contour_c1_t1.pfm").max() > 0


def test_colorize_and_export(tiny_project, tmp_path, ref_model):
    proj = tiny_project / "proj"
    assert main(["colorize", str(proj / "manifest.json"), str(proj / "ground_truth"), "-o",
                 str(tmp_path / "colored.json"), "--candidates", str(tmp_path / "cand.csv")]) == 0
    m = io.load_model(tmp_path / "colored.json")
    assert m.colors is not None and np.all((m.colors >= 0) & (m.colors <= 1))
    assert main(["export-mesh", str(proj / "ground_truth"), "--frame", "1", "-o", str(tmp_path / "m.obj")]) == 0
    v, f = io.load_obj(tmp_path / "m.obj")
    assert v.shape == ref_model.mesh_vertices.shape and np.array_equal(f, ref_model.mesh_faces)


@pytest.mark.parametrize("argv", [[], ["bogus"], ["fit"], ["synth", "-o", "x", "--threads", "0"],
                                  ["fit", "m.json", "-o", "x", "--set", "novalue"]])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_missing_inputs_exit_3(tmp_path):
    assert main(["fit", str(tmp_path / "none.json"), "-o", str(tmp_path / "f")]) == 3
    assert main(["eval", str(tmp_path / "a"), str(tmp_path / "b"), "-o", str(tmp_path / "e.csv")]) == 3


def test_bad_config_key_exit_3(tiny_project, tmp_path):
    proj = tiny_project / "proj"
    code = main(["fit", str(proj / "manifest.json"), "-o", str(tmp_path / "f"), "--set", "nonsense=1"])
    assert code == 3


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "volcap.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("volcap")
