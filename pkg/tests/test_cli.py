import csv

import numpy as np
import pytest

from pvlff.cli import dispatch
from pvlff.data import read_feature_map, write_feature_map


def test_unknown_subcommand_exits_one(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "unknown subcommand" in capsys.readouterr().err
    assert dispatch([]) == 1


def test_bad_config_exits_one(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("steps = 3\nwhat = 1\n")
    code = dispatch(["train", "--scene", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert code == 1 and ":2:" in capsys.readouterr().err
    assert dispatch(["train", "--scene", str(tmp_path), "--out", str(tmp_path / "o"), "--nope", "1"]) == 1


def test_missing_scene_exits_one(tmp_path):
    assert dispatch(["train", "--scene", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train -> segment on a tiny scene, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    scene, run, seg = root / "scene", root / "run", root / "seg"
    spec = root / "scene.txt"
    spec.write_text("preset = part_whole\nviews = 3\nheight = 20\nwidth = 20\n")
    assert dispatch(["generate", "--spec", str(spec), "--out", str(scene), "--seed", "2"]) == 0
    fast = ["--steps", "200", "--pixel_batch", "32", "--samples", "8", "--levels", "4", "--table_size", "1024"]
    assert dispatch(["train", "--scene", str(scene), "--out", str(run), *fast]) == 0
    seg_args = ["--render_samples", "16", "--min_samples", "4", "--min_cluster_size", "10"]
    ckpt = run / "model.pvlf"
    assert dispatch(["segment", "--checkpoint", str(ckpt), "--scene", str(scene), "--out", str(seg), *seg_args]) == 0
    return root


def test_pipeline_writes_metrics(pipeline):
    out = pipeline / "eval"
    assert dispatch(["evaluate", "--pred", str(pipeline / "seg"), "--scene", str(pipeline / "scene"), "--out", str(out)]) == 0
    with open(out / "metrics.csv") as fh:
        rows = {(r["metric"], r["class"]): float(r["value"]) for r in csv.DictReader(fh)}
    for m in ("miou", "miou_raw", "macc", "pq_scene", "mcov", "mwcov"):
        assert 0.0 <= rows[(m, "all")] <= 1.0
    assert (pipeline / "run" / "loss.csv").is_file() and (out / "run_config.txt").is_file()


def test_mismatched_raster_exits_one(pipeline, tmp_path, capsys):
    import shutil

    bad = tmp_path / "seg"
    shutil.copytree(pipeline / "seg", bad)
    p = bad / "instance" / "00001.pvfm"
    write_feature_map(p, np.zeros((7, 5), np.uint16))
    code = dispatch(["evaluate", "--pred", str(bad), "--scene", str(pipeline / "scene"), "--out", str(tmp_path / "e")])
    assert code == 1 and "does not match" in capsys.readouterr().err


def test_render_and_tree(pipeline):
    ckpt, scene = pipeline / "run" / "model.pvlf", pipeline / "scene"
    out = pipeline / "render"
    args = ["--checkpoint", str(ckpt), "--scene", str(scene), "--frames", "0", "--render_samples", "8"]
    assert dispatch(["render", *args, "--out", str(out)]) == 0
    assert read_feature_map(next(out.glob("*_depth.pvfm"))).shape == (20, 20)
    tree = pipeline / "tree.json"
    assert dispatch(["tree", *args, "--out", str(tree), "--min_samples", "4", "--min_cluster_size", "5"]) == 0
    assert tree.read_text().startswith("{")


def test_bad_frames_exit_one(pipeline):
    args = ["--checkpoint", str(pipeline / "run" / "model.pvlf"), "--scene", str(pipeline / "scene")]
    assert dispatch(["render", *args, "--frames", "9", "--out", str(pipeline / "r2")]) == 1
