import json

import numpy as np
import pytest

from cellsynth.cli import build_parser, main
from cellsynth.features import cluster_size, load_preset
from cellsynth.gan import METRIC_FIELDS, read_metrics_csv
from cellsynth.mesh import load_obj
from cellsynth.nn import load_params
from cellsynth.render import load_png


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_all_subcommands_registered():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"synth-cell", "synth-cluster", "render", "train-gan", "train-topo",
                        "eval-fid", "export-dataset", "run-experiment"}


def test_synth_cell_writes_obj_and_features(tmp_path, capsys):
    code, io = run(capsys, "synth-cell", "--features", 5, "--subdivisions", 1, "--out", tmp_path)
    assert code == 0 and json.loads(io.out)["features"] == 5
    doc = json.loads((tmp_path / "cell.json").read_text())
    assert len(doc["features"]) == 5 and doc["preset"] == "table1-5"
    assert load_obj(tmp_path / "cell.obj").meshes


def test_global_options_before_or_after_subcommand(tmp_path, capsys):
    run(capsys, "--seed", 4, "synth-cell", "--out", tmp_path / "a")
    run(capsys, "synth-cell", "--seed", 4, "--out", tmp_path / "b")
    run(capsys, "synth-cell", "--seed", 5, "--out", tmp_path / "c")
    a, b, c = ((tmp_path / d / "cell.obj").read_bytes() for d in "abc")
    assert a == b and a != c


def test_synth_cluster(tmp_path, capsys):
    code, io = run(capsys, "synth-cluster", "--features", 5, "--slots", 2, "--out", tmp_path)
    assert code == 0 and json.loads(io.out)["cells"] == 2
    doc = json.loads((tmp_path / "cluster.json").read_text())
    assert len(doc["features"]) == cluster_size(load_preset("table1-5")[0], 2)


def test_render_grid(tmp_path, capsys):
    run(capsys, "synth-cell", "--out", tmp_path / "m", "--subdivisions", 1)
    code, _ = run(capsys, "render", "--input", tmp_path / "m" / "cell.obj", "--mode", "cross-section",
                  "--thetas", "0,0.5,1", "--phis", "0,2", "--size", 16, "--out", tmp_path / "r")
    assert code == 0
    assert load_png(tmp_path / "r" / "view_2_1.png").shape == (16, 16, 4)
    assert load_png(tmp_path / "r" / "views.png").shape == (48, 32, 4)


def test_config_file_sets_defaults(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"size": 16, "thetas": [0.0], "phis": [0.0], "out": str(tmp_path / "r")}))
    assert run(capsys, "--config", cfg, "render")[0] == 0
    assert load_png(tmp_path / "r" / "views.png").shape == (16, 16, 4)
    # explicit flags win over the config
    run(capsys, "--config", cfg, "render", "--size", 20)
    assert load_png(tmp_path / "r" / "views.png").shape == (20, 20, 4)


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iterations": 3}))
    code, io = run(capsys, "--config", cfg, "render", "--out", tmp_path)
    assert code == 2 and "iterations" in io.err


def test_bad_arguments_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["render", "--thetas", "a,b"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["train-gan", "--features", "7"])
    with pytest.raises(SystemExit):
        main(["train-topo", "--grid", "0,1"])


def test_train_gan_writes_csv_and_checkpoints(tmp_path, capsys):
    code, io = run(capsys, "train-gan", "--features", 5, "--iters", 2, "--eval-every", 1,
                   "--n-real", 8, "--batch-size", 2, "--n-critic", 1, "--out", tmp_path)
    assert code == 0
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_FIELDS)
    assert [r["iter"] for r in rows] == [0, 1, 2]
    p, meta = load_params(tmp_path / "gan.generator.ckpt")
    assert "gen.tail0.1.W" in p.values
    assert json.loads(io.out)["fid_final"] == rows[-1]["fid_proxy"]


def test_train_topo(tmp_path, capsys):
    code, io = run(capsys, "train-topo", "--grid", "0:0,1.57", "--steps", 2, "--n-images", 2,
                   "--min-n", 1, "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "topo_metrics.csv").read_text().splitlines()
    assert lines[0] == "step,reconstruction,penalty,loss" and len(lines) == 3
    assert load_params(tmp_path / "topo.ckpt")[1]["estimator"]["steps"] == 2


def test_export_and_eval_fid(tmp_path, capsys):
    assert run(capsys, "export-dataset", "--out", tmp_path / "d", "--class", "cancer")[0] == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["class_counts"]["cancer"] == len(manifest["records"]) > 0
    code, io = run(capsys, "eval-fid", "--real", tmp_path / "d" / "data", "--fake", tmp_path / "d" / "data",
                   "--out", tmp_path / "e", "--dim", 16)
    rep = json.loads((tmp_path / "e" / "fid.json").read_text())
    assert code == 0 and rep == json.loads(io.out)
    assert set(rep) == {"total", "regular", "cancer", "n_real", "n_fake", "seed"}
    assert rep["total"] == pytest.approx(0.0, abs=1e-9) and rep["regular"] is None


def test_eval_fid_missing_dir(tmp_path, capsys):
    code, io = run(capsys, "eval-fid", "--real", tmp_path / "none", "--fake", tmp_path, "--out", tmp_path)
    assert code == 2 and "no PNG" in io.err


def test_run_experiment(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"iterations": 1, "data": {"n_real": 4},
                               "gan": {"n_critic": 1, "batch_size": 2, "eval_samples": 4},
                               "eval": {"samples": 4},
                               "samples": {"obj": 1, "grid_thetas": [0.5], "grid_phis": [0.0]}}))
    code, io = run(capsys, "run-experiment", cfg, "--out", tmp_path / "x", "--seed", 7)
    assert code == 0 and json.loads(io.out)["seeds"] == ["7"]
    assert (tmp_path / "x" / "metrics" / "gan_seed7.csv").exists()
    code, io = run(capsys, "run-experiment", cfg, "--out", tmp_path / "x")
    assert code == 2 and "error" in io.err


def test_render_default_random_cell(tmp_path, capsys):
    assert run(capsys, "render", "--thetas", "0", "--phis", "0", "--size", 16, "--out", tmp_path)[0] == 0
    img = load_png(tmp_path / "view_0_0.png")
    assert np.any(img[..., 3] > 0)


def test_eval_fid_spread(tmp_path, capsys):
    run(capsys, "export-dataset", "--out", tmp_path / "d")
    code, io = run(capsys, "eval-fid", "--real", tmp_path / "d" / "data", "--fake", tmp_path / "d" / "data",
                   "--spread-seeds", 3, "--dim", 16, "--out", tmp_path / "e")
    rep = json.loads(io.out)
    assert code == 0 and rep["total_std"] < 1e-8 and rep["total_mean"] < 1e-8
