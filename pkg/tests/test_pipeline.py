import json

import numpy as np
import pytest

from cellsynth.fixtures import fixture_patch
from cellsynth.pipeline import (
    ConfigError, PatchRecord, export_dataset, extract_patches, fit_to_canvas, load_dataset,
    run_experiment, segment_blobs, validate_config, verify_manifest,
)
from cellsynth.render import load_png

SMALL = {"preset": "table1-32", "tails": 4, "iterations": 2, "data": {"n_real": 8},
         "gan": {"eval_every": 1, "eval_samples": 4, "batch_size": 2, "n_critic": 1, "probes": 2},
         "eval": {"samples": 4}, "samples": {"obj": 1, "grid_thetas": [0.5], "grid_phis": [0.0, 2.0]}}


def test_patch_counts():
    assert len(extract_patches(np.zeros((100, 100, 4)), 50, 50)) == 4
    assert len(extract_patches(np.zeros((100, 100, 4)), 50, 200)) == 1


def test_patch_window_origins():
    img = np.arange(96 * 96).reshape(96, 96)
    patches = extract_patches(img, 40, 28)
    origins = [(y, x) for y in (0, 28, 56) for x in (0, 28, 56)]
    assert len(patches) == 9
    for p, (y, x) in zip(patches, origins):
        assert p[0, 0] == img[y, x] and p.shape == (40, 40)


def test_patch_too_large():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((30, 30, 4)), 40, 10)


def test_blank_patch_has_no_blobs():
    assert segment_blobs(np.ones((64, 64, 3))) == []


@pytest.mark.parametrize("n", [1, 2])
def test_segmented_blobs_match_fixture(n):
    img, masks = fixture_patch(n, seed=n)
    blobs = segment_blobs(img, source="fx")
    assert len(blobs) == n
    def window(mask, b):
        (y, x), (h, w) = b.offset, b.image.shape[:2]
        return mask[y:y + h, x:x + w]

    for mask in masks:
        hit = [b for b in blobs if window(mask, b).sum() == mask.sum()]
        assert len(hit) == 1
        inside = window(mask, hit[0])
        assert np.array_equal(hit[0].image[..., 3] > 0, inside)
        assert np.all(hit[0].image[~inside, 3] == 0)


def test_fit_to_canvas_keeps_transparency():
    img = np.zeros((50, 20, 4))
    img[10:40, 5:15] = [0.3, 0.2, 0.6, 1.0]
    out = fit_to_canvas(img, 32)
    assert out.shape == (32, 32, 4)
    assert out[0, 0, 3] == 0 and out[16, 16, 3] > 0.9


def test_export_round_trip(tmp_path):
    img, _ = fixture_patch(2, seed=4)
    records = segment_blobs(img, source="slide1", label="cancer")
    manifest = export_dataset(records, tmp_path, preset="table1-32", seeds=[0])
    assert manifest["class_counts"] == {"normal": 0, "cancer": 2}
    assert verify_manifest(tmp_path)["records"] == manifest["records"]
    for r, e in zip(records, manifest["records"]):
        back = load_png(tmp_path / e["path"])
        assert e["path"].startswith("data/cancer/slide1/")
        assert np.array_equal(back[..., 3] == 0, r.image[..., 3] == 0)
    images, labels = load_dataset(tmp_path, size=32)
    assert len(images) == 2 and labels == ["cancer", "cancer"]


def test_manifest_detects_stray_files(tmp_path):
    rec = PatchRecord(np.zeros((4, 4, 4)), "s", "normal", (0, 0), "p0")
    export_dataset([rec], tmp_path)
    (tmp_path / "data" / "normal" / "s" / "extra.png").write_bytes(
        (tmp_path / "data" / "normal" / "s" / "p0.png").read_bytes())
    with pytest.raises(ValueError):
        verify_manifest(tmp_path)


def test_record_requires_known_label():
    with pytest.raises(ValueError):
        PatchRecord(np.zeros((4, 4, 4)), "s", "benign", (0, 0), "p")


@pytest.mark.parametrize("bad", [
    {"class": "benign"}, {"seeds": []}, {"iterations": 0}, {"preset": "table1-7"},
    {"gan": {"clip": 0}}, {"gan": {"unknown": 1}}, {"colour": 1},
    {"topo": {"min_n": 9}}, {"data": {"source": "dir", "dir": "/nonexistent"}},
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        validate_config({**SMALL, **bad})


def test_invalid_config_does_no_work(tmp_path):
    out = tmp_path / "run"
    with pytest.raises(ConfigError):
        run_experiment({**SMALL, "iterations": -1}, out)
    assert not out.exists() and list(tmp_path.iterdir()) == []


def test_unwritable_output_leaves_nothing(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    with pytest.raises(ConfigError):
        run_experiment(SMALL, blocker / "run")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file.txt"]


def test_nonempty_output_rejected(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(ConfigError):
        run_experiment(SMALL, tmp_path)


def test_run_experiment_deterministic_with_manifest(tmp_path):
    a = run_experiment(SMALL, tmp_path / "a", seed=3)
    run_experiment(SMALL, tmp_path / "b", seed=3)
    csv_a = (tmp_path / "a" / "metrics" / "gan_seed3.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "metrics" / "gan_seed3.csv").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert (manifest["features"], manifest["tails"]) == (32, 4)
    present = {p.relative_to(tmp_path / "a").as_posix() for p in (tmp_path / "a").rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    assert present == set(manifest["files"])
    assert a["results"]["3"]["fid_initial"] >= 0
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]
