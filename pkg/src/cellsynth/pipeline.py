"""Data ingestion, dataset layout and end-to-end experiment runs."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .evaluation import Embedder, fid_report
from .features import load_preset
from .fixtures import CLASSES, fixture_clusters, fixture_images
from .gan import CellGAN, format_metrics_csv
from .mesh import Scene, build_cell, export_obj
from .nn import save_params
from .render import ProjectionSpec, check_image, image_grid, load_png, render_batch, save_png
from .topo import TopologyTransformer

MANIFEST_VERSION = 1
BLUE_THRESHOLD = 0.15
MIN_BLOB_AREA = 50


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchRecord:
    image: np.ndarray
    source: str
    label: str
    offset: tuple
    patch_id: str

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}")


def _as_rgba(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.ndim != 3 or img.shape[2] not in (3, 4):
        raise ValueError(f"expected an RGB(A) image, got shape {img.shape}")
    if img.shape[2] == 3:
        img = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=2)
    return check_image(img)


def extract_patches(image, size: int, stride: int) -> list:
    """Row-major sliding-window crops; windows that would run past the edge are dropped."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be positive")
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image dims {h}x{w}")
    return [img[y:y + size, x:x + size] for y in range(0, h - size + 1, stride)
            for x in range(0, w - size + 1, stride)]


def segment_blobs(patch, source: str = "patch", label: str = "normal",
                  threshold: float = BLUE_THRESHOLD, min_area: int = MIN_BLOB_AREA) -> list:
    """Blue-dominant connected regions, each cropped to its box with alpha 0 outside the region."""
    img = _as_rgba(patch)
    blue = img[..., 2] - 0.5 * (img[..., 0] + img[..., 1])
    mask = (blue > threshold) & (img[..., 3] > 0)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    records = []
    for k, box in enumerate(ndimage.find_objects(labels), start=1):
        region = labels[box] == k
        if region.sum() < min_area:
            continue
        crop = np.zeros(region.shape + (4,))
        crop[region, :3] = img[box][region, :3]
        crop[region, 3] = img[box][region, 3]
        offset = (box[0].start, box[1].start)
        records.append(PatchRecord(crop, source, label, offset,
                                   f"{source}_{offset[0]:05d}_{offset[1]:05d}"))
    return records


def fit_to_canvas(image, size: int) -> np.ndarray:
    """Center an RGBA image on a transparent ``size x size`` canvas, shrinking it if needed."""
    img = check_image(image)
    h, w = img.shape[:2]
    if max(h, w) > size:
        k = size / max(h, w)
        nh, nw = max(1, round(h * k)), max(1, round(w * k))
        # resample premultiplied color so transparent pixels do not bleed in
        pre = np.concatenate([img[..., :3] * img[..., 3:], img[..., 3:]], axis=2)
        chans = [np.asarray(PILImage.fromarray(pre[..., i].astype(np.float32), mode="F")
                            .resize((nw, nh), PILImage.BOX)) for i in range(4)]
        pre = np.clip(np.stack(chans, axis=2).astype(np.float64), 0, 1)
        a = pre[..., 3:]
        img = np.concatenate([np.where(a > 0, pre[..., :3] / np.maximum(a, 1e-12), 0), a], axis=2)
        h, w = nh, nw
    out = np.zeros((size, size, 4))
    y0, x0 = (size - h) // 2, (size - w) // 2
    out[y0:y0 + h, x0:x0 + w] = img
    return np.clip(out, 0, 1)


# -- dataset layout -------------------------------------------------------------------

def export_dataset(records, root, preset: str | None = None, seeds=()) -> dict:
    """Write ``data/{class}/{source}/{patch_id}.png`` plus ``manifest.json`` under ``root``."""
    root = Path(root)
    entries, counts = [], {c: 0 for c in CLASSES}
    seen = set()
    for r in records:
        rel = Path("data") / r.label / r.source / f"{r.patch_id}.png"
        if rel in seen:
            raise ValueError(f"duplicate patch id {r.patch_id!r} for source {r.source!r}")
        seen.add(rel)
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        save_png(root / rel, r.image)
        entries.append({"path": rel.as_posix(), "source": r.source, "label": r.label,
                        "offset": [int(o) for o in r.offset], "patch_id": r.patch_id})
        counts[r.label] += 1
    manifest = {"version": MANIFEST_VERSION, "preset": preset, "seeds": list(seeds),
                "class_counts": counts, "records": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(root) -> dict:
    """Check that the manifest's file set equals the PNGs under ``data/`` and counts agree."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    listed = {e["path"] for e in manifest["records"]}
    present = {p.relative_to(root).as_posix() for p in (root / "data").rglob("*.png")}
    if listed != present:
        raise ValueError(f"manifest mismatch: missing {sorted(listed - present)}, "
                         f"unlisted {sorted(present - listed)}")
    counts = {c: 0 for c in CLASSES}
    for e in manifest["records"]:
        counts[e["label"]] += 1
    if counts != manifest["class_counts"]:
        raise ValueError("manifest class counts disagree with its records")
    return manifest


def load_dataset(root, label: str | None = None, size: int | None = None) -> tuple:
    """Images and labels from an exported dataset, optionally one class, fitted to ``size``."""
    manifest = verify_manifest(root)
    images, labels = [], []
    for e in manifest["records"]:
        if label is not None and e["label"] != label:
            continue
        img = load_png(Path(root) / e["path"])
        images.append(fit_to_canvas(img, size) if size else img)
        labels.append(e["label"])
    return images, labels


def load_image_dir(path, size: int | None = None) -> tuple:
    """PNG images under ``path`` (sorted), with labels taken from a 'normal'/'cancer' path part."""
    files = sorted(Path(path).rglob("*.png"))
    if not files:
        raise ValueError(f"no PNG images under {path}")
    images, labels = [], []
    for f in files:
        img = load_png(f)
        images.append(fit_to_canvas(img, size) if size else img)
        labels.append(next((p for p in f.relative_to(path).parts if p in CLASSES), None))
    return np.stack(images), labels


# -- experiments ----------------------------------------------------------------------

_DEFAULTS = {
    "preset": "table1-32", "tails": None, "class": "normal", "seeds": [0], "iterations": 20,
    "output": "runs/experiment",
    "data": {"source": "fixture", "n_real": 64, "seed": 100, "dir": None},
    "gan": {"lr": 1e-3, "probes": 4, "spsa_step": 0.05, "batch_size": 8, "n_critic": 5,
            "clip": 0.01, "eval_every": 10, "eval_samples": 32, "image_size": 32,
            "world_extent": 4.0, "subdivisions": 2, "render_mode": "cross-section"},
    "topo": None,
    "eval": {"dim": 64, "samples": 32},
    "samples": {"obj": 2, "grid_thetas": [0.5, 1.5, 2.5], "grid_phis": [0.0, 2.0, 4.0]},
}
_TOPO_DEFAULTS = {"steps": 20, "n_images": 10, "min_n": 2, "lam": 1e-3, "lr": 1e-3, "probes": 4,
                  "thetas": [0.0, 1.5707963267948966], "phis": [0.0, 1.5707963267948966],
                  "preset": "table1-5", "slots": 3, "use_generator": False}


def _merge(section: str, given, defaults) -> dict:
    if given is None:
        return None
    if not isinstance(given, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    return {**defaults, **given}


def validate_config(config) -> dict:
    """Fill defaults and check every field; raises :class:`ConfigError` before any work."""
    if isinstance(config, (str, os.PathLike)):
        try:
            config = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config}: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(config) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = {**_DEFAULTS, **config}
    for section in ("data", "gan", "eval", "samples"):
        cfg[section] = _merge(section, config.get(section, {}), _DEFAULTS[section])
    cfg["topo"] = _merge("topo", config.get("topo"), _TOPO_DEFAULTS)
    try:
        load_preset(cfg["preset"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad preset {cfg['preset']!r}: {exc}") from exc
    if cfg["class"] not in CLASSES:
        raise ConfigError(f"'class' must be one of {CLASSES}")
    seeds = cfg["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("'seeds' must be a nonempty list of non-negative integers")
    if not isinstance(cfg["iterations"], int) or cfg["iterations"] < 1:
        raise ConfigError("'iterations' must be a positive integer")
    if cfg["tails"] is not None and (not isinstance(cfg["tails"], int) or cfg["tails"] < 1):
        raise ConfigError("'tails' must be a positive integer or null")
    if cfg["data"]["source"] not in ("fixture", "dir"):
        raise ConfigError("data.source must be 'fixture' or 'dir'")
    if cfg["data"]["source"] == "dir" and not (cfg["data"]["dir"] and Path(cfg["data"]["dir"]).is_dir()):
        raise ConfigError("data.dir must name an existing directory when data.source is 'dir'")
    try:
        CellGAN(preset=cfg["preset"], tails=cfg["tails"], **cfg["gan"])._config()
        if cfg["topo"] is not None:
            t = cfg["topo"]
            if t["min_n"] > len(t["thetas"]) * len(t["phis"]):
                raise ValueError("topo.min_n exceeds the number of grid angles")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ProjectionSpec(cfg["samples"]["grid_thetas"], cfg["samples"]["grid_phis"])
    return cfg


def _check_output(out: Path) -> None:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output {out} already exists and is not an empty directory")
    parent = out.parent if out.parent != Path("") else Path(".")
    probe = parent
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK | os.X_OK):
        raise ConfigError(f"output location {parent} is not writable")


def _real_images(cfg: dict) -> np.ndarray:
    size = cfg["gan"]["image_size"]
    d = cfg["data"]
    if d["source"] == "fixture":
        return fixture_images(cfg["class"], d["n_real"], seed=d["seed"], size=size,
                              world_extent=cfg["gan"]["world_extent"], mode=cfg["gan"]["render_mode"])
    images, labels = load_image_dir(d["dir"], size)
    keep = [i for i, lab in enumerate(labels) if lab in (None, cfg["class"])]
    if len(keep) < 2:
        raise ConfigError(f"need at least 2 '{cfg['class']}' images under {d['dir']}")
    return images[keep]


def run_experiment(config, out=None, seed=None) -> dict:
    """Train, sample and evaluate as configured; everything lands in ``out`` atomically.

    ``seed`` (if given) replaces the configured seed list. Outputs: manifest.json,
    report.json, metrics/, checkpoints/, samples/ (OBJ meshes and PNG grids).
    """
    cfg = validate_config(config)
    if seed is not None:
        cfg["seeds"] = [int(seed)]
    out = Path(out or cfg["output"])
    _check_output(out)
    layout, _ = load_preset(cfg["preset"])
    if cfg["tails"] is not None:
        layout = layout.with_tails(cfg["tails"])
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        report = _run(cfg, stage, layout)
        if out.exists():
            out.rmdir()
        os.replace(stage, out)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return report


def _run(cfg: dict, stage: Path, layout) -> dict:
    for sub in ("metrics", "checkpoints", "samples"):
        (stage / sub).mkdir()
    real = _real_images(cfg)
    embedder = Embedder(dim=cfg["eval"]["dim"], seed=0)
    files, results = [], {}
    for s in cfg["seeds"]:
        est = CellGAN(preset=cfg["preset"], tails=cfg["tails"], iterations=cfg["iterations"],
                      seed=s, label=cfg["class"], embed_dim=cfg["eval"]["dim"], **cfg["gan"])
        est.fit(real)
        metrics = f"metrics/gan_seed{s}.csv"
        (stage / metrics).write_text(est.metrics_csv)
        est.save(stage / "checkpoints" / f"gan_seed{s}")
        files += [metrics, f"checkpoints/gan_seed{s}.generator.ckpt",
                  f"checkpoints/gan_seed{s}.critic.ckpt"]

        fake = est.sample_images(cfg["eval"]["samples"], seed=s + 1)
        fid = fid_report(real, fake, embedder, [cfg["class"]] * len(real), [cfg["class"]] * len(fake))
        feats = est.sample_features(max(cfg["samples"]["obj"], 1), seed=s + 2)
        for k, f in enumerate(feats[:cfg["samples"]["obj"]]):
            name = f"samples/gan_seed{s}_cell{k}.obj"
            export_obj(Scene([build_cell(f, est.constraints_, est.subdivisions)]), stage / name)
            files.append(name)
        spec = ProjectionSpec(cfg["samples"]["grid_thetas"], cfg["samples"]["grid_phis"],
                              est.image_size, est.render_mode, est.world_extent)
        views = render_batch(Scene([build_cell(feats[0], est.constraints_, est.subdivisions)]), spec)
        grid = f"samples/gan_seed{s}_views.png"
        save_png(stage / grid, image_grid([img for _, _, img in views], len(spec.phis)))
        sheet = f"samples/gan_seed{s}_samples.png"
        save_png(stage / sheet, image_grid(fake, 8))
        files += [grid, sheet]
        results[str(s)] = {"fid_initial": est.history_[0]["fid_proxy"],
                           "fid_final": est.history_[-1]["fid_proxy"], "fid": fid}

        if cfg["topo"] is not None:
            results[str(s)]["topo"] = _run_topo(cfg, stage, s, files)

    manifest = {"version": MANIFEST_VERSION, "preset": cfg["preset"],
                "features": layout.total_features, "tails": layout.tails, "class": cfg["class"],
                "seeds": cfg["seeds"], "iterations": cfg["iterations"], "n_real": int(len(real)),
                "files": sorted(files + ["report.json"])}
    report = {"config": cfg, "results": results}
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (stage / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _run_topo(cfg: dict, stage: Path, s: int, files: list) -> dict:
    t = cfg["topo"]
    decoder = None
    if t["use_generator"]:
        decoder = str(stage / "checkpoints" / f"gan_seed{s}.generator.ckpt")
    images, _ = fixture_clusters(t["n_images"], seed=s, preset=t["preset"], slots=t["slots"],
                                 thetas=tuple(t["thetas"]), phis=tuple(t["phis"]))
    est = TopologyTransformer(preset=t["preset"], slots=t["slots"], thetas=tuple(t["thetas"]),
                              phis=tuple(t["phis"]), min_n=t["min_n"], lam=t["lam"], lr=t["lr"],
                              probes=t["probes"], steps=t["steps"], seed=s, decoder_ckpt=decoder)
    est._setup()
    before = est.score_loss(images)
    est.fit(images)
    after = est.score_loss(images)
    name = f"metrics/topo_seed{s}.csv"
    lines = ["step,reconstruction,penalty,loss"]
    lines += [f"{r['step']},{r['reconstruction']!r},{r['penalty']!r},{r['loss']!r}" for r in est.history_]
    (stage / name).write_text("\n".join(lines) + "\n")
    ckpt = f"checkpoints/topo_seed{s}.ckpt"
    save_params(stage / ckpt, est.model_.params, {"estimator": est.get_params()})
    files += [name, ckpt]
    return {"loss_initial": before, "loss_final": after}


__all__ = [
    "ConfigError", "PatchRecord", "extract_patches", "segment_blobs", "fit_to_canvas",
    "export_dataset", "verify_manifest", "load_dataset", "load_image_dir", "validate_config",
    "run_experiment", "fixture_images", "fixture_clusters", "format_metrics_csv",
]
