"""Command line entry point: ``cellsynth <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .evaluation import Embedder, fid_report, fid_spread
from .features import (
    load_preset, pack_cluster, pack_features, preset_for_budget, random_cluster, random_features,
)
from .fixtures import CLASSES, fixture_clusters, fixture_images, fixture_patch
from .gan import CellGAN, write_metrics_csv
from .mesh import MeshError, assemble_cluster, export_obj, load_obj, scene_from_cell
from .nn import save_params
from .pipeline import (
    ConfigError, export_dataset, extract_patches, load_image_dir, run_experiment, segment_blobs,
)
from .render import MODES, ProjectionSpec, image_grid, load_png, render_batch, save_png
from .topo import TopologyTransformer

BUDGETS = (5, 32, 1165, 4129)


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _grid(text: str) -> tuple:
    if ":" not in text:
        raise argparse.ArgumentTypeError("grid must look like t1,t2,..:p1,p2,..")
    t, p = text.split(":", 1)
    return _floats(t), _floats(p)


def _preset(args) -> str:
    return preset_for_budget(args.features) if args.features else args.preset


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------------

def cmd_synth_cell(args) -> dict:
    layout, c = load_preset(_preset(args))
    f = random_features(layout, c, args.seed)
    out = _out(args)
    export_obj(scene_from_cell(f, c, args.subdivisions), out / "cell.obj")
    _write_json(out / "cell.json", {"preset": _preset(args), "seed": args.seed,
                                    "features": pack_features(f).tolist()})
    return {"obj": str(out / "cell.obj"), "features": layout.total_features}


def cmd_synth_cluster(args) -> dict:
    layout, c = load_preset(_preset(args))
    g = random_cluster(layout, c, args.slots, args.seed)
    out = _out(args)
    export_obj(assemble_cluster(g, c, args.subdivisions), out / "cluster.obj")
    _write_json(out / "cluster.json", {"preset": _preset(args), "seed": args.seed,
                                       "slots": args.slots, "features": pack_cluster(g).tolist()})
    return {"obj": str(out / "cluster.obj"), "cells": g.count}


def cmd_render(args) -> dict:
    if args.input:
        scene = load_obj(args.input)
    else:
        layout, c = load_preset(_preset(args))
        scene = scene_from_cell(random_features(layout, c, args.seed), c)
    spec = ProjectionSpec(args.thetas, args.phis, args.size, args.mode, args.extent)
    out = _out(args)
    views = render_batch(scene, spec)
    for k, (_, _, img) in enumerate(views):
        i, j = divmod(k, len(spec.phis))
        save_png(out / f"view_{i}_{j}.png", img)
    save_png(out / "views.png", image_grid([v[2] for v in views], len(spec.phis)))
    return {"images": len(views), "out": str(out)}


def _real_images(args, size: int) -> np.ndarray:
    if args.data:
        images, labels = load_image_dir(args.data, size)
        keep = [i for i, lab in enumerate(labels) if lab in (None, args.cls)]
        return images[keep]
    return fixture_images(args.cls, args.n_real, seed=args.data_seed, size=size)


def cmd_train_gan(args) -> dict:
    est = CellGAN(preset=_preset(args), tails=args.tails, iterations=args.iters, seed=args.seed,
                  label=args.cls, lr=args.lr, probes=args.probes, spsa_step=args.spsa_step,
                  batch_size=args.batch_size, n_critic=args.n_critic, clip=args.clip,
                  eval_every=args.eval_every)
    real = _real_images(args, est.image_size)
    out = _out(args)
    est.fit(real)
    write_metrics_csv(out / "metrics.csv", est.history_)
    est.save(out / "gan")
    return {"fid_initial": est.history_[0]["fid_proxy"], "fid_final": est.history_[-1]["fid_proxy"],
            "metrics": str(out / "metrics.csv")}


def cmd_train_topo(args) -> dict:
    thetas, phis = args.grid
    if args.data:
        images, _ = load_image_dir(args.data, 32)
    else:
        images, _ = fixture_clusters(args.n_images, seed=args.seed, preset=args.preset,
                                     thetas=thetas, phis=phis)
    est = TopologyTransformer(preset=args.preset, slots=args.slots, thetas=thetas, phis=phis,
                              min_n=args.min_n, lam=args.lam, lr=args.lr, steps=args.steps,
                              seed=args.seed, decoder_ckpt=args.decoder_ckpt)
    out = _out(args)
    est.fit(images)
    lines = ["step,reconstruction,penalty,loss"]
    lines += [f"{r['step']},{r['reconstruction']!r},{r['penalty']!r},{r['loss']!r}" for r in est.history_]
    (out / "topo_metrics.csv").write_text("\n".join(lines) + "\n")
    save_params(out / "topo.ckpt", est.model_.params, {"estimator": est.get_params()})
    return {"loss_first": est.history_[0]["loss"], "loss_last": est.history_[-1]["loss"]}


def cmd_eval_fid(args) -> dict:
    real, real_labels = load_image_dir(args.real, args.size)
    fake, fake_labels = load_image_dir(args.fake, args.size)
    labelled = None not in real_labels and None not in fake_labels
    rep = fid_report(real, fake, Embedder(dim=args.dim, seed=args.seed),
                     real_labels if labelled else None, fake_labels if labelled else None)
    rep["seed"] = args.seed
    if args.spread_seeds:
        seeds = range(args.seed, args.seed + args.spread_seeds)
        rep["total_mean"], rep["total_std"] = fid_spread(real, fake, tuple(seeds), args.dim)
    _write_json(_out(args) / "fid.json", rep)
    return rep


def cmd_export_dataset(args) -> dict:
    records = []
    if args.input:
        sources = sorted(Path(args.input).glob("*.png"))
        if not sources:
            raise ValueError(f"no PNG images in {args.input}")
        images = [(p.stem, load_png(p)) for p in sources]
    else:
        images = [(f"fixture{k}", fixture_patch(3, 128, seed=args.seed + k)[0]) for k in range(2)]
    for name, img in images:
        patches = extract_patches(img, args.patch_size, args.stride)
        for k, patch in enumerate(patches):
            for r in segment_blobs(patch, source=name, label=args.cls, min_area=args.min_area):
                records.append(dataclasses.replace(r, patch_id=f"p{k:03d}_{r.patch_id}"))
    manifest = export_dataset(records, _out(args), seeds=[args.seed])
    return {"records": len(manifest["records"]), "class_counts": manifest["class_counts"]}


def cmd_run_experiment(args) -> dict:
    config = args.experiment or args.config
    if not config:
        raise ConfigError("run-experiment needs a config file (positional or --config)")
    out = args.out if args.out_given else None
    report = run_experiment(config, out, seed=args.seed if args.seed_given else None)
    return {"seeds": sorted(report["results"]), "out": str(out or report["config"]["output"])}


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file; its keys set option defaults")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")

    parser = argparse.ArgumentParser(prog="cellsynth", parents=[common],
                                     description="Synthesize, render, train and evaluate 3D cell models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    def preset_opts(p):
        p.add_argument("--preset", default="table1-32", help="preset name or JSON path")
        p.add_argument("--features", type=int, choices=BUDGETS, help="pick the preset by feature budget")

    p = add("synth-cell", cmd_synth_cell, "random cell mesh to OBJ")
    preset_opts(p)
    p.add_argument("--subdivisions", type=int, default=3)

    p = add("synth-cluster", cmd_synth_cluster, "random cell cluster to OBJ")
    preset_opts(p)
    p.add_argument("--slots", type=int, default=3)
    p.add_argument("--subdivisions", type=int, default=2)

    p = add("render", cmd_render, "render a mesh over an angle grid to PNG")
    preset_opts(p)
    p.add_argument("--input", help="OBJ file (default: a random cell)")
    p.add_argument("--mode", choices=MODES, default="projection")
    p.add_argument("--thetas", type=_floats, default=(0.0, 0.785, 1.571), help="radians, comma separated")
    p.add_argument("--phis", type=_floats, default=(0.0, 1.571), help="radians, comma separated")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--extent", type=float, default=4.0, help="world units across the image")

    p = add("train-gan", cmd_train_gan, "train the single-cell GAN")
    preset_opts(p)
    p.add_argument("--class", dest="cls", choices=CLASSES, default="normal")
    p.add_argument("--tails", type=int)
    p.add_argument("--iters", type=int, default=60)
    p.add_argument("--data", help="directory of real PNG patches (default: synthetic fixture)")
    p.add_argument("--n-real", type=int, default=64)
    p.add_argument("--data-seed", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--probes", type=int, default=4)
    p.add_argument("--spsa-step", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--n-critic", type=int, default=5)
    p.add_argument("--clip", type=float, default=0.01)
    p.add_argument("--eval-every", type=int, default=10)

    p = add("train-topo", cmd_train_topo, "train the topology transformer")
    p.add_argument("--preset", default="table1-5")
    p.add_argument("--grid", type=_grid, default=((0.0, 1.571), (0.0, 1.571)),
                   help="thetas:phis in radians, e.g. 0,0.785:0,1.047")
    p.add_argument("--min-n", type=int, default=2)
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--slots", type=int, default=3)
    p.add_argument("--n-images", type=int, default=10)
    p.add_argument("--data", help="directory of cluster PNGs (default: synthetic fixture)")
    p.add_argument("--decoder-ckpt", help="generator checkpoint whose tails seed the decoder")

    p = add("eval-fid", cmd_eval_fid, "FID-proxy between two image directories")
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--spread-seeds", type=int, default=0,
                   help="also report mean/std of the total over this many embedding seeds (>= 3 advised)")

    p = add("export-dataset", cmd_export_dataset, "segment patches into a dataset tree")
    p.add_argument("--input", help="directory of source PNG images (default: synthetic patches)")
    p.add_argument("--class", dest="cls", choices=CLASSES, default="normal")
    p.add_argument("--patch-size", type=int, default=128)
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--min-area", type=int, default=50)

    p = add("run-experiment", cmd_run_experiment, "run a configured experiment end to end")
    p.add_argument("experiment", nargs="?", help="experiment config JSON")
    return parser


def _apply_config(parser, args) -> None:
    """Fill options still at their defaults from the ``--config`` JSON object."""
    if not args.config or args.command == "run-experiment":
        return
    doc = json.loads(Path(args.config).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    for key, value in doc.items():
        dest = {"class": "cls", "lambda": "lam"}.get(key, key.replace("-", "_"))
        if dest in ("seed", "out"):
            if not getattr(args, f"{dest}_given"):
                setattr(args, dest, value)
            continue
        if not hasattr(args, dest) or dest in ("func", "command", "config", "seed_given", "out_given"):
            raise ConfigError(f"config key {key!r} is not an option of {args.command}")
        if getattr(args, dest) == sub.get_default(dest):
            setattr(args, dest, tuple(value) if isinstance(value, list) else value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given, args.out_given = hasattr(args, "seed"), hasattr(args, "out")
    args.seed = getattr(args, "seed", 0)
    args.out = getattr(args, "out", ".")
    args.config = getattr(args, "config", None)
    try:
        _apply_config(parser, args)
        result = args.func(args)
    except (ConfigError, MeshError, ValueError, OSError) as exc:
        print(f"cellsynth {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
