"""Command line interface: synth, flow, autolabel, query, eval, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io as dio
from .config import PipelineConfig, config_from_mapping, format_config, load_config
from .pipeline import compute_flows, format_report, ground_truth_from_labels, run_autolabel, run_eval, run_query, select_prompts
from .synth import PRESETS, generate, occlusion_scenario

log = logging.getLogger("autolabel3d")


class CliError(Exception):
    pass


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_flags(parser):
    group = parser.add_argument_group("pipeline configuration (override the config file)")
    group.add_argument("--config", type=Path, help="INI config file (defaults to the shipped one)")
    for f in fields(PipelineConfig):
        default = f.default
        hint = "comma-separated list" if isinstance(default, tuple) else type(default).__name__
        group.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar="VALUE", help=f"{hint} (default: {default})")


def _config(args):
    base = load_config(args.config) if getattr(args, "config", None) else load_config()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return config_from_mapping(overrides, base)


def _dataset(path):
    manifest = dio.load_manifest(path)
    return manifest, dio.load_frames(manifest)


def _queries_path(manifest, given, attr):
    if given is not None:
        return given
    rel = getattr(manifest, attr)
    if rel is None:
        raise CliError(f"dataset {manifest.root} has no {attr} file; pass one explicitly")
    return manifest.root / rel


def cmd_synth(args):
    spec = occlusion_scenario(args.preset)
    ds = generate(spec, seed=args.seed)
    manifest = dio.save_synth_dataset(args.out, ds)
    print(f"wrote {manifest.frame_count} frames, {len(ds.gt_boxes)} GT boxes to {manifest.root}")


def cmd_flow(args):
    cfg = _config(args)
    manifest, frames = _dataset(args.dataset)
    flows = compute_flows(frames, cfg, manifest.dt, args.workers)
    for i, v in enumerate(flows):
        dio.save_flow(manifest, i, v)
    manifest.write()
    moving = sum(int((np.linalg.norm(v, axis=1) >= cfg.eps_sf).sum()) for v in flows)
    print(f"wrote flow for {len(flows)} frames ({moving} points at >= {cfg.eps_sf} m/s)")


def _sidecar(path):
    return Path(str(path) + ".tracks.json")


def cmd_autolabel(args):
    cfg = _config(args)
    manifest, frames = _dataset(args.dataset)
    bg = None
    if cfg.background_filter:
        bg = dio.read_queries(_queries_path(manifest, args.background_queries, "background_queries"))
    start = time.perf_counter()
    result = run_autolabel(frames, cfg, bg, manifest.dt, workers=args.workers)
    log.info("autolabel took %.2f s", time.perf_counter() - start)
    dio.write_labels(args.out, result.labels)
    doc = {
        "dataset": str(manifest.root),
        "tracks": [
            {"id": t.id, "frames": [int(f) for f in t.frames]}
            for t in sorted(result.tracks, key=lambda t: t.id)
        ],
        "features": [entry.get("embeddings") for entry in manifest.frames],
    }
    _sidecar(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(result.labels)} boxes in {len(result.tracks)} tracks to {args.out}")


def cmd_query(args):
    cfg = _config(args)
    manifest, frames = _dataset(args.dataset)
    labels = dio.read_labels(args.labels)
    queries = select_prompts(dio.read_queries(_queries_path(manifest, args.queries, "queries")), cfg)
    out = run_query(labels, frames, queries)
    dio.write_labels(args.out, out)
    counts = {}
    for lab in out:
        counts[lab.category or "-"] = counts.get(lab.category or "-", 0) + 1
    print("categories: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))


def cmd_eval(args):
    cfg = _config(args)
    manifest = dio.load_manifest(args.dataset)
    dets = dio.read_labels(args.labels)
    gt_path = args.gt if args.gt is not None else _queries_path(manifest, None, "gt_boxes")
    gts = ground_truth_from_labels(dio.read_labels(gt_path))
    poses = [manifest.ego_pose(i) for i in range(manifest.frame_count)]
    report = run_eval(dets, gts, poses, cfg)
    if args.json is not None:
        Path(args.json).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(format_report(report))


def cmd_inspect(args):
    manifest = dio.load_manifest(args.dataset)
    print(f"dataset      {manifest.root}")
    print(f"version      {manifest.version}")
    print(f"frames       {manifest.frame_count}")
    print(f"dt           {manifest.dt}")
    print(f"embedding    {manifest.embedding_dim}")
    print(f"coordinates  {manifest.coordinate_frame}")
    for attr in ("gt_boxes", "queries", "background_queries"):
        print(f"{attr:<12} {getattr(manifest, attr) or '-'}")
    counts = [e["num_points"] for e in manifest.frames]
    if counts:
        print(f"points/frame min {min(counts)} max {max(counts)} mean {np.mean(counts):.1f}")
    print(f"flow         {'yes' if all(e.get('flow') for e in manifest.frames) else 'no'}")
    if args.frames:
        for e in manifest.frames:
            extras = ",".join(sorted(e.get("extras") or {})) or "-"
            print(f"  {e['index']:>4} t={e['timestamp']:.3f} n={e['num_points']} extras={extras}")


def cmd_config(args):
    sys.stdout.write(format_config(_config(args)))


def build_parser():
    p = argparse.ArgumentParser(prog="autolabel3d", description="Unsupervised 3D auto labeling from LiDAR and per-point features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--preset", default="urban-mini", help=f"one of {', '.join(sorted(PRESETS))}")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flow", help="estimate scene flow and store it in the dataset")
    s.add_argument("dataset", type=Path)
    s.add_argument("--workers", type=int, default=1)
    _add_config_flags(s)
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("autolabel", help="produce amodal boxes and tracks")
    s.add_argument("dataset", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--background-queries", type=Path)
    s.add_argument("--workers", type=int, default=1)
    _add_config_flags(s)
    s.set_defaults(func=cmd_autolabel)

    s = sub.add_parser("query", help="assign open-vocabulary categories to labels")
    s.add_argument("labels", type=Path)
    s.add_argument("dataset", type=Path)
    s.add_argument("--queries", type=Path)
    s.add_argument("--out", type=Path, required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="AP / MOT / FP taxonomy against ground truth")
    s.add_argument("labels", type=Path)
    s.add_argument("dataset", type=Path)
    s.add_argument("--gt", type=Path)
    s.add_argument("--json", type=Path, help="also write the machine-readable report here")
    _add_config_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", help="print manifest and point statistics")
    s.add_argument("dataset", type=Path)
    s.add_argument("--frames", action="store_true", help="one line per frame")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("config", help="print the effective configuration")
    _add_config_flags(s)
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        args.func(args)
    except (CliError, ValueError, FileNotFoundError, IndexError) as exc:
        print(f"autolabel3d {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
