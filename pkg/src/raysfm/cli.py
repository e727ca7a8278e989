"""Command-line entry points: simulate, reconstruct, evaluate, export-ply."""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import align_and_evaluate, read_poses, write_intrinsics, write_poses
from .graph import FileBackend, SyntheticCovisBackend, write_descriptors
from .pipeline import (PipelineConfig, ProviderConfig, config_to_dict, event_lines, load_config, make_provider,
                       run_full, with_seed)
from .provider import FileProvider, SceneConfig, query_target, save_pointmap
from .tracks import read_tracks, write_tracks

logger = logging.getLogger("raysfm")

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# small writers

def write_ply(path, points):
    """ASCII PLY with one float32 ``x y z`` vertex per row of ``points``."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [" ".join(f"{v:.9g}" for v in row) for row in pts.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def _timestamp():
    # SOURCE_DATE_EPOCH pins the manifest clock for reproducible outputs
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.datetime.fromtimestamp(int(epoch), datetime.timezone.utc) if epoch else \
        datetime.datetime.now(datetime.timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out, command, cfg, inputs, seed):
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": config_to_dict(cfg) if cfg is not None else None,
        "inputs": [str(p) for p in inputs],
        "output_dir": str(out),
        "seed": seed,
        "started": _timestamp(),
    }
    _dump_json(Path(out) / "manifest.json", manifest)
    return manifest


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CommandError(f"cannot write to output directory {out}: {exc.strerror or exc}") from exc
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg):
    out = _prepare_out(args.out)
    scene_cfg = cfg.scene
    changes = {k: v for k, v in (("n_images", args.images), ("trajectory", args.trajectory),
                                 ("n_isolated", args.isolated)) if v is not None}
    scene_cfg = dataclasses.replace(scene_cfg, **changes)
    prov = cfg.provider
    changes = {k: v for k, v in (("noise_sigma", args.noise), ("outlier_fraction", args.outliers),
                                 ("gamma", args.gamma)) if v is not None}
    prov = dataclasses.replace(prov, **changes)
    cfg = dataclasses.replace(cfg, scene=scene_cfg, provider=prov).validate()
    write_manifest(out, "simulate", cfg, [], args.seed)

    provider = make_provider(cfg)
    scene = provider.scene
    write_poses(out / "poses_gt.txt", scene.gt_poses)
    write_intrinsics(out / "intrinsics.txt", scene.intrinsics)
    backend = SyntheticCovisBackend(scene)
    write_descriptors(out / "descriptors.txt", [backend(i) for i in scene.image_ids])
    _dump_json(out / "scene.json", {"scene": dataclasses.asdict(scene_cfg), "scene_seed": cfg.scene_seed,
                                    "provider": dataclasses.asdict(prov)})
    if args.pointmaps:
        (out / "pointmaps").mkdir(exist_ok=True)
        for i in scene.image_ids:
            save_pointmap(query_target(provider.state, scene, i, i), out / "pointmaps" / f"{i}.pmap")
    logger.info("simulated %d images into %s", len(scene.image_ids), out)
    return EXIT_OK


def _load_inputs(inp, cfg):
    """Provider, descriptor backend and ground truth for an input directory."""
    inp = Path(inp)
    if not inp.is_dir():
        raise CommandError(f"input directory not found: {inp}")
    desc = inp / "descriptors.txt"
    if not desc.exists():
        raise CommandError(f"missing descriptor file: {desc}")
    scene_json = inp / "scene.json"
    gt = None
    if scene_json.exists():
        meta = json.loads(scene_json.read_text())
        prov = dataclasses.replace(ProviderConfig(**meta["provider"]), rng_seed=cfg.provider.rng_seed)
        cfg = dataclasses.replace(cfg, scene=SceneConfig(**meta["scene"]), scene_seed=int(meta["scene_seed"]),
                                  provider=prov).validate()
        provider = make_provider(cfg)
    else:
        provider = FileProvider(inp, cfg.provider.noise_sigma)
        if (inp / "poses_gt.txt").exists():
            gt = read_poses(inp / "poses_gt.txt")
    return cfg, provider, FileBackend(desc), gt


def cmd_reconstruct(args, cfg):
    out = _prepare_out(args.out)
    cfg, provider, backend, gt = _load_inputs(args.input, cfg)
    write_manifest(out, "reconstruct", cfg, [args.input], args.seed)
    state, report = run_full(cfg, provider, backend, ground_truth=gt)
    write_poses(out / "poses.txt", state.poses)
    write_tracks(out / "tracks.txt", state.tracks)
    write_ply(out / "points.ply", np.array([t.point for t in state.tracks]).reshape(-1, 3))
    Path(out / "events.log").write_text("".join(event_lines(state)))
    _dump_json(out / "report.json", report.to_dict())
    logger.info("%s: %d/%d registered, report hash %s", report.status, report.registered, report.total,
                report.content_hash()[:12])
    if report.status == "error":
        for e in report.errors:
            print(f"error in epoch {e['epoch']}: {e['error']}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if report.status == "complete" else EXIT_PARTIAL


def _plot_centers(path, ev, pred, gt):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "raysfm"
    import matplotlib.pyplot as plt

    ids = sorted(ev.per_image)
    P = np.array([ev.transform.apply(pred[i].center) for i in ids])
    G = np.array([gt[i].center for i in ids])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(G[:, 0], G[:, 1], s=14, marker="o", facecolors="none", edgecolors="k", label="ground truth")
    ax.scatter(P[:, 0], P[:, 1], s=6, c="tab:red", label="aligned prediction")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_evaluate(args, cfg):
    out = _prepare_out(args.out)
    for p in (args.pred, args.gt):
        if not Path(p).exists():
            raise CommandError(f"missing pose file: {p}")
    pred, gt = read_poses(args.pred), read_poses(args.gt)
    try:
        ev = align_and_evaluate(pred, gt)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    _dump_json(out / "metrics.json", ev.as_dict())
    if args.svg:
        _plot_centers(out / args.svg, ev, pred, gt)
    logger.info("mean rotation error %.3g deg, mean translation error %.3g", ev.mean_rotation_deg,
                ev.mean_translation)
    return EXIT_OK


def cmd_export_ply(args, cfg):
    src = Path(args.tracks)
    if not src.exists():
        raise CommandError(f"missing track file: {src}")
    tracks = read_tracks(src)
    dst = Path(args.output)
    try:
        write_ply(dst, np.array([t.point for t in tracks]).reshape(-1, 3))
    except OSError as exc:
        raise CommandError(f"cannot write {dst}: {exc.strerror or exc}") from exc
    logger.info("wrote %d vertices to %s", len(tracks), dst)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="raysfm", description="Incremental pose recovery from pointmaps.")
    p.add_argument("--config", help="INI config file with per-module sections")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic scene")
    s.add_argument("--images", type=int)
    s.add_argument("--trajectory", choices=["orbit", "forward"])
    s.add_argument("--isolated", type=int, help="extra images with no co-visible neighbors")
    s.add_argument("--noise", type=float, help="pointmap noise sigma, scene units")
    s.add_argument("--outliers", type=float, help="outlier fraction of pointmap pixels")
    s.add_argument("--gamma", type=float, help="per-observation noise attenuation")
    s.add_argument("--pointmaps", action="store_true", help="also write one PMAP file per image")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="recover poses from a scene directory")
    r.add_argument("input", help="directory from 'simulate' or with intrinsics.txt, pointmaps/ and descriptors.txt")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="compare a pose file against ground truth")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--svg", help="file name (inside --out) for a camera-center plot")
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-ply", help="convert a track dump to an ASCII PLY")
    x.add_argument("tracks")
    x.add_argument("output")
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_seed(load_config(args.config), args.seed)
        return args.func(args, cfg)
    except (CommandError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"raysfm {args.command}: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
