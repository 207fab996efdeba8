"""Command-line front end.

Every subcommand exits 0 on success. Failures print one JSON object on
stderr, ``{"error": ..., "message": ..., "pointer": ...}``, and exit 1
(2 for usage errors). Runs write ``resolved_config.json`` beside their
outputs; passing that file back as ``--config`` repeats the run exactly.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import ablation as ablation_mod
from . import config as config_mod
from . import dataio, frames, metrics, nn, synthgen, volmapnet
from .labeler import class_frequencies, label_points
from .spherical import occlusion_report
from .voxelizer import cell_ground_truth, voxelize

log = logging.getLogger("volmap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(path: str) -> str:
    return dataio.ensure_dir(os.path.dirname(os.path.abspath(path)))


def _load_config(path, fallback=None) -> config_mod.RunConfig:
    if path:
        return config_mod.load(path)
    return fallback if fallback is not None else config_mod.resolve({})


def _model_config(params) -> config_mod.RunConfig:
    raw = params.meta.get("run_config")
    if raw is None:
        raise ValueError("model file carries no run config; pass --config")
    return config_mod.resolve(raw)


def _write_json(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_cloud(path, cfg, rings_path=None):
    cloud = dataio.read_velodyne_bin(path)
    rings = dataio.read_label_file(rings_path) if rings_path else None
    if rings is not None and len(rings) != len(cloud):
        raise dataio.ParseError(f"{rings_path}: {len(rings)} rings for {len(cloud)} points")
    return frames.assign_layers(cloud, cfg, rings)


# -- subcommands -------------------------------------------------------------------

def cmd_derive_labels(args) -> dict:
    cfg = _load_config(args.config)
    out = dataio.ensure_dir(args.out)
    ids = frames.frame_ids(args.frames)
    written = 0
    for fid in ids:
        cloud = dataio.read_velodyne_bin(os.path.join(args.frames, "velodyne", fid + ".bin"))
        calib = dataio.read_kitti_calib(os.path.join(args.calib, fid + ".txt"))
        boxes = dataio.read_kitti_labels(os.path.join(args.frames, "label_2", fid + ".txt"), calib, cfg.class_map)
        dataio.write_label_file(label_points(cloud, boxes).label, os.path.join(out, fid + ".txt"))
        written += 1
    cfg.write_echo(out)
    return {"frames": written, "out": out}


def cmd_voxelize(args) -> dict:
    cfg = _load_config(args.config)
    cloud = _read_cloud(args.cloud, cfg, args.rings)
    grid = voxelize(cloud, cfg.grid)
    dataio.dump_tensor(grid.values, args.dump)
    cfg.write_echo(_out_dir(args.dump))
    return {"shape": list(grid.values.shape), "in_roi": int(len(grid.in_roi)),
            "out_of_roi": int(len(grid.out_of_roi))}


def _load_split(cfg, name, need_labels=True):
    root = cfg.data_root
    clouds = []
    for fid in frames.select(root, cfg.split(name)):
        c = frames.load_frame(root, fid, cfg)
        if need_labels and c.label is None:
            raise FileNotFoundError(f"{root}: frame {fid} has no per-point labels")
        clouds.append(c)
    return clouds


def cmd_train(args) -> dict:
    cfg = _load_config(args.config)
    clouds = _load_split(cfg, "train")
    if not clouds:
        raise ValueError(f"{cfg.data_root}: no training frames")
    if cfg.class_stats is None:
        # frozen into the echo so evaluation never recomputes them
        cfg = cfg.with_class_stats(class_frequencies(clouds, cfg.n_classes))
    stats = cfg.class_stats
    weights = nn.class_weights(stats, cfg.log_base)
    dataset = []
    for c in clouds:
        g = voxelize(c, cfg.grid)
        dataset.append((g, cell_ground_truth(g, c, stats)))
    params = volmapnet.init_params(cfg.net, cfg.init_seed)

    def progress(epoch, loss):
        log.info("epoch %d loss %.6f", epoch + 1, loss)

    _, history = volmapnet.train(dataset, params, cfg.train, weights, progress=progress)
    out_dir = _out_dir(args.out)
    echo = cfg.write_echo(out_dir)
    with open(echo) as f:
        params.meta = {"run_config": json.load(f), "classes": cfg.classes}
    volmapnet.save(params, args.out)
    loss_log = args.loss_log or os.path.splitext(args.out)[0] + "_loss.csv"
    with open(loss_log, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss"])
        w.writerows((i + 1, repr(v)) for i, v in enumerate(history))
    return {"model": args.out, "frames": len(clouds), "epochs": len(history),
            "final_loss": history[-1] if history else None, "loss_log": loss_log}


def cmd_infer(args) -> dict:
    params = volmapnet.load(args.model)
    cfg = _load_config(args.config, None) if args.config else _model_config(params)
    cloud = _read_cloud(args.cloud, cfg, args.rings)
    pred = volmapnet.infer(cloud, params, cfg.grid)
    dataio.write_label_file(pred.label, args.out)
    if args.ply:
        dataio.write_ply(pred, args.ply)
    cfg.write_echo(_out_dir(args.out))
    return {"points": len(pred), "out": args.out}


def cmd_eval(args) -> dict:
    params = volmapnet.load(args.model)
    cfg = _load_config(args.config, None) if args.config else _model_config(params)
    root = args.frames
    ids = frames.select(root, None)
    cm = metrics.ConfusionMatrix(cfg.n_classes)
    first = None
    for fid in ids:
        gt = frames.load_frame(root, fid, cfg)
        if gt.label is None:
            raise FileNotFoundError(f"{root}: frame {fid} has no per-point labels")
        metrics.accumulate(cm, gt, volmapnet.infer(gt, params, cfg.grid))
        first = gt if first is None else first
    timing = None
    if first is not None and args.timing_runs > 0:
        timing = metrics.time_inference(first, params, cfg.grid, n_warmup=1, n_runs=args.timing_runs)
    report = metrics.evaluation_report(cm, cfg.classes, timing)
    report["frames"] = len(ids)
    _write_json(report, args.report)
    cfg.write_echo(_out_dir(args.report))
    return {"report": args.report, "mean_iou": report["mean_iou"]}


def cmd_occlusion_report(args) -> dict:
    cfg = _load_config(args.config)
    poses = dataio.read_pose_file(args.poses)
    sph = cfg.spherical
    per_frame = {}
    totals = {}
    for fid in frames.frame_ids(args.frames):
        rep = occlusion_report(frames.load_frame(args.frames, fid, cfg, poses=poses), sph, cfg.grid)
        per_frame[fid] = rep
        for k, v in rep.items():
            if isinstance(v, int):
                totals[k] = totals.get(k, 0) + v
    if totals.get("in_range_points"):
        totals["collision_rate"] = totals["collisions"] / totals["in_range_points"]
    report = {"frames": per_frame, "total": totals,
              "spherical": {"n_layers": sph.n_layers, "n_angles": sph.n_angles}}
    if args.report:
        _write_json(report, args.report)
        cfg.write_echo(_out_dir(args.report))
        return {"report": args.report, "collisions": totals.get("collisions", 0)}
    return report


def cmd_ablation(args) -> dict:
    cfg = _load_config(args.config, config_mod.cocoon_defaults())
    with open(args.scene) as f:
        scenes = synthgen.scenes_from_json(json.load(f))
    subsets = ablation_mod.parse_subsets(args.subsets, scenes[0].sensors)
    report = ablation_mod.run_ablation(scenes, subsets, cfg, n_eval=args.eval_frames)
    _write_json(report, args.report)
    cfg.write_echo(_out_dir(args.report))
    return {"report": args.report, "rows": len(report["rows"])}


def cmd_gen(args) -> dict:
    with open(args.scene) as f:
        doc = json.load(f)
    scenes = synthgen.scenes_from_json(doc)
    out = dataio.ensure_dir(args.out)
    n_points = 0
    for k, spec in enumerate(scenes):
        fid = f"{k:06d}"
        entries = [(s.sensor_id, cloud, pose) for s, (cloud, pose) in zip(spec.sensors, synthgen.generate(spec))]
        frames.write_cocoon_frame(out, fid, entries)
        _write_json(spec.to_json(), os.path.join(out, f"scene_{fid}.json"))
        n_points += sum(len(c) for _, c, _ in entries)
    _write_json(doc, os.path.join(out, "scene_set.json"))
    return {"frames": len(scenes), "points": n_points, "out": out}


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="volmap", description="Volumetric bird-eye-view LiDAR segmentation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("derive-labels", help="3D boxes -> per-point label files")
    s.add_argument("--frames", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_derive_labels)

    s = sub.add_parser("voxelize", help="export one cloud's grid tensor")
    s.add_argument("--cloud", required=True)
    s.add_argument("--config")
    s.add_argument("--dump", required=True)
    s.add_argument("--rings", help="per-point ring file, for native layers")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", help="train a model from the run config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="label one cloud")
    s.add_argument("--model", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ply")
    s.add_argument("--config")
    s.add_argument("--rings")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="per-class IOU and timing on labelled frames")
    s.add_argument("--model", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--config")
    s.add_argument("--timing-runs", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("occlusion-report", help="spherical-projection collisions of fused frames")
    s.add_argument("--frames", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--config")
    s.add_argument("--report")
    s.set_defaults(func=cmd_occlusion_report)

    s = sub.add_parser("ablation", help="one model per sensor subset on synthetic scenes")
    s.add_argument("--scene", required=True)
    s.add_argument("--subsets", default=ablation_mod.DEFAULT_SUBSETS)
    s.add_argument("--report", required=True)
    s.add_argument("--config")
    s.add_argument("--eval-frames", type=int, default=0)
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("gen", help="write synthetic cocoon frames")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)
    return p


def _fail(kind: str, message: str, pointer=None, code: int = 1) -> int:
    err = {"error": kind, "message": message}
    if pointer is not None:
        err["pointer"] = pointer
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), code=2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except config_mod.ConfigError as exc:
        return _fail("config", str(exc), exc.pointer)
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        return _fail(type(exc).__name__, " ".join(msg.split()))
    json.dump(result, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
