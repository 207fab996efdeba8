"""Sensor-subset ablation on synthetic cocoon scenes.

One model is trained and evaluated per subset of sensors, and every row
also reports how many points each obstacle receives from that subset.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from . import metrics, nn, synthgen, volmapnet
from .frames import assign_layers
from .geometry import fuse
from .labeler import class_frequencies
from .voxelizer import cell_ground_truth, voxelize

log = logging.getLogger(__name__)

DEFAULT_SUBSETS = "S1;S5;S1,S5;ALL"


def parse_subsets(text: str, sensors: Sequence[synthgen.SensorSpec]) -> list[tuple[str, tuple]]:
    """``"S1;S5;S1,S5;ALL"`` -> [("S1", (1,)), ("S5", (5,)), ("S1+S5", (1, 5)), ("ALL", (1, .., 5))]."""
    by_name = {s.name: s.sensor_id for s in sensors}
    out = []
    for group in (g.strip() for g in text.split(";")):
        if not group:
            raise ValueError(f"empty sensor subset in {text!r}")
        if group == "ALL":
            out.append(("ALL", tuple(sorted(by_name.values()))))
            continue
        names = [n.strip() for n in group.split(",")]
        unknown = [n for n in names if n not in by_name]
        if unknown:
            raise ValueError(f"unknown sensor {unknown[0]!r}; scene has {sorted(by_name)}")
        out.append(("+".join(names), tuple(sorted({by_name[n] for n in names}))))
    return out


def _render(scenes, cfg):
    """Per scene: list of (cloud, pose, obstacle index) with layers per the config."""
    out = []
    for spec in scenes:
        entries = []
        for cloud, pose, obj in synthgen.generate_with_instances(spec):
            entries.append((assign_layers(cloud, cfg, cloud.layer), pose, obj))
        out.append(entries)
    return out


def _object_counts(rendered, scenes, ids) -> tuple[np.ndarray, np.ndarray]:
    """Points per obstacle from sensors ``ids``, and each obstacle's class."""
    counts, classes = [], []
    for entries, spec in zip(rendered, scenes):
        c = np.zeros(len(spec.obstacles), dtype=np.int64)
        for cloud, _, obj in entries:
            if len(cloud) and int(cloud.sensor_id[0]) in ids:
                c += np.bincount(obj[obj >= 0], minlength=len(spec.obstacles))
        counts.append(c)
        classes += [b.class_id for b in spec.obstacles]
    return np.concatenate(counts) if counts else np.zeros(0, np.int64), np.asarray(classes, dtype=np.int64)


def _fused(entries, ids):
    return fuse([(c, p) for c, p, _ in entries if len(c) and int(c.sensor_id[0]) in ids]
                or [(entries[0][0].subset(np.zeros(0, np.int64)), entries[0][1])])


def run_ablation(scenes: Sequence[synthgen.SceneSpec], subsets: Sequence[tuple[str, tuple]], cfg,
                 n_eval: int = 0, progress=None) -> dict:
    """Train and evaluate one model per subset.

    The last ``n_eval`` scenes are held out for evaluation; with ``n_eval=0``
    the model is evaluated on its own training scenes.
    """
    if not scenes:
        raise ValueError("no scenes")
    if not 0 <= n_eval < len(scenes):
        raise ValueError("n_eval must leave at least one training scene")
    rendered = _render(scenes, cfg)
    train_idx = list(range(len(scenes) - n_eval))
    eval_idx = list(range(len(scenes) - n_eval, len(scenes))) if n_eval else train_idx
    names = cfg.classes
    grid_cfg = cfg.grid
    rows = []
    for label, ids in subsets:
        train_clouds = [_fused(rendered[i], ids) for i in train_idx]
        stats = class_frequencies(train_clouds, cfg.n_classes)
        weights = nn.class_weights(stats, cfg.log_base)
        dataset = []
        for c in train_clouds:
            g = voxelize(c, grid_cfg)
            dataset.append((g, cell_ground_truth(g, c, stats)))
        params = volmapnet.init_params(cfg.net, cfg.init_seed)
        _, history = volmapnet.train(dataset, params, cfg.train, weights)

        cm = metrics.ConfusionMatrix(cfg.n_classes)
        n_points = 0
        for i in eval_idx:
            c = _fused(rendered[i], ids)
            n_points += len(c)
            metrics.accumulate(cm, c, volmapnet.infer(c, params, grid_cfg))
        iou = metrics.iou(cm)
        counts, classes = _object_counts([rendered[i] for i in eval_idx], [scenes[i] for i in eval_idx], ids)
        row = {
            "subset": label,
            "sensors": list(ids),
            "iou": {names[k]: v for k, v in iou.items()},
            "mean_iou": metrics.mean_iou(iou),
            "mean_points_per_object": float(counts.mean()) if len(counts) else 0.0,
            "points_per_object_by_class": {names[k]: float(counts[classes == k].mean())
                                           for k in sorted(set(classes.tolist()))},
            "points_per_object": counts.tolist(),
            "n_points": int(n_points),
            "final_loss": history[-1] if history else None,
        }
        rows.append(row)
        log.info("subset %s: mean IOU %.3f, %.1f points/object", label, row["mean_iou"],
                 row["mean_points_per_object"])
        if progress is not None:
            progress(row)
    ious = [r["mean_iou"] for r in rows]
    return {
        "rows": rows,
        "classes": names,
        "n_train_frames": len(train_idx),
        "n_eval_frames": len(eval_idx),
        "held_out": bool(n_eval),
        "grid_shape": [grid_cfg.n_layers, *grid_cfg.shape],
        # reported only; the sensor-count trend is not guaranteed at this scale
        "mean_iou_nondecreasing": bool(all(b >= a for a, b in zip(ious, ious[1:]))),
    }
