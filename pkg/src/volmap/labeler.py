"""Per-point labels from 3D boxes, and class frequency statistics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import IGNORE_LABEL, OrientedBox3D, PointCloud, points_in_box


def label_points(cloud: PointCloud, boxes: Sequence[OrientedBox3D], background: int = 0) -> PointCloud:
    """Label each point with the class of the smallest box containing it.

    Equal volumes fall back to the lower class id; uncovered points get
    ``background``.
    """
    labels = np.full(len(cloud), background, dtype=np.int32)
    claimed = np.zeros(len(cloud), dtype=bool)
    for box in sorted(boxes, key=lambda b: (b.volume, b.class_id)):
        inside = points_in_box(cloud.xyz, box) & ~claimed
        labels[inside] = box.class_id
        claimed |= inside
    return cloud.replace(label=labels)


@dataclass(frozen=True)
class ClassStats:
    counts: tuple
    frequencies: tuple

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    def to_json(self) -> dict:
        return {"counts": list(self.counts), "frequencies": list(self.frequencies)}

    @classmethod
    def from_json(cls, obj) -> "ClassStats":
        counts = tuple(int(c) for c in obj["counts"])
        freqs = obj.get("frequencies")
        if freqs is None:
            return cls.from_counts(counts)
        if len(freqs) != len(counts):
            raise ValueError("counts and frequencies differ in length")
        return cls(counts, tuple(float(f) for f in freqs))

    @classmethod
    def from_counts(cls, counts) -> "ClassStats":
        counts = np.asarray(counts, dtype=np.int64)
        if (counts < 0).any():
            raise ValueError("negative class count")
        total = int(counts.sum())
        if total == 0:
            raise ValueError("class frequencies need at least one labelled point")
        return cls(tuple(int(c) for c in counts), tuple(float(c) / total for c in counts))


def class_frequencies(clouds: Sequence[PointCloud], n_classes: int) -> ClassStats:
    """Per-point class fractions pooled over ``clouds``; ignored points do not count."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for cloud in clouds:
        if cloud.label is None:
            raise ValueError("cloud has no labels")
        lab = cloud.label[cloud.label != IGNORE_LABEL]
        if len(lab) and (lab.min() < 0 or lab.max() >= n_classes):
            raise ValueError(f"label outside [0, {n_classes})")
        counts += np.bincount(lab, minlength=n_classes)
    return ClassStats.from_counts(counts)
