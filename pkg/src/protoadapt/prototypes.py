"""Class prototypes: frozen source means and EMA-tracked target representatives.

Source prototypes are per-class means of frozen-stats features of the
pretrained extractor, built once before deployment. Target prototypes start
as the normalized head rows and are blended towards the normalized per-class
mean feature of each batch's reliable samples. Neither side ever enters a
gradient computation: updates here are plain ndarray arithmetic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import Model
from .numerics import l2_normalize


@dataclass(frozen=True)
class SourcePrototypes:
    matrix: np.ndarray  # [C, d]
    counts: np.ndarray  # samples per class that formed each row

    def __post_init__(self):
        self.matrix.setflags(write=False)
        self.counts.setflags(write=False)


@dataclass
class TargetPrototypes:
    matrix: np.ndarray  # [C, d], mutable EMA state
    alpha: float = 0.996


def build_source_prototypes(model0: Model, x: np.ndarray, y: np.ndarray,
                            cap: int = 100_000, seed: int = 0) -> SourcePrototypes:
    """Per-class mean of frozen-stats features over a capped source subset.

    The cap samples uniformly (seeded, without replacement); a class that ends
    up empty after capping is an error.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    num_classes = model0.config.num_classes
    if len(x) > cap:
        idx = np.random.default_rng(seed).choice(len(x), size=cap, replace=False)
        x, y = x[idx], y[idx]

    feats = np.empty((len(x), model0.config.feature_dim))
    for start in range(0, len(x), 256):
        f, _ = model0.forward(x[start:start + 256], mode="frozen")
        feats[start:start + 256] = f.value

    matrix = np.zeros((num_classes, model0.config.feature_dim))
    counts = np.zeros(num_classes, dtype=np.intp)
    for c in range(num_classes):
        mask = y == c
        counts[c] = mask.sum()
        if counts[c] == 0:
            raise ValueError(f"class {c} has no samples after capping")
        matrix[c] = feats[mask].mean(axis=0)
    return SourcePrototypes(matrix=matrix, counts=counts)


def init_target_prototypes(head_w: np.ndarray, alpha: float = 0.996) -> TargetPrototypes:
    """Each row is the unit-normalized head template for its class."""
    head_w = np.asarray(head_w, dtype=np.float64)
    norms = np.linalg.norm(head_w, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("head has a zero row; cannot seed a target prototype")
    return TargetPrototypes(matrix=head_w / norms[:, None], alpha=alpha)


def ema_update(protos: TargetPrototypes, features: np.ndarray,
               pseudo_labels: np.ndarray) -> None:
    """Blend each present class towards the normalized mean of its features.

    Must be called after the prototype loss of the same batch has been
    computed; features are plain values, detached from any graph.
    """
    features = np.asarray(features, dtype=np.float64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.intp)
    if len(pseudo_labels) == 0:
        return
    num_classes = protos.matrix.shape[0]
    if pseudo_labels.min() < 0 or pseudo_labels.max() >= num_classes:
        raise ValueError("pseudo-label outside [0, C)")
    a = protos.alpha
    for c in np.unique(pseudo_labels):
        mean = features[pseudo_labels == c].mean(axis=0)
        protos.matrix[c] = a * protos.matrix[c] + (1.0 - a) * l2_normalize(mean)


def export_csv(path, source: SourcePrototypes, target: TargetPrototypes,
               target_gt: np.ndarray | None = None) -> None:
    """Snapshot rows (kind, class, d values) for offline inspection."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = source.matrix.shape[1]
        writer.writerow(["kind", "class"] + [f"v{i}" for i in range(dim)])
        for kind, matrix in (("source", source.matrix), ("target", target.matrix),
                             ("target-gt", target_gt)):
            if matrix is None:
                continue
            for c, row in enumerate(matrix):
                writer.writerow([kind, c] + [repr(float(v)) for v in row])
