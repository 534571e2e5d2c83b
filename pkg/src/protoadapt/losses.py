"""Objective terms for test-time adaptation.

Reliable samples are the low-entropy subset of a batch; the prototype losses
see only those. Per-batch aggregation is the arithmetic mean over the
contributing samples for every term, which keeps the trade-off weights
independent of batch size. Prototype matrices enter as constants: gradients
reach the feature extractor only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def default_entropy_threshold(num_classes: int, factor: float = 0.4) -> float:
    return factor * math.log(num_classes)


@dataclass
class ReliableSet:
    indices: np.ndarray  # positions within the batch, entropy strictly below the threshold
    pseudo_labels: np.ndarray  # argmax class per retained sample (first index wins ties)
    entropies: np.ndarray  # per-sample entropy of the full batch

    def __len__(self):
        return len(self.indices)


@dataclass
class LossWeights:
    ema: float = 2.0
    src: float = 20.0
    cons: float = 0.0

    def validate(self):
        for name, v in (("ema", self.ema), ("src", self.src), ("cons", self.cons)):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"lambda_{name} must be finite and nonnegative")


def reliability_mask(logits: np.ndarray, e0: float) -> ReliableSet:
    """Keep samples whose prediction entropy is strictly below ``e0``."""
    logits = np.asarray(logits, dtype=np.float64)
    entropies = nm.entropy(logits, axis=1)
    indices = np.flatnonzero(entropies < e0)
    pseudo = logits[indices].argmax(axis=1) if len(indices) else np.empty(0, dtype=np.intp)
    return ReliableSet(indices=indices, pseudo_labels=pseudo.astype(np.intp),
                       entropies=entropies)


def _zero() -> Tensor:
    return Tensor(0.0)


def ema_proto_loss(features: Tensor, pseudo_labels: np.ndarray, proto_matrix,
                   label_mode: str = "hard", soft_targets: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of features against the (normalized) target prototypes.

    features: [R, d] graph node for the reliable samples. proto_matrix may be
    an ndarray or a Tensor; either way it is detached, so no gradient reaches
    the prototypes. Hard mode scores the pseudo-label class; soft mode scores
    the model's own softmax (``soft_targets``).
    """
    if features.shape[0] == 0:
        return _zero()
    if isinstance(proto_matrix, Tensor):
        proto_matrix = proto_matrix.detach().value
    protos = nm.l2_normalize(np.asarray(proto_matrix, dtype=np.float64), axis=1)
    logp = nm.log_softmax(nm.linear(features, nm.constant(protos)))
    if label_mode == "hard":
        return -nm.gather_rows(logp, np.asarray(pseudo_labels, dtype=np.intp)).mean()
    if label_mode == "soft":
        if soft_targets is None:
            raise ValueError("soft mode needs the model's softmax as targets")
        q = nm.constant(np.asarray(soft_targets, dtype=np.float64))
        return -(q * logp).sum(axis=1).mean()
    raise ValueError(f"unknown label_mode {label_mode!r}")


def source_align_loss(features: Tensor, pseudo_labels: np.ndarray,
                      source_matrix: np.ndarray) -> Tensor:
    """Mean squared distance between each feature and its pseudo-label's source prototype."""
    if features.shape[0] == 0:
        return _zero()
    anchors = np.asarray(source_matrix, dtype=np.float64)[np.asarray(pseudo_labels, dtype=np.intp)]
    diff = features - nm.constant(anchors)
    return (diff * diff).sum(axis=1).mean()


def entropy_min_loss(logits: Tensor, indices: np.ndarray | None = None) -> Tensor:
    """Mean prediction entropy; over the whole batch, or a reliable subset if given."""
    if indices is not None:
        if len(indices) == 0:
            return _zero()
        logits = nm.take_rows(logits, indices)
    logp = nm.log_softmax(logits)
    p = nm.exp(logp)
    return -(p * logp).sum(axis=1).mean()


def consistency_loss(logits_orig: Tensor, logits_aug: Tensor) -> Tensor:
    """Cross-entropy between the clean and augmented views; both branches carry gradient."""
    if logits_orig.shape != logits_aug.shape:
        raise ValueError("view logits must have matching shapes")
    p = nm.exp(nm.log_softmax(logits_orig))
    return -(p * nm.log_softmax(logits_aug)).sum(axis=1).mean()


@dataclass
class LossParts:
    entropy: Tensor = field(default_factory=_zero)
    ema: Tensor = field(default_factory=_zero)
    src: Tensor = field(default_factory=_zero)
    cons: Tensor = field(default_factory=_zero)

    def values(self) -> dict[str, float]:
        return {
            "entropy": float(self.entropy.value),
            "ema": float(self.ema.value),
            "src": float(self.src.value),
            "cons": float(self.cons.value),
        }


def overall_loss(parts: LossParts, weights: LossWeights, method: str) -> Tensor:
    """Weighted sum of the enabled terms for the given method preset."""
    weights.validate()
    total = parts.ema * weights.ema + parts.src * weights.src
    if weights.cons > 0:
        total = total + parts.cons * weights.cons
    if method != "ours-only":
        total = total + parts.entropy
    return total
