"""Run reports and every diagnostic the adaptation run is judged by.

A RunReport is append-only: one record per batch (predictions, labels,
confidences, entropies, loss values) plus one stats entry per finished
domain (accuracy, feature-space geometry, prototype similarity). Everything
downstream - accuracy, prediction-bias score, calibration table, ECE - is a
pure function of the report, so a summary recomputed from a serialized
report matches the live one exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class BatchRecord:
    step: int
    domain: int
    predictions: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray
    entropies: np.ndarray
    losses: dict
    reliable: int
    stepped: bool


@dataclass
class DomainStats:
    name: str
    accuracy: float
    mean_entropy: float
    gap: float
    d_intra: float
    d_inter: float
    ratio: float
    cos_to_source: float
    cos_to_target_gt: float
    skipped_classes: list


@dataclass
class RunReport:
    num_classes: int
    domain_names: list
    records: list = field(default_factory=list)
    domain_stats: list = field(default_factory=list)

    def add_record(self, rec: BatchRecord):
        self.records.append(rec)

    def add_domain_stats(self, stats: DomainStats):
        self.domain_stats.append(stats)


# -- scalar metrics -------------------------------------------------------------


def online_accuracy(report: RunReport, domain: int) -> float:
    """Percent correct over every prediction emitted during the domain."""
    correct = total = 0
    for rec in report.records:
        if rec.domain == domain:
            correct += int((rec.predictions == rec.labels).sum())
            total += len(rec.predictions)
    if total == 0:
        raise ValueError(f"domain {domain} not present in report")
    return 100.0 * correct / total


def class_prediction_histogram(report: RunReport):
    """Predicted-label counts and the KL(prediction dist || uniform) bias score."""
    counts = np.zeros(report.num_classes, dtype=np.int64)
    for rec in report.records:
        counts += np.bincount(rec.predictions, minlength=report.num_classes)
    total = counts.sum()
    if total == 0:
        return counts, 0.0
    p = counts / total
    nz = p > 0
    bias = float((p[nz] * np.log(p[nz] * report.num_classes)).sum())
    return counts, bias


def confidence_bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    """Bin b covers (b/bins, (b+1)/bins]; an exact 0 lands in bin 0."""
    conf = np.asarray(conf, dtype=np.float64)
    idx = np.ceil(conf * bins).astype(np.int64) - 1
    return np.clip(idx, 0, bins - 1)


@dataclass
class CalibrationTable:
    bins: int
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    mean_entropy: np.ndarray
    ece: float
    high_confidence_fraction: float


def calibration(report: RunReport, bins: int = 20,
                high_conf: float = 0.95) -> CalibrationTable:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.concatenate([r.confidences for r in report.records]) if report.records \
        else np.empty(0)
    correct = np.concatenate(
        [(r.predictions == r.labels).astype(np.float64) for r in report.records]
    ) if report.records else np.empty(0)
    ent = np.concatenate([r.entropies for r in report.records]) if report.records \
        else np.empty(0)

    counts = np.zeros(bins, dtype=np.int64)
    conf_sum = np.zeros(bins)
    acc_sum = np.zeros(bins)
    ent_sum = np.zeros(bins)
    if len(conf):
        idx = confidence_bin_index(conf, bins)
        np.add.at(counts, idx, 1)
        np.add.at(conf_sum, idx, conf)
        np.add.at(acc_sum, idx, correct)
        np.add.at(ent_sum, idx, ent)
    nz = counts > 0
    mean_conf = np.zeros(bins)
    acc = np.zeros(bins)
    mean_ent = np.zeros(bins)
    mean_conf[nz] = conf_sum[nz] / counts[nz]
    acc[nz] = acc_sum[nz] / counts[nz]
    mean_ent[nz] = ent_sum[nz] / counts[nz]
    total = counts.sum()
    ece = float((counts[nz] / total * np.abs(acc[nz] - mean_conf[nz])).sum()) if total else 0.0
    high = float((conf > high_conf).mean()) if total else 0.0
    return CalibrationTable(bins=bins, counts=counts, mean_confidence=mean_conf,
                            accuracy=acc, mean_entropy=mean_ent, ece=ece,
                            high_confidence_fraction=high)


# -- feature-space geometry ------------------------------------------------------


def ground_truth_prototypes(features: np.ndarray, labels: np.ndarray,
                            num_classes: int):
    """Per-class feature means under the true labels; mask marks observed classes."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    matrix = np.zeros((num_classes, features.shape[1]))
    observed = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            observed[c] = True
            matrix[c] = features[mask].mean(axis=0)
    return matrix, observed


@dataclass
class GeometryResult:
    gap: float
    d_intra: float
    d_inter: float
    ratio: float
    skipped_classes: list


def feature_geometry(features: np.ndarray, labels: np.ndarray,
                     source_matrix: np.ndarray) -> GeometryResult:
    """Source-target gap, intra/inter-class squared distances, and their ratio.

    All quantities are class-averages; a class absent from the domain is
    skipped and flagged.
    """
    num_classes = source_matrix.shape[0]
    gt, observed = ground_truth_prototypes(features, labels, num_classes)
    skipped = [int(c) for c in np.flatnonzero(~observed)]
    present = np.flatnonzero(observed)
    if len(present) == 0:
        return GeometryResult(math.nan, math.nan, math.nan, math.nan, skipped)

    labels = np.asarray(labels, dtype=np.intp)
    gap = float(np.mean([np.sum((source_matrix[c] - gt[c]) ** 2) for c in present]))
    intra = {
        c: float(np.mean(np.sum((gt[c] - features[labels == c]) ** 2, axis=1)))
        for c in present
    }
    if len(present) < 2:
        return GeometryResult(gap, float(np.mean(list(intra.values()))),
                              math.nan, math.nan, skipped)
    inter = {}
    for c in present:
        others = [np.sum((gt[c] - gt[o]) ** 2) for o in present if o != c]
        inter[c] = float(np.mean(others))
    d_intra = float(np.mean([intra[c] for c in present]))
    d_inter = float(np.mean([inter[c] for c in present]))
    ratio = float(np.mean([intra[c] / inter[c] for c in present]))
    return GeometryResult(gap=gap, d_intra=d_intra, d_inter=d_inter, ratio=ratio,
                          skipped_classes=skipped)


def prototype_similarity(target_matrix: np.ndarray, source_matrix: np.ndarray,
                         gt_matrix: np.ndarray):
    """Class-averaged cosine of the EMA prototypes with the source / true centroids."""
    def mean_cos(a, b):
        vals, skipped = [], []
        for c in range(a.shape[0]):
            na, nb = np.linalg.norm(a[c]), np.linalg.norm(b[c])
            if na == 0.0 or nb == 0.0:
                skipped.append(c)
                continue
            vals.append(float(a[c] @ b[c] / (na * nb)))
        return (float(np.mean(vals)) if vals else math.nan), skipped

    cos_src, skip_a = mean_cos(target_matrix, source_matrix)
    cos_gt, skip_b = mean_cos(target_matrix, gt_matrix)
    return cos_src, cos_gt, sorted(set(skip_a) | set(skip_b))


# -- summaries and serialization ---------------------------------------------------


def compute_summary(report: RunReport, bins: int = 20) -> dict:
    counts, bias = class_prediction_histogram(report)
    cal = calibration(report, bins=bins)
    per_domain = []
    for d, stats in enumerate(report.domain_stats):
        per_domain.append({
            "index": d,
            "name": stats.name,
            "accuracy": stats.accuracy,
            "mean_entropy": stats.mean_entropy,
            "gap": stats.gap,
            "d_intra": stats.d_intra,
            "d_inter": stats.d_inter,
            "ratio": stats.ratio,
            "cos_to_source": stats.cos_to_source,
            "cos_to_target_gt": stats.cos_to_target_gt,
            "skipped_classes": stats.skipped_classes,
        })
    total = sum(len(r.predictions) for r in report.records)
    correct = sum(int((r.predictions == r.labels).sum()) for r in report.records)
    reliable = sum(r.reliable for r in report.records)
    return {
        "num_classes": report.num_classes,
        "domains": per_domain,
        "mean_domain_accuracy": (
            float(np.mean([d["accuracy"] for d in per_domain])) if per_domain else math.nan
        ),
        "overall_accuracy": (100.0 * correct / total) if total else math.nan,
        "prediction_counts": counts.tolist(),
        "bias_score": bias,
        "ece": cal.ece,
        "high_confidence_fraction": cal.high_confidence_fraction,
        "total_predictions": total,
        "reliable_fraction": (reliable / total) if total else math.nan,
    }


def report_to_dict(report: RunReport) -> dict:
    return {
        "num_classes": report.num_classes,
        "domain_names": report.domain_names,
        "records": [
            {
                "step": r.step,
                "domain": r.domain,
                "predictions": r.predictions.tolist(),
                "labels": r.labels.tolist(),
                "confidences": r.confidences.tolist(),
                "entropies": r.entropies.tolist(),
                "losses": r.losses,
                "reliable": r.reliable,
                "stepped": r.stepped,
            }
            for r in report.records
        ],
        "domain_stats": [
            {
                "name": s.name,
                "accuracy": s.accuracy,
                "mean_entropy": s.mean_entropy,
                "gap": s.gap,
                "d_intra": s.d_intra,
                "d_inter": s.d_inter,
                "ratio": s.ratio,
                "cos_to_source": s.cos_to_source,
                "cos_to_target_gt": s.cos_to_target_gt,
                "skipped_classes": s.skipped_classes,
            }
            for s in report.domain_stats
        ],
    }


def report_from_dict(data: dict) -> RunReport:
    report = RunReport(num_classes=data["num_classes"], domain_names=data["domain_names"])
    for r in data["records"]:
        report.add_record(BatchRecord(
            step=r["step"],
            domain=r["domain"],
            predictions=np.asarray(r["predictions"], dtype=np.intp),
            labels=np.asarray(r["labels"], dtype=np.intp),
            confidences=np.asarray(r["confidences"], dtype=np.float64),
            entropies=np.asarray(r["entropies"], dtype=np.float64),
            losses=r["losses"],
            reliable=r["reliable"],
            stepped=r["stepped"],
        ))
    for s in data["domain_stats"]:
        report.add_domain_stats(DomainStats(**s))
    return report


def write_report_json(report: RunReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, sort_keys=True)


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)


def write_metrics_csv(report: RunReport, path) -> None:
    """One row per batch: step, domain, accuracy, mean entropy, losses, reliable count."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "step", "domain", "accuracy", "mean_entropy",
            "loss_entropy", "loss_ema", "loss_src", "loss_cons", "loss_total",
            "reliable",
        ])
        for r in report.records:
            acc = 100.0 * float((r.predictions == r.labels).mean())
            writer.writerow([
                r.step, report.domain_names[r.domain], repr(acc),
                repr(float(r.entropies.mean())),
                repr(r.losses.get("entropy", 0.0)), repr(r.losses.get("ema", 0.0)),
                repr(r.losses.get("src", 0.0)), repr(r.losses.get("cons", 0.0)),
                repr(r.losses.get("total", 0.0)), r.reliable,
            ])


def write_calibration_csv(cal: CalibrationTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "count", "mean_confidence", "accuracy", "mean_entropy"])
        for b in range(cal.bins):
            writer.writerow([
                b, int(cal.counts[b]), repr(float(cal.mean_confidence[b])),
                repr(float(cal.accuracy[b])), repr(float(cal.mean_entropy[b])),
            ])
