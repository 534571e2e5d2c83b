"""Experiment runner: config -> pretrain -> prototypes -> stream -> report.

Every run writes a complete provenance capsule into its output directory:
the fully resolved config (enough to replay the run exactly), per-batch
metrics, the calibration table, prototype snapshots, model checkpoints and
the run report itself. Exit codes: 0 success, 2 bad config, 3 numerical
abort during adaptation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, engine, metrics, model, prototypes, streams

SWEEP_AXES = {
    "batch-size": ("batch_size", int),
    "alpha": ("alpha", float),
    "lambda-ema": ("lambda_ema", float),
    "lambda-src": ("lambda_src", float),
}


@dataclass
class ExperimentConfig:
    # task
    num_classes: int = 10
    side: int = 16
    n_per_class: int = 500
    n_per_domain: int = 2000
    severity: int = 5
    order: str = "fixed"
    clean_last: bool = True
    # architecture
    hidden: tuple = (128, 128)
    feature_dim: int = 64
    # source pretraining
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 64
    feature_scale: float = 1.0
    label_smoothing: float = 0.0
    source_cap: int = 100_000
    # adaptation
    method: str = "tent+ours"
    scope: str = "bn-affine"
    batch_size: int = 64
    lr: float = 1.6e-2
    momentum: float = 0.9
    alpha: float = 0.9
    e0_factor: float = 0.4
    lambda_ema: float | None = None
    lambda_src: float | None = None
    lambda_cons: float = 1.0
    label_mode: str = "hard"
    use_consistency: bool = False
    # seeds: derived from `seed` unless set explicitly
    seed: int = 0
    data_seed: int | None = None
    model_seed: int | None = None
    pretrain_seed: int | None = None
    proto_seed: int | None = None
    stream_seed: int | None = None
    shuffle_seed: int = 0
    aug_seed: int = 0
    # output
    out: str | None = None
    version: str = field(default=__version__)

    def resolved(self) -> "ExperimentConfig":
        base = self.seed
        return replace(
            self,
            data_seed=self.data_seed if self.data_seed is not None else 100 + base,
            model_seed=self.model_seed if self.model_seed is not None else 200 + base,
            pretrain_seed=self.pretrain_seed if self.pretrain_seed is not None else 300 + base,
            proto_seed=self.proto_seed if self.proto_seed is not None else 400 + base,
            stream_seed=self.stream_seed if self.stream_seed is not None else 500 + base,
            version=__version__,
        )

    def validate(self):
        if self.method not in engine.PRESETS:
            raise ConfigError(f"method must be one of {engine.PRESETS}, got {self.method!r}")
        if self.order not in ("fixed", "shuffled"):
            raise ConfigError(f"order must be 'fixed' or 'shuffled', got {self.order!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not 0 <= self.severity <= 5:
            raise ConfigError("severity must be in [0, 5]")
        if self.n_per_class < 1 or self.n_per_domain < self.batch_size:
            raise ConfigError("dataset sizes too small")


class ConfigError(ValueError):
    pass


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    if "hidden" in data:
        data["hidden"] = tuple(data["hidden"])
    return ExperimentConfig(**data)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    pretrained: model.Model
    state: engine.AdaptationState
    report: metrics.RunReport
    summary: dict
    held_out_accuracy: float


def prepare_source(config: ExperimentConfig):
    """Task, pretrained model, and source prototypes for a resolved config."""
    task = streams.SyntheticTask(num_classes=config.num_classes, side=config.side)
    x, y = streams.make_source_dataset(task, config.n_per_class, seed=config.data_seed)
    (xt, yt), (xh, yh) = streams.split_by_parity(x, y)
    arch = model.ModelConfig(
        input_dim=task.input_dim,
        hidden=tuple(config.hidden),
        feature_dim=config.feature_dim,
        num_classes=config.num_classes,
    )
    m0 = model.init_model(arch, seed=config.model_seed)
    model.pretrain_source(
        m0, xt, yt,
        epochs=config.pretrain_epochs,
        lr=config.pretrain_lr,
        seed=config.pretrain_seed,
        batch_size=config.pretrain_batch_size,
        feature_scale=config.feature_scale,
        label_smoothing=config.label_smoothing,
    )
    held = model.evaluate_accuracy(m0, xh, yh, mode="frozen")
    protos = prototypes.build_source_prototypes(
        m0, xt, yt, cap=config.source_cap, seed=config.proto_seed)
    return task, m0, protos, held


def build_stream(config: ExperimentConfig, task: streams.SyntheticTask) -> streams.DomainStream:
    specs = streams.make_domain_sequence(
        severity=config.severity, order=config.order,
        shuffle_seed=config.shuffle_seed, clean_last=config.clean_last)
    return streams.build_stream(task, specs, n_per_domain=config.n_per_domain,
                                batch_size=config.batch_size, seed=config.stream_seed)


def engine_config(config: ExperimentConfig) -> engine.EngineConfig:
    return engine.EngineConfig(
        method=config.method,
        scope=config.scope,
        lr=config.lr,
        momentum=config.momentum,
        alpha=config.alpha,
        e0_factor=config.e0_factor,
        lambda_ema=config.lambda_ema,
        lambda_src=config.lambda_src,
        lambda_cons=config.lambda_cons,
        label_mode=config.label_mode,
        use_consistency=config.use_consistency,
        aug_seed=config.aug_seed,
    )


def run_experiment(config: ExperimentConfig,
                   prepared: tuple | None = None) -> ExperimentResult:
    """Execute one full run; ``prepared`` reuses (task, model, protos, held)."""
    config = config.resolved()
    config.validate()
    if prepared is None:
        prepared = prepare_source(config)
    task, m0, protos, held = prepared
    stream = build_stream(config, task)
    state = engine.make_state(m0.clone(), protos, engine_config(config))
    report = engine.run_stream(state, stream)
    summary = metrics.compute_summary(report)
    summary["held_out_accuracy"] = held
    summary["method"] = config.method
    return ExperimentResult(config=config, pretrained=m0, state=state,
                            report=report, summary=summary, held_out_accuracy=held)


def write_outputs(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = asdict(result.config)
    cfg["hidden"] = list(cfg["hidden"])
    with open(out / "config.resolved", "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
    metrics.write_summary_json(result.summary, out / "summary.json")
    metrics.write_metrics_csv(result.report, out / "metrics.csv")
    metrics.write_calibration_csv(metrics.calibration(result.report), out / "calibration.csv")
    metrics.write_report_json(result.report, out / "report.json")
    result.pretrained.save(out / "model_pretrained.npz")
    result.state.model.save(out / "model_final.npz")
    prototypes.export_csv(out / "prototypes.csv", result.state.source_protos,
                          result.state.target_protos)


def run_sweep(config: ExperimentConfig, axis: str, values: list[str], out_dir) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    field_name, cast = SWEEP_AXES[axis]
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_source(config.resolved())
    rows = []
    for raw in values:
        value = cast(raw)
        run_cfg = replace(config, **{field_name: value})
        result = run_experiment(run_cfg, prepared=prepared)
        write_outputs(result, out / f"{axis}-{raw}")
        rows.append({
            "axis": axis,
            "value": value,
            "mean_domain_accuracy": result.summary["mean_domain_accuracy"],
            "overall_accuracy": result.summary["overall_accuracy"],
            "bias_score": result.summary["bias_score"],
            "ece": result.summary["ece"],
            "high_confidence_fraction": result.summary["high_confidence_fraction"],
        })
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="protoadapt",
        description="Continual test-time adaptation runs on a synthetic corrupted stream")
    p.add_argument("--config", type=str, help="JSON config file")
    p.add_argument("--method", type=str, choices=engine.PRESETS)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--order", type=str, choices=("fixed", "shuffled"))
    p.add_argument("--out", type=str)
    p.add_argument("--sweep", nargs=2, metavar=("AXIS", "VALUES"),
                   help="axis in {batch-size, alpha, lambda-ema, lambda-src} "
                        "and a comma-separated value list")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        for name in ("method", "batch_size", "seed", "order", "out"):
            value = getattr(args, name)
            if value is not None:
                config = replace(config, **{name: value})
        config.validate()
        out_dir = config.out or "runs/latest"
        if args.sweep:
            axis, raw_values = args.sweep
            run_sweep(config, axis, raw_values.split(","), out_dir)
        else:
            result = run_experiment(config)
            write_outputs(result, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except engine.NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
