#!/usr/bin/env python3
"""Produce calibration/baseline.json: the committed reference numbers for the
directional stream comparison and the domain-order robustness check.

Run from the repository root after any change that can move the adaptation
numbers, then commit the refreshed file.
"""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from protoadapt.cli import ExperimentConfig, prepare_source, run_experiment

SEEDS = (3, 4, 7)
METHODS = ("source", "tent", "ours-only", "tent+ours")
ORDER_BASE_SEED = 0
ORDER_SHUFFLE_SEEDS = (1, 2, 3)
ORDER_METHODS = ("tent", "ours-only")


def main():
    baseline = {"seeds": list(SEEDS), "methods": {}, "order_robustness": {}}
    for seed in SEEDS:
        prepared = prepare_source(ExperimentConfig(seed=seed).resolved())
        for method in METHODS:
            result = run_experiment(ExperimentConfig(seed=seed, method=method),
                                    prepared=prepared)
            baseline["methods"].setdefault(method, {})[str(seed)] = {
                "mean_domain_accuracy": result.summary["mean_domain_accuracy"],
                "bias_score": result.summary["bias_score"],
                "ece": result.summary["ece"],
                "high_confidence_fraction": result.summary["high_confidence_fraction"],
            }
            print(f"seed {seed} {method:10s} mean {result.summary['mean_domain_accuracy']:.2f}")

    prepared = prepare_source(ExperimentConfig(seed=ORDER_BASE_SEED).resolved())
    for method in ORDER_METHODS:
        accs = []
        for shuffle in ORDER_SHUFFLE_SEEDS:
            cfg = ExperimentConfig(seed=ORDER_BASE_SEED, method=method,
                                   order="shuffled", shuffle_seed=shuffle)
            result = run_experiment(cfg, prepared=prepared)
            accs.append(result.summary["mean_domain_accuracy"])
        baseline["order_robustness"][method] = {
            "base_seed": ORDER_BASE_SEED,
            "shuffle_seeds": list(ORDER_SHUFFLE_SEEDS),
            "accuracies": accs,
            "std": float(np.std(accs)),
        }
        print(f"order {method:10s} accs {['%.2f' % a for a in accs]} std {np.std(accs):.4f}")

    out = Path("calibration/baseline.json")
    out.parent.mkdir(exist_ok=True)
    with open(out, "w") as fh:
        json.dump(baseline, fh, sort_keys=True, indent=2)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
