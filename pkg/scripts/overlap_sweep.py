"""Baseline accuracy and attack success as the two classes overlap more.

    python3 scripts/overlap_sweep.py --overlaps 0 0.3 0.6 0.9
"""

import argparse

import numpy as np

from advseq import harness, neural
from advseq.harness import ExperimentPlan


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--overlaps", type=float, nargs="+", default=[0.0, 0.3, 0.6, 0.9])
    ap.add_argument("--samples", type=int, default=30, help="malicious test samples to attack")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("overlap,accuracy,fpr,whitebox_evasion,random_evasion")
    for ov in args.overlaps:
        plan = ExperimentPlan(overlap_fraction=ov, epochs=args.epochs, attack_samples=args.samples, seed=args.seed)
        bench = harness.prepare(plan)
        acc, fpr = neural.evaluate_accuracy(bench.classifier, bench.test)
        targets = harness.attack_targets(bench)
        wb = [r.evaded for r in harness.run_variant(bench, targets, "whitebox", args.seed)]
        rnd = [r.evaded for r in harness.run_variant(bench, targets, "random", args.seed)]
        mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
        print(f"{ov},{acc:.4f},{fpr:.4f},{mean(wb):.3f},{mean(rnd):.3f}", flush=True)


if __name__ == "__main__":
    main()
