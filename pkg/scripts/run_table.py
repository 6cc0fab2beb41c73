"""Run the full defense table for a plan file and print a readable summary.

    python3 scripts/run_table.py scripts/plans/default.txt --out results/report.csv
"""

import argparse
import json
import logging
import time

from advseq.harness import ExperimentPlan, run_experiment_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("plan", help="flat 'key = value' plan file")
    ap.add_argument("--out", default="report.csv")
    ap.add_argument("--timings", action="store_true", help="fill the overhead columns of the CSV")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    plan = ExperimentPlan.from_file(args.plan)
    t = time.perf_counter()
    report = run_experiment_table(plan, progress=lambda m: print(f"[{time.perf_counter() - t:7.1f}s] {m}", flush=True))
    report.write(args.out, timings=args.timings or plan.csv_timings)

    print()
    print(report.csv_text(timings=True), end="")
    print()
    print("evasion rates:", json.dumps(report.meta["evasion"]))
    print("substitute agreement:", report.meta["substitute_agreement"])
    for name, info in report.meta["defenses"].items():
        extra = {k: v for k, v in info.items() if k in ("adaptive_recall_per_seed", "threshold_adv", "signature_count", "replaced")}
        print(f"  {name}: {json.dumps(extra)}")
    print(f"total {time.perf_counter() - t:.0f}s; wrote {args.out}")


if __name__ == "__main__":
    main()
