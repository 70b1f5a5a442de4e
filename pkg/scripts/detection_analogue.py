"""Desk-scale tamper detection: selected detectors against selected strategies.

    python3 scripts/detection_analogue.py --models CNN,FeatCNNTranCNN --strategies Sporadic50,Half5050
"""

import argparse
import time
from pathlib import Path

from ecg_tamperlab import harness as H


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", default="CNN,FeatCNNTranCNN")
    ap.add_argument("--strategies", default="Sporadic50,Half5050")
    ap.add_argument("--subjects", type=int, default=12)
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scale", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/detection"))
    args = ap.parse_args()

    dataset = H.DatasetSpec(n_subjects=args.subjects, duration_s=args.duration)
    reports = []
    for model in args.models.split(","):
        for strategy in args.strategies.split(","):
            t0 = time.perf_counter()
            spec = H.ExperimentSpec(model=model, strategy=strategy, dataset=dataset, repeats=args.repeats,
                                    scale=args.scale, seed=args.seed)
            rep = H.repeat_runs(spec, jobs=args.jobs)
            acc = rep.summary["accuracy"]
            print(f"{rep.model:16s} {rep.strategy:12s} accuracy {acc['mean']:.3f} ± {acc['std']:.3f}"
                  f"  ({time.perf_counter() - t0:.0f}s)", flush=True)
            reports.append(rep)
    H.emit_report(reports, args.out)
    print(f"wrote {args.out}/report.json and report.csv")


if __name__ == "__main__":
    main()
