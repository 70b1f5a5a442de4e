"""Desk-scale person verification with a Siamese encoder and a validation-tuned threshold.

    python3 scripts/verification_analogue.py --model SiameseFeatCNNTran --repeats 3
"""

import argparse
import time
from pathlib import Path

from ecg_tamperlab import harness as H


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="SiameseFeatCNNTran", choices=["SiameseFeatCNNTran", "SiameseTran"])
    ap.add_argument("--subjects", type=int, default=12)
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--scale", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/verification"))
    args = ap.parse_args()

    t0 = time.perf_counter()
    spec = H.ExperimentSpec(model=args.model, strategy=None, repeats=args.repeats, scale=args.scale, seed=args.seed,
                            dataset=H.DatasetSpec(n_subjects=args.subjects, duration_s=args.duration))
    rep = H.repeat_runs(spec, log=lambda msg: print(f"[{time.perf_counter() - t0:7.1f}s] {msg}", flush=True))
    for i, run in enumerate(rep.runs):
        if run["status"] == "ok":
            m = run["metrics"]
            print(f"run {i}: accuracy {m['accuracy']:.3f}  precision {m['precision']:.3f}  "
                  f"recall {m['recall']:.3f}  threshold {run['threshold']:.3f}")
        else:
            print(f"run {i}: failed ({run.get('error')})")
    H.emit_report([rep], args.out)
    print(f"wrote {args.out}/report.json and report.csv")


if __name__ == "__main__":
    main()
