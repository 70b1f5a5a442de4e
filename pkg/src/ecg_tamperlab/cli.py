"""``ecg-tamperlab`` command line: generate, tamper, run, flops, gradcheck, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every random choice
is derived from ``--seed`` plus the subcommand name (and item index), so
identical invocations write identical files. Set ``ECG_TAMPERLAB_CACHE`` to a
directory to memoise scalograms between runs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from . import models as M
from .data import ACTIVITIES, Activity, RecordError, load_record, save_record, synth_dataset
from .nn import NonFiniteError
from .render import render_svg
from .seeds import derive_seed
from .tamper import TamperError, TamperStrategy, write_tampered

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("ecg_tamperlab")

_CLI_STRATEGIES = [s.cli_name for s in TamperStrategy]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _strategy(text: str) -> TamperStrategy:
    try:
        return TamperStrategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _kind(text: str) -> M.ModelKind:
    try:
        return M.ModelKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(None), help="master seed (default 0, or the spec's seed for run)")
    p.add_argument("--out", type=Path, default=d(None), help="output directory")
    p.add_argument("--jobs", type=int, default=d(1), help="worker processes for repeat runs (default 1)")
    p.add_argument("-v", "--verbose", action="count", default=d(0), help="more logging (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecg-tamperlab", description=__doc__.splitlines()[0],
                     epilog="Global flags may be given before or after the subcommand.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("generate", "write synthetic multi-subject ECG records and a manifest")
    p.add_argument("--subjects", type=int, default=12, help="number of subjects (default 12)")
    p.add_argument("--duration", type=float, default=60.0, help="seconds per record (default 60, minimum 4)")
    p.add_argument("--activities", default=",".join(a.value for a in ACTIVITIES),
                   help="comma-separated activities (default: all seven)")
    p.add_argument("--format", choices=("csv", "raw"), default="csv", help="record file format (default csv)")

    p = add("tamper", "compose tampered segments from a generated dataset")
    p.add_argument("--data", type=Path, default=Path("data"), help="directory holding manifest.json (default data)")
    p.add_argument("--strategy", type=_strategy, required=True, metavar="{" + "|".join(_CLI_STRATEGIES) + "}",
                   help="tampering strategy")
    p.add_argument("--count", type=int, default=10, help="tampered segments to write (default 10)")
    p.add_argument("--render", type=int, default=0, metavar="N", help="also write N colour-coded SVGs")

    p = add("run", "run an experiment spec (repeats, training, evaluation) and write reports")
    p.add_argument("spec", type=Path, help="experiment spec JSON")
    p.add_argument("--model", help="override the model kind (comma list sweeps)")
    p.add_argument("--strategy", help="override the strategy (comma list sweeps)")
    p.add_argument("--repeats", type=int, help="override the repeat count")
    p.add_argument("--scale", type=float, help="override the model scale")
    p.add_argument("--epochs", type=int, help="override the epoch cap")
    p.add_argument("--format", default="json,csv", help="report formats, comma list of json,csv,svg")
    p.add_argument("--render", type=int, default=2, metavar="N", help="SVG items per strategy when svg is requested")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config; write nothing")

    p = add("flops", "print analytic forward-pass FLOPs for all nine model kinds")
    p.add_argument("--scale", type=float, default=1.0, help="model scale (default 1.0)")
    p.add_argument("--head-dim-mode", choices=("literal", "conventional"), default="literal",
                   help="attention subspace convention (default literal)")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = add("gradcheck", "compare reverse-mode and finite-difference gradients for every model kind")
    p.add_argument("--kind", type=_kind, action="append", help="restrict to one kind (repeatable)")
    p.add_argument("--scale", type=float, default=M.GRADCHECK_SCALE,
                   help=f"model scale, at most 0.1 (default {M.GRADCHECK_SCALE})")
    p.add_argument("--inject-grad-error", action="store_true", help=argparse.SUPPRESS)

    p = add("report", "merge report JSON files and re-emit tables")
    p.add_argument("reports", type=Path, nargs="+", help="report JSON files written by run")
    p.add_argument("--format", default="csv", help="formats to write, comma list of json,csv (default csv)")
    return parser


# subcommands

def cmd_generate(args) -> int:
    if args.subjects < 2:
        raise UsageError("--subjects must be at least 2")
    if args.duration < 4:
        raise UsageError("--duration must be at least 4 s (one 2048-sample window)")
    try:
        acts = [Activity(a.strip()) for a in args.activities.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = args.out or Path("data")
    records, manifest = synth_dataset(args.subjects, args.duration, derive_seed(args.seed or 0, "generate"), acts)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if args.format == "csv" else "f64"
    for rec, entry in zip(records, manifest["records"]):
        name = f"{rec.subject_id}_{rec.activity.value}.{ext}"
        save_record(rec, out / name, args.format)
        entry["file"] = name
    manifest["format"] = args.format
    manifest["master_seed"] = args.seed or 0
    H._atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} records and manifest.json to {out}")
    return EXIT_OK


def _load_dataset(root: Path):
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    fmt = manifest.get("format", "csv")
    return [load_record(root / e["file"], fmt) for e in manifest["records"]]


def cmd_tamper(args) -> int:
    if args.count < 1 or args.render < 0:
        raise UsageError("--count must be positive and --render non-negative")
    records = _load_dataset(args.data)
    if len({r.subject_id for r in records}) < 2:
        raise H.HarnessError("tampering needs at least two subjects")
    out = args.out or Path("tampered")
    items = H.sample_tampered(records, args.strategy, args.count, derive_seed(args.seed or 0, "tamper"))
    for i, t in enumerate(items):
        stem = f"{i:04d}_{args.strategy.cli_name}"
        write_tampered(t, out, stem)
        if i < args.render:
            H._atomic_write(out / f"{stem}.svg", render_svg(t))
    print(f"wrote {len(items)} {args.strategy.value} segments to {out}"
          + (f" ({min(args.render, len(items))} rendered)" if args.render else ""))
    return EXIT_OK


def _csv_list(text: str | None) -> list[str] | None:
    return None if text is None else [p.strip() for p in text.split(",") if p.strip()]


def resolve_specs(args) -> list[H.ExperimentSpec]:
    try:
        raw = json.loads(args.spec.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise H.SpecError([f"$: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    if not isinstance(raw, dict):
        raise H.SpecError(["$: expected an object"])
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("repeats", "scale"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    if args.epochs is not None:
        raw["train"] = {**raw.get("train", {}), "epochs": args.epochs}
    models = _csv_list(args.model) or [raw.get("model", "CNN")]
    strategies = _csv_list(args.strategy) or [raw.get("strategy", "Sporadic50")]
    specs, errors = [], []
    for m in models:
        for s in strategies:
            candidate = {**raw, "model": m, "strategy": s}
            problems = H.validate_spec(candidate)
            if problems:
                errors += [e for e in problems if e not in errors]
                continue
            spec = H.ExperimentSpec.from_dict(candidate)
            if spec not in specs:  # Siamese specs ignore the strategy axis
                specs.append(spec)
    if errors:
        raise H.SpecError(errors)
    return specs


def cmd_run(args) -> int:
    formats = _csv_list(args.format) or []
    bad = [f for f in formats if f not in ("json", "csv", "svg")]
    if bad or not formats:
        raise UsageError(f"--format takes json, csv and/or svg (got {args.format!r})")
    specs = resolve_specs(args)
    if args.dry_run:
        print(json.dumps([s.as_dict() for s in specs], indent=2, sort_keys=True))
        return EXIT_OK
    out = args.out or Path("results")
    reports = []
    for spec in specs:
        log.info("running %s on %s: %d repeats", spec.kind.value, spec.strategy or "pairs", spec.repeats)
        rep = H.repeat_runs(spec, jobs=max(1, args.jobs), log=log.info if args.verbose >= 2 else None)
        s = rep.summary
        print(f"{rep.model} {rep.strategy}: accuracy {s['accuracy']['mean']:.4f} +- {s['accuracy']['std']:.4f} "
              f"({s['n_success']}/{s['n_runs']} runs)")
        reports.append(rep)
    items = []
    if "svg" in formats:
        records = H.generate_records(specs[0])
        for spec in specs:
            if spec.strategy is not None and not spec.kind.is_siamese:
                items += H.sample_tampered(records, spec.strategy, args.render, spec.seed)
    for path in H.emit_report(reports, out, formats, svg_items=items):
        log.info("wrote %s", path)
    failed = [r for r in reports if not r.quorum_met]
    if failed:
        for r in failed:
            print(f"error: {r.model} {r.strategy}: fewer than {r.spec['min_success']:.0%} of runs succeeded",
                  file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_flops(args) -> int:
    if not args.scale > 0:
        raise UsageError("--scale must be positive")
    try:
        rows = [M.flops_for(k, args.scale, args.head_dim_mode) for k in M.ModelKind]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.json:
        print(json.dumps({"scale": args.scale, "head_dim_mode": args.head_dim_mode,
                          "convention": M.FLOPS_CONVENTION,
                          "models": [{"kind": r.kind, "input_shape": list(r.input_shape),
                                      "total_flops": r.total_flops, "total_macs": r.total_macs,
                                      "per_branch": r.per_branch} for r in rows]}, indent=2, sort_keys=True))
        return EXIT_OK
    print("model | input | MFLOPs")
    for r in rows:
        t, c = r.input_shape
        print(f"{r.kind} | {t}×{c} | {r.total_flops / 1e6:.1f} M" + (" (per branch)" if r.per_branch else ""))
    print(f"# {M.FLOPS_CONVENTION}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not 0 < args.scale <= 0.1:
        raise UsageError("--scale must lie in (0, 0.1]")
    kinds = args.kind or list(M.ModelKind)
    failed = False
    for k in dict.fromkeys(kinds):
        try:
            r = M.gradcheck_model(k, scale=args.scale, seed=args.seed or 0, corrupt=args.inject_grad_error)
        except (FloatingPointError, NonFiniteError) as exc:
            print(f"{k.value:20s} non-finite gradient: {exc}")
            failed = True
            continue
        verdict = "< 1e-4" if r.passed else ">= 1e-4 FAIL"
        print(f"{r.kind:20s} max rel error {r.max_rel_error:.2e} {verdict}  "
              f"({r.n_parameters} params, worst {r.worst_parameter})")
        failed |= not r.passed
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_report(args) -> int:
    formats = _csv_list(args.format) or []
    if not formats or any(f not in ("json", "csv") for f in formats):
        raise UsageError("--format takes json and/or csv")
    reports = [r for path in args.reports for r in H.load_reports(path)]
    out = args.out or Path("results")
    for path in H.emit_report(reports, out, formats, stem="merged"):
        log.info("wrote %s", path)
    sys.stdout.write(H.report_csv(reports))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "tamper": cmd_tamper, "run": cmd_run, "flops": cmd_flops,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except H.SpecError as exc:
        for e in exc.errors:
            print(f"spec error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RecordError, TamperError, H.HarnessError, NonFiniteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
