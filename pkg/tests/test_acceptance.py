"""Acceptance gate: one test per criterion, each emitting a PASS/FAIL line."""

import itertools
import json
import time

import numpy as np
import pytest

from ecg_tamperlab import dsp, harness as H
from ecg_tamperlab.cli import main
from ecg_tamperlab.data import Activity, segment, synth_dataset
from ecg_tamperlab.models import ModelConfig, ModelKind, build, flops_for, gradcheck_model, input_shape
from ecg_tamperlab.tamper import TamperStrategy, blend_join, make_layout

from conftest import VERDICTS

DESK = H.DatasetSpec(n_subjects=12, duration_s=60.0)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def test_c01_input_shapes():
    rec = synth_dataset(2, 8.0, seed=0, activities=(Activity.SITTING,))[0][0]
    seg = segment(rec)[0].samples
    shapes = {p: H.to_input(seg, p, H.full_shape(p)).shape for p in ("raw1d", "cwt")}
    bad = []
    for kind in ModelKind:
        want = (2048, 96) if kind.uses_cwt else (2048, 1)
        model = build(kind, ModelConfig(scale=1.0))
        got = shapes["cwt" if kind.uses_cwt else "raw1d"]
        if not (input_shape(kind, ModelConfig(scale=1.0)) == model.input_shape == got == want):
            bad.append(f"{kind.value} {model.input_shape} vs {got}")
    ok = dsp.cwt(seg).values.shape == (2048, 96) and not bad
    verdict(1, ok, f"cwt {shapes['cwt']}, raw {shapes['raw1d']}, 9 kinds checked" + (f" {bad}" if bad else ""))


def test_c02_blend_ramp():
    got = blend_join(np.ones(5), np.zeros(5))
    err = float(np.max(np.abs(got - np.array([1.0, 0.75, 0.5, 0.25, 0.0]))))
    verdict(2, err <= 1e-12, f"max abs deviation {err:.1e}")


def _layout_violations(strategy: TamperStrategy, count: int, seeds: int = 10_000) -> int:
    bad = 0
    for seed in range(seeds):
        lay = make_layout(strategy, 2048, np.random.default_rng(seed))
        spans = [(sp.start, sp.end, sp.source) for sp in lay.spans]
        covered = np.zeros(2048, dtype=int)
        for a, b, _ in spans:
            covered[a:b] += 1
        donors = [(a, b) for a, b, s in spans if s == "B"]
        gaps = [c - b for (_, b), (c, _) in zip(donors, donors[1:])]
        if (len(donors) != count or any(b - a != 102 for a, b in donors) or any(g < 1 for g in gaps)
                or not np.all(covered == 1)):
            bad += 1
    return bad


def test_c03_sporadic_layouts():
    t0 = time.perf_counter()
    v20 = _layout_violations(TamperStrategy.SPORADIC_20, 4)
    v50 = _layout_violations(TamperStrategy.SPORADIC_50, 10)
    dt = time.perf_counter() - t0
    verdict(3, v20 == 0 and v50 == 0 and dt < 60,
            f"violations Sporadic20={v20} Sporadic50={v50} over 10000 seeds each ({dt:.1f}s)")


def test_c04_filter_response():
    filt = dsp.default_bandpass()
    dc, f10, f50, nyq, f005 = filt.gain_db([0.0, 10.0, 50.0, 256.0, 0.05])
    t = np.arange(16 * 512) / 512
    measured = []
    for f in (10.0, 50.0):
        y = dsp.filter_zero_phase(np.sin(2 * np.pi * f * t))[512:-512]
        measured.append(20 * np.log10(np.sqrt(2) * np.std(y)))
    ok = dc < -60 and nyq < -60 and abs(f10) <= 1 and abs(f50) <= 1 and f005 < -6
    ok = ok and all(abs(m) <= 1 for m in measured)
    verdict(4, ok, f"DC {dc:.0f} dB, Nyquist {nyq:.0f} dB, 10 Hz {f10:+.3f} dB, 50 Hz {f50:+.3f} dB, "
                   f"0.05 Hz {f005:.1f} dB; zero-phase sines {measured[0]:+.3f}/{measured[1]:+.3f} dB")


def test_c05_gradients():
    t0 = time.perf_counter()
    results = [gradcheck_model(kind) for kind in ModelKind]
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.max_rel_error < 1e-4 and r.scale <= 0.1 for r in results) and dt < 300
    verdict(5, ok, f"9 kinds at scale {worst.scale}, worst {worst.kind} {worst.max_rel_error:.2e} ({dt:.0f}s)")


def test_c06_flops():
    f = {k: flops_for(k).total_flops for k in ("CNN", "ResNet", "TranDeepFFN", "TranCNNFFN")}
    conv = {k: flops_for(k, head_dim_mode="conventional").total_flops for k in ("TranDeepFFN", "TranCNNFFN")}
    ok = (288e6 / 2 <= f["CNN"] <= 288e6 * 2 and 728e6 / 2 <= f["ResNet"] <= 728e6 * 2
          and f["ResNet"] > f["CNN"] and f["TranDeepFFN"] > f["TranCNNFFN"]
          and conv["TranDeepFFN"] > conv["TranCNNFFN"])
    verdict(6, ok, f"CNN {f['CNN'] / 1e6:.1f} M, ResNet {f['ResNet'] / 1e6:.1f} M, "
                   f"TranDeepFFN {f['TranDeepFFN'] / 1e6:.0f} M > TranCNNFFN {f['TranCNNFFN'] / 1e6:.0f} M")


@pytest.mark.slow
@pytest.mark.parametrize("model", ["CNN", "FeatCNNTranCNN"])
def test_c07_detection_analogue(model):
    t0 = time.perf_counter()
    parts, ok = [], True
    for strategy, bound in (("Sporadic50", 0.90), ("Half5050", 0.75)):
        spec = H.ExperimentSpec(model=model, strategy=strategy, dataset=DESK, repeats=3, scale=0.25, seed=0)
        rep = H.repeat_runs(spec)
        accs = [r["metrics"]["accuracy"] for r in rep.runs if r["status"] == "ok"]
        mean = float(np.mean(accs)) if accs else 0.0
        ok = ok and len(accs) == 3 and mean >= bound
        parts.append(f"{strategy} {mean:.3f} (runs {', '.join(f'{a:.3f}' for a in accs)}; need {bound:.2f})")
    verdict(7, ok, f"{model}: {'; '.join(parts)} [{(time.perf_counter() - t0) / 60:.1f} min]")


@pytest.mark.slow
def test_c08_verification_analogue():
    t0 = time.perf_counter()
    spec = H.ExperimentSpec(model="SiameseFeatCNNTran", strategy=None, dataset=DESK, repeats=1, scale=0.25, seed=0)
    run = H.repeat_runs(spec).runs[0]
    acc = run["metrics"]["accuracy"] if run["status"] == "ok" else 0.0
    verdict(8, acc >= 0.90, f"SiameseFeatCNNTran verification accuracy {acc:.3f} at threshold "
                            f"{run.get('threshold', float('nan')):.3f} [{(time.perf_counter() - t0) / 60:.1f} min]")


def test_c09_run_determinism(tmp_path, capsys):
    spec = {"model": "CNN", "strategy": "Sporadic50", "repeats": 1, "scale": 0.25, "seed": 7,
            "dataset": {"n_subjects": 12, "duration_s": 60}, "train": {"epochs": 3}}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    codes = [main(["run", str(path), "--out", str(tmp_path / d)]) for d in ("a", "b")]
    capsys.readouterr()
    a, b = ((tmp_path / d / "report.json").read_bytes() for d in ("a", "b"))
    verdict(9, codes == [0, 0] and a == b, f"exit codes {codes}, report.json {len(a)} bytes, identical={a == b}")


def _brute_force(y, p):
    counts = {(t, q): 0 for t, q in itertools.product((0, 1), repeat=2)}
    for t, q in zip(y, p):
        counts[(int(t), int(q))] += 1
    tp, fp, tn, fn = counts[(1, 1)], counts[(0, 1)], counts[(0, 0)], counts[(1, 0)]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return tp, fp, tn, fn, (tp + tn) / len(y), precision, recall, f1


def test_c10_metric_oracle():
    rng = np.random.default_rng(10)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        y, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        m = H.compute_metrics(y, p)
        got = (m.tp, m.fp, m.tn, m.fn, m.accuracy, m.precision, m.recall, m.f1)
        mismatches += got != _brute_force(y, p)
    verdict(10, mismatches == 0, f"{mismatches} mismatches over 1000 random sets")
