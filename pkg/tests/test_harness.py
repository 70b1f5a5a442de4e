import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_tamperlab import dsp
from ecg_tamperlab import harness as H
from ecg_tamperlab.data import Activity, synth_dataset
from ecg_tamperlab.models import ModelConfig, build


@pytest.fixture(scope="module")
def small_records():
    records, _ = synth_dataset(4, 12.0, seed=5, activities=[Activity.SITTING, Activity.WALKING])
    return records


def tiny_spec(**kw):
    base = dict(model="CNN", strategy="Half5050", dataset=H.DatasetSpec(3, 10.0, ("sitting", "running")),
                train=H.TrainConfig(epochs=2, batch_size=16), scale=0.035, repeats=2, seed=3)
    base.update(kw)
    return H.ExperimentSpec(**base)


def counting_oracle(y, p):
    tp = fp = tn = fn = 0
    for a, b in zip(y, p):
        if a and b:
            tp += 1
        elif b:
            fp += 1
        elif a:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


# detection datasets

def test_detection_dataset_contract(small_records):
    ds = H.build_detection_dataset(small_records, "Half5050", "raw1d", seed=1)
    assert ds.x.shape[1:] == (2048, 1)
    assert abs(int(ds.y.sum()) - (len(ds) - int(ds.y.sum()))) <= 1
    for y, host, donor, strat in zip(ds.y, ds.host, ds.donor, ds.strategy):
        if y:
            assert host != donor and donor
            assert strat == "Half5050"
        else:
            assert strat == "clean" and donor == ""


def test_tampered_items_keep_activity(small_records):
    ds = H.build_detection_dataset(small_records, "Sporadic20", seed=2)
    by_subject = {}
    for r in small_records:
        by_subject.setdefault(r.subject_id, set()).add(r.activity.value)
    for y, donor, act in zip(ds.y, ds.donor, ds.activity):
        if y:
            assert act in by_subject[donor]


def test_clean_items_are_normalised_segments(small_records):
    ds = H.build_detection_dataset(small_records, "Half5050", seed=3)
    clean = ds.x[ds.y == 0][..., 0]
    assert np.allclose(clean.min(axis=1), 0.0) and np.allclose(clean.max(axis=1), 1.0)


def test_cwt_inputs(small_records):
    recs = [r for r in small_records if r.subject_id in ("S01", "S02")]
    recs = [replace(r, samples=r.samples[:2048 + 1434]) for r in recs]
    ds = H.build_detection_dataset(recs, "Half5050", "cwt", seed=1)
    assert ds.x.shape[1:] == (2048, 96)
    assert np.all(ds.x >= 0)


def test_detection_dataset_scaled_shape(small_records):
    ds = H.build_detection_dataset(small_records, "Half5050", seed=1, shape=(512, 1))
    assert ds.x.shape[1:] == (512, 1)


def test_detection_dataset_deterministic(small_records):
    a = H.build_detection_dataset(small_records, "ABA502525", seed=9)
    b = H.build_detection_dataset(small_records, "ABA502525", seed=9)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.host == b.host and a.donor == b.donor


def test_detection_dataset_needs_two_subjects(small_records):
    one = [r for r in small_records if r.subject_id == "S01"]
    with pytest.raises(H.HarnessError):
        H.build_detection_dataset(one, "Half5050")


# pair datasets

def test_pair_dataset_contract(small_records):
    pd = H.build_pair_dataset(small_records, seed=4)
    assert abs(int(pd.y.sum()) - int((1 - pd.y).sum())) <= 1
    keys = {tuple(sorted(p)) for p in pd.pairs.tolist()}
    assert len(keys) == len(pd)
    for (a, b), y in zip(pd.pairs, pd.y):
        if y:
            assert pd.subject[a] == pd.subject[b] and pd.activity[a] != pd.activity[b]
        else:
            assert pd.subject[a] != pd.subject[b] and pd.activity[a] == pd.activity[b]


def test_pair_segments_not_normalised(small_records):
    pd = H.build_pair_dataset(small_records, seed=4)
    flat = pd.segments[..., 0]
    assert not np.allclose(flat.max(axis=1), 1.0)
    segs = H.preprocess_records(small_records)
    pool = {s.samples.astype(np.float32).tobytes() for items in segs.values() for s in items}
    assert all(row.astype(np.float32).tobytes() in pool for row in flat)


def test_pair_dataset_needs_two_activities(small_records):
    sitting = [r for r in small_records if r.activity == Activity.SITTING]
    with pytest.raises(H.HarnessError):
        H.build_pair_dataset(sitting)


# splits

def _toy_detection(n, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    strat = ["clean" if v == 0 else "Half5050" for v in y]
    return H.DetectionDataset(np.zeros((n, 4, 1), np.float32), y, strat, ["S01"] * n, [""] * n, ["sitting"] * n)


def test_split_100_balanced():
    tr, va, te = H.split_stratified(_toy_detection(100), seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    for part in (tr, va, te):
        assert int(part.y.sum()) * 2 == len(part)


def test_split_deterministic():
    ds = _toy_detection(60)
    a = H.split_indices(ds.strata, (0.8, 0.1, 0.1), 7)
    b = H.split_indices(ds.strata, (0.8, 0.1, 0.1), 7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_split_too_small():
    with pytest.raises(H.HarnessError):
        H.split_stratified(_toy_detection(9))


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 300), st.integers(0, 2**32 - 1))
def test_split_partition_and_ratio(n, seed):
    ds = _toy_detection(n, seed % 1000)
    parts = H.split_indices(ds.strata, (0.8, 0.1, 0.1), seed)
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(n))
    total_pos = ds.y.mean()
    for p in parts:
        pos = int(ds.y[p].sum())
        assert abs(pos - total_pos * len(p)) <= 1 + 1e-9
        assert abs((len(p) - pos) - (1 - total_pos) * len(p)) <= 1 + 1e-9


# metrics

def test_metric_examples():
    m = H.compute_metrics([1, 1, 0, 0], [1, 1, 0, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    m = H.compute_metrics([1, 1, 0, 0], [1, 0, 1, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5, 0.5)
    m = H.compute_metrics([1, 1, 0, 0], [0, 0, 0, 0])
    assert (m.accuracy, m.precision, m.recall, m.f1) == (0.5, 0.0, 0.0, 0.0)


def test_metrics_empty():
    with pytest.raises(H.HarnessError):
        H.compute_metrics([], [])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
def test_metrics_match_counting_oracle(pairs):
    y, p = zip(*pairs)
    m = H.compute_metrics(np.array(y), np.array(p))
    tp, fp, tn, fn = counting_oracle(y, p)
    assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
    assert m.accuracy == (tp + tn) / len(y)
    if m.precision + m.recall:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-15)
    else:
        assert m.f1 == 0.0


# training

def _separable(n, rng, shape=(72, 1)):
    y = np.arange(n) % 2
    sign = np.where(y == 1, 1.0, -1.0)[:, None, None]
    x = 0.3 * rng.standard_normal((n, *shape)) + sign * 0.5
    return H.DetectionDataset(x.astype(np.float32), y, ["t"] * n, ["S"] * n, [""] * n, ["sitting"] * n)


def test_one_epoch_history():
    rng = np.random.default_rng(0)
    m = build("CNN", ModelConfig(scale=0.035))
    res = H.train(m, _separable(8, rng), _separable(8, rng), H.TrainConfig(epochs=1))
    assert len(res.history) == 1
    assert set(res.history[0]) == {"epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"}


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(1)
    m = build("CNN", ModelConfig(scale=0.035, seed=1))
    res = H.train(m, _separable(64, rng), _separable(16, rng), H.TrainConfig(epochs=50, batch_size=16, patience=50))
    assert max(r["train_accuracy"] for r in res.history) == 1.0


def test_early_stopping_restores_best():
    rng = np.random.default_rng(2)
    m = build("CNN", ModelConfig(scale=0.035, seed=2))
    tr, va = _separable(32, rng), _separable(16, rng)
    res = H.train(m, tr, va, H.TrainConfig(epochs=40, batch_size=16, patience=2))
    assert res.stopped_early
    assert len(res.history) == res.best_epoch + 2
    assert H.evaluate(m, va).accuracy == pytest.approx(res.best_val_accuracy)


def test_nonfinite_loss_aborts():
    rng = np.random.default_rng(3)
    tr = _separable(8, rng)
    tr.x[0, 0, 0] = np.nan
    m = build("CNN", ModelConfig(scale=0.035))
    with np.errstate(invalid="ignore"), pytest.raises(H.HarnessError, match="non-finite"):
        H.train(m, tr, _separable(8, rng), H.TrainConfig(epochs=1))


def test_train_rejects_shape_mismatch():
    rng = np.random.default_rng(4)
    m = build("CNN", ModelConfig(scale=0.05))
    with pytest.raises(H.HarnessError):
        H.train(m, _separable(8, rng), _separable(8, rng))


def test_threshold_sweep():
    d = np.array([0.1, 0.2, 0.3, 1.0, 1.1, 1.2])
    y = np.array([1, 1, 1, 0, 0, 0])
    t, acc = H.select_threshold(d, y)
    assert acc == 1.0 and 0.3 < t <= 1.0


def test_evaluate_empty():
    m = build("CNN", ModelConfig(scale=0.035))
    with pytest.raises(H.HarnessError):
        H.evaluate(m, _toy_detection(10).subset([]))


# experiments and reports

def test_spec_roundtrip_and_defaults():
    spec = H.ExperimentSpec.from_dict({"model": "cnn", "strategy": "half5050", "repeats": 1, "scale": 0.1})
    assert spec.kind.value == "CNN" and spec.resolved_preprocessing == "raw1d"
    assert spec.train == H.TrainConfig()
    again = H.ExperimentSpec.from_dict(json.loads(json.dumps(spec.as_dict())))
    assert again.as_dict() == spec.as_dict()
    assert H.ExperimentSpec.from_dict({"model": "TranDeepFFN"}).resolved_preprocessing == "cwt"


def test_spec_errors_have_paths():
    errs = H.validate_spec({"model": "lstm", "repeats": 0, "dataset": {"n_subjects": 1, "activities": ["flying"]},
                            "train": {"lr": -1}, "bogus": 1})
    joined = "\n".join(errs)
    for path in ("$.model", "$.repeats", "$.dataset.n_subjects", "$.dataset.activities", "$.train.lr", "$.bogus"):
        assert path in joined
    with pytest.raises(H.SpecError):
        H.ExperimentSpec.from_dict({"model": "CNN", "strategy": "Sporadic99"})
    assert H.validate_spec({"model": "CNN", "preprocessing": "cwt"})


def test_repeat_runs_single_and_same_seed():
    rep = H.repeat_runs(tiny_spec(), n=1)
    assert rep.summary["n_runs"] == 1
    run = rep.runs[0]
    assert run["status"] == "ok"
    for k in H.METRICS:
        assert rep.summary[k]["mean"] == run["metrics"][k] and rep.summary[k]["std"] == 0.0
    same = H.repeat_runs(tiny_spec(), n=3, same_seed=True)
    for k in H.METRICS:
        assert same.summary[k]["std"] == 0.0


def test_repeat_runs_records_failures(monkeypatch):
    real = H.single_run

    def flaky(spec, seed, segments, log=None):
        if seed == H.run_seed(spec, 1):
            raise H.HarnessError("boom")
        return real(spec, seed, segments, log)

    monkeypatch.setattr(H, "single_run", flaky)
    rep = H.repeat_runs(tiny_spec(), n=2)
    assert [r["status"] for r in rep.runs] == ["ok", "failed"]
    assert "boom" in rep.runs[1]["error"]
    assert not rep.quorum_met
    assert rep.summary["n_success"] == 1


def test_run_is_deterministic():
    a = H.report_json([H.repeat_runs(tiny_spec(), n=1)])
    b = H.report_json([H.repeat_runs(tiny_spec(), n=1)])
    assert a == b


def test_siamese_run():
    spec = tiny_spec(model="SiameseFeatCNNTran", strategy=None, scale=0.05)
    rep = H.repeat_runs(spec, n=1)
    assert rep.runs[0]["status"] == "ok", rep.runs[0]
    assert rep.runs[0]["threshold"] > 0
    assert rep.strategy == "verification"


def test_emit_report(tmp_path, small_records):
    rep = H.repeat_runs(tiny_spec(), n=1)
    other = H.repeat_runs(tiny_spec(strategy="Sporadic50"), n=1)
    paths = H.emit_report([rep, other], tmp_path, ("json", "csv"))
    assert [p.name for p in paths] == ["report.json", "report.csv"]
    rows = list(csv.DictReader(io.StringIO(paths[1].read_text())))
    assert len(rows) == 2 and {r["strategy"] for r in rows} == {"Half5050", "Sporadic50"}
    first = [p.read_bytes() for p in paths]
    H.emit_report([rep, other], tmp_path, ("json", "csv"))
    assert [p.read_bytes() for p in paths] == first
    loaded = H.load_reports(paths[0])
    assert loaded[0].as_dict() == json.loads(json.dumps(rep.as_dict()))
    items = H.sample_tampered(small_records, "Half5050", 1, seed=0)
    svg = H.emit_report(rep, tmp_path, ("svg",), svg_items=items)
    assert len(svg) == 1
    text = svg[0].read_text()
    assert text.startswith("<svg") and "band-host" in text and "band-donor" in text and "band-blend" in text
    assert not list(tmp_path.glob(".*.tmp"))


def test_emit_report_rejects_format(tmp_path):
    with pytest.raises(H.HarnessError):
        H.emit_report(H.RunReport({"model": "CNN"}, [], H.summarize([])), tmp_path, ("xml",))


def test_to_input_rejects_unknown():
    with pytest.raises(H.HarnessError):
        H.to_input(np.zeros(2048), "stft")
    assert H.to_input(dsp.min_max_normalize(np.arange(2048.0)), "raw1d").shape == (2048, 1)
