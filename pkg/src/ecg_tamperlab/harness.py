"""Datasets, stratified splits, training with early stopping, metrics, repeats and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .data import ACTIVITIES, Activity, EcgRecord, Segment, segment, synth_dataset
from .models import Model, ModelConfig, ModelKind, build, input_shape, pair_distance
from .nn import Adam, NonFiniteError, Tensor, bce_loss, contrastive_loss, no_grad, precise_batch_norm
from .render import render_svg
from .seeds import derive_seed
from .tamper import TamperStrategy, compose, make_layout

SCHEMA_VERSION = 1
METRICS = ("accuracy", "precision", "recall", "f1")


class HarnessError(RuntimeError):
    pass


# preprocessing

def preprocess_records(records: Sequence[EcgRecord], filt: bool = True) -> dict[tuple[str, Activity], list[Segment]]:
    """Band-pass each whole record, then cut it into windows; keyed by (subject, activity)."""
    out: dict[tuple[str, Activity], list[Segment]] = {}
    for rec in records:
        samples = dsp.filter_zero_phase(rec.samples) if filt else rec.samples
        src = EcgRecord(rec.subject_id, rec.activity, samples, rec.sample_rate)
        out.setdefault((rec.subject_id, rec.activity), []).extend(segment(src))
    return out


def to_input(samples: np.ndarray, preprocessing: str, shape: tuple[int, int] | None = None) -> np.ndarray:
    """One 2048-sample signal -> model input, (2048, 1) raw or (2048, 96) scalogram, resized to ``shape``."""
    if preprocessing == "raw1d":
        x = np.asarray(samples, dtype=np.float64)[:, None]
    elif preprocessing == "cwt":
        x = dsp.cwt_cached(samples)
    else:
        raise HarnessError(f"unknown preprocessing {preprocessing!r}")
    if shape is not None and x.shape != tuple(shape):
        x = dsp.fit_input(x, shape)
    return x.astype(np.float32)


def full_shape(preprocessing: str) -> tuple[int, int]:
    return (2048, 96) if preprocessing == "cwt" else (2048, 1)


# datasets

@dataclass
class DetectionDataset:
    x: np.ndarray  # (n, time, channels)
    y: np.ndarray  # 1 = tampered
    strategy: list[str]
    host: list[str]
    donor: list[str]
    activity: list[str]

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "DetectionDataset":
        idx = np.asarray(idx, dtype=int)
        pick = lambda seq: [seq[i] for i in idx]
        return DetectionDataset(self.x[idx], self.y[idx], pick(self.strategy), pick(self.host),
                                pick(self.donor), pick(self.activity))

    @property
    def strata(self) -> list[tuple]:
        return [(int(y), s) for y, s in zip(self.y, self.strategy)]

    def balance(self) -> float:
        return float(np.mean(self.y)) if len(self) else 0.0


def build_detection_dataset(records: Sequence[EcgRecord], strategy: TamperStrategy | str, preprocessing: str = "raw1d",
                            seed: int = 0, shape: tuple[int, int] | None = None,
                            segments: dict | None = None) -> DetectionDataset:
    """Half clean segments, half tampered ones with a same-activity donor from another subject.

    Every segment is filtered (whole record) then min-max normalised before
    composition; the composed signal is fed to ``preprocessing``.
    """
    strategy = TamperStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    segs = segments if segments is not None else preprocess_records(records)
    by_activity: dict[Activity, list[Segment]] = {}
    for (_, act), items in sorted(segs.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        by_activity.setdefault(act, []).extend(items)
    for act, items in by_activity.items():
        if len({s.subject_id for s in items}) < 2:
            raise HarnessError(f"activity {act.value} has fewer than two subjects")
    pool = [s for act in sorted(by_activity, key=lambda a: a.value) for s in by_activity[act]]
    if len(pool) < 2:
        raise HarnessError("need at least two segments")
    rng = np.random.default_rng(derive_seed(seed, "detection", strategy.value))
    order = rng.permutation(len(pool))
    half = len(pool) // 2
    clean_idx, host_idx = order[:half], order[half:2 * half]
    shape = tuple(shape) if shape is not None else full_shape(preprocessing)

    xs, ys, strat, hosts, donors, acts = [], [], [], [], [], []
    for i in clean_idx:
        s = pool[i]
        xs.append(to_input(dsp.min_max_normalize(s.samples), preprocessing, shape))
        ys.append(0)
        strat.append("clean")
        hosts.append(s.subject_id)
        donors.append("")
        acts.append(s.activity.value)
    for i in host_idx:
        host = pool[i]
        candidates = [s for s in by_activity[host.activity] if s.subject_id != host.subject_id]
        donor = candidates[int(rng.integers(len(candidates)))]
        layout = make_layout(strategy, 2048, rng)
        t = compose(layout, host.with_samples(dsp.min_max_normalize(host.samples)),
                    donor.with_samples(dsp.min_max_normalize(donor.samples)))
        xs.append(to_input(t.samples, preprocessing, shape))
        ys.append(1)
        strat.append(strategy.value)
        hosts.append(host.subject_id)
        donors.append(donor.subject_id)
        acts.append(host.activity.value)
    # interleave so the dataset order carries no label information
    perm = rng.permutation(len(ys))
    ds = DetectionDataset(np.stack(xs), np.asarray(ys, dtype=np.int64), strat, hosts, donors, acts)
    return ds.subset(perm)


@dataclass
class PairDataset:
    segments: np.ndarray  # (m, time, channels), unnormalised
    pairs: np.ndarray  # (n, 2) indices into segments
    y: np.ndarray  # 1 = same subject
    subject: list[str]  # per segment
    activity: list[str]  # per segment

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=int)
        return PairDataset(self.segments, self.pairs[idx], self.y[idx], self.subject, self.activity)

    @property
    def strata(self) -> list[tuple]:
        return [(int(y),) for y in self.y]

    def balance(self) -> float:
        return float(np.mean(self.y)) if len(self) else 0.0


def build_pair_dataset(records: Sequence[EcgRecord], seed: int = 0, preprocessing: str = "raw1d",
                       shape: tuple[int, int] | None = None, n_pairs: int | None = None,
                       segments: dict | None = None) -> PairDataset:
    """Positives: same subject, different activities. Negatives: different subjects, same activity.

    Segments are filtered but not min-max normalised. Pairs are unique
    (unordered) and the classes differ in size by at most one.
    """
    segs = segments if segments is not None else preprocess_records(records)
    keys = sorted(segs, key=lambda k: (k[0], k[1].value))
    flat: list[Segment] = [s for k in keys for s in segs[k]]
    subjects = sorted({k[0] for k in keys})
    if len(subjects) < 2:
        raise HarnessError("pair dataset needs at least two subjects")
    index: dict[tuple[str, Activity], list[int]] = {}
    for i, s in enumerate(flat):
        index.setdefault((s.subject_id, s.activity), []).append(i)
    acts_of = {sub: sorted({a for (s, a) in index if s == sub}, key=lambda a: a.value) for sub in subjects}
    if any(len(a) < 2 for a in acts_of.values()):
        raise HarnessError("every subject needs at least two activities")
    subs_of = {}
    for (s, a) in index:
        subs_of.setdefault(a, []).append(s)
    neg_acts = sorted((a for a, ss in subs_of.items() if len(ss) >= 2), key=lambda a: a.value)
    if not neg_acts:
        raise HarnessError("no activity is shared by two subjects")

    rng = np.random.default_rng(derive_seed(seed, "pairs"))
    target = n_pairs if n_pairs is not None else len(flat)
    n_pos, n_neg = (target + 1) // 2, target // 2
    seen: set[tuple[int, int]] = set()
    pairs, labels = [], []

    def draw(label: int) -> tuple[int, int]:
        if label == 1:
            sub = subjects[int(rng.integers(len(subjects)))]
            a1, a2 = rng.choice(len(acts_of[sub]), size=2, replace=False)
            ia, ib = index[(sub, acts_of[sub][a1])], index[(sub, acts_of[sub][a2])]
        else:
            act = neg_acts[int(rng.integers(len(neg_acts)))]
            s1, s2 = rng.choice(len(subs_of[act]), size=2, replace=False)
            ia, ib = index[(subs_of[act][s1], act)], index[(subs_of[act][s2], act)]
        return ia[int(rng.integers(len(ia)))], ib[int(rng.integers(len(ib)))]

    for label, count in ((1, n_pos), (0, n_neg)):
        made, tries = 0, 0
        while made < count:
            tries += 1
            if tries > 50 * count + 1000:
                raise HarnessError(f"could not draw {count} unique pairs with label {label}")
            a, b = draw(label)
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            pairs.append((a, b))
            labels.append(label)
            made += 1
    if abs(n_pos - n_neg) > 1:
        raise HarnessError("pair classes unbalanced")
    perm = rng.permutation(len(labels))
    shape = tuple(shape) if shape is not None else full_shape(preprocessing)
    used = sorted({i for p in pairs for i in p})
    remap = {old: new for new, old in enumerate(used)}
    x = np.stack([to_input(flat[i].samples, preprocessing, shape) for i in used])
    pair_arr = np.array([(remap[a], remap[b]) for a, b in pairs], dtype=np.int64)[perm]
    return PairDataset(x, pair_arr, np.asarray(labels, dtype=np.int64)[perm],
                       [flat[i].subject_id for i in used], [flat[i].activity.value for i in used])


# splitting

def split_stratified(dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Per-stratum shuffle and cut; returns (train, val, test) subsets of ``dataset``."""
    n = len(dataset)
    if n < 10:
        raise HarnessError(f"dataset of {n} items is too small to split")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise HarnessError("fractions must be three non-negative values summing to 1")
    idx = split_indices(dataset.strata, fractions, seed)
    return tuple(dataset.subset(i) for i in idx)


def split_indices(strata: Sequence, fractions: Sequence[float], seed: int) -> tuple[np.ndarray, ...]:
    rng = np.random.default_rng(derive_seed(seed, "split"))
    groups: dict = {}
    for i, key in enumerate(strata):
        groups.setdefault(key, []).append(i)
    parts: list[list[int]] = [[], [], []]
    for key in sorted(groups, key=repr):
        members = np.asarray(groups[key])[rng.permutation(len(groups[key]))]
        n_val = int(round(fractions[1] * len(members)))
        n_test = int(round(fractions[2] * len(members)))
        n_train = len(members) - n_val - n_test
        parts[0] += members[:n_train].tolist()
        parts[1] += members[n_train:n_train + n_val].tolist()
        parts[2] += members[n_train + n_val:].tolist()
    return tuple(np.asarray(sorted(p), dtype=int) for p in parts)


# metrics

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y_true, y_pred) -> Metrics:
    """Confusion counts with positives = label 1; ratios with an empty denominator are 0."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.size == 0:
        raise HarnessError("empty test set")
    if t.shape != p.shape:
        raise HarnessError("label and prediction shapes differ")
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    tn = int(np.sum(~t & ~p))
    fn = int(np.sum(t & ~p))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics((tp + tn) / t.size, precision, recall, f1, tp, fp, tn, fn)


# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 5
    margin: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be positive")
        if not self.lr > 0 or not self.margin > 0:
            raise ValueError("lr and margin must be positive")


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    threshold: float  # sigmoid cut-off (detectors) or distance threshold (Siamese)
    stopped_early: bool


def _snapshot(model: Model) -> dict:
    return {"p": [p.data.copy() for p in model.parameters()],
            "b": [b.copy() for _, b in model.named_buffers()]}


def _restore(model: Model, snap: dict) -> None:
    for p, v in zip(model.parameters(), snap["p"]):
        p.data[...] = v
    for (_, b), v in zip(model.named_buffers(), snap["b"]):
        b[...] = v


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _pair_tensors(ds: PairDataset, idx, dtype) -> tuple[Tensor, Tensor]:
    pr = ds.pairs[idx]
    return Tensor(ds.segments[pr[:, 0]].astype(dtype)), Tensor(ds.segments[pr[:, 1]].astype(dtype))


def detector_scores(model: Model, ds: DetectionDataset, batch_size: int = 64) -> tuple[np.ndarray, float]:
    """Sigmoid outputs and mean BCE in inference mode."""
    model.eval()
    outs, loss_sum = [], 0.0
    with no_grad():
        for idx in _batches(len(ds), batch_size, None):
            p = model(Tensor(ds.x[idx].astype(model.dtype)))
            loss_sum += float(bce_loss(p, ds.y[idx].astype(model.dtype)[:, None]).data) * len(idx)
            outs.append(p.data[:, 0])
    model.train()
    return np.concatenate(outs).astype(np.float64), loss_sum / len(ds)


def pair_distances(model: Model, ds: PairDataset, batch_size: int = 64, margin: float = 1.0
                   ) -> tuple[np.ndarray, float]:
    model.eval()
    outs, loss_sum = [], 0.0
    with no_grad():
        for idx in _batches(len(ds), batch_size, None):
            a, b = _pair_tensors(ds, idx, model.dtype)
            d = pair_distance(model, a, b)
            loss_sum += float(contrastive_loss(d, ds.y[idx].astype(model.dtype), margin).data) * len(idx)
            outs.append(d.data)
    model.train()
    return np.concatenate(outs).astype(np.float64), loss_sum / len(ds)


def select_threshold(distances: np.ndarray, labels: np.ndarray, n_candidates: int = 100) -> tuple[float, float]:
    """Distance cut-off maximising accuracy ("same" iff distance < threshold) over evenly spaced candidates."""
    lo, hi = float(np.min(distances)), float(np.max(distances))
    if hi <= lo:
        hi = lo + 1e-6
    candidates = np.linspace(lo, hi, n_candidates + 1)[1:]
    best_t, best_acc = float(candidates[0]), -1.0
    for t in candidates:
        acc = float(np.mean((distances < t) == labels.astype(bool)))
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t, best_acc


def _train_inputs(train_set, dtype, batch_size: int):
    """Training inputs in fixed order (for Siamese sets, each segment used by a training pair once)."""
    x = train_set.segments[np.unique(train_set.pairs)] if isinstance(train_set, PairDataset) else train_set.x
    for i in range(0, len(x), batch_size):
        yield Tensor(x[i:i + batch_size].astype(dtype))


def train(model: Model, train_set, val_set, cfg: TrainConfig = TrainConfig(), seed: int = 0,
          log=None) -> TrainResult:
    """Adam with early stopping on validation accuracy; the best epoch's weights are restored.

    Before each validation pass the batch-norm statistics are re-estimated on
    the training inputs with dropout off, so model selection (and the
    returned checkpoint) uses exactly the network that inference runs.
    """
    siamese = model.kind_id.is_siamese
    if siamese != isinstance(train_set, PairDataset):
        raise HarnessError("Siamese models train on pair datasets, detectors on detection datasets")
    shape = train_set.segments.shape[1:] if siamese else train_set.x.shape[1:]
    if tuple(shape) != model.input_shape:
        raise HarnessError(f"dataset inputs {tuple(shape)} do not match model input {model.input_shape}")
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    opt = Adam(model.parameters(), lr=cfg.lr)
    model.train()
    history: list[dict] = []
    best = (-1.0, 0, _snapshot(model), cfg.threshold)
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        loss_sum, correct = 0.0, 0
        for step, idx in enumerate(_batches(len(train_set), cfg.batch_size, rng)):
            model.zero_grad()
            try:
                if siamese:
                    a, b = _pair_tensors(train_set, idx, model.dtype)
                    d = pair_distance(model, a, b)
                    y = train_set.y[idx]
                    loss = contrastive_loss(d, y.astype(model.dtype), cfg.margin)
                    correct += int(np.sum((d.data < cfg.margin / 2) == y.astype(bool)))
                else:
                    p = model(Tensor(train_set.x[idx].astype(model.dtype)))
                    y = train_set.y[idx]
                    loss = bce_loss(p, y.astype(model.dtype)[:, None])
                    correct += int(np.sum((p.data[:, 0] >= cfg.threshold) == y.astype(bool)))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteError("loss")
                loss.backward()
            except NonFiniteError as exc:
                raise HarnessError(f"non-finite value at epoch {epoch}, batch {step}: {exc}") from exc
            opt.step()
            loss_sum += value * len(idx)
        precise_batch_norm(model, _train_inputs(train_set, model.dtype, cfg.batch_size))
        if siamese:
            dist, val_loss = pair_distances(model, val_set, margin=cfg.margin)
            thr, val_acc = select_threshold(dist, val_set.y)
        else:
            scores, val_loss = detector_scores(model, val_set)
            thr = cfg.threshold
            val_acc = float(np.mean((scores >= thr) == val_set.y.astype(bool)))
        row = {"epoch": epoch, "train_loss": loss_sum / len(train_set), "train_accuracy": correct / len(train_set),
               "val_loss": val_loss, "val_accuracy": val_acc}
        history.append(row)
        if log:
            log(f"epoch {epoch}: " + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if val_acc > best[0]:
            best = (val_acc, epoch, _snapshot(model), thr)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    _restore(model, best[2])
    return TrainResult(history, best[1], best[0], best[3], len(history) < cfg.epochs)


def evaluate(model: Model, test_set, threshold: float = 0.5) -> Metrics:
    if len(test_set) == 0:
        raise HarnessError("empty test set")
    if model.kind_id.is_siamese:
        dist, _ = pair_distances(model, test_set)
        return compute_metrics(test_set.y, dist < threshold)
    scores, _ = detector_scores(model, test_set)
    return compute_metrics(test_set.y, scores >= threshold)


# experiments

@dataclass(frozen=True)
class DatasetSpec:
    n_subjects: int = 12
    duration_s: float = 60.0
    activities: tuple[str, ...] = tuple(a.value for a in ACTIVITIES)


@dataclass(frozen=True)
class ExperimentSpec:
    model: str = "CNN"
    strategy: str | None = "Sporadic50"
    preprocessing: str | None = None  # derived from the model kind when omitted
    dataset: DatasetSpec = DatasetSpec()
    train: TrainConfig = TrainConfig()
    scale: float = 0.25
    head_dim_mode: str = "literal"
    repeats: int = 25
    seed: int = 0
    min_success: float = 0.8

    @property
    def kind(self) -> ModelKind:
        return ModelKind.parse(self.model)

    @property
    def resolved_preprocessing(self) -> str:
        return self.preprocessing or ("cwt" if self.kind.uses_cwt else "raw1d")

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(scale=self.scale, seed=seed, head_dim_mode=self.head_dim_mode)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["activities"] = list(self.dataset.activities)
        d["preprocessing"] = self.resolved_preprocessing
        d["model"] = self.kind.value
        if self.strategy is not None:
            d["strategy"] = TamperStrategy.parse(self.strategy).value
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        errors = validate_spec(raw)
        if errors:
            raise SpecError(errors)
        ds = DatasetSpec(**{**asdict(DatasetSpec()), **raw.get("dataset", {})})
        ds = replace(ds, activities=tuple(ds.activities))
        tr = TrainConfig(**{**asdict(TrainConfig()), **raw.get("train", {})})
        top = {k: v for k, v in raw.items() if k not in ("dataset", "train")}
        if ModelKind.parse(top.get("model", cls.model)).is_siamese:
            top["strategy"] = None  # verification has no tamper strategy
        return cls(**{**top, "dataset": ds, "train": tr})

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError([f"$: invalid JSON ({exc})"]) from exc
        return cls.from_dict(raw)


class SpecError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


_TOP_KEYS = {f for f in ExperimentSpec.__dataclass_fields__}
_DS_KEYS = {f for f in DatasetSpec.__dataclass_fields__}
_TR_KEYS = {f for f in TrainConfig.__dataclass_fields__}


def validate_spec(raw) -> list[str]:
    """Every problem in an experiment spec, each prefixed with its JSON path."""
    errs: list[str] = []
    if not isinstance(raw, dict):
        return ["$: expected an object"]
    for k in raw:
        if k not in _TOP_KEYS:
            errs.append(f"$.{k}: unknown field")
    kind = None
    if "model" in raw:
        try:
            kind = ModelKind.parse(str(raw["model"]))
        except ValueError as exc:
            errs.append(f"$.model: {exc}")
    else:
        kind = ModelKind.CNN
    strategy = raw.get("strategy", "Sporadic50")
    if kind is not None and not kind.is_siamese:
        if strategy is None:
            errs.append("$.strategy: detectors need a tamper strategy")
        else:
            try:
                TamperStrategy.parse(str(strategy))
            except ValueError as exc:
                errs.append(f"$.strategy: {exc}")
    if raw.get("preprocessing") not in (None, "raw1d", "cwt"):
        errs.append("$.preprocessing: expected raw1d or cwt")
    elif kind is not None and raw.get("preprocessing") is not None:
        want = "cwt" if kind.uses_cwt else "raw1d"
        if raw["preprocessing"] != want:
            errs.append(f"$.preprocessing: {kind.value} consumes {want} inputs")

    def number(path, value, lo, integer=False, hi=None):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if integer:
            ok = ok and float(value).is_integer()
        if not ok or value < lo or (hi is not None and value > hi):
            errs.append(f"{path}: expected {'an integer' if integer else 'a number'} >= {lo}"
                        + (f" and <= {hi}" if hi is not None else ""))

    if "scale" in raw:
        number("$.scale", raw["scale"], 0.0)
        if not errs or not errs[-1].startswith("$.scale"):
            try:
                ModelConfig(scale=float(raw["scale"]))
            except ValueError as exc:
                errs.append(f"$.scale: {exc}")
    if "repeats" in raw:
        number("$.repeats", raw["repeats"], 1, integer=True)
    if "seed" in raw:
        number("$.seed", raw["seed"], 0, integer=True)
    if "min_success" in raw:
        number("$.min_success", raw["min_success"], 0.0, hi=1.0)
    if raw.get("head_dim_mode", "literal") not in ("literal", "conventional"):
        errs.append("$.head_dim_mode: expected literal or conventional")
    ds = raw.get("dataset", {})
    if not isinstance(ds, dict):
        errs.append("$.dataset: expected an object")
    else:
        for k in ds:
            if k not in _DS_KEYS:
                errs.append(f"$.dataset.{k}: unknown field")
        if "n_subjects" in ds:
            number("$.dataset.n_subjects", ds["n_subjects"], 2, integer=True)
        if "duration_s" in ds:
            number("$.dataset.duration_s", ds["duration_s"], 4.0)
        if "activities" in ds:
            acts = ds["activities"]
            if not isinstance(acts, list) or len(acts) < 2:
                errs.append("$.dataset.activities: expected a list of at least two activities")
            else:
                for i, a in enumerate(acts):
                    if a not in {x.value for x in Activity}:
                        errs.append(f"$.dataset.activities[{i}]: unknown activity {a!r}")
    tr = raw.get("train", {})
    if not isinstance(tr, dict):
        errs.append("$.train: expected an object")
    else:
        for k in tr:
            if k not in _TR_KEYS:
                errs.append(f"$.train.{k}: unknown field")
        for k in ("epochs", "batch_size", "patience"):
            if k in tr:
                number(f"$.train.{k}", tr[k], 1, integer=True)
        for k in ("lr", "margin"):
            if k in tr:
                number(f"$.train.{k}", tr[k], 1e-12)
        if "threshold" in tr:
            number("$.train.threshold", tr["threshold"], 0.0, hi=1.0)
    return errs


def generate_records(spec: ExperimentSpec) -> list[EcgRecord]:
    records, _ = synth_dataset(spec.dataset.n_subjects, spec.dataset.duration_s,
                               derive_seed(spec.seed, "records"), [Activity(a) for a in spec.dataset.activities])
    return records


def run_seed(spec: ExperimentSpec, run: int) -> int:
    return derive_seed(spec.seed, "run", run)


def single_run(spec: ExperimentSpec, run_seed_value: int, segments: dict, log=None) -> dict:
    """build -> split -> train -> evaluate for one derived seed."""
    kind = spec.kind
    cfg = spec.model_config(derive_seed(run_seed_value, "init"))
    shape = input_shape(kind, cfg)
    prep = spec.resolved_preprocessing
    if kind.is_siamese:
        ds = build_pair_dataset([], derive_seed(run_seed_value, "dataset"), prep, shape, segments=segments)
    else:
        ds = build_detection_dataset([], spec.strategy, prep, derive_seed(run_seed_value, "dataset"), shape,
                                     segments=segments)
    tr, va, te = split_stratified(ds, seed=derive_seed(run_seed_value, "split"))
    model = build(kind, cfg)
    res = train(model, tr, va, spec.train, seed=derive_seed(run_seed_value, "train"), log=log)
    metrics = evaluate(model, te, res.threshold)
    return {
        "metrics": metrics.as_dict(),
        "threshold": res.threshold,
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.history),
        "best_val_accuracy": res.best_val_accuracy,
        "history": res.history,
        "sizes": {"train": len(tr), "val": len(va), "test": len(te)},
    }


@dataclass
class RunReport:
    spec: dict
    runs: list[dict]
    summary: dict = field(default_factory=dict)
    quorum_met: bool = True
    schema_version: int = SCHEMA_VERSION

    @property
    def model(self) -> str:
        return self.spec["model"]

    @property
    def strategy(self) -> str:
        return self.spec.get("strategy") or "verification"

    def as_dict(self) -> dict:
        return {"schema_version": self.schema_version, "spec": self.spec, "summary": self.summary,
                "quorum_met": self.quorum_met, "runs": self.runs}

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise HarnessError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["spec"], d["runs"], d["summary"], d["quorum_met"], d["schema_version"])


def summarize(runs: list[dict]) -> dict:
    ok = [r for r in runs if r["status"] == "ok"]
    out = {"n_runs": len(runs), "n_success": len(ok), "n_failed": len(runs) - len(ok)}
    for m in METRICS:
        vals = np.array([r["metrics"][m] for r in ok], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                  "std": float(vals.std()) if len(vals) else float("nan")}
    return out


def _worker(args):
    spec_dict, i, seed_value = args
    spec = ExperimentSpec.from_dict(spec_dict)
    segments = preprocess_records(generate_records(spec))
    return _run_one(spec, i, seed_value, segments, None)


def _run_one(spec, i, seed_value, segments, log):
    try:
        out = single_run(spec, seed_value, segments, log)
        return {"run": i, "seed": seed_value, "status": "ok", **out}
    except (HarnessError, FloatingPointError, ValueError) as exc:
        return {"run": i, "seed": seed_value, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def repeat_runs(spec: ExperimentSpec, n: int | None = None, jobs: int = 1, same_seed: bool = False,
                log=None) -> RunReport:
    """``n`` independent runs (default ``spec.repeats``); records are generated once from the master seed."""
    n = spec.repeats if n is None else n
    if n < 1:
        raise HarnessError("need at least one run")
    seeds = [run_seed(spec, 0 if same_seed else i) for i in range(n)]
    if jobs > 1 and n > 1:
        raw = _spec_to_raw(spec)
        with ProcessPoolExecutor(max_workers=min(jobs, n)) as pool:
            runs = list(pool.map(_worker, [(raw, i, s) for i, s in enumerate(seeds)]))
    else:
        segments = preprocess_records(generate_records(spec))
        runs = []
        for i, s in enumerate(seeds):
            if log:
                log(f"run {i + 1}/{n} (seed {s})")
            runs.append(_run_one(spec, i, s, segments, log))
    summary = summarize(runs)
    quorum = summary["n_success"] >= math.ceil(spec.min_success * n - 1e-9)
    return RunReport(spec.as_dict(), runs, summary, quorum)


def _spec_to_raw(spec: ExperimentSpec) -> dict:
    d = spec.as_dict()
    d["dataset"] = {**d["dataset"], "activities": list(spec.dataset.activities)}
    return d


# reports

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_json(reports: Sequence[RunReport]) -> str:
    body = {"schema_version": SCHEMA_VERSION, "reports": [r.as_dict() for r in reports]}
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=True) + "\n"


def report_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "strategy", "repeats", "succeeded"] +
               [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
    for r in reports:
        s = r.summary
        w.writerow([r.model, r.strategy, s["n_runs"], s["n_success"]] +
                   [f"{s[m][k]:.6f}" for m in METRICS for k in ("mean", "std")])
    return buf.getvalue()


def emit_report(reports: RunReport | Sequence[RunReport], out_dir, formats: Sequence[str] = ("json", "csv"),
                stem: str = "report", svg_items: Sequence = ()) -> list[Path]:
    """Write ``<stem>.json`` / ``<stem>.csv`` and one SVG per tampered item; all writes are atomic."""
    if isinstance(reports, RunReport):
        reports = [reports]
    out = Path(out_dir)
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out / f"{stem}.json"
            _atomic_write(path, report_json(reports))
        elif fmt == "csv":
            path = out / f"{stem}.csv"
            _atomic_write(path, report_csv(reports))
        elif fmt == "svg":
            for i, item in enumerate(svg_items):
                path = out / f"{stem}_{i:03d}.svg"
                _atomic_write(path, render_svg(item))
                written.append(path)
            continue
        else:
            raise HarnessError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def load_reports(path) -> list[RunReport]:
    d = json.loads(Path(path).read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise HarnessError(f"unsupported report schema {d.get('schema_version')!r}")
    return [RunReport.from_dict(r) for r in d["reports"]]


def sample_tampered(records: Sequence[EcgRecord], strategy: TamperStrategy | str, n: int, seed: int = 0):
    """A few composed (filtered, normalised) items for rendering."""
    strategy = TamperStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    segs = preprocess_records(records)
    pool = [s for k in sorted(segs, key=lambda k: (k[0], k[1].value)) for s in segs[k]]
    rng = np.random.default_rng(derive_seed(seed, "render", strategy.value))
    items = []
    for _ in range(n):
        host = pool[int(rng.integers(len(pool)))]
        donors = [s for s in pool if s.activity == host.activity and s.subject_id != host.subject_id]
        if not donors:
            raise HarnessError("no donor with a matching activity")
        donor = donors[int(rng.integers(len(donors)))]
        items.append(compose(make_layout(strategy, 2048, rng),
                             host.with_samples(dsp.min_max_normalize(host.samples)),
                             donor.with_samples(dsp.min_max_normalize(donor.samples))))
    return items
