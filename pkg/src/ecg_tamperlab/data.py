"""ECG records: file ingestion, a synthetic multi-subject generator, and windowing."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeds import derive_seed

FS = 512
WINDOW = 2048
OVERLAP = 0.30
CSV_HEADER = ["subject", "activity", "fs", "sample"]


class Activity(str, Enum):
    SITTING = "sitting"
    STANDING = "standing"
    BENDING = "bending"
    STAIRS = "stairs"
    JUMPING = "jumping"
    WALKING = "walking"
    RUNNING = "running"


ACTIVITIES: tuple[Activity, ...] = tuple(Activity)


class RecordError(ValueError):
    """Malformed or unsupported record input."""


@dataclass(frozen=True, eq=False)
class EcgRecord:
    subject_id: str
    activity: Activity
    samples: np.ndarray
    sample_rate: int = FS

    def __post_init__(self):
        if self.sample_rate != FS:
            raise RecordError(f"unsupported sample rate {self.sample_rate} (expected {FS})")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise RecordError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise RecordError("non-finite sample")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "activity", Activity(self.activity))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class Segment:
    samples: np.ndarray
    subject_id: str
    activity: Activity
    start_index: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise RecordError("non-finite sample in segment")
        object.__setattr__(self, "samples", arr)

    def with_samples(self, samples: np.ndarray) -> "Segment":
        return replace(self, samples=samples)


# ingestion

def load_record(path, format: str | None = None) -> EcgRecord:
    """Read a ``csv`` record or a ``raw-f64`` record with its ``.meta.json`` sidecar."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "raw-f64"
    if not path.exists():
        raise FileNotFoundError(f"missing record file {path}")
    if format == "csv":
        return _load_csv(path)
    if format == "raw-f64":
        return _load_raw(path)
    raise RecordError(f"unknown record format {format!r}")


def _load_csv(path: Path) -> EcgRecord:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise RecordError(f"malformed header {header!r}; expected {','.join(CSV_HEADER)}")
        subject = activity = None
        fs = None
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise RecordError(f"line {lineno}: expected 4 fields")
            s, a, f, v = row
            if subject is None:
                subject, activity, fs = s, a, f
            elif (s, a, f) != (subject, activity, fs):
                raise RecordError(f"line {lineno}: subject/activity/fs change within one record")
            values.append(float(v))
    if not values:
        raise RecordError("record has no samples")
    rate = float(fs)
    if rate != FS:
        raise RecordError(f"unsupported sample rate {fs}")
    samples = np.asarray(values)
    if not np.all(np.isfinite(samples)):
        raise RecordError("non-finite sample")
    return EcgRecord(subject, Activity(activity), samples, int(rate))


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _load_raw(path: Path) -> EcgRecord:
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sidecar metadata {meta_path}")
    meta = json.loads(meta_path.read_text())
    raw = path.read_bytes()
    if len(raw) % 8:
        raise RecordError("raw-f64 payload length is not a multiple of 8")
    fs = meta.get("fs")
    if fs != FS:
        raise RecordError(f"unsupported sample rate {fs}")
    samples = np.frombuffer(raw, dtype="<f8").copy()
    return EcgRecord(str(meta["subject"]), Activity(meta["activity"]), samples, int(fs))


def save_record(record: EcgRecord, path, format: str = "csv") -> Path:
    path = Path(path)
    if format == "csv":
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        prefix = f"{record.subject_id},{record.activity.value},{record.sample_rate},"
        for v in record.samples:
            buf.write(prefix + repr(float(v)) + "\n")
        path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    elif format == "raw-f64":
        path.write_bytes(record.samples.astype("<f8").tobytes())
        meta = {"subject": record.subject_id, "activity": record.activity.value, "fs": record.sample_rate}
        _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n")
    else:
        raise RecordError(f"unknown record format {format!r}")
    return path


# synthetic subjects

WAVES = ("P", "Q", "R", "S", "T")

# (low, high) sampling ranges; centres are seconds relative to the R peak at 60 bpm
_AMP = {"P": (0.08, 0.30), "Q": (-0.30, -0.05), "R": (0.8, 2.2), "S": (-0.6, -0.1), "T": (0.12, 0.6)}
_WIDTH = {"P": (0.020, 0.045), "Q": (0.008, 0.016), "R": (0.008, 0.018), "S": (0.008, 0.018), "T": (0.035, 0.075)}
_CENTER = {"P": (-0.22, -0.15), "Q": (-0.045, -0.025), "R": (0.0, 0.0), "S": (0.022, 0.045), "T": (0.22, 0.34)}
_REST_HR = (55.0, 85.0)
_HR_GAIN = (0.8, 1.2)
_HRV = (1.0, 4.0)
_NOISE = (0.008, 0.03)

_ACTIVITY_HR = {  # bpm added to the resting rate, before the subject's gain
    Activity.SITTING: 0.0, Activity.STANDING: 6.0, Activity.BENDING: 12.0, Activity.STAIRS: 35.0,
    Activity.JUMPING: 50.0, Activity.WALKING: 22.0, Activity.RUNNING: 65.0,
}
_ACTIVITY_NOISE = {
    Activity.SITTING: 1.0, Activity.STANDING: 1.2, Activity.BENDING: 1.6, Activity.STAIRS: 2.5,
    Activity.JUMPING: 3.5, Activity.WALKING: 2.0, Activity.RUNNING: 4.0,
}


@dataclass(frozen=True)
class SubjectProfile:
    """Five-Gaussian beat morphology plus per-activity rhythm and noise."""

    amplitudes: tuple[float, ...]  # mV, P Q R S T
    widths: tuple[float, ...]  # s
    centers: tuple[float, ...]  # s from the R peak at 60 bpm
    heart_rate: dict = field(hash=False)  # Activity -> bpm
    hrv_bpm: float = 2.0
    noise: dict = field(default=None, hash=False)  # Activity -> mV std
    offset_mv: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        amp = dict(zip(WAVES, self.amplitudes))
        if not amp["R"] > amp["P"]:
            raise ValueError("R amplitude must exceed P amplitude")
        if min(self.widths) <= 0:
            raise ValueError("wave widths must be positive")
        for a, hr in self.heart_rate.items():
            if not 40.0 <= hr <= 200.0:
                raise ValueError(f"heart rate {hr} for {a} outside [40, 200]")

    def rate(self, activity: Activity) -> float:
        return float(self.heart_rate[Activity(activity)])

    def noise_level(self, activity: Activity) -> float:
        return float(self.noise[Activity(activity)])

    def vector(self) -> np.ndarray:
        """Parameters rescaled to [0, 1] by their sampling ranges."""
        parts = []
        for i, w in enumerate(WAVES):
            for value, (lo, hi) in ((self.amplitudes[i], _AMP[w]), (self.widths[i], _WIDTH[w]),
                                    (self.centers[i], _CENTER[w])):
                if hi > lo:
                    parts.append((value - lo) / (hi - lo))
        for a in ACTIVITIES:
            parts.append((self.heart_rate[a] - 40.0) / 160.0)
        parts.append((self.hrv_bpm - _HRV[0]) / (_HRV[1] - _HRV[0]))
        parts.append((self.noise[Activity.SITTING] - _NOISE[0]) / (_NOISE[1] - _NOISE[0]))
        return np.asarray(parts)


def profile_distance(a: SubjectProfile, b: SubjectProfile) -> float:
    return float(np.linalg.norm(a.vector() - b.vector()))


def min_profile_distance(fraction: float = 0.10) -> float:
    """``fraction`` of the parameter-space diagonal."""
    dim = len(_draw_profile(np.random.default_rng(0), 0).vector())
    return fraction * math.sqrt(dim)


def _draw_profile(rng: np.random.Generator, seed: int) -> SubjectProfile:
    amps = tuple(float(rng.uniform(*_AMP[w])) for w in WAVES)
    widths = tuple(float(rng.uniform(*_WIDTH[w])) for w in WAVES)
    centers = tuple(float(rng.uniform(*_CENTER[w])) for w in WAVES)
    rest = rng.uniform(*_REST_HR)
    gain = rng.uniform(*_HR_GAIN)
    hr = {a: float(np.clip(rest + gain * _ACTIVITY_HR[a], 40.0, 190.0)) for a in ACTIVITIES}
    base_noise = rng.uniform(*_NOISE)
    noise = {a: float(base_noise * _ACTIVITY_NOISE[a]) for a in ACTIVITIES}
    return SubjectProfile(amps, widths, centers, hr, float(rng.uniform(*_HRV)), noise,
                          float(rng.uniform(-0.5, 0.5)), seed)


def synth_subject(seed: int, avoid: Sequence[SubjectProfile] = (), min_distance: float | None = None,
                  max_tries: int = 1000) -> SubjectProfile:
    """Deterministic profile for ``seed``; redrawn until it is far from every profile in ``avoid``."""
    rng = np.random.default_rng(seed)
    thresh = min_profile_distance() if min_distance is None else min_distance
    for _ in range(max_tries):
        prof = _draw_profile(rng, seed)
        if all(profile_distance(prof, other) >= thresh for other in avoid):
            return prof
    raise RuntimeError(f"could not draw a profile {thresh:.3f} away from {len(avoid)} others")


def synth_cohort(n_subjects: int, seed: int) -> dict[str, SubjectProfile]:
    """``n_subjects`` mutually distinct profiles keyed ``S01``, ``S02``, ..."""
    profiles: dict[str, SubjectProfile] = {}
    for i in range(n_subjects):
        prof = synth_subject(derive_seed(seed, "subject", i), avoid=list(profiles.values()))
        profiles[f"S{i + 1:02d}"] = prof
    return profiles


def _beat_params(profile: SubjectProfile, rr: float):
    # P/T timing and T width stretch with sqrt(RR); QRS is rate independent
    stretch = math.sqrt(rr)
    centers = np.array(profile.centers)
    widths = np.array(profile.widths)
    centers[[0, 4]] *= stretch
    widths[4] *= stretch
    return np.array(profile.amplitudes), widths, centers


def synth_record(profile: SubjectProfile, activity: Activity, duration_s: float, seed: int,
                 subject_id: str = "S00") -> EcgRecord:
    """Sum-of-Gaussians beats on jittered RR intervals, baseline wander and white noise."""
    if duration_s < WINDOW / FS:
        raise ValueError(f"duration {duration_s}s is shorter than one {WINDOW / FS:.0f}s window")
    activity = Activity(activity)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * FS))
    t = np.arange(n) / FS
    x = np.full(n, profile.offset_mv)

    hr = profile.rate(activity)
    beat_times = []
    tb = -rng.uniform(0.0, 60.0 / hr) - 1.0
    while tb < duration_s + 1.0:
        beat_times.append(tb)
        bpm = hr + profile.hrv_bpm * rng.standard_normal() if profile.hrv_bpm > 0 else hr
        tb += 60.0 / float(np.clip(bpm, 30.0, 220.0))
    amps, widths, centers = _beat_params(profile, 60.0 / hr)
    reach = 5.0 * widths.max() + np.abs(centers).max()
    for tb in beat_times:
        lo = max(0, int(math.floor((tb - reach) * FS)))
        hi = min(n, int(math.ceil((tb + reach) * FS)) + 1)
        if lo >= hi:
            continue
        tt = t[lo:hi, None] - tb
        x[lo:hi] += (amps * np.exp(-0.5 * ((tt - centers) / widths) ** 2)).sum(axis=1)

    sigma = profile.noise_level(activity)
    if sigma > 0:
        resp = rng.uniform(0.15, 0.35)
        x += 3.0 * sigma * np.sin(2 * np.pi * resp * t + rng.uniform(0, 2 * np.pi))
        x += 1.5 * sigma * np.sin(2 * np.pi * rng.uniform(0.03, 0.1) * t + rng.uniform(0, 2 * np.pi))
        x += sigma * rng.standard_normal(n)
    return EcgRecord(subject_id, activity, x)


def synth_dataset(n_subjects: int = 12, duration_s: float = 60.0, seed: int = 0,
                  activities: Iterable[Activity] = ACTIVITIES) -> tuple[list[EcgRecord], dict]:
    """Records for every (subject, activity) plus a JSON-serialisable manifest."""
    cohort = synth_cohort(n_subjects, seed)
    activities = [Activity(a) for a in activities]
    records, entries = [], []
    for sid, prof in cohort.items():
        for act in activities:
            rseed = derive_seed(seed, "record", sid, act.value)
            records.append(synth_record(prof, act, duration_s, rseed, subject_id=sid))
            entries.append({"subject": sid, "activity": act.value, "seed": rseed})
    manifest = {
        "schema_version": 1,
        "fs": FS,
        "seed": seed,
        "duration_s": duration_s,
        "subjects": [{"id": sid, "seed": p.seed} for sid, p in cohort.items()],
        "activities": [a.value for a in activities],
        "records": entries,
    }
    return records, manifest


# windowing

def hop_length(window: int = WINDOW, overlap: float = OVERLAP) -> int:
    return int(round(window * (1.0 - overlap)))


def segment(record: EcgRecord, window: int = WINDOW, overlap: float = OVERLAP) -> list[Segment]:
    """Overlapping fixed windows; a trailing partial window is dropped."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    n = len(record.samples)
    if n < window:
        raise ValueError(f"record of {n} samples is shorter than one {window}-sample window")
    hop = hop_length(window, overlap)
    return [Segment(record.samples[s:s + window].copy(), record.subject_id, record.activity, s)
            for s in range(0, n - window + 1, hop)]
