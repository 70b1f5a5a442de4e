"""Partial-tampering composition: host (A) / donor (B) layouts joined by linear blends."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Activity, Segment

MASK_A, MASK_B, MASK_BLEND = 0, 1, 2
FRAGMENT_FRACTION = 0.05
DEFAULT_BLEND = 5


class TamperError(ValueError):
    pass


class TamperStrategy(str, Enum):
    HALF_5050 = "Half5050"
    ASYM_7525 = "Asym7525"
    ABA_502525 = "ABA502525"
    ALTERNATING_50X10 = "Alternating50x10"
    SPORADIC_20 = "Sporadic20"
    SPORADIC_50 = "Sporadic50"

    @property
    def cli_name(self) -> str:
        return _CLI_NAMES[self]

    @classmethod
    def parse(cls, text: str) -> "TamperStrategy":
        key = text.strip()
        for s in cls:
            if key in (s.value, s.name, s.cli_name) or key.lower() == s.value.lower():
                return s
        raise TamperError(f"unknown strategy {text!r}; choose from {', '.join(s.cli_name for s in cls)}")

    @property
    def nominal_b_fraction(self) -> float:
        return _NOMINAL_B[self]

    @property
    def is_sporadic(self) -> bool:
        return self in (TamperStrategy.SPORADIC_20, TamperStrategy.SPORADIC_50)


_CLI_NAMES = {
    TamperStrategy.HALF_5050: "half5050",
    TamperStrategy.ASYM_7525: "asym7525",
    TamperStrategy.ABA_502525: "aba",
    TamperStrategy.ALTERNATING_50X10: "alt50x10",
    TamperStrategy.SPORADIC_20: "sporadic20",
    TamperStrategy.SPORADIC_50: "sporadic50",
}
_NOMINAL_B = {
    TamperStrategy.HALF_5050: 0.50,
    TamperStrategy.ASYM_7525: 0.25,
    TamperStrategy.ABA_502525: 0.25,
    TamperStrategy.ALTERNATING_50X10: 0.30,
    TamperStrategy.SPORADIC_20: 0.20,
    TamperStrategy.SPORADIC_50: 0.50,
}
# deterministic layouts as (fraction, source) runs; the last run absorbs rounding
_FIXED = {
    TamperStrategy.HALF_5050: [(0.5, "A"), (0.5, "B")],
    TamperStrategy.ASYM_7525: [(0.75, "A"), (0.25, "B")],
    TamperStrategy.ABA_502525: [(0.5, "A"), (0.25, "B"), (0.25, "A")],
    TamperStrategy.ALTERNATING_50X10: [(0.5, "A"), (0.1, "B"), (0.1, "A"), (0.1, "B"), (0.1, "A"), (0.1, "B")],
}
_SPORADIC_COUNT = {TamperStrategy.SPORADIC_20: 4, TamperStrategy.SPORADIC_50: 10}


@dataclass(frozen=True)
class Span:
    start: int
    end: int
    source: str  # "A" (host) or "B" (donor)

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TamperLayout:
    spans: tuple[Span, ...]
    length: int
    strategy: TamperStrategy | None = None

    def __post_init__(self):
        if not self.spans:
            raise TamperError("layout has no spans")
        pos = 0
        for sp in self.spans:
            if sp.source not in ("A", "B"):
                raise TamperError(f"bad source {sp.source!r}")
            if sp.start != pos or sp.end <= sp.start:
                raise TamperError(f"spans do not partition [0, {self.length}): {self.spans}")
            pos = sp.end
        if pos != self.length:
            raise TamperError(f"spans cover [0, {pos}) instead of [0, {self.length})")
        for a, b in zip(self.spans, self.spans[1:]):
            if a.source == b.source:
                raise TamperError("adjacent spans must alternate source")

    @classmethod
    def identity(cls, length: int) -> "TamperLayout":
        return cls((Span(0, length, "A"),), length, None)

    @property
    def junctions(self) -> list[int]:
        return [sp.start for sp in self.spans[1:]]

    def donor_spans(self) -> list[Span]:
        return [sp for sp in self.spans if sp.source == "B"]

    def b_fraction(self) -> float:
        return sum(len(sp) for sp in self.donor_spans()) / self.length

    def as_list(self) -> list[list]:
        return [[sp.start, sp.end, sp.source] for sp in self.spans]


def _from_lengths(lengths, sources, length, strategy) -> TamperLayout:
    spans, pos = [], 0
    for n, src in zip(lengths, sources):
        if n <= 0:
            continue
        if spans and spans[-1].source == src:
            prev = spans.pop()
            spans.append(Span(prev.start, pos + n, src))
        else:
            spans.append(Span(pos, pos + n, src))
        pos += n
    return TamperLayout(tuple(spans), length, strategy)


def sporadic_starts(length: int, count: int, size: int, min_gap: int, rng: np.random.Generator) -> list[int]:
    """Uniformly random fragment starts with at least ``min_gap`` host samples between fragments.

    Stars and bars: the slack beyond the mandatory gaps is split over the
    ``count + 1`` gaps by choosing ``count`` bar positions.
    """
    slack = length - count * size - (count - 1) * min_gap
    if slack < 0:
        raise TamperError(f"cannot place {count} fragments of {size} with gap {min_gap} in {length}")
    bars = np.sort(rng.choice(slack + count, size=count, replace=False))
    extra = np.diff(np.concatenate([[-1], bars])) - 1  # slack before each fragment
    starts, pos = [], 0
    for i, e in enumerate(extra):
        pos += int(e) + (min_gap if i > 0 else 0)
        starts.append(pos)
        pos += size
    return starts


def make_layout(strategy: TamperStrategy | str, length: int = 2048, rng: np.random.Generator | None = None,
                blend_width: int = DEFAULT_BLEND) -> TamperLayout:
    strategy = TamperStrategy.parse(strategy) if isinstance(strategy, str) else strategy
    if length < 20:
        raise TamperError("segment too short to tamper")
    if strategy in _FIXED:
        runs = _FIXED[strategy]
        lengths = [int(round(f * length)) for f, _ in runs[:-1]]
        lengths.append(length - sum(lengths))
        return _from_lengths(lengths, [s for _, s in runs], length, strategy)
    if rng is None:
        raise TamperError(f"{strategy.value} needs a random generator")
    count = _SPORADIC_COUNT[strategy]
    size = int(round(FRAGMENT_FRACTION * length))
    starts = sporadic_starts(length, count, size, blend_width, rng)
    lengths, sources, pos = [], [], 0
    for s in starts:
        lengths += [s - pos, size]
        sources += ["A", "B"]
        pos = s + size
    lengths.append(length - pos)
    sources.append("A")
    return _from_lengths(lengths, sources, length, strategy)


def blend_join(prev_tail, curr_head) -> np.ndarray:
    """(1 - a) * prev_tail + a * curr_head with a = linspace(0, 1, W)."""
    prev = np.asarray(prev_tail, dtype=np.float64)
    curr = np.asarray(curr_head, dtype=np.float64)
    if prev.shape != curr.shape or prev.ndim != 1:
        raise TamperError(f"blend inputs differ in shape: {prev.shape} vs {curr.shape}")
    if len(prev) < 2:
        raise TamperError("blend width must be at least 2")
    alpha = np.linspace(0.0, 1.0, len(prev))
    return (1.0 - alpha) * prev + alpha * curr


def blend_window(junction: int, width: int) -> tuple[int, int]:
    """Unclipped [start, stop) of the blend straddling ``junction`` (ceil(W/2) before it)."""
    start = junction - int(math.ceil(width / 2))
    return start, start + width


def compose_samples(layout: TamperLayout, host, donor, blend_width: int = DEFAULT_BLEND):
    """Time-aligned substitution with blends at every junction. Returns (samples, mask)."""
    host = np.asarray(host, dtype=np.float64)
    donor = np.asarray(donor, dtype=np.float64)
    n = layout.length
    if host.shape != (n,) or donor.shape != (n,):
        raise TamperError(f"sources must have length {n}")
    out = host.copy()
    mask = np.full(n, MASK_A, dtype=np.uint8)
    src = {"A": host, "B": donor}
    for sp in layout.spans:
        if sp.source == "B":
            out[sp.start:sp.end] = donor[sp.start:sp.end]
            mask[sp.start:sp.end] = MASK_B
    if blend_width >= 2:
        for prev, nxt in zip(layout.spans, layout.spans[1:]):
            a, b = blend_window(nxt.start, blend_width)
            lo, hi = max(a, 0), min(b, n)
            if lo == a and hi == b:
                out[a:b] = blend_join(src[prev.source][a:b], src[nxt.source][a:b])
            else:
                alpha = (np.arange(lo, hi) - a) / (blend_width - 1)
                out[lo:hi] = (1 - alpha) * src[prev.source][lo:hi] + alpha * src[nxt.source][lo:hi]
            mask[lo:hi] = MASK_BLEND
    return out, mask


@dataclass(frozen=True, eq=False)
class TamperedSegment:
    samples: np.ndarray
    mask: np.ndarray
    strategy: TamperStrategy | None
    host_id: str
    donor_id: str
    activity: Activity
    layout: TamperLayout
    blend_width: int = DEFAULT_BLEND
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def compose(layout: TamperLayout, host: Segment, donor: Segment, blend_width: int = DEFAULT_BLEND,
            seed: int | None = None) -> TamperedSegment:
    if host.activity != donor.activity:
        raise TamperError(f"activity mismatch: {host.activity.value} vs {donor.activity.value}")
    if host.subject_id == donor.subject_id:
        raise TamperError("host and donor must be different subjects")
    samples, mask = compose_samples(layout, host.samples, donor.samples, blend_width)
    return TamperedSegment(samples, mask, layout.strategy, host.subject_id, donor.subject_id,
                           host.activity, layout, blend_width, seed,
                           {"host_start": host.start_index, "donor_start": donor.start_index})


@dataclass(frozen=True)
class FractionReport:
    a: float
    b: float
    blend: float
    b_effective: float
    donor_runs: int
    nominal_b: float

    def as_dict(self) -> dict:
        return dict(vars(self))


def _runs(mask: np.ndarray, label: int) -> int:
    hit = (mask == label).astype(np.int8)
    return int(np.sum(np.diff(np.concatenate([[0], hit])) == 1))


def expected_mask(layout: TamperLayout, blend_width: int) -> np.ndarray:
    return compose_samples(layout, np.zeros(layout.length), np.zeros(layout.length), blend_width)[1]


def verify_mask(t: TamperedSegment, tolerance: float = 0.01) -> FractionReport:
    """Measure A/B/blend fractions; raise if the mask disagrees with the layout or the nominal share."""
    if not np.array_equal(t.mask, expected_mask(t.layout, t.blend_width)):
        raise TamperError("mask inconsistent with layout")
    n = len(t.mask)
    a = float(np.mean(t.mask == MASK_A))
    b = float(np.mean(t.mask == MASK_B))
    blend = float(np.mean(t.mask == MASK_BLEND))
    b_eff = b + blend / 2.0
    nominal = 0.0 if t.strategy is None else t.strategy.nominal_b_fraction
    report = FractionReport(a, b, blend, b_eff, _runs(t.mask, MASK_B), nominal)
    if abs(b_eff - nominal) > tolerance:
        raise TamperError(f"donor fraction {b_eff:.4f} differs from nominal {nominal} by more than {tolerance}")
    return report


def mask_rle(mask: np.ndarray) -> list[list[int]]:
    """[[label, run_length], ...]."""
    out: list[list[int]] = []
    for v in mask.tolist():
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([v, 1])
    return out


def mask_from_rle(rle) -> np.ndarray:
    return np.concatenate([np.full(n, v, dtype=np.uint8) for v, n in rle])


def write_tampered(t: TamperedSegment, directory, stem: str) -> tuple[Path, Path]:
    """``<stem>.f64`` (little-endian samples) plus ``<stem>.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = directory / f"{stem}.f64"
    payload.write_bytes(np.asarray(t.samples, dtype="<f8").tobytes())
    side = {
        "strategy": None if t.strategy is None else t.strategy.value,
        "seed": t.seed,
        "host_id": t.host_id,
        "donor_id": t.donor_id,
        "activity": t.activity.value,
        "length": int(len(t.samples)),
        "blend_width": t.blend_width,
        "spans": t.layout.as_list(),
        "mask_rle": mask_rle(t.mask),
        "mask_labels": {"0": "A", "1": "B", "2": "blend"},
        **{k: v for k, v in t.meta.items()},
    }
    sidecar = directory / f"{stem}.json"
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return payload, sidecar


def read_tampered(directory, stem: str) -> TamperedSegment:
    directory = Path(directory)
    side = json.loads((directory / f"{stem}.json").read_text())
    samples = np.frombuffer((directory / f"{stem}.f64").read_bytes(), dtype="<f8").copy()
    strategy = None if side["strategy"] is None else TamperStrategy(side["strategy"])
    layout = TamperLayout(tuple(Span(a, b, s) for a, b, s in side["spans"]), side["length"], strategy)
    extra = {k: side[k] for k in ("host_start", "donor_start") if k in side}
    return TamperedSegment(samples, mask_from_rle(side["mask_rle"]), strategy, side["host_id"],
                           side["donor_id"], Activity(side["activity"]), layout,
                           side["blend_width"], side["seed"], extra)
