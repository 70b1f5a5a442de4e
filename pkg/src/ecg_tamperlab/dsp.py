"""Preprocessing chain: Butterworth band-pass, min-max scaling and Morlet CWT."""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

FS = 512
SCALOGRAM_MAGIC = b"SCLG"
SCALOGRAM_VERSION = 1


def _finite(x, what: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")
    return arr


# band-pass design

@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections ``(b0, b1, b2, a1, a2)`` with a0 == 1."""

    sections: np.ndarray  # (n, 5)
    low_hz: float
    high_hz: float
    fs: float
    order: int

    @property
    def sos(self) -> np.ndarray:
        """scipy-style (n, 6) layout."""
        s = self.sections
        return np.column_stack([s[:, 0], s[:, 1], s[:, 2], np.ones(len(s)), s[:, 3], s[:, 4]])

    @property
    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:]])

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response evaluated directly from the coefficients."""
        f = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        zi = np.exp(-2j * np.pi * f / self.fs)
        h = np.ones_like(zi)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * zi + b2 * zi**2) / (1.0 + a1 * zi + a2 * zi**2)
        return h

    def gain_db(self, freqs_hz) -> np.ndarray:
        mag = np.abs(self.response(freqs_hz))
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(mag)

    def to_json(self) -> str:
        return json.dumps({
            "type": "butterworth_bandpass",
            "order": self.order,
            "low_hz": self.low_hz,
            "high_hz": self.high_hz,
            "fs": self.fs,
            "sections": [[float(v) for v in row] for row in self.sections],
            "layout": ["b0", "b1", "b2", "a1", "a2"],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BiquadCascade":
        d = json.loads(text)
        return cls(np.asarray(d["sections"], dtype=np.float64), d["low_hz"], d["high_hz"], d["fs"], d["order"])


def _pair_poles(poles: np.ndarray) -> list[tuple[complex, complex]]:
    upper = sorted((p for p in poles if p.imag > 1e-12), key=lambda p: abs(p))
    real = sorted(p.real for p in poles if abs(p.imag) <= 1e-12)
    pairs = [(p, p.conjugate()) for p in upper]
    if len(real) % 2:
        raise ValueError("odd number of real poles cannot form biquads")
    pairs += [(complex(real[i]), complex(real[i + 1])) for i in range(0, len(real), 2)]
    return pairs


def design_bandpass(order: int = 2, low_hz: float = 0.5, high_hz: float = 100.0,
                    fs: float = FS) -> BiquadCascade:
    """Digital Butterworth band-pass via the bilinear transform.

    The order-``order`` analog low-pass prototype is shifted to a band-pass
    between the pre-warped edges, so the result has ``2*order`` poles,
    realised as ``order`` biquads with zeros at DC and Nyquist.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not 0.0 < low_hz < high_hz < fs / 2.0:
        raise ValueError(f"cutoffs must satisfy 0 < low < high < fs/2, got {low_hz}, {high_hz}")
    k2 = 2.0 * fs
    wl = k2 * math.tan(math.pi * low_hz / fs)
    wh = k2 * math.tan(math.pi * high_hz / fs)
    bw, w0 = wh - wl, math.sqrt(wl * wh)

    proto = np.exp(1j * np.pi * (2 * np.arange(order) + order + 1) / (2 * order))
    half = proto * bw / 2.0
    disc = np.sqrt(half**2 - w0**2 + 0j)
    s_poles = np.concatenate([half + disc, half - disc])
    # analog gain bw^order, zeros: order at s=0, order at infinity
    z_poles = (k2 + s_poles) / (k2 - s_poles)
    gain = (bw**order) * np.real(k2**order / np.prod(k2 - s_poles))

    pairs = _pair_poles(z_poles)
    g = abs(gain) ** (1.0 / order)
    sign = np.sign(gain)
    sections = []
    for i, (p1, p2) in enumerate(pairs):
        a1 = -np.real(p1 + p2)
        a2 = np.real(p1 * p2)
        gi = g * (sign if i == 0 else 1.0)
        sections.append([gi, 0.0, -gi, a1, a2])
    return BiquadCascade(np.asarray(sections), float(low_hz), float(high_hz), float(fs), order)


_DEFAULT_FILTER: BiquadCascade | None = None


def default_bandpass() -> BiquadCascade:
    global _DEFAULT_FILTER
    if _DEFAULT_FILTER is None:
        _DEFAULT_FILTER = design_bandpass()
    return _DEFAULT_FILTER


def filter_zero_phase(samples, filt: BiquadCascade | None = None, zero_phase: bool = True) -> np.ndarray:
    """Apply the cascade forward and backward (or once, if ``zero_phase`` is False).

    Each biquad runs forward-backward with Gustafsson's initial conditions,
    which suppress the long start-up transient of the 0.5 Hz high-pass pole.
    """
    filt = filt or default_bandpass()
    x = _finite(samples, "filter input")
    if x.ndim != 1:
        raise ValueError("expected a 1-D signal")
    if len(x) < 3 * filt.order:
        raise ValueError(f"signal of {len(x)} samples is shorter than 3 x order")
    sos = filt.sos
    if not zero_phase:
        return signal.sosfilt(sos, x)
    y = x
    for b0, b1, b2, a1, a2 in filt.sections:
        y = signal.filtfilt([b0, b1, b2], [1.0, a1, a2], y, method="gust")
    return y


# normalisation

def min_max_normalize(x) -> np.ndarray:
    """Map to [0, 1]; a constant input maps to all zeros."""
    arr = _finite(x, "segment")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# continuous wavelet transform

@dataclass(frozen=True)
class Scalogram:
    values: np.ndarray  # (time, n_scales) magnitudes
    freqs_hz: np.ndarray  # (n_scales,) ascending
    edge_mask: np.ndarray  # (time, n_scales) True inside the cone of influence

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def scale_frequencies(n_scales: int = 96, fmin: float = 0.5, fmax: float = 100.0) -> np.ndarray:
    return np.geomspace(fmin, fmax, n_scales)


def morlet_scales(freqs_hz, w0: float = 6.0) -> np.ndarray:
    """Scale in seconds whose Morlet centre frequency is ``freqs_hz``."""
    return w0 / (2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64))


def cwt(samples, n_scales: int = 96, fs: float = FS, fmin: float = 0.5, fmax: float = 100.0,
        w0: float = 6.0) -> Scalogram:
    """Magnitude scalogram with an analytic Morlet wavelet.

    Amplitude-normalised so a unit sinusoid yields magnitude 1 on its ridge.
    The signal is zero padded; no periodic wrap reaches the output.
    """
    x = _finite(samples, "cwt input")
    n = len(x)
    freqs = scale_frequencies(n_scales, fmin, fmax)
    scales = morlet_scales(freqs, w0)
    # tail beyond 5 scale-widths is below exp(-12)
    support = int(math.ceil(5.0 * scales.max() * fs))
    nfft = 1 << int(math.ceil(math.log2(n + support)))
    spectrum = np.fft.fft(x, nfft)
    omega = 2.0 * np.pi * np.fft.fftfreq(nfft, d=1.0 / fs)
    positive = omega > 0
    filt = np.zeros((n_scales, nfft))
    sw = scales[:, None] * omega[None, positive]
    filt[:, positive] = 2.0 * np.exp(-0.5 * (sw - w0) ** 2)
    coeffs = np.fft.ifft(spectrum[None, :] * filt, axis=1)[:, :n]
    values = np.abs(coeffs).T
    t = np.arange(n)[:, None]
    coi = np.sqrt(2.0) * scales[None, :] * fs
    edge = (t < coi) | (t >= n - coi)
    return Scalogram(values, freqs, edge)


def _cache_dir() -> Path | None:
    root = os.environ.get("ECG_TAMPERLAB_CACHE")
    return Path(root) if root else None


def cwt_cached(samples, n_scales: int = 96) -> np.ndarray:
    """``cwt(...).values`` as float32, memoised on disk when ECG_TAMPERLAB_CACHE is set."""
    root = _cache_dir()
    x = np.ascontiguousarray(samples, dtype="<f8")
    if root is None:
        return cwt(x, n_scales).values.astype(np.float32)
    key = hashlib.sha256(x.tobytes() + struct.pack("<I", n_scales)).hexdigest()
    path = root / f"{key}.sclg"
    if path.exists():
        return read_scalogram(path).values
    sc = cwt(x, n_scales)
    root.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    write_scalogram(tmp, sc)
    os.replace(tmp, path)
    return sc.values.astype(np.float32)


def write_scalogram(path, sc: Scalogram) -> None:
    """Little-endian: magic, u32 version, u32 rows, u32 cols, f64 Hz map, f32 row-major matrix."""
    rows, cols = sc.values.shape
    with open(path, "wb") as fh:
        fh.write(SCALOGRAM_MAGIC)
        fh.write(struct.pack("<III", SCALOGRAM_VERSION, rows, cols))
        fh.write(np.asarray(sc.freqs_hz, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(sc.values, dtype="<f4").tobytes())


def read_scalogram(path, fs: float = FS, w0: float = 6.0) -> Scalogram:
    raw = Path(path).read_bytes()
    if raw[:4] != SCALOGRAM_MAGIC:
        raise ValueError("not a scalogram file")
    version, rows, cols = struct.unpack("<III", raw[4:16])
    if version != SCALOGRAM_VERSION:
        raise ValueError(f"unsupported scalogram version {version}")
    off = 16 + 8 * cols
    freqs = np.frombuffer(raw[16:off], dtype="<f8").copy()
    values = np.frombuffer(raw[off:off + 4 * rows * cols], dtype="<f4").reshape(rows, cols).copy()
    coi = np.sqrt(2.0) * morlet_scales(freqs, w0)[None, :] * fs
    t = np.arange(rows)[:, None]
    return Scalogram(values, freqs, (t < coi) | (t >= rows - coi))


# resampling to model input extents

def resample_area(x: np.ndarray, new_len: int, axis: int = 0) -> np.ndarray:
    """Area-average resampling along ``axis`` (exact block means for integer factors)."""
    x = np.asarray(x)
    n = x.shape[axis]
    if new_len == n:
        return x
    moved = np.moveaxis(x, axis, 0).astype(np.float64)
    csum = np.concatenate([np.zeros((1,) + moved.shape[1:]), np.cumsum(moved, axis=0)], axis=0)
    edges = np.linspace(0.0, n, new_len + 1)
    lo, hi = np.floor(edges).astype(int), np.minimum(np.floor(edges).astype(int) + 1, n)
    # cumulative integral of a piecewise-constant signal at fractional positions
    frac = (edges - lo)[(...,) + (None,) * (moved.ndim - 1)]
    integ = csum[lo] + frac * (csum[hi] - csum[lo])
    out = (integ[1:] - integ[:-1]) / (n / new_len)
    return np.moveaxis(out, 0, axis).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def fit_input(x: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Resample a (time, channels) array to ``shape`` along both axes."""
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[:, None]
    x = resample_area(x, shape[0], axis=0)
    return resample_area(x, shape[1], axis=1)
