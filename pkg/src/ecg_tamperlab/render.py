"""Static SVG renderings of tampered segments (host green, donor red, blends shaded)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .tamper import MASK_A, MASK_B, MASK_BLEND, TamperedSegment, mask_rle

COLORS = {MASK_A: "#2ca02c", MASK_B: "#d62728", MASK_BLEND: "#ff7f0e"}
BANDS = {MASK_A: "#e8f5e9", MASK_B: "#fdecea", MASK_BLEND: "#ffe0b2"}
LABELS = {MASK_A: "host (A)", MASK_B: "donor (B)", MASK_BLEND: "blend"}


def render_svg(t: TamperedSegment, width: int = 960, height: int = 240, title: str | None = None) -> str:
    n = len(t.samples)
    pad_l, pad_r, pad_t, pad_b = 10, 10, 28, 22
    plot_w, plot_h = width - pad_l - pad_r, height - pad_t - pad_b
    lo, hi = float(np.min(t.samples)), float(np.max(t.samples))
    span = hi - lo if hi > lo else 1.0

    def px(i):
        return pad_l + plot_w * i / max(n - 1, 1)

    def py(v):
        return pad_t + plot_h * (1.0 - (v - lo) / span)

    strategy = t.strategy.value if t.strategy is not None else "identity"
    head = title or f"{strategy}: host {t.host_id}, donor {t.donor_id}, {t.activity.value}"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{pad_l}" y="18" font-family="sans-serif" font-size="13">{escape(head)}</text>',
    ]
    # source bands, then the trace coloured by source; runs overlap by one sample so the line is continuous
    start = 0
    runs = []
    for label, length in mask_rle(t.mask):
        runs.append((label, start, start + length))
        start += length
    for label, a, b in runs:
        x0, x1 = px(a), px(min(b, n - 1))
        parts.append(f'<rect x="{x0:.2f}" y="{pad_t}" width="{max(x1 - x0, 0.5):.2f}" height="{plot_h}" '
                     f'fill="{BANDS[label]}" class="band-{LABELS[label].split()[0]}"/>')
    for label, a, b in runs:
        idx = range(max(a - 1, 0), b)
        pts = " ".join(f"{px(i):.2f},{py(float(t.samples[i])):.2f}" for i in idx)
        parts.append(f'<polyline fill="none" stroke="{COLORS[label]}" stroke-width="1" points="{pts}"/>')
    x = pad_l
    for label in (MASK_A, MASK_B, MASK_BLEND):
        parts.append(f'<rect x="{x}" y="{height - 15}" width="10" height="10" fill="{COLORS[label]}"/>')
        parts.append(f'<text x="{x + 14}" y="{height - 6}" font-family="sans-serif" font-size="11">'
                     f'{LABELS[label]}</text>')
        x += 110
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
