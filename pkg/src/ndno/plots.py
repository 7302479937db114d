"""Minimal SVG writers: a histogram of per-sample errors and loss curves."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H = 640, 400
PAD = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="12" font-family="sans-serif">{escape(xlabel)}</text>',
        f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD / 2}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD / 2 + 10}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
    ]


def _tick(x, y, label, anchor="middle") -> str:
    return f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="10" font-family="sans-serif">{escape(label)}</text>'


def histogram_bins(values, bins: int = 30):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("histogram of an empty list")
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        hi = lo + (abs(lo) or 1.0) * 1e-6
    return np.histogram(v, bins=bins, range=(lo, hi))


def histogram_svg(values, path=None, bins: int = 30, title: str = "Per-sample max error", xlabel: str = "max error (mm)") -> str:
    """Density histogram; returns the SVG text and writes it when ``path`` is given."""
    counts, edges = histogram_bins(values, bins)
    dens = counts / (counts.sum() * np.diff(edges))
    out = _frame(title, xlabel, "density")
    pw, ph = W - 1.5 * PAD, H - 1.5 * PAD - 10
    top = float(dens.max()) or 1.0
    bw = pw / bins
    for i, d in enumerate(dens):
        h = ph * d / top
        out.append(
            f'<rect class="bar" x="{PAD + i * bw:.2f}" y="{H - PAD - h:.2f}" width="{bw:.2f}" '
            f'height="{h:.2f}" fill="{PALETTE[0]}" stroke="white" stroke-width="0.5"/>'
        )
    for frac in (0.0, 0.5, 1.0):
        x = PAD + frac * pw
        out.append(_tick(x, H - PAD + 14, f"{edges[0] + frac * (edges[-1] - edges[0]):.3g}"))
    out.append(_tick(PAD - 4, H - PAD - ph + 4, f"{top:.3g}", "end"))
    out.append("</svg>")
    svg = "\n".join(out)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg


def loss_curve_svg(history, path=None, title: str = "Training loss", log: bool = True) -> str:
    """One polyline per loss term; ``history`` is a LossHistory or a {term: values} dict."""
    series = history if isinstance(history, dict) else {t: history.term(t) for t in history.terms}
    if not series:
        raise ValueError("loss curve of an empty history")
    out = _frame(title, "epoch", "loss (log10)" if log else "loss")
    pw, ph = W - 1.5 * PAD, H - 1.5 * PAD - 10

    def tr(v):
        v = np.asarray(v, dtype=np.float64)
        if log:
            v = np.log10(np.maximum(np.abs(v), 1e-300))
        return v

    allv = np.concatenate([tr(v) for v in series.values()])
    allv = allv[np.isfinite(allv)]
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())
    for j, (name, vals) in enumerate(series.items()):
        y = tr(vals)
        xs = [PAD + pw * (i / max(n - 1, 1)) for i in range(len(y))]
        ys = [H - PAD - ph * (v - lo) / (hi - lo) if math.isfinite(v) else H - PAD for v in y]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(xs, ys))
        color = PALETTE[j % len(PALETTE)]
        out.append(f'<polyline class="curve" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(_tick(W - PAD / 2 - 4, PAD / 2 + 14 + 14 * j, name, "end").replace("<text ", f'<text fill="{color}" '))
    out.append(_tick(PAD - 4, H - PAD, f"{lo:.3g}", "end"))
    out.append(_tick(PAD - 4, H - PAD - ph + 4, f"{hi:.3g}", "end"))
    out.append(_tick(PAD, H - PAD + 14, "0"))
    out.append(_tick(PAD + pw, H - PAD + 14, str(n - 1)))
    out.append("</svg>")
    svg = "\n".join(out)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(svg)
    return svg
