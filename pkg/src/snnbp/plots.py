"""Static SVG figures written by hand; cosmetic only, CSV files are the record."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

from .io import atomic_writer

W, H = 640, 420
ML, MR, MT, MB = 70, 20, 40, 55


class _Axes:
    def __init__(self, x, y, logx=False, logy=False):
        self.logx, self.logy = logx, logy
        xs = self._tx(np.asarray(x, dtype=float), logx)
        ys = self._tx(np.asarray(y, dtype=float), logy)
        self.x0, self.x1 = _pad(np.nanmin(xs), np.nanmax(xs))
        self.y0, self.y1 = _pad(np.nanmin(ys), np.nanmax(ys))

    @staticmethod
    def _tx(v, log):
        if not log:
            return v
        v = np.where(v > 0, v, np.nan)
        return np.log10(v)

    def px(self, x):
        x = self._tx(np.asarray(x, dtype=float), self.logx)
        return ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y):
        y = self._tx(np.asarray(y, dtype=float), self.logy)
        return H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)

    def frame(self, title, xlabel, ylabel):
        out = [
            f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" fill="none" stroke="#333"/>',
            f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
            f'<text x="{(ML + W - MR) / 2}" y="{H - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>',
            f'<text x="16" y="{(MT + H - MB) / 2}" text-anchor="middle" font-size="13" '
            f'transform="rotate(-90 16 {(MT + H - MB) / 2})">{escape(ylabel)}</text>',
        ]
        for v in _ticks(self.x0, self.x1):
            x = ML + (v - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
            out.append(f'<line x1="{x:.1f}" y1="{H - MB}" x2="{x:.1f}" y2="{H - MB + 5}" stroke="#333"/>')
            out.append(f'<text x="{x:.1f}" y="{H - MB + 18}" text-anchor="middle" font-size="11">{_label(v, self.logx)}</text>')
        for v in _ticks(self.y0, self.y1):
            y = H - MB - (v - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
            out.append(f'<line x1="{ML - 5}" y1="{y:.1f}" x2="{ML}" y2="{y:.1f}" stroke="#333"/>')
            out.append(f'<text x="{ML - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{_label(v, self.logy)}</text>')
        return out

    def polyline(self, x, y, color, width=1.5, dash=None):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(self.px(x), self.py(y)) if np.isfinite(a) and np.isfinite(b))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>'

    def band(self, x, lo, hi, color, opacity=0.25):
        top = [f"{a:.1f},{b:.1f}" for a, b in zip(self.px(x), self.py(hi))]
        bot = [f"{a:.1f},{b:.1f}" for a, b in zip(self.px(x)[::-1], self.py(lo)[::-1])]
        return f'<polygon points="{" ".join(top + bot)}" fill="{color}" fill-opacity="{opacity}" stroke="none"/>'

    def dots(self, x, y, color):
        return "".join(
            f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3.5" fill="{color}"/>'
            for a, b in zip(self.px(x), self.py(y))
            if np.isfinite(a) and np.isfinite(b)
        )


def _pad(lo, hi):
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return 0.0, 1.0
    if hi - lo < 1e-12:
        return lo - 0.5, hi + 0.5
    m = 0.05 * (hi - lo)
    return lo - m, hi + m


def _ticks(lo, hi, n=5):
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step) + 1)]


def _label(v, log):
    if log:
        return f"{10 ** v:.3g}"
    return f"{v:.3g}"


def _legend(items):
    out = []
    for i, (text, color) in enumerate(items):
        y = MT + 14 + 16 * i
        out.append(f'<line x1="{W - MR - 150}" y1="{y}" x2="{W - MR - 130}" y2="{y}" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{W - MR - 125}" y="{y + 4}" font-size="11">{escape(text)}</text>')
    return out


def _write(path, body):
    with atomic_writer(path) as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif">\n')
        fh.write('<rect width="100%" height="100%" fill="white"/>\n')
        fh.write("\n".join(body) + "\n</svg>\n")
    return path


def loglog_fit(path, x, y, slope, intercept, xlabel, ylabel, title):
    """Scatter of ``(x, y)`` on log-log axes with the fitted line ``exp(intercept) x^slope``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ax = _Axes(x, y, logx=True, logy=True)
    body = ax.frame(title, xlabel, ylabel) + [ax.dots(x, y, "#1f5fa8")]
    if np.isfinite(slope):
        xf = np.geomspace(x.min(), x.max(), 50)
        body.append(ax.polyline(xf, np.exp(intercept) * xf**slope, "#c0392b", dash="6,4"))
        body += _legend([("RMSE", "#1f5fa8"), (f"fit, slope {slope:.3f}", "#c0392b")])
    return _write(path, body)


def mean_band(path, x, mean, half, truth_mean, truth_half, xlabel, title):
    """Predicted mean with its band next to the truth mean and band."""
    x = np.asarray(x, dtype=float)
    mean, half = np.ravel(mean), np.ravel(half)
    tm, th = np.ravel(truth_mean), np.ravel(truth_half)
    ax = _Axes(np.r_[x, x, x, x], np.r_[mean - half, mean + half, tm - th, tm + th])
    body = ax.frame(title, xlabel, "output")
    body += [
        ax.band(x, tm - th, tm + th, "#7f8c8d", 0.2),
        ax.band(x, mean - half, mean + half, "#1f5fa8", 0.3),
        ax.polyline(x, tm, "#333", dash="5,3"),
        ax.polyline(x, mean, "#1f5fa8", 2),
    ]
    body += _legend([("mean prediction", "#1f5fa8"), ("truth", "#333")])
    return _write(path, body)


def trace(path, k, values, ylabel, title):
    """Diagnostic trace on a log y-axis."""
    k, values = np.asarray(k, dtype=float), np.asarray(values, dtype=float)
    ax = _Axes(k, values, logy=True)
    body = ax.frame(title, "iteration k", ylabel) + [ax.polyline(k, values, "#1f5fa8", 2), ax.dots(k, values, "#1f5fa8")]
    return _write(path, body)
