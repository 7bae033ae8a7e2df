"""Small SVG charts written by hand, so plotting needs no extra dependency."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

W, H = 520, 340
LEFT, RIGHT, TOP, BOTTOM = 64, 20, 36, 56


def _finite(v):
    return v is not None and math.isfinite(v)


def _span(values, pad=0.08):
    vals = [v for v in values if _finite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    margin = (hi - lo) * pad
    return lo - margin, hi + margin


def _ticks(lo, hi, count=5):
    raw = (hi - lo) / count
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-12:
        out.append(round(t, 12))
        t += step
    return out


class _Canvas:
    def __init__(self, title, xlabel, ylabel, ylim, xlim=(0.0, 1.0)):
        self.parts = []
        self.ylim, self.xlim = ylim, xlim
        self.parts.append(
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>'
        )
        self.parts.append(
            f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>'
        )
        self.parts.append(
            f'<text x="16" y="{H / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {H / 2})">{escape(ylabel)}</text>'
        )
        x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for t in _ticks(*ylim):
            y = self.y(t)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
            self.parts.append(
                f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{t:g}</text>'
            )

    def x(self, v):
        lo, hi = self.xlim
        return LEFT + (v - lo) / (hi - lo) * (W - LEFT - RIGHT)

    def y(self, v):
        lo, hi = self.ylim
        return (H - BOTTOM) - (v - lo) / (hi - lo) * (H - BOTTOM - TOP)

    def add(self, element):
        self.parts.append(element)

    def error_bar(self, x, mean, err):
        if not (_finite(mean) and _finite(err)):
            return
        top, bot = self.y(mean + err), self.y(mean - err)
        self.add(f'<line x1="{x:.1f}" y1="{top:.1f}" x2="{x:.1f}" y2="{bot:.1f}" stroke="black"/>')
        for yy in (top, bot):
            self.add(f'<line x1="{x - 4:.1f}" y1="{yy:.1f}" x2="{x + 4:.1f}" y2="{yy:.1f}" stroke="black"/>')

    def svg(self):
        body = "\n  ".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif">\n  '
            f'<rect width="{W}" height="{H}" fill="white"/>\n  {body}\n</svg>\n'
        )


def bar_chart(rows, title="Final metric by variant", ylabel="accuracy"):
    """Bars of ``row["mean"]`` with ``row["stderr"]`` whiskers, one per row."""
    means = [r["mean"] for r in rows]
    errs = [r["stderr"] if _finite(r["stderr"]) else 0.0 for r in rows]
    ylim = _span([m - e for m, e in zip(means, errs)] + [m + e for m, e in zip(means, errs)])
    canvas = _Canvas(title, "variant", ylabel, ylim, xlim=(0, len(rows)))
    width = 0.6 * (W - LEFT - RIGHT) / max(len(rows), 1)
    base = canvas.y(ylim[0])
    for i, row in enumerate(rows):
        cx = canvas.x(i + 0.5)
        label = escape(str(row["variant"]))
        canvas.add(f'<text x="{cx:.1f}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="11">{label}</text>')
        if not _finite(row["mean"]):
            continue
        top = canvas.y(row["mean"])
        canvas.add(
            f'<rect x="{cx - width / 2:.1f}" y="{top:.1f}" width="{width:.1f}" '
            f'height="{base - top:.1f}" fill="#7a9cc6"/>'
        )
        canvas.error_bar(cx, row["mean"], row["stderr"])
    return canvas.svg()


def sweep_chart(points, baseline=None, title="Reference batch size", xlabel="unlabeled / labeled ratio"):
    """Mean accuracy against ratio with error bars; baseline as a dotted line."""
    pts = [p for p in points if _finite(p["mean"])]
    ys = [p["mean"] + s * (p["stderr"] if _finite(p["stderr"]) else 0) for p in pts for s in (-1, 1)]
    if baseline and _finite(baseline["mean"]):
        ys.append(baseline["mean"])
    ratios = [p["ratio"] for p in points]
    canvas = _Canvas(title, xlabel, "accuracy", _span(ys), xlim=_span(ratios, pad=0.06))
    for r in ratios:
        canvas.add(
            f'<text x="{canvas.x(r):.1f}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="10">{r:g}</text>'
        )
    if baseline and _finite(baseline["mean"]):
        y = canvas.y(baseline["mean"])
        canvas.add(
            f'<line x1="{LEFT}" y1="{y:.1f}" x2="{W - RIGHT}" y2="{y:.1f}" stroke="gray" '
            f'stroke-dasharray="3,3"/>'
        )
        canvas.add(f'<text x="{W - RIGHT}" y="{y - 4:.1f}" text-anchor="end" font-size="10">baseline</text>')
    path = " ".join(f"{canvas.x(p['ratio']):.1f},{canvas.y(p['mean']):.1f}" for p in pts)
    canvas.add(f'<polyline points="{path}" fill="none" stroke="#c0504d" stroke-width="2"/>')
    for p in pts:
        cx, cy = canvas.x(p["ratio"]), canvas.y(p["mean"])
        canvas.add(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="#c0504d"/>')
        canvas.error_bar(cx, p["mean"], p["stderr"])
    return canvas.svg()


def qq_plot(sample, title="Normal Q-Q plot of rescaled residuals"):
    """Sample quantiles of standardised values against standard normal quantiles."""
    from scipy.stats import norm

    vals = sorted(v for v in sample if _finite(v))
    n = len(vals)
    if n < 2:
        raise ValueError("Q-Q plot needs at least two finite values")
    mu = sum(vals) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / (n - 1)) or 1.0
    zs = [(v - mu) / sd for v in vals]
    theo = [float(norm.ppf((i + 0.5) / n)) for i in range(n)]
    lim = _span(zs + theo, pad=0.05)
    canvas = _Canvas(title, "normal quantile", "sample quantile", lim, xlim=lim)
    canvas.add(
        f'<line x1="{canvas.x(lim[0]):.1f}" y1="{canvas.y(lim[0]):.1f}" '
        f'x2="{canvas.x(lim[1]):.1f}" y2="{canvas.y(lim[1]):.1f}" stroke="gray"/>'
    )
    for t, z in zip(theo, zs):
        canvas.add(f'<circle cx="{canvas.x(t):.1f}" cy="{canvas.y(z):.1f}" r="1.8" fill="#4f81bd"/>')
    return canvas.svg()
