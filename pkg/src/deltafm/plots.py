"""Self-contained SVG figures: flows, FM-vs-contrastive panels, denoising strips, loss curves."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np
from scipy.stats import gaussian_kde

PALETTE = ["#1f5fbf", "#e8871e", "#2a9d4b", "#c0392b", "#8e44ad", "#7f8c8d"]
NOISE_COLOR = "#7b4fa8"


class UnsupportedDimensionError(ValueError):
    pass


def _require_2d(arr, what):
    if np.shape(arr)[-1] != 2:
        raise UnsupportedDimensionError(f"{what} must be 2-D for this plot, got dimension {np.shape(arr)[-1]}")


class Panel:
    """Maps data coordinates onto a pixel rectangle."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = xlim, ylim

    def px(self, x, y):
        u = self.x0 + (np.asarray(x) - self.xlim[0]) / (self.xlim[1] - self.xlim[0]) * self.w
        v = self.y0 + self.h - (np.asarray(y) - self.ylim[0]) / (self.ylim[1] - self.ylim[0]) * self.h
        return u, v


class Svg:
    def __init__(self, width, height):
        self.width, self.height = width, height
        self.parts = []

    def add(self, s):
        self.parts.append(s)

    def text(self, x, y, s, size=12, anchor="middle"):
        self.add(f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" font-family="sans-serif" '
                 f'text-anchor="{anchor}">{escape(str(s))}</text>')

    def frame(self, p: Panel):
        self.add(f'<rect x="{p.x0:.1f}" y="{p.y0:.1f}" width="{p.w:.1f}" height="{p.h:.1f}" '
                 'fill="none" stroke="#333" stroke-width="0.8"/>')

    def render(self):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *self.parts, "</svg>"]) + "\n"


def _limits(arrays, pad=0.08):
    pts = np.concatenate([np.reshape(a, (-1, 2)) for a in arrays])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad * span, hi + pad * span
    return (lo[0], hi[0]), (lo[1], hi[1])


def _density(svg, p: Panel, points, color, cells=40, label=""):
    if len(points) < 3:
        return
    kde = gaussian_kde(points.T)
    xs = np.linspace(*p.xlim, cells + 1)
    ys = np.linspace(*p.ylim, cells + 1)
    cx, cy = np.meshgrid((xs[:-1] + xs[1:]) / 2, (ys[:-1] + ys[1:]) / 2, indexing="ij")
    dens = kde(np.vstack([cx.ravel(), cy.ravel()])).reshape(cx.shape)
    dens /= dens.max()
    cw, ch = p.w / cells, p.h / cells
    svg.add(f'<g class="density {label}" fill="{color}">')
    for i in range(cells):
        for j in range(cells):
            if dens[i, j] < 0.05:
                continue
            u, v = p.px(xs[i], ys[j + 1])
            svg.add(f'<rect x="{u:.2f}" y="{v:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                    f'fill-opacity="{0.35 * dens[i, j]:.3f}"/>')
    svg.add("</g>")


def _flows_panel(svg, p: Panel, trajectories, data=None, max_paths=60):
    svg.frame(p)
    if data is not None:
        for c in sorted(np.unique(data.labels)):
            _density(svg, p, data.of_class(c), PALETTE[c % len(PALETTE)], label=f"class-{c}")
    first = next(iter(trajectories.values()))[0]
    u, v = p.px(first[:max_paths, 0, 0], first[:max_paths, 0, 1])
    svg.add(f'<g class="noise" fill="{NOISE_COLOR}">')
    svg.add("".join(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.6"/>' for a, b in zip(u, v)))
    svg.add("</g>")
    for c, (states, _, _) in sorted(trajectories.items()):
        color = PALETTE[c % len(PALETTE)]
        svg.add(f'<g class="trajectories class-{c}" stroke="{color}" fill="none" stroke-opacity="0.55" '
                'stroke-width="0.9">')
        for path in states[:max_paths]:
            uu, vv = p.px(path[:, 0], path[:, 1])
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(uu, vv))
            svg.add(f'<polyline points="{pts}"/>')
        svg.add("</g>")
        uu, vv = p.px(states[:max_paths, -1, 0], states[:max_paths, -1, 1])
        svg.add(f'<g class="endpoints class-{c}" fill="{color}">'
                + "".join(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.2"/>' for a, b in zip(uu, vv)) + "</g>")


def _check_trajectories(trajectories):
    if not trajectories:
        raise ValueError("no trajectories to plot")
    for states, _, _ in trajectories.values():
        _require_2d(states, "trajectory states")


def flows(trajectories, data=None, title="Class-conditional flows") -> str:
    """Trajectories coloured by class over a density-shaded scatter of the data."""
    _check_trajectories(trajectories)
    if data is not None:
        _require_2d(data.points, "data")
    arrays = [s for s, _, _ in trajectories.values()] + ([data.points] if data is not None else [])
    xlim, ylim = _limits(arrays)
    svg = Svg(520, 540)
    svg.text(260, 24, title, size=15)
    _flows_panel(svg, Panel(20, 40, 480, 480, xlim, ylim), trajectories, data)
    return svg.render()


def panels(top, bottom, data=None, titles=("Flow matching", "Contrastive flow matching")) -> str:
    """Two flow panels stacked vertically: plain FM on top, contrastive below."""
    _check_trajectories(top)
    _check_trajectories(bottom)
    arrays = [s for s, _, _ in top.values()] + [s for s, _, _ in bottom.values()]
    if data is not None:
        _require_2d(data.points, "data")
        arrays.append(data.points)
    xlim, ylim = _limits(arrays)
    svg = Svg(520, 1020)
    for k, (traj, title) in enumerate(zip((top, bottom), titles)):
        y0 = 30 + k * 500
        svg.add(f'<g class="panel panel-{k}" data-title="{escape(title)}">')
        svg.text(260, y0 + 5, title, size=15)
        _flows_panel(svg, Panel(20, y0 + 15, 480, 470, xlim, ylim), traj, data)
        svg.add("</g>")
    return svg.render()


def denoise_strip(trajectories, max_points=200) -> str:
    """Posterior-mean endpoint estimates at each recorded step, left to right."""
    _check_trajectories(trajectories)
    times = next(iter(trajectories.values()))[2]
    arrays = [e for _, e, _ in trajectories.values()]
    xlim, ylim = _limits(arrays)
    size, gap = 150, 12
    svg = Svg(gap + len(times) * (size + gap), size + 60)
    for k, t in enumerate(times):
        p = Panel(gap + k * (size + gap), 30, size, size, xlim, ylim)
        svg.frame(p)
        svg.text(p.x0 + size / 2, 22, f"t = {t:.2f}")
        for c, (_, exps, _) in sorted(trajectories.items()):
            u, v = p.px(exps[:max_points, k, 0], exps[:max_points, k, 1])
            svg.add(f'<g class="expectation class-{c} step-{k}" fill="{PALETTE[c % len(PALETTE)]}" '
                    'fill-opacity="0.6">' + "".join(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.5"/>'
                                                    for a, b in zip(u, v)) + "</g>")
    return svg.render()


def _binned(x, y, bins=500):
    if len(x) <= bins:
        return np.asarray(x, float), np.asarray(y, float)
    edges = np.array_split(np.arange(len(x)), bins)
    return np.array([np.mean(np.asarray(x)[e]) for e in edges]), np.array([np.mean(np.asarray(y)[e]) for e in edges])


def loss_curves(history) -> str:
    """fm_term, contrastive_term and total against iteration (bin-averaged)."""
    if not history:
        raise ValueError("empty loss history")
    it = [r["iteration"] for r in history]
    series = {k: _binned(it, [r[k] for r in history]) for k in ("fm_term", "contrastive_term", "total")}
    ys = np.concatenate([s[1] for s in series.values()])
    p = Panel(60, 40, 560, 320, (min(it), max(max(it), min(it) + 1)), (min(ys.min(), 0.0), ys.max() * 1.05 + 1e-12))
    svg = Svg(660, 420)
    svg.text(340, 24, "Training loss", size=15)
    svg.frame(p)
    for k, ((name, (x, y)), color) in enumerate(zip(series.items(), PALETTE)):
        u, v = p.px(x, y)
        svg.add(f'<polyline class="curve {name}" fill="none" stroke="{color}" stroke-width="1.2" points="'
                + " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(u, v)) + '"/>')
        svg.text(640, 60 + 16 * k, name, size=11, anchor="end")
    for frac in (0.0, 0.5, 1.0):
        val = p.ylim[0] + frac * (p.ylim[1] - p.ylim[0])
        svg.text(55, p.px(0, val)[1] + 4, f"{val:.3g}", size=10, anchor="end")
    svg.text(340, 395, "iteration", size=11)
    return svg.render()
