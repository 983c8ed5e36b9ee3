"""Procedural clean scenes used as stand-ins for photographs.

Colors are saturated (one channel near zero) so that every local patch has a
dark channel close to zero, the same statistic natural outdoor images show.
"""
from __future__ import annotations

import colorsys

import numpy as np

from .imgcore import Rng

CHART_COLORS = np.array([
    [0.85, 0.08, 0.06],
    [0.05, 0.10, 0.80],
    [0.10, 0.70, 0.08],
    [0.02, 0.02, 0.02],
    [0.90, 0.75, 0.04],
    [0.60, 0.05, 0.65],
])


def _saturated_color(gen: np.random.Generator) -> np.ndarray:
    hue = gen.random()
    sat = gen.uniform(0.92, 1.0)
    val = gen.uniform(0.35, 0.95)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def chart_image(h: int = 64, w: int = 64, square: int = 16) -> np.ndarray:
    """Deterministic high-contrast checkerboard of saturated colors and black."""
    rows = np.arange(h)[:, None] // square
    cols = np.arange(w)[None, :] // square
    idx = (rows * 5 + cols * 2) % len(CHART_COLORS)
    dark = (rows + cols) % 2 == 1
    idx = np.where(dark, 3, idx)
    return CHART_COLORS[idx].astype(np.float64)


def checkerboard(h: int = 64, w: int = 64, square: int = 8, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    cells = ((np.arange(h)[:, None] // square) + (np.arange(w)[None, :] // square)) % 2
    gray = np.where(cells == 1, hi, lo)
    return np.repeat(gray[..., None], 3, axis=2)


def gradient_image(h: int = 64, w: int = 64) -> np.ndarray:
    """Smooth, noiseless diagonal color ramp."""
    y = np.linspace(0.0, 1.0, h)[:, None]
    x = np.linspace(0.0, 1.0, w)[None, :]
    img = np.stack([0.2 + 0.6 * x + 0 * y, 0.3 + 0.4 * y + 0 * x, 0.5 - 0.2 * x * y], axis=2)
    return np.clip(img, 0.0, 1.0)


def random_scene(rng: Rng, h: int = 64, w: int = 64, n_shapes: int = 10) -> np.ndarray:
    """Piecewise-smooth scene: shaded background plus rectangles and ellipses."""
    gen = rng.generator()
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c0, c1 = _saturated_color(gen), _saturated_color(gen)
    ramp = (yy / max(h - 1, 1))[..., None]
    img = c0 * (1.0 - ramp) + c1 * ramp
    for _ in range(n_shapes):
        color = _saturated_color(gen)
        cy, cx = gen.uniform(0, h), gen.uniform(0, w)
        ry, rx = gen.uniform(h / 12, h / 4), gen.uniform(w / 12, w / 4)
        if gen.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        shade = 1.0 - 0.25 * (yy - cy) / (2 * h)
        img[mask] = np.clip(color[None, :] * shade[mask][:, None], 0.0, 1.0)
    return img
