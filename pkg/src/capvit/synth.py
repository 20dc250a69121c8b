"""Synthetic caption dataset: colored geometric shapes on plain canvases.

Each sample renders 1-3 shapes (distinct colors, distinct coarse position
cells) and a templated caption naming color, shape, and position. Canvas
sizes vary so native-aspect-ratio preprocessing gets exercised. Fully
deterministic given the seed; all pixel values sit on the 1/255 grid so
PNG round-trips are exact.
"""

from __future__ import annotations

import numpy as np

from .imaging import ImageSample

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (45, 80, 220),
    "yellow": (230, 210, 50),
    "purple": (150, 60, 200),
}

SHAPES = ("circle", "square", "triangle")

# coarse position cells as fractional (y, x) centers
POSITIONS = {
    "top left": (0.25, 0.25),
    "top right": (0.25, 0.75),
    "bottom left": (0.75, 0.25),
    "bottom right": (0.75, 0.75),
    "center": (0.5, 0.5),
}

BACKGROUNDS = ((245, 245, 245), (235, 240, 230), (240, 235, 245))


def shape_mask(shape: str, cy: float, cx: float, size: float,
               h: int, w: int) -> np.ndarray:
    """Boolean raster of the shape; `size` is the circumradius-ish extent."""
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys + 0.5
    xs = xs + 0.5
    if shape == "circle":
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= size ** 2
    if shape == "square":
        return (np.abs(ys - cy) <= size) & (np.abs(xs - cx) <= size)
    if shape == "triangle":
        # upward isoceles: base 2*size wide at cy+size, apex at cy-size
        in_band = (ys >= cy - size) & (ys <= cy + size)
        half_width = (ys - (cy - size)) / 2.0
        return in_band & (np.abs(xs - cx) <= half_width)
    raise ValueError(f"unknown shape {shape!r}")


def shape_area(shape: str, size: float) -> float:
    """Analytic area matching shape_mask's geometry."""
    if shape == "circle":
        return float(np.pi * size * size)
    if shape == "square":
        return float(4.0 * size * size)
    if shape == "triangle":
        return float(0.5 * (2.0 * size) * (2.0 * size))
    raise ValueError(f"unknown shape {shape!r}")


def caption_for(parts) -> str:
    return " and ".join(f"a {color} {shape} at the {pos}"
                        for color, shape, pos in parts)


def synth_generate(seed: int, n: int,
                   canvas_range: tuple[int, int] = (64, 160)) -> list[ImageSample]:
    """Deterministic corpus of n shape scenes with templated captions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = canvas_range
    if lo < 16 or hi < lo:
        raise ValueError("canvas_range must satisfy 16 <= lo <= hi")
    rng = np.random.default_rng(seed)
    samples = []
    pos_names = list(POSITIONS)
    color_names = list(COLORS)
    for i in range(n):
        h = int(rng.integers(lo, hi + 1))
        w = int(rng.integers(lo, hi + 1))
        bg = BACKGROUNDS[int(rng.integers(0, len(BACKGROUNDS)))]
        canvas = np.empty((h, w, 3), dtype=np.uint8)
        canvas[:] = bg
        k = int(rng.integers(1, 4))
        cells = rng.choice(len(pos_names), size=k, replace=False)
        colors = rng.choice(len(color_names), size=k, replace=False)
        parts = []
        for cell_i, color_i in zip(cells, colors):
            pos = pos_names[int(cell_i)]
            color = color_names[int(color_i)]
            shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
            fy, fx = POSITIONS[pos]
            cy = fy * h + float(rng.uniform(-0.03, 0.03)) * h
            cx = fx * w + float(rng.uniform(-0.03, 0.03)) * w
            size = float(rng.uniform(0.10, 0.16)) * min(h, w)
            mask = shape_mask(shape, cy, cx, size, h, w)
            canvas[mask] = COLORS[color]
            parts.append((color, shape, pos))
        samples.append(ImageSample(pixels=canvas.astype(np.float64) / 255.0,
                                   caption=caption_for(parts),
                                   id=f"synth-{seed}-{i:05d}"))
    return samples
