"""Image loading, resolution selection, and patch extraction.

Two preprocessing regimes:
  - fixed: shorter side scaled to a square target, center crop (stage 1)
  - native: aspect ratio preserved, sides snapped to patch multiples so the
    visual token count lands inside a [min, max] budget (stage 2)

Resampling is bilinear with half-pixel centers (src = (dst + 0.5) * scale
- 0.5, edge-clamped); the kernel is fixed here so tests are bit-stable.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass
class ImageSample:
    """One image-caption pair; pixels are H x W x 3 floats in [0, 1]."""

    pixels: np.ndarray
    caption: str
    id: str


@dataclass
class PatchGrid:
    rows: int
    cols: int
    patch_size: int

    @property
    def tokens(self) -> int:
        return self.rows * self.cols


def load_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(path, pixels: np.ndarray):
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resample with half-pixel centers, edge clamp."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    h, w = pixels.shape[:2]
    if (h, w) == (out_h, out_w):
        return pixels.copy()

    def axis_weights(n_src, n_dst):
        src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        lo0 = np.clip(lo, 0, n_src - 1)
        lo1 = np.clip(lo + 1, 0, n_src - 1)
        return lo0, lo1, frac

    y0, y1, fy = axis_weights(h, out_h)
    tmp = pixels[y0] * (1.0 - fy)[:, None, None] + pixels[y1] * fy[:, None, None]
    x0, x1, fx = axis_weights(w, out_w)
    out = tmp[:, x0] * (1.0 - fx)[None, :, None] + tmp[:, x1] * fx[None, :, None]
    return out


def resize_fixed(sample: ImageSample, side: int, patch_size: int) -> ImageSample:
    """Scale the shorter side to `side`, then center-crop to side x side."""
    if side % patch_size != 0:
        raise ValueError(f"side {side} not divisible by patch size {patch_size}")
    h, w = sample.pixels.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("degenerate image")
    if h <= w:
        new_h = side
        new_w = max(side, int(round(w * side / h)))
    else:
        new_w = side
        new_h = max(side, int(round(h * side / w)))
    resized = bilinear_resize(sample.pixels, new_h, new_w)
    top = (new_h - side) // 2
    left = (new_w - side) // 2
    cropped = resized[top:top + side, left:left + side]
    return ImageSample(pixels=cropped, caption=sample.caption, id=sample.id)


def select_native_size(h: int, w: int, min_tokens: int, max_tokens: int,
                       patch_size: int) -> tuple[int, int]:
    """Pick output dims: multiples of patch_size, token count in budget,
    aspect ratio as close to h/w as the grid permits.

    Rule: compute the real-valued scale that hits the budget bound, snap
    each side down (scaling down) or up (scaling up) to a patch multiple,
    then search +-1 patch per side for feasibility; ties prefer the aspect
    ratio closest to the original. Falls back to a full grid search for
    pathologically tight budgets.
    """
    if h <= 0 or w <= 0:
        raise ValueError("degenerate image (zero dimension)")
    if min_tokens < 1 or max_tokens < min_tokens:
        raise ValueError("invalid token budget")
    p = patch_size
    natural = (h * w) / (p * p)

    def snap(scale, up):
        f = math.ceil if up else math.floor
        r = max(1, f(scale * h / p))
        c = max(1, f(scale * w / p))
        return r, c

    if natural > max_tokens:
        scaling_down = True
        base = snap(p * math.sqrt(max_tokens / (h * w)), up=False)
    elif natural < min_tokens:
        scaling_down = False
        base = snap(p * math.sqrt(min_tokens / (h * w)), up=True)
    else:
        scaling_down = None
        base = (max(1, round(h / p)), max(1, round(w / p)))

    def aspect_dev(r, c):
        return abs(math.log((r / c) * (w / h)))

    if min_tokens <= base[0] * base[1] <= max_tokens:
        return base[0] * p, base[1] * p

    cands = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = base[0] + dr, base[1] + dc
            if r >= 1 and c >= 1 and min_tokens <= r * c <= max_tokens:
                cands.append((r, c))
    if not cands:
        # tight budgets can leave the local window infeasible; search globally
        for r in range(1, max_tokens + 1):
            c_lo = max(1, math.ceil(min_tokens / r))
            c_hi = max_tokens // r
            for c in range(c_lo, c_hi + 1):
                cands.append((r, c))
        if not cands:
            raise ValueError("no feasible grid for token budget")
    if scaling_down is True:
        key = lambda rc: (-rc[0] * rc[1], aspect_dev(*rc))
    elif scaling_down is False:
        key = lambda rc: (rc[0] * rc[1], aspect_dev(*rc))
    else:
        key = lambda rc: (aspect_dev(*rc), abs(rc[0] * rc[1] - natural))
    r, c = min(cands, key=key)
    return r * p, c * p


def resize_native(sample: ImageSample, min_tokens: int, max_tokens: int,
                  patch_size: int) -> ImageSample:
    """Aspect-preserving resize to a patch-aligned size inside the budget."""
    h, w = sample.pixels.shape[:2]
    new_h, new_w = select_native_size(h, w, min_tokens, max_tokens, patch_size)
    resized = bilinear_resize(sample.pixels, new_h, new_w)
    return ImageSample(pixels=resized, caption=sample.caption, id=sample.id)


def patchify(pixels: np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchGrid]:
    """Split into non-overlapping patches, row-major order.

    Each patch flattens C-order over (y, x, channel), so unpatchify is an
    exact inverse.
    """
    h, w = pixels.shape[:2]
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = (pixels.reshape(rows, p, cols, p, 3)
               .transpose(0, 2, 1, 3, 4)
               .reshape(rows * cols, p * p * 3))
    return patches, PatchGrid(rows=rows, cols=cols, patch_size=p)


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    p = grid.patch_size
    return (patches.reshape(grid.rows, grid.cols, p, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid.rows * p, grid.cols * p, 3))


# ---------------------------------------------------------------------------
# dataset manifest: one JSON record per line with fields id, image, caption
# ---------------------------------------------------------------------------

def write_manifest(path, records):
    """records: iterable of dicts with id, image (relative path), caption."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({"id": rec["id"], "image": rec["image"],
                                "caption": rec["caption"]}) + "\n")


def read_manifest(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            for field in ("id", "image", "caption"):
                if field not in rec:
                    raise ValueError(f"manifest record missing field {field!r}")
            out.append(rec)
    return out


def load_manifest_samples(path) -> list[ImageSample]:
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for rec in read_manifest(path):
        img_path = rec["image"]
        if not os.path.isabs(img_path):
            img_path = os.path.join(base, img_path)
        samples.append(ImageSample(pixels=load_image(img_path),
                                   caption=rec["caption"], id=rec["id"]))
    return samples
