"""Image-vector layout, resampling and grid rendering.

Columns of a data matrix hold flattened images: row-major by pixel with
channels interleaved per pixel, so ``d = height * width * channels``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import CandidateSet, ReferenceSet

__all__ = [
    "ImageLayout",
    "resize_bilinear",
    "clip_and_round_pixels",
    "render_grid",
]

GUTTER_PX = 2


@dataclass(frozen=True)
class ImageLayout:
    """Pixel geometry of the vectors in a matrix column."""

    height: int
    width: int
    channels: int = 1

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image dimensions must be positive, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def d(self) -> int:
        return self.height * self.width * self.channels

    def check_matches(self, d: int) -> None:
        if d != self.d:
            raise ValueError(
                f"layout {self.height}x{self.width}x{self.channels} implies d={self.d}, "
                f"matrix has d={d}"
            )


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel-center sampling with edge clamping.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(
    images: ReferenceSet, layout: ImageLayout, new_h: int, new_w: int
) -> tuple[ReferenceSet, ImageLayout]:
    """Resample every image column to ``new_h x new_w``, preserving channels.

    Separable bilinear interpolation; sample positions use pixel centers and
    clamp at the edges.  The result is clamped to each source image's value
    range, and resizing to the same shape returns the data unchanged.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target dimensions must be positive, got {new_h}x{new_w}")
    layout.check_matches(images.d)

    n = images.n_atoms
    stack = images.data.T.reshape(n, layout.height, layout.width, layout.channels)

    lo_r, hi_r, fr = _axis_weights(layout.height, new_h)
    rows = stack[:, lo_r] * (1.0 - fr)[None, :, None, None] + stack[:, hi_r] * fr[None, :, None, None]
    lo_c, hi_c, fc = _axis_weights(layout.width, new_w)
    out = rows[:, :, lo_c] * (1.0 - fc)[None, None, :, None] + rows[:, :, hi_c] * fc[None, None, :, None]

    per_image_min = stack.min(axis=(1, 2, 3))[:, None, None, None]
    per_image_max = stack.max(axis=(1, 2, 3))[:, None, None, None]
    out = np.clip(out, per_image_min, per_image_max)

    new_layout = ImageLayout(new_h, new_w, layout.channels)
    return ReferenceSet(out.reshape(n, new_layout.d).T), new_layout


def clip_and_round_pixels(A: CandidateSet) -> CandidateSet:
    """Clamp entries to [0, 255] and round to the nearest integer,
    halves away from zero.  Idempotent."""
    clipped = np.clip(A.points, 0.0, 255.0)
    return CandidateSet(np.floor(clipped + 0.5))


def _tile_array(pts: np.ndarray, layout: ImageLayout, columns: int) -> np.ndarray:
    n = pts.shape[1]
    rows = math.ceil(n / columns)
    h, w, c = layout.height, layout.width, layout.channels
    canvas = np.zeros(
        (rows * h + (rows - 1) * GUTTER_PX, columns * w + (columns - 1) * GUTTER_PX, c),
        dtype=np.uint8,
    )
    for i in range(n):
        r, k = divmod(i, columns)
        tile = np.rint(pts[:, i]).astype(np.uint8).reshape(h, w, c)
        top = r * (h + GUTTER_PX)
        left = k * (w + GUTTER_PX)
        canvas[top : top + h, left : left + w] = tile
    return canvas


def render_grid(A: CandidateSet, layout: ImageLayout, columns: int, path) -> None:
    """Write the candidate columns as an image grid PNG.

    Points are tiled left-to-right, top-to-bottom with 2-pixel black gutters;
    entries must already be in [0, 255].  Written as 8-bit grayscale or RGB,
    non-interlaced, so decoding recovers the (rounded) pixels exactly.
    """
    if columns < 1:
        raise ValueError(f"columns must be positive, got {columns}")
    layout.check_matches(A.d)
    if A.points.min() < 0.0 or A.points.max() > 255.0:
        raise ValueError("pixel values must lie in [0, 255]; clip before rendering")

    canvas = _tile_array(A.points, layout, columns)
    if layout.channels == 1:
        image = Image.fromarray(canvas[:, :, 0], mode="L")
    else:
        image = Image.fromarray(canvas, mode="RGB")
    image.save(path, format="PNG")
