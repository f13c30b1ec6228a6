"""Eyeglass-frame patch masks anchored on eye landmarks.

Two styles share the same rim geometry (rim radius 0.45x the inter-eye
distance). The thin style is a wire frame: rim outlines, a 2 px bridge,
and 2 px temple bars running to the image edges. The large style fills
both rims and thickens the bridge and temples, covering enough of the
eye region to occlude the face on its own. Everything stays above the
mouth by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core import AdversarialNoise, MASK_STYLES

MIN_EYE_SEP = 8.0
RIM_FACTOR = 0.45
# ring half-width 0.75 renders a 1-2 px rim; much thinner starves the
# 12x12 detector windows of patch pixels and caps evasion attacks
THIN_RING_HALF = 0.75
THIN_BAR_HALF = 1.0
LARGE_BAR_HALF = 3.0


class GeometryError(ValueError):
    """Eye landmarks unusable for mask construction."""


@dataclass
class PatchMask:
    """Binary support of an additive patch, (H, W) bool."""

    mask: np.ndarray
    style: str
    eyes: tuple

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def eyeglass_mask(eyes, canvas: tuple, style: str) -> PatchMask:
    """Build a frame mask for eyes ((lx, ly), (rx, ry)) on an (H, W) canvas."""
    if style not in MASK_STYLES:
        raise GeometryError(f"style must be one of {MASK_STYLES}, got {style!r}")
    h, w = int(canvas[0]), int(canvas[1])
    (lx, ly), (rx, ry) = eyes
    for x, y in ((lx, ly), (rx, ry)):
        if not (0 <= x < w and 0 <= y < h):
            raise GeometryError(f"eye ({x}, {y}) outside {w}x{h} canvas")
    if rx - lx < MIN_EYE_SEP:
        raise GeometryError(
            f"eyes must be >= {MIN_EYE_SEP} px apart horizontally, got {rx - lx:.2f}"
        )
    ied = float(np.hypot(rx - lx, ry - ly))
    r = RIM_FACTOR * ied

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d_left = np.hypot(xx - lx, yy - ly)
    d_right = np.hypot(xx - rx, yy - ry)
    # eye line extended across the canvas for bridge and temples
    line_y = ly + (ry - ly) * (xx - lx) / (rx - lx)
    off = np.abs(yy - line_y)

    if style == "thin":
        rims = (np.abs(d_left - r) <= THIN_RING_HALF) | (np.abs(d_right - r) <= THIN_RING_HALF)
        bar = THIN_BAR_HALF
    else:
        # filled to the outer rim edge, so the large frame covers the thin rims
        full = r + THIN_RING_HALF
        rims = (d_left <= full) | (d_right <= full)
        bar = LARGE_BAR_HALF
    bridge = (off <= bar) & (xx >= lx + r - 1) & (xx <= rx - r + 1)
    temples = (off <= bar) & ((xx <= lx - r + 1) | (xx >= rx + r - 1))
    mask = rims | bridge | temples
    return PatchMask(mask=mask, style=style, eyes=((float(lx), float(ly)), (float(rx), float(ry))))


def random_patch(mask: PatchMask, seed: int) -> AdversarialNoise:
    """Uniform [-0.5, 0.5] noise on the mask support, zero elsewhere."""
    rng = np.random.default_rng(seed)
    h, w = mask.mask.shape
    delta = rng.uniform(-0.5, 0.5, size=(h, w, 3)).astype(np.float32)
    delta *= mask.mask[..., None]
    return AdversarialNoise(delta=delta, mask=mask.mask)


def save_mask_png(mask: PatchMask, path) -> None:
    Image.fromarray(mask.mask.astype(np.uint8) * 255, mode="L").convert("1").save(path)


def load_mask_png(path, style: str, eyes) -> PatchMask:
    arr = np.asarray(Image.open(path).convert("L")) > 127
    return PatchMask(mask=arr, style=style, eyes=eyes)
