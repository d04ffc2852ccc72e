"""Logits to class masks, color overlays and fracture-mode area fractions."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import INTERGRANULAR, TRANSGRANULAR
from .tensor_ops import ShapeError, check_tensor

BLUE = (0, 0, 255)
GREEN = (0, 255, 0)


def classify(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of (1, K, H, W) logits as a uint8 (H, W) mask.

    Exact ties resolve to the lowest class id.
    """
    check_tensor(logits, "logits")
    if logits.shape[0] != 1:
        raise ShapeError(f"classify takes one image at a time, got batch of {logits.shape[0]}")
    return np.argmax(logits[0], axis=0).astype(np.uint8)


@dataclass
class OverlayStyle:
    colors: dict[int, tuple[int, int, int]] = field(
        default_factory=lambda: {INTERGRANULAR: BLUE, TRANSGRANULAR: GREEN})
    blend: float = 0.5

    def __post_init__(self):
        self.blend = float(min(max(self.blend, 0.0), 1.0))


def overlay(image: np.ndarray, mask: np.ndarray, style: OverlayStyle | None = None) -> np.ndarray:
    """Blend class colors over a grayscale image; returns (H, W, 3) uint8.

    out = (1 - blend) * gray + blend * color, rounded half up. Pixels of any
    class without a color (background, void) keep their gray value.
    """
    style = style or OverlayStyle()
    image = np.asarray(image)
    if image.shape != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    gray = np.repeat(image.astype(np.float64)[..., None], 3, axis=-1)
    out = gray.copy()
    a = style.blend
    for cid, color in style.colors.items():
        sel = mask == cid
        out[sel] = (1.0 - a) * gray[sel] + a * np.asarray(color, dtype=np.float64)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


@dataclass
class AreaFractions:
    intergranular_pixels: int
    transgranular_pixels: int
    intergranular_fraction: float | None
    transgranular_fraction: float | None
    brightness_masked: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def area_fractions(mask: np.ndarray, evaluable: np.ndarray | None = None) -> AreaFractions:
    """Relative share of intergranular vs transgranular among evaluable mode pixels."""
    mask = np.asarray(mask)
    sel = mask if evaluable is None else mask[np.asarray(evaluable, dtype=bool)]
    n_inter = int(np.count_nonzero(sel == INTERGRANULAR))
    n_trans = int(np.count_nonzero(sel == TRANSGRANULAR))
    total = n_inter + n_trans
    if total == 0:
        return AreaFractions(0, 0, None, None, evaluable is not None)
    return AreaFractions(n_inter, n_trans, n_inter / total, n_trans / total, evaluable is not None)
