"""Seeded synthetic fracture-surface tiles.

Each tile is split into a few large cells, each assigned one fracture mode:

* intergranular cells show small grains (a fine Voronoi tessellation) with
  bright grain-boundary ridges;
* transgranular cells show smooth cleavage facets: a coarse tessellation with
  a linear intensity gradient per facet.

Both textures have similar mean brightness, so a classifier has to use local
structure. Pixels within `band` px of a cell boundary are left unlabeled (255)
in the mask, imitating partial annotation.
"""
from __future__ import annotations

import numpy as np

from .optim import INTERGRANULAR, TRANSGRANULAR, VOID


def _voronoi(h: int, w: int, seeds: np.ndarray):
    """Nearest-seed label and (second - first) distance gap per pixel."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    d = np.hypot(yy[..., None] - seeds[:, 0], xx[..., None] - seeds[:, 1])
    part = np.partition(d, 1, axis=-1) if len(seeds) > 1 else np.concatenate([d, d + 1e9], axis=-1)
    return d.argmin(axis=-1), part[..., 1] - part[..., 0]


def _grains(rng, h, w, spacing):
    n = max(2, int(h * w / spacing ** 2))
    seeds = rng.uniform(0, [h, w], size=(n, 2))
    return _voronoi(h, w, seeds)


def intergranular_texture(rng, h, w, spacing: float = 9.0) -> np.ndarray:
    label, gap = _grains(rng, h, w, spacing)
    shade = rng.uniform(85, 150, size=label.max() + 1)
    img = shade[label]
    ridge = np.clip(1.0 - gap / 1.6, 0.0, 1.0)
    return img * (1 - ridge) + rng.uniform(200, 240) * ridge


def transgranular_texture(rng, h, w, spacing: float = 28.0) -> np.ndarray:
    label, _ = _grains(rng, h, w, spacing)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    k = label.max() + 1
    base = rng.uniform(90, 150, size=k)
    gy, gx = rng.normal(0, 1.2, size=(2, k))
    cy, cx = rng.uniform(0, [h, w], size=(k, 2)).T
    return base[label] + gy[label] * (yy - cy[label]) + gx[label] * (xx - cx[label])


def synthetic_tile(rng: np.random.Generator, size: int = 64, cells: tuple[int, int] = (2, 4),
                   band: float = 1.5, noise: float = 6.0):
    """One (image uint8 HxW, mask uint8 HxW) pair."""
    n_cells = int(rng.integers(cells[0], cells[1] + 1))
    seeds = rng.uniform(0, size, size=(n_cells, 2))
    region, gap = _voronoi(size, size, seeds)
    modes = rng.choice([INTERGRANULAR, TRANSGRANULAR], size=n_cells)
    if n_cells > 1 and len(set(modes.tolist())) == 1:
        modes[rng.integers(n_cells)] = INTERGRANULAR + TRANSGRANULAR - modes[0]
    inter = intergranular_texture(rng, size, size)
    trans = transgranular_texture(rng, size, size)
    truth = modes[region]
    img = np.where(truth == INTERGRANULAR, inter, trans)
    img = img + rng.normal(0, noise, size=img.shape)
    mask = truth.astype(np.uint8)
    mask[gap < 2 * band] = VOID
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask


def synthetic_dataset(n: int, seed: int = 0, size: int = 64):
    """Stacked images and masks, shapes (n, size, size)."""
    rng = np.random.default_rng(seed)
    pairs = [synthetic_tile(rng, size) for _ in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
