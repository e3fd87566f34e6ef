"""Quantitative proxies for generation quality, plus montage rendering.

There is no trustworthy automated judge for few-shot generation, so the
artifact reports kernel MMD against held-out class images (lower is
better) together with a conditioning-set nearest-neighbour distance that
exposes verbatim copying (zero means the model reproduced an input).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptySet(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    task_id: int
    task_name: str
    mmd2: float
    baseline_mmd2: float
    nn_min_distance: float


def _flatten(images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.size == 0:
        raise EmptySet("image set is empty")
    return arr.reshape(arr.shape[0], -1)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def _kernel(sq: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    out = np.zeros_like(sq)
    for sigma in bandwidths:
        out += np.exp(-sq / (2.0 * sigma * sigma))
    return out


def median_bandwidths(reference: np.ndarray,
                      factors=(0.25, 0.5, 1.0, 2.0, 4.0)) -> np.ndarray:
    """Median-heuristic bandwidth ladder from a reference sample set."""
    flat = _flatten(reference)
    if flat.shape[0] < 2:
        med = 1.0
    else:
        sq = _sq_dists(flat, flat)
        off = sq[~np.eye(sq.shape[0], dtype=bool)]
        med = float(np.median(np.sqrt(off)))
        if med <= 0:
            med = 1.0
    return np.asarray(factors, dtype=np.float64) * med


def mmd_squared(a: np.ndarray, b: np.ndarray, bandwidths) -> float:
    """Unbiased MMD^2 with a sum-of-Gaussians kernel.

    Sets with fewer than two elements contribute no self term.
    """
    fa, fb = _flatten(a), _flatten(b)
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"flattened dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    bw = np.asarray(list(bandwidths), dtype=np.float64)
    if bw.size == 0 or np.any(bw <= 0):
        raise ValueError("bandwidths must be positive and non-empty")
    m, n = fa.shape[0], fb.shape[0]
    total = 0.0
    if m > 1:
        kaa = _kernel(_sq_dists(fa, fa), bw)
        total += (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    if n > 1:
        kbb = _kernel(_sq_dists(fb, fb), bw)
        total += (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    kab = _kernel(_sq_dists(fa, fb), bw)
    total -= 2.0 * kab.mean()
    return float(total)


def nn_distance(generated: np.ndarray, conditioning: np.ndarray) -> float:
    """Mean over generated images of the min L2 distance to any conditioning
    image, divided by the flattened dimension; zero flags verbatim copies."""
    fg, fc = _flatten(generated), _flatten(conditioning)
    if fg.shape[1] != fc.shape[1]:
        raise ValueError(f"flattened dims differ: {fg.shape[1]} vs {fc.shape[1]}")
    # direct differences (not the quadratic expansion) so exact matches give 0
    d = np.linalg.norm(fg[:, None, :] - fc[None, :, :], axis=2)
    return float(np.mean(d.min(axis=1)) / fg.shape[1])


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[-1,1] -> 8-bit via round(127.5*(v+1)), clipped."""
    return np.clip(np.rint(127.5 * (np.asarray(images) + 1.0)), 0, 255).astype(np.uint8)


def montage(images: np.ndarray, columns: int, separator_px: int = 1) -> np.ndarray:
    """Tile images left-to-right, top-to-bottom into one 8-bit image.

    Accepts [M,1,S,S] or [M,S,S] in [-1,1].  Separators (and any unused
    trailing cells) are white (255).  No outer border.
    """
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, 0]
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ValueError(f"montage expects at least one image, got shape {arr.shape}")
    if columns < 1 or separator_px < 0:
        raise ValueError("columns must be >= 1 and separator_px >= 0")
    m, h, w = arr.shape
    rows = -(-m // columns)
    out_h = rows * h + (rows - 1) * separator_px
    out_w = columns * w + (columns - 1) * separator_px
    out = np.full((out_h, out_w), 255, dtype=np.uint8)
    tiles = to_uint8(arr)
    for i in range(m):
        r, c = divmod(i, columns)
        y = r * (h + separator_px)
        x = c * (w + separator_px)
        out[y:y + h, x:x + w] = tiles[i]
    return out
