"""Segmentation metrics: Dice, mean IoU, HD95, ASD.

Boundary convention: a foreground pixel is on the boundary when any 4-neighbor
is background, with the image border counting as background. HD95/ASD operate
on the symmetric set of boundary-to-boundary nearest-neighbor distances; HD95
takes the 95th percentile with linear interpolation between order statistics,
ASD the mean. Both are undefined (raised, not 0) when either mask is empty.
"""

from __future__ import annotations

import numpy as np


class MaskShapeError(ValueError):
    """Masks being compared do not share a shape."""


class UndefinedMetricError(ValueError):
    """Surface distances are undefined for an empty mask."""


def _as_bool(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise MaskShapeError(f"expected a 2-D mask, got shape {arr.shape}")
    return arr.astype(bool)


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = _as_bool(a)
    b = _as_bool(b)
    if a.shape != b.shape:
        raise MaskShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|a n b| / (|a|+|b|); both-empty pairs score 1.0."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def miou(a, b) -> float:
    """Mean of foreground and background IoU; an empty-union class scores 1.0."""
    a, b = _check_pair(a, b)
    ious = []
    for cls_a, cls_b in ((a, b), (~a, ~b)):
        union = int((cls_a | cls_b).sum())
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(int((cls_a & cls_b).sum()) / union)
    return float(np.mean(ious))


def boundary_pixels(mask) -> np.ndarray:
    """(n, 2) array of (row, col) foreground pixels 4-adjacent to background."""
    m = _as_bool(mask)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    edge = m & ~interior
    return np.argwhere(edge)


def _normalize_spacing(spacing) -> tuple[float, float]:
    if np.isscalar(spacing):
        s = float(spacing)
        return s, s
    sy, sx = spacing
    return float(sy), float(sx)


def _surface_distances(a, b, spacing) -> np.ndarray:
    """Symmetric nearest-neighbor distances between the two boundary sets."""
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distances need two nonempty masks")
    sy, sx = _normalize_spacing(spacing)
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    dy = (pa[:, None, 0] - pb[None, :, 0]) * sy
    dx = (pa[:, None, 1] - pb[None, :, 1]) * sx
    d2 = dy**2 + dx**2
    a_to_b = np.sqrt(d2.min(axis=1))
    b_to_a = np.sqrt(d2.min(axis=0))
    # sorted so reductions are exactly symmetric in (a, b)
    return np.sort(np.concatenate([a_to_b, b_to_a]))


def hd95(a, b, spacing=1.0) -> float:
    """95th percentile of the symmetric surface distance set."""
    distances = _surface_distances(a, b, spacing)
    return float(np.percentile(distances, 95, method="linear"))


def asd(a, b, spacing=1.0) -> float:
    """Mean of the symmetric surface distance set."""
    distances = _surface_distances(a, b, spacing)
    return float(distances.mean())


def summarize(values: list[float | None]) -> dict:
    """Mean/std over defined values; undefined entries are counted, not zeroed."""
    defined = [v for v in values if v is not None]
    if not defined:
        return {"mean": None, "std": None, "n": 0, "n_undefined": len(values)}
    arr = np.asarray(defined, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=0)),
        "n": len(defined),
        "n_undefined": len(values) - len(defined),
    }
