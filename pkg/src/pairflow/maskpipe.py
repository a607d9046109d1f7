"""Edit-region masks and loss weight maps from (source, target) image pairs.

Four steps: pixel differencing with a tolerance, dilation, small-component
filtering, and any-pooling down to latent resolution, followed by the
logarithmic weighting w(x) = log2(x) + 1 on the area ratio
x = total cells / edited cells. Global-scope edits keep uniform weights.

A brute-force pure-Python reference of each morphological step lives in
this module as the oracle the optimized scipy path is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateMaskError, ShapeError, ValidationError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class MaskParams:
    tol: float = 0.05
    radius: int = 1
    min_area: int = 8
    factor: int = 4
    connectivity: int = 4  # 4 or 8

    def validate(self) -> None:
        if not (0.0 <= self.tol < 1.0):
            raise ValidationError(f"tol must be in [0, 1), got {self.tol}")
        if self.radius < 0:
            raise ValidationError(f"radius must be >= 0, got {self.radius}")
        if self.min_area < 1:
            raise ValidationError(f"min_area must be >= 1, got {self.min_area}")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")


@dataclass
class EditMask:
    pixel_mask: np.ndarray  # [H, W] bool
    latent_mask: np.ndarray  # [H/f, W/f] bool
    a_edit: int
    a_total: int


def pixel_diff(src: np.ndarray, tgt: np.ndarray, tol: float = 0.05) -> np.ndarray:
    """1 where the max-channel absolute difference exceeds tol."""
    if src.shape != tgt.shape:
        raise ShapeError(f"shape mismatch {src.shape} vs {tgt.shape}")
    if not (0.0 <= tol < 1.0):
        raise ValidationError(f"tol must be in [0, 1), got {tol}")
    diff = np.abs(src.astype(np.float64) - tgt.astype(np.float64))
    if diff.ndim == 3:
        diff = diff.max(axis=-1)
    return diff > tol


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square element of side 2*radius + 1."""
    if radius < 0:
        raise ValidationError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    return ndimage.maximum_filter(mask.astype(np.uint8), size=size,
                                  mode="constant", cval=0).astype(bool)


def filter_components(mask: np.ndarray, min_area: int, connectivity: int = 4) -> np.ndarray:
    """Drop connected components with area < min_area."""
    if min_area < 1:
        raise ValidationError(f"min_area must be >= 1, got {min_area}")
    structure = FOUR_CONNECTED if connectivity == 4 else EIGHT_CONNECTED
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def maxpool_down(mask: np.ndarray, f: int) -> tuple[np.ndarray, int]:
    """Any-pooling to latent resolution; returns (latent_mask, edited cell count)."""
    h, w = mask.shape
    if h % f or w % f:
        raise ShapeError(f"mask dims ({h}, {w}) not divisible by factor {f}")
    pooled = mask.reshape(h // f, f, w // f, f).any(axis=(1, 3))
    return pooled, int(pooled.sum())


def log_weight(area_ratio: float) -> float:
    """w(x) = log2(x) + 1."""
    return float(np.log2(area_ratio) + 1.0)


def weight_map(edit_mask: EditMask, scope: str) -> np.ndarray:
    """Per-cell loss weights, mean-normalized to exactly 1 (float64).

    Global scope keeps uniform weighting; local scope puts w(x) on edited
    cells and 1 on background before normalization.
    """
    if scope not in ("local", "global"):
        raise ValidationError(f"unknown scope {scope!r}")
    shape = edit_mask.latent_mask.shape
    if scope == "global":
        return np.ones(shape, dtype=np.float64)
    if edit_mask.a_edit < 1:
        raise DegenerateMaskError("local edit with empty latent mask")
    x = edit_mask.a_total / edit_mask.a_edit
    w = np.ones(shape, dtype=np.float64)
    w[edit_mask.latent_mask] = log_weight(x)
    return w / w.mean()


def derive(src: np.ndarray, tgt: np.ndarray, scope: str,
           params: MaskParams | None = None) -> tuple[EditMask, np.ndarray]:
    """Full pipeline: diff -> dilate -> filter -> pool -> weights."""
    params = params or MaskParams()
    params.validate()
    raw = pixel_diff(src, tgt, params.tol)
    grown = dilate(raw, params.radius)
    cleaned = filter_components(grown, params.min_area, params.connectivity)
    latent, a_edit = maxpool_down(cleaned, params.factor)
    mask = EditMask(pixel_mask=cleaned, latent_mask=latent,
                    a_edit=a_edit, a_total=int(latent.size))
    return mask, weight_map(mask, scope)


# ---------------------------------------------------------------------------
# Brute-force reference implementations (oracle for the optimized path)
# ---------------------------------------------------------------------------


def reference_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            r0, r1 = max(0, r - radius), min(h, r + radius + 1)
            c0, c1 = max(0, c - radius), min(w, c + radius + 1)
            out[r0:r1, c0:c1] = True
    return out


def reference_filter_components(mask: np.ndarray, min_area: int,
                                connectivity: int = 4) -> np.ndarray:
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = np.zeros_like(mask, dtype=bool)
    if connectivity == 4:
        steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    else:
        steps = tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)
                      if (dr, dc) != (0, 0))
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack, comp = [(r, c)], []
            seen[r, c] = True
            while stack:
                cr, cc = stack.pop()
                comp.append((cr, cc))
                for dr, dc in steps:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            if len(comp) >= min_area:
                for cr, cc in comp:
                    out[cr, cc] = True
    return out


def reference_maxpool_down(mask: np.ndarray, f: int) -> tuple[np.ndarray, int]:
    h, w = mask.shape
    if h % f or w % f:
        raise ShapeError(f"mask dims ({h}, {w}) not divisible by factor {f}")
    pooled = np.zeros((h // f, w // f), dtype=bool)
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                pooled[r // f, c // f] = True
    return pooled, int(pooled.sum())


def reference_pipeline(src: np.ndarray, tgt: np.ndarray, scope: str,
                       params: MaskParams | None = None) -> tuple[EditMask, np.ndarray]:
    params = params or MaskParams()
    params.validate()
    raw = pixel_diff(src, tgt, params.tol)
    grown = reference_dilate(raw, params.radius)
    cleaned = reference_filter_components(grown, params.min_area, params.connectivity)
    latent, a_edit = reference_maxpool_down(cleaned, params.factor)
    mask = EditMask(pixel_mask=cleaned, latent_mask=latent,
                    a_edit=a_edit, a_total=int(latent.size))
    return mask, weight_map(mask, scope)
