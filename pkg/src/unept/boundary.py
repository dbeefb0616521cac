"""Boundary and direction ground truth from label maps, and refinement of
coarse predictions by shifting boundary pixels toward object interiors.

Direction bin ``k`` of ``m`` is centred on angle ``k * 2*pi/m`` measured
counter-clockwise from +x with the y axis pointing up, so for m = 8 the bins
are the compass offsets E, NE, N, NW, W, SW, S, SE in image (row, col) terms.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .numerics import Tensor

IGNORE = 255
NO_DIRECTION = -1


@dataclass
class BoundaryTargets:
    boundary: np.ndarray    # H x W uint8 in {0, 1}
    direction: np.ndarray   # H x W int64, bin where boundary == 1 else NO_DIRECTION
    offsets: np.ndarray     # H x W x 2 int64 (dy, dx), zero off the boundary


def distance_transform(labels: np.ndarray, ignore: int = IGNORE) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest pixel carrying a
    different, non-ignore label.

    Ignore pixels, and every pixel of a map holding fewer than two labels, get
    ``inf``; the single-label case also emits a warning.
    """
    labels = np.asarray(labels)
    out = np.full(labels.shape, np.inf)
    present = [k for k in np.unique(labels) if k != ignore]
    if len(present) < 2:
        warnings.warn("label map has fewer than two classes; distances are undefined", RuntimeWarning)
        return out
    valid = labels != ignore
    for k in present:
        region = labels == k
        other = valid & ~region
        # edt measures distance to the nearest zero, i.e. the nearest "other" pixel
        dist = ndimage.distance_transform_edt(~other)
        out[region] = dist[region]
    return out


def quantize_angle(angle, bins: int = 8):
    step = 2 * math.pi / bins
    return np.mod(np.rint(np.asarray(angle) / step).astype(np.int64), bins)


def bin_to_offset(bins, m: int = 8) -> np.ndarray:
    """Compass offset (dy, dx) of each direction bin; works on scalars or arrays."""
    b = np.asarray(bins)
    if np.any((b < 0) | (b >= m)):
        raise ValueError(f"direction bin out of range [0, {m})")
    angle = b * (2 * math.pi / m)
    dy = -np.rint(np.sin(angle)).astype(np.int64)
    dx = np.rint(np.cos(angle)).astype(np.int64)
    return np.stack([dy, dx], axis=-1)


def _fill_non_finite(dist: np.ndarray) -> np.ndarray:
    finite = np.isfinite(dist)
    if finite.all() or not finite.any():
        return np.where(finite, dist, 0.0)
    idx = ndimage.distance_transform_edt(~finite, return_distances=False, return_indices=True)
    return dist[tuple(idx)]


def make_boundary_targets(labels: np.ndarray, gamma: float = 2.0, bins: int = 8,
                          ignore: int = IGNORE) -> BoundaryTargets:
    """Boundary = pixels within ``gamma`` of another label; direction = quantized
    Sobel gradient of the distance map, i.e. pointing toward the interior."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    labels = np.asarray(labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dist = distance_transform(labels, ignore)
    boundary = (np.isfinite(dist) & (dist <= gamma)).astype(np.uint8)
    direction = np.full(labels.shape, NO_DIRECTION, dtype=np.int64)
    offsets = np.zeros(labels.shape + (2,), dtype=np.int64)
    if boundary.any():
        smooth = _fill_non_finite(dist)
        gy = ndimage.sobel(smooth, axis=0, mode="nearest")
        gx = ndimage.sobel(smooth, axis=1, mode="nearest")
        angle = np.arctan2(-gy, gx)
        on = boundary == 1
        direction[on] = quantize_angle(angle[on], bins)
        offsets[on] = bin_to_offset(direction[on], bins)
    return BoundaryTargets(boundary, direction, offsets)


def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([ys, xs], axis=-1).astype(float)


def refine_labels(coarse: np.ndarray, boundary_prob: np.ndarray, direction_logits: np.ndarray,
                  threshold: float = 0.5) -> np.ndarray:
    """Boundary pixels (prob > threshold) take the coarse label found one step
    along their predicted direction; everything else is left alone."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    coarse = np.asarray(coarse)
    h, w = coarse.shape
    prob = np.asarray(boundary_prob).reshape(h, w)
    m = direction_logits.shape[0]
    offsets = bin_to_offset(np.argmax(direction_logits, axis=0), m)
    move = (prob > threshold)[..., None]
    coords = _pixel_grid(h, w) + np.where(move, offsets, 0)
    return nx.nearest_sample(coarse, coords.reshape(-1, 2)).reshape(h, w).astype(coarse.dtype)


def refine_logits(seg_logits: Tensor, boundary_prob: Tensor, direction_logits) -> Tensor:
    """Differentiable refinement: ``(1 - b) * logits + b * logits(p + offset)``.

    The offset is the hard argmax direction; gradients reach the logits and
    the boundary probability ``b``, not the direction scores.
    """
    k, h, w = seg_logits.shape
    dirs = direction_logits.data if isinstance(direction_logits, Tensor) else np.asarray(direction_logits)
    if dirs.shape[1:] != (h, w):
        raise ValueError("direction map and logits disagree on spatial size")
    offsets = bin_to_offset(np.argmax(dirs, axis=0), dirs.shape[0])
    coords = (_pixel_grid(h, w) + offsets).reshape(-1, 2)
    shifted = nx.bilinear_sample(seg_logits, Tensor(coords)).transpose(1, 0).reshape(k, h, w)
    b = boundary_prob.reshape(1, h, w)
    return seg_logits + b * (shifted - seg_logits)


def boundary_band(labels: np.ndarray, width: float = 2.0, ignore: int = IGNORE) -> np.ndarray:
    """Pixels within ``width`` of a label change."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        dist = distance_transform(labels, ignore)
    return np.isfinite(dist) & (dist <= width)


def corrupt_rim(labels: np.ndarray, ignore: int = IGNORE) -> np.ndarray:
    """Relabel every pixel that 4-touches another class with that neighbour's
    label (first of up, down, left, right), producing a one-pixel rim error."""
    h, w = labels.shape
    out = labels.copy()
    done = np.zeros((h, w), dtype=bool)
    padded = np.pad(labels, 1, constant_values=ignore)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        hit = (~done) & (nb != ignore) & (labels != ignore) & (nb != labels)
        out[hit] = nb[hit]
        done |= hit
    return out
