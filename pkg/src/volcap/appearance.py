"""Per-Gaussian color from multi-view images with outlier rejection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import raycast
from .errors import InvalidArgumentError

log = logging.getLogger(__name__)

MIN_WEIGHT = 1e-9


@dataclass
class ColorCandidate:
    camera_id: int
    color: np.ndarray
    weight: float


def view_color(camera, image, posed, q=None, visibility=None):
    """Visibility-weighted mean color of Gaussian ``q`` (all when None).

    Returns (colors (Q, 3), weights (Q,)) or a single (color, weight);
    color is None where the total weight is below 1e-9.
    """
    img = np.asarray(image, float)
    if img.shape[:2] != (camera.height, camera.width):
        raise InvalidArgumentError("image size does not match the camera")
    V = raycast.render_gaussian_visibility(camera, posed) if visibility is None else visibility
    flat = img.reshape(-1, img.shape[2] if img.ndim == 3 else 1)
    w = V.sum(axis=0)
    sums = V.T @ flat
    colors = np.where(w[:, None] >= MIN_WEIGHT, sums / np.maximum(w, MIN_WEIGHT)[:, None], np.nan)
    if q is None:
        return colors, w
    if w[q] < MIN_WEIGHT:
        return None, float(w[q])
    return colors[q], float(w[q])


def robust_color(candidates):
    """Mean color after repeatedly dropping the candidate farthest from the
    current mean, until ceil(50%) are removed (at least one survives).

    Equal distances remove the lowest camera id first.
    """
    cands = [c for c in candidates if c.weight >= MIN_WEIGHT and c.color is not None]
    if not cands:
        return None
    cands.sort(key=lambda c: c.camera_id)
    cols = np.array([np.asarray(c.color, float) for c in cands])
    alive = np.ones(len(cands), bool)
    n_remove = min(math.ceil(0.5 * len(cands)), len(cands) - 1)
    for _ in range(n_remove):
        mean = _mean(cols[alive])
        dist = np.where(alive, np.sum((cols - mean) ** 2, axis=1), -np.inf)
        # argmax returns the first maximum, i.e. the lowest camera id
        alive[int(np.argmax(dist))] = False
    return _mean(cols[alive])


def _mean(rows):
    # shifted by the first row so that identical rows average exactly
    return rows[0] + (rows - rows[0]).mean(axis=0)


def estimate_colors(cameras, images, posed_frames):
    """Robust color of every Gaussian from all views and frames.

    ``images[c][t]`` is an RGB array for camera c at frame t and
    ``posed_frames[t]`` the posed model. Candidates are pooled per camera
    over frames (visibility-weighted) so tie-breaking uses camera ids.
    Returns (colors (Q, 3) with NaN rows for unseen Gaussians, candidate
    rows for diagnostics).
    """
    q = len(posed_frames[0])
    per_cam = []
    for c, cam in enumerate(cameras):
        acc = np.zeros((q, 3))
        wsum = np.zeros(q)
        for t, posed in enumerate(posed_frames):
            col, w = view_color(cam, images[c][t], posed)
            ok = w >= MIN_WEIGHT
            acc[ok] += col[ok] * w[ok, None]
            wsum += np.where(ok, w, 0.0)
        per_cam.append((acc, wsum))
    colors = np.full((q, 3), np.nan)
    rows = []
    uncolored = []
    for i in range(q):
        cands = []
        for c, (acc, wsum) in enumerate(per_cam):
            if wsum[i] >= MIN_WEIGHT:
                cands.append(ColorCandidate(c, acc[i] / wsum[i], float(wsum[i])))
                rows.append([i, c, *acc[i] / wsum[i], wsum[i]])
        col = robust_color(cands)
        if col is None:
            uncolored.append(i)
        else:
            colors[i] = col
    if uncolored:
        log.warning("%d Gaussians are never visible and stay uncolored", len(uncolored))
    return colors, rows
