"""Second-stage fusion of feature maps into label masks, plus post-processing.

Masks are integer ``H x W`` arrays of class indices.  Connectivity is 4 for
both component filtering and hole filling.
"""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
from scipy import ndimage

_FOUR = ndimage.generate_binary_structure(2, 1)


def threshold_segment(u, thresholds: Sequence[float]) -> np.ndarray:
    """Label = number of thresholds strictly below the pixel value."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 3:
        if u.shape[0] != 1:
            raise ValueError("threshold_segment expects a single feature channel")
        u = u[0]
    t = np.asarray(thresholds, dtype=np.float64)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError(f"thresholds must be strictly ascending, got {list(thresholds)}")
    return np.searchsorted(t, u, side="left").astype(np.int64)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans_segment(u, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Lloyd's k-means on per-pixel feature vectors with k-means++ seeding.

    Labels are renumbered so that cluster 0 has the smallest first centroid
    coordinate (ties by the next coordinates).
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]
    if k < 2:
        raise ValueError("k must be >= 2")
    d, H, W = u.shape
    x = u.reshape(d, -1).T
    n_distinct = len(np.unique(x, axis=0))
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct pixel values")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    order = np.lexsort(centers.T[::-1])
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    return rank[labels].reshape(H, W)


def within_cluster_sse(u, labels) -> float:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]
    x = u.reshape(u.shape[0], -1).T
    lab = np.asarray(labels).ravel()
    sse = 0.0
    for j in np.unique(lab):
        m = x[lab == j]
        sse += float(((m - m.mean(axis=0)) ** 2).sum())
    return sse


def largest_component(mask, class_id: int) -> np.ndarray:
    """Relabel to 0 every ``class_id`` pixel outside its largest 4-connected component."""
    mask = np.asarray(mask)
    sel = mask == class_id
    if not sel.any():
        warnings.warn(f"class {class_id} absent from mask; left unchanged", stacklevel=2)
        return mask.copy()
    comp, n = ndimage.label(sel, structure=_FOUR)
    sizes = np.bincount(comp.ravel())[1:]
    # scipy numbers components in raster order, so argmax picks the
    # component whose first pixel comes earliest among the tied sizes
    keep = int(np.argmax(sizes)) + 1
    out = mask.copy()
    out[sel & (comp != keep)] = 0
    return out


def fill_holes(mask, class_id: int) -> np.ndarray:
    """Relabel background regions not 4-connected to the image border."""
    mask = np.asarray(mask)
    bg = mask == 0
    comp, _ = ndimage.label(bg, structure=_FOUR)
    border = np.unique(np.concatenate([comp[0], comp[-1], comp[:, 0], comp[:, -1]]))
    holes = bg & ~np.isin(comp, border)
    out = mask.copy()
    out[holes] = class_id
    return out


def postprocess(mask, class_id: int, order: str = "ch") -> np.ndarray:
    """Components-then-holes (``"ch"``) or holes-then-components (``"hc"``)."""
    if order == "ch":
        return fill_holes(largest_component(mask, class_id), class_id)
    if order == "hc":
        return largest_component(fill_holes(mask, class_id), class_id)
    raise ValueError(f"order must be 'ch' or 'hc', got {order!r}")


def one_hot(mask, c: int) -> np.ndarray:
    """``c x H x W`` float indicator tensor (leading batch axes are kept)."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= c):
        raise ValueError(f"labels must lie in [0, {c - 1}]")
    eye = np.eye(c, dtype=np.float64)
    return np.moveaxis(eye[mask], -1, -3)


def argmax_labels(s) -> np.ndarray:
    """Per-pixel argmax over the channel axis (-3); ties go to the lowest index."""
    return np.argmax(np.asarray(s), axis=-3)
