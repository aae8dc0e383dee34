"""Particle segmentation: k-means clustering in color space, mask
construction, and connected-component region extraction.

The mask pipeline clusters the mask-condition image into k groups
(particles, background, shadows; 4 in turbid samples), keeps the cluster
with the brightest luminance centroid, optionally unions the same cluster
from a doubled-exposure companion frame, and fills enclosed holes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .colorspace import luminance, rgb_to_ycbcr
from .errors import SegmentationError, StackError

# Lloyd iterations run on at most this many pixels; the final assignment of
# every pixel to the nearest centroid is exact regardless.
MAX_KMEANS_SAMPLES = 200_000

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class SegmentationConfig:
    k: int = 3  # 4 for turbid samples with residue on the filter
    max_iterations: int = 300
    convergence_tol: float = 1e-4  # centroid movement, channel units
    rng_seed: int = 42
    min_area_px: int = 9  # 3x3; use 100 for the small-particle preset
    feature_space: str = "ycbcr"  # or "rgb"
    fill_holes: bool = True
    n_init: int = 4  # restarts; small clusters (shadows) are easy to miss once

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.min_area_px < 1:
            raise ValueError(f"min_area_px must be >= 1, got {self.min_area_px}")
        if self.feature_space not in ("ycbcr", "rgb"):
            raise ValueError(f"unknown feature space {self.feature_space!r}")
        if self.n_init < 1:
            raise ValueError(f"n_init must be >= 1, got {self.n_init}")


@dataclass(frozen=True)
class Region:
    """One connected particle with pixel-level geometry.

    ``pixel_list`` is an (n, 2) array of (x, y) coordinates; ``bbox`` is
    half-open (x0, y0, x1, y1). Axis lengths are the ellipse-equivalent
    axes from the second central moments (4 * sqrt of the eigenvalues).
    """

    id: int
    area_px: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    minor_axis_px: float
    major_axis_px: float
    pixel_list: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixel_list", np.asarray(self.pixel_list, dtype=np.int64))
        self.pixel_list.setflags(write=False)


@dataclass(frozen=True)
class LabelMap:
    """Integer label raster (0 = background) plus its region table."""

    labels: np.ndarray
    regions: tuple[Region, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int32))
        self.labels.setflags(write=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray  # per-sample cluster id
    centroids: np.ndarray  # (k, d)
    sse: float  # final within-cluster sum of squared distances
    n_iter: int
    sse_history: tuple[float, ...]


_DISTANCE_CHUNK_ROWS = 65536


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared distances (n, k), computed difference-first.

    The difference form avoids the cancellation noise of the expanded
    ||x||^2 + ||c||^2 - 2 x.c form, which matters for the SSE monotonicity
    guarantee; chunking bounds the (rows, k, d) scratch memory.
    """
    n = len(points)
    k = len(centroids)
    out = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, _DISTANCE_CHUNK_ROWS):
        stop = min(start + _DISTANCE_CHUNK_ROWS, n)
        diff = points[start:stop, None, :] - centroids[None, :, :]
        out[start:stop] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: per step, several D^2-weighted candidates are drawn
    and the one minimizing the resulting potential is kept. Plain k-means++
    routinely misses small far clusters when a large spread-out cluster
    dominates the D^2 mass."""
    n = len(points)
    n_candidates = 2 + int(np.log(k))
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            picks = rng.integers(n, size=n_candidates)
        else:
            picks = rng.choice(n, p=d2 / total, size=n_candidates)
        best_d2 = None
        best_pick = None
        for pick in picks:
            cand_d2 = np.minimum(d2, ((points - points[pick]) ** 2).sum(axis=1))
            if best_d2 is None or cand_d2.sum() < best_d2.sum():
                best_d2 = cand_d2
                best_pick = int(pick)
        centroids[j] = points[best_pick]
        d2 = best_d2
    return centroids


def kmeans_cluster(pixels, k: int, cfg: SegmentationConfig) -> KMeansResult:
    """Best of ``n_init`` Lloyd runs from seeded greedy k-means++ starts.

    Each run stops when the largest centroid movement drops below the
    configured tolerance or after ``max_iterations``. Clusters that empty
    out are re-seeded to the point currently farthest from its centroid.
    The SSE is asserted non-increasing at every assignment step; the
    returned history belongs to the winning run.
    """
    points = np.asarray(pixels, dtype=np.float64)
    if points.ndim != 2:
        raise SegmentationError(f"expected (n, d) feature array, got shape {points.shape}")
    n = len(points)
    if n < k:
        raise SegmentationError(f"cannot form {k} clusters from {n} pixels")

    rng = np.random.default_rng(cfg.rng_seed)
    best: Optional[KMeansResult] = None
    for _ in range(cfg.n_init):
        result = _lloyd_run(points, k, cfg, rng)
        if best is None or result.sse < best.sse:
            best = result
        if best.sse == 0.0:
            break
    return best


def _lloyd_run(
    points: np.ndarray, k: int, cfg: SegmentationConfig, rng: np.random.Generator
) -> KMeansResult:
    n = len(points)
    centroids = _kmeanspp_init(points, k, rng)

    history: list[float] = []
    prev_sse = np.inf
    assignments = np.zeros(n, dtype=np.int32)
    n_iter = 0
    for n_iter in range(1, cfg.max_iterations + 1):
        d2 = _squared_distances(points, centroids)
        assignments = d2.argmin(axis=1).astype(np.int32)
        own = d2[np.arange(n), assignments]
        sse = float(own.sum())
        assert sse <= prev_sse + 1e-9 * max(1.0, sse), (
            f"SSE increased at iteration {n_iter}: {prev_sse} -> {sse}"
        )
        history.append(sse)
        prev_sse = sse

        counts = np.bincount(assignments, minlength=k).astype(np.float64)
        sums = np.column_stack(
            [np.bincount(assignments, weights=points[:, j], minlength=k)
             for j in range(points.shape[1])]
        )
        new_centroids = centroids.copy()
        populated = counts > 0
        new_centroids[populated] = sums[populated] / counts[populated, None]

        empty = np.flatnonzero(~populated)
        if empty.size:
            residual = own.copy()
            for cid in empty:
                far = int(residual.argmax())
                new_centroids[cid] = points[far]
                residual[far] = -1.0

        movement = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if movement < cfg.convergence_tol:
            break

    d2 = _squared_distances(points, centroids)
    assignments = d2.argmin(axis=1).astype(np.int32)
    sse = float(d2[np.arange(n), assignments].sum())
    assert sse <= prev_sse + 1e-9 * max(1.0, sse)
    history.append(sse)
    return KMeansResult(
        assignments=assignments,
        centroids=centroids,
        sse=sse,
        n_iter=n_iter,
        sse_history=tuple(history),
    )


def select_particle_cluster(centroids, feature_space: str = "ycbcr") -> int:
    """Cluster id of the brightest centroid (ties go to the lowest id).

    Under dark-field illumination the fluorescent particles are the bright
    class against background and shadows, so brightness is the selector.
    """
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or len(c) < 1:
        raise ValueError("centroids must be a (k, channels) array")
    if feature_space == "ycbcr":
        luma = c[:, 0]
    elif feature_space == "rgb":
        luma = luminance(c)
    else:
        raise ValueError(f"unknown feature space {feature_space!r}")
    return int(np.argmax(luma))


def _feature_plane(image: np.ndarray, feature_space: str) -> np.ndarray:
    if feature_space == "ycbcr":
        return rgb_to_ycbcr(image)
    return np.asarray(image, dtype=np.float64)


def _cluster_mask(image: np.ndarray, cfg: SegmentationConfig) -> np.ndarray:
    h, w = image.shape[:2]
    features = _feature_plane(image, cfg.feature_space).reshape(-1, 3)
    n = len(features)
    if n > MAX_KMEANS_SAMPLES:
        rng = np.random.default_rng(cfg.rng_seed)
        sample = rng.choice(n, size=MAX_KMEANS_SAMPLES, replace=False)
        result = kmeans_cluster(features[sample], cfg.k, cfg)
        assignments = _squared_distances(features, result.centroids).argmin(axis=1)
    else:
        result = kmeans_cluster(features, cfg.k, cfg)
        assignments = result.assignments
    particle = select_particle_cluster(result.centroids, cfg.feature_space)
    return (assignments == particle).reshape(h, w)


def build_mask(
    image,
    cfg: Optional[SegmentationConfig] = None,
    high_ev_image=None,
) -> np.ndarray:
    """Binary particle mask of one condition image.

    When a doubled-exposure companion is supplied its particle cluster is
    unioned in, recovering dim interiors. Hole filling closes background
    components not 4-connected to the raster border, which covers the same
    reflection holes when no companion exists.
    """
    cfg = cfg or SegmentationConfig()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3 or image.size == 0:
        raise SegmentationError(f"expected nonempty (H, W, 3) image, got {image.shape}")
    mask = _cluster_mask(image, cfg)

    if high_ev_image is not None:
        high = np.asarray(high_ev_image)
        if high.shape != image.shape:
            raise StackError(
                f"high-EV companion shape {high.shape[:2]} does not match "
                f"image shape {image.shape[:2]}"
            )
        mask |= _cluster_mask(high, cfg)

    if cfg.fill_holes:
        # default structuring element = 4-connectivity for the background,
        # the dual of the 8-connected foreground used for labeling
        mask = ndimage.binary_fill_holes(mask)
    return mask


def regions_from_labels(labels: np.ndarray) -> tuple[Region, ...]:
    """Region table for an existing label raster (ids are preserved)."""
    labels = np.asarray(labels)
    regions = []
    for rid, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        sub_ys, sub_xs = np.nonzero(labels[slc] == rid)
        xs = sub_xs + slc[1].start
        ys = sub_ys + slc[0].start
        regions.append(_make_region(rid, xs, ys))
    return tuple(regions)


def _make_region(rid: int, xs: np.ndarray, ys: np.ndarray) -> Region:
    area = len(xs)
    cx = float(xs.mean())
    cy = float(ys.mean())
    dx = xs - cx
    dy = ys - cy
    vxx = float((dx * dx).mean())
    vyy = float((dy * dy).mean())
    vxy = float((dx * dy).mean())
    eig = np.linalg.eigvalsh(np.array([[vxx, vxy], [vxy, vyy]]))
    minor = 4.0 * np.sqrt(max(float(eig[0]), 0.0))
    major = 4.0 * np.sqrt(max(float(eig[1]), 0.0))
    return Region(
        id=rid,
        area_px=area,
        centroid=(cx, cy),
        bbox=(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1),
        minor_axis_px=minor,
        major_axis_px=major,
        pixel_list=np.column_stack([xs, ys]),
    )


def label_regions(mask, min_area_px: int = 9) -> LabelMap:
    """8-connected components of a mask, area-filtered and renumbered.

    Surviving components are numbered 1..n in raster-scan order of their
    first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    raw, n_raw = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n_raw == 0:
        return LabelMap(labels=np.zeros(mask.shape, dtype=np.int32), regions=())

    areas = np.bincount(raw.ravel(), minlength=n_raw + 1)
    flat = raw.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(1, n_raw + 1))
    first_seen = order[starts]  # first flat index of each raw label

    keep = [lab for lab in range(1, n_raw + 1) if areas[lab] >= min_area_px]
    keep.sort(key=lambda lab: first_seen[lab - 1])

    remap = np.zeros(n_raw + 1, dtype=np.int32)
    for new_id, lab in enumerate(keep, start=1):
        remap[lab] = new_id
    labels = remap[raw]
    return LabelMap(labels=labels, regions=regions_from_labels(labels))


def px_area_to_um2(area_px: float, scale_um_per_px: float) -> float:
    """Pixel area to square micrometers at the given sampling scale."""
    if scale_um_per_px <= 0:
        raise ValueError("scale must be positive")
    return float(area_px) * scale_um_per_px**2


def px_to_um(length_px: float, scale_um_per_px: float) -> float:
    """Pixel length to micrometers at the given sampling scale."""
    if scale_um_per_px <= 0:
        raise ValueError("scale must be positive")
    return float(length_px) * scale_um_per_px
