"""Mahalanobis-distance nearest-neighbor classification.

Distances are in standard-deviation units. Assignment uses each class's
own inverse covariance (preserving class-specific spread); the class-to-
class distance matrix uses the pooled covariance, which makes it symmetric
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LibraryError
from .fingerprint import FingerprintLibrary, ParticleFingerprint, _symmetric_inverse

UNCLASSIFIED = "UNCLASSIFIED"
DEFAULT_TAU = 5.0
DEFAULT_CONFUSABLE_THRESHOLD = 1.0
_POOLED_LAMBDA_FLOOR = 1e-9


@dataclass(frozen=True)
class ClassificationResult:
    region_id: int
    assigned_class: str
    distances: dict[str, float]
    threshold_used: float


@dataclass(frozen=True)
class DistanceMatrix:
    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        n = len(self.class_names)
        if self.values.shape != (n, n):
            raise ValueError(f"expected {n}x{n} matrix, got {self.values.shape}")
        if not np.allclose(self.values, self.values.T, atol=1e-9, rtol=0):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(self.values) != 0.0):
            raise ValueError("distance matrix diagonal must be exactly zero")
        if np.any(self.values < 0):
            raise ValueError("distances must be nonnegative")

    def value(self, a: str, b: str) -> float:
        ia = self.class_names.index(a)
        ib = self.class_names.index(b)
        return float(self.values[ia, ib])


def mahalanobis(x, m, inverse_covariance) -> float:
    """sqrt((x - m)^T C^-1 (x - m)), with C^-1 the inverse covariance."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    inv = np.asarray(inverse_covariance, dtype=np.float64)
    if x.shape != m.shape or inv.shape != (x.size, x.size):
        raise ValueError(
            f"dimension mismatch: x {x.shape}, m {m.shape}, C^-1 {inv.shape}"
        )
    delta = x - m
    with np.errstate(invalid="ignore", over="ignore"):
        q = float(delta @ inv @ delta)
    if not np.isfinite(q):
        raise ValueError("Mahalanobis distance is not finite")
    return float(np.sqrt(max(q, 0.0)))


def classify_particle(
    fp: ParticleFingerprint,
    library: FingerprintLibrary,
    tau: float = DEFAULT_TAU,
) -> ClassificationResult:
    """Nearest signature by Mahalanobis distance, UNCLASSIFIED beyond tau.

    Exact distance ties are broken by lexical class-name order so results
    are deterministic.
    """
    if fp.dimension != library.dimension:
        raise LibraryError(
            f"fingerprint dimension {fp.dimension} does not match "
            f"library dimension {library.dimension}"
        )
    distances = {
        sig.class_name: mahalanobis(fp.feature_vector, sig.mean_vector, sig.inverse_covariance)
        for sig in library.signatures
    }
    best = min(sorted(distances), key=distances.__getitem__)
    assigned = best if distances[best] <= tau else UNCLASSIFIED
    return ClassificationResult(
        region_id=fp.region_id,
        assigned_class=assigned,
        distances=distances,
        threshold_used=tau,
    )


def _pooled_inverse(library: FingerprintLibrary) -> np.ndarray:
    weights = np.array([s.sample_count for s in library.signatures], dtype=np.float64)
    total = weights.sum()
    d = library.dimension
    pooled = np.zeros((d, d))
    lam = 0.0
    for w, sig in zip(weights, library.signatures):
        pooled += w * sig.covariance
        lam += w * sig.regularization_lambda
    pooled /= total
    lam = max(lam / total, _POOLED_LAMBDA_FLOOR)
    reg = pooled + lam * np.eye(d)
    np.linalg.cholesky(reg)  # regularized pooled covariance must be PD
    return _symmetric_inverse(reg)


def distance_matrix(library: FingerprintLibrary) -> DistanceMatrix:
    """Pairwise class distances under the pooled covariance."""
    if len(library.signatures) < 2:
        raise LibraryError("distance matrix needs at least 2 classes")
    inv = _pooled_inverse(library)
    names = library.class_names
    n = len(names)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = mahalanobis(
                library.signatures[i].mean_vector,
                library.signatures[j].mean_vector,
                inv,
            )
            values[i, j] = values[j, i] = d
    return DistanceMatrix(class_names=names, values=values)


def flag_confusable_pairs(
    dm: DistanceMatrix,
    threshold: float = DEFAULT_CONFUSABLE_THRESHOLD,
) -> list[tuple[str, str, float]]:
    """Unordered class pairs closer than ``threshold``, ascending by distance.

    Pairs under one standard deviation are likely to be confused by the
    nearest-neighbor assignment.
    """
    pairs = []
    n = len(dm.class_names)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(dm.values[i, j])
            if d < threshold:
                pairs.append((dm.class_names[i], dm.class_names[j], d))
    pairs.sort(key=lambda p: (p[2], p[0], p[1]))
    return pairs
