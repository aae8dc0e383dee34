"""Per-particle spectral fingerprints and the polymer signature library.

A fingerprint is the ordered set of per-condition HSV statistics of one
particle's pixels across the aligned stack. For distance computations the
statistics are encoded into a flat feature vector; the default encoding
maps each condition to the saturation-weighted chromatic vector plus the
value channel:

    (cos(mean_h) * mean_s,  sin(mean_h) * mean_s,  mean_v)

which keeps hue circular and removes its singularity at zero saturation.
The per-condition standard deviations are always retained for reporting;
the "chroma_std" encoding appends them to the distance feature as well.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import tomli
import tomlkit

from .colorspace import rgb_to_hsv
from .errors import DataQualityWarning, LibraryError
from .ingest import ImageStack, StackManifest
from .segment import Region

LIBRARY_SCHEMA_VERSION = 1
FINGERPRINT_SCHEMA_VERSION = 1
DEFAULT_ENCODING = "chroma"
DEFAULT_LAMBDA_REL = 1e-3
LAMBDA_FLOOR = 1e-9

ENCODING_WIDTHS = {"chroma": 3, "chroma_std": 6}


@dataclass(frozen=True)
class HSVStats:
    """Hue/saturation/value statistics of one particle under one condition.

    Hue statistics are circular: the mean comes from the mean resultant
    vector of the unit hue phasors and the deviation is sqrt(-2 ln R) of
    the resultant length R, in degrees.
    """

    mean_h: float
    std_h: float
    mean_s: float
    std_s: float
    mean_v: float
    std_v: float


@dataclass(frozen=True)
class ParticleFingerprint:
    region_id: int
    per_condition: tuple[HSVStats, ...]
    feature_vector: np.ndarray
    condition_count: int
    encoding: str = DEFAULT_ENCODING
    pixel_count: int = 0
    pixel_covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(
            self, "feature_vector", np.asarray(self.feature_vector, dtype=np.float64)
        )
        expected = ENCODING_WIDTHS[self.encoding] * self.condition_count
        if len(self.per_condition) != self.condition_count:
            raise ValueError("per_condition length must equal condition_count")
        if self.feature_vector.shape != (expected,):
            raise ValueError(
                f"feature vector has length {self.feature_vector.size}, "
                f"expected {expected} for encoding {self.encoding!r}"
            )

    @property
    def dimension(self) -> int:
        return self.feature_vector.size


@dataclass(frozen=True)
class PolymerSignature:
    """Mean vector plus regularized covariance of one polymer class."""

    class_name: str
    mean_vector: np.ndarray
    covariance: np.ndarray
    inverse_covariance: np.ndarray
    regularization_lambda: float
    sample_count: int

    def __post_init__(self):
        object.__setattr__(self, "mean_vector", np.asarray(self.mean_vector, np.float64))
        object.__setattr__(self, "covariance", np.asarray(self.covariance, np.float64))
        object.__setattr__(
            self, "inverse_covariance", np.asarray(self.inverse_covariance, np.float64)
        )
        d = self.mean_vector.size
        if self.covariance.shape != (d, d) or self.inverse_covariance.shape != (d, d):
            raise LibraryError(f"signature {self.class_name!r}: matrix shapes disagree with d={d}")
        if self.sample_count < 1:
            raise LibraryError(f"signature {self.class_name!r}: sample_count must be >= 1")
        if self.regularization_lambda < 0:
            raise LibraryError(f"signature {self.class_name!r}: lambda must be >= 0")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9, rtol=0):
            raise LibraryError(f"signature {self.class_name!r}: covariance not symmetric")
        reg = self.covariance + self.regularization_lambda * np.eye(d)
        residual = self.inverse_covariance @ reg - np.eye(d)
        if not np.abs(residual).max() <= 1e-6:
            raise LibraryError(
                f"signature {self.class_name!r}: inverse_covariance does not invert "
                f"the regularized covariance (max residual {np.abs(residual).max():.3g})"
            )

    @property
    def dimension(self) -> int:
        return self.mean_vector.size


@dataclass(frozen=True)
class FingerprintLibrary:
    signatures: tuple[PolymerSignature, ...]
    manifest_digest: str = ""
    schema_version: int = LIBRARY_SCHEMA_VERSION
    feature_encoding: str = DEFAULT_ENCODING
    condition_count: int = 0

    def __post_init__(self):
        if not self.signatures:
            raise LibraryError("library has no signatures")
        names = [s.class_name for s in self.signatures]
        if len(set(names)) != len(names):
            raise LibraryError(f"duplicate class names in library: {names}")
        dims = {s.dimension for s in self.signatures}
        if len(dims) != 1:
            raise LibraryError(f"signatures disagree on dimension: {sorted(dims)}")

    @property
    def dimension(self) -> int:
        return self.signatures[0].dimension

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(s.class_name for s in self.signatures)

    def signature(self, class_name: str) -> PolymerSignature:
        for s in self.signatures:
            if s.class_name == class_name:
                return s
        raise KeyError(class_name)


def circular_hue_stats(hue_deg: np.ndarray) -> tuple[float, float]:
    """Circular mean and deviation (degrees) of a set of hue angles."""
    rad = np.radians(np.asarray(hue_deg, dtype=np.float64))
    c = float(np.cos(rad).mean())
    s = float(np.sin(rad).mean())
    mean = float(np.degrees(np.arctan2(s, c)) % 360.0)
    r = min(float(np.hypot(c, s)), 1.0)
    if r >= 1.0:
        std = 0.0
    else:
        std = float(np.degrees(np.sqrt(-2.0 * np.log(max(r, 1e-300)))))
    return mean, std


def hsv_stats(hsv_pixels: np.ndarray) -> HSVStats:
    """Statistics over an (n, 3) array of HSV pixels."""
    h = hsv_pixels[:, 0]
    s = hsv_pixels[:, 1]
    v = hsv_pixels[:, 2]
    mean_h, std_h = circular_hue_stats(h)
    return HSVStats(
        mean_h=mean_h,
        std_h=std_h,
        mean_s=float(s.mean()),
        std_s=float(s.std()),
        mean_v=float(v.mean()),
        std_v=float(v.std()),
    )


def encode_features(stats: Sequence[HSVStats], encoding: str = DEFAULT_ENCODING) -> np.ndarray:
    """Flat distance-feature vector from per-condition statistics."""
    if encoding not in ENCODING_WIDTHS:
        raise ValueError(f"unknown feature encoding {encoding!r}")
    comps = []
    for st in stats:
        h = np.radians(st.mean_h)
        comps.extend([np.cos(h) * st.mean_s, np.sin(h) * st.mean_s, st.mean_v])
        if encoding == "chroma_std":
            comps.extend([st.std_h, st.std_s, st.std_v])
    return np.asarray(comps, dtype=np.float64)


def _pixel_features(hsv_pixels: np.ndarray) -> np.ndarray:
    """Per-pixel chroma-encoded features, (n, 3), for one condition."""
    h = np.radians(hsv_pixels[:, 0])
    s = hsv_pixels[:, 1]
    return np.column_stack([np.cos(h) * s, np.sin(h) * s, hsv_pixels[:, 2]])


def extract_fingerprint(
    stack: ImageStack,
    region: Region,
    manifest: StackManifest,
    encoding: str = DEFAULT_ENCODING,
    with_pixel_covariance: bool = False,
) -> ParticleFingerprint:
    """Fingerprint of one region across every condition of the stack.

    ``with_pixel_covariance`` additionally estimates the covariance of the
    per-pixel feature vectors across the region, the only spread estimate
    available when a class is trained from a single exemplar. It is only
    defined for the plain "chroma" encoding.
    """
    if len(stack) != manifest.condition_count:
        raise ValueError(
            f"stack has {len(stack)} images, manifest declares {manifest.condition_count}"
        )
    if region.area_px == 0:
        raise ValueError(f"region {region.id} is empty")
    if with_pixel_covariance and encoding != "chroma":
        raise ValueError("pixel covariance is only defined for the 'chroma' encoding")

    xs = region.pixel_list[:, 0]
    ys = region.pixel_list[:, 1]
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= stack.width or ys.max() >= stack.height:
        raise ValueError(f"region {region.id} has pixels outside the stack bounds")

    stats = []
    per_pixel = []
    for ci in range(len(stack)):
        hsv = rgb_to_hsv(stack.images[ci][ys, xs])
        stats.append(hsv_stats(hsv))
        if with_pixel_covariance:
            per_pixel.append(_pixel_features(hsv))

    pixel_cov = None
    if with_pixel_covariance:
        samples = np.hstack(per_pixel)  # (n_px, 3 * conditions)
        if len(samples) > 1:
            pixel_cov = np.cov(samples, rowvar=False, ddof=1)
        else:
            d = samples.shape[1]
            pixel_cov = np.zeros((d, d))

    return ParticleFingerprint(
        region_id=region.id,
        per_condition=tuple(stats),
        feature_vector=encode_features(stats, encoding),
        condition_count=manifest.condition_count,
        encoding=encoding,
        pixel_count=region.area_px,
        pixel_covariance=pixel_cov,
    )


def _symmetric_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via eigendecomposition."""
    w, v = np.linalg.eigh(mat)
    if w.min() <= 0:
        raise LibraryError(f"matrix is not positive definite (min eigenvalue {w.min():.3g})")
    inv = (v / w) @ v.T
    return (inv + inv.T) / 2.0


def _regularize(cov: np.ndarray, lambda_rel: float) -> tuple[np.ndarray, float, np.ndarray]:
    d = cov.shape[0]
    lam = max(lambda_rel * float(np.trace(cov)) / d, LAMBDA_FLOOR)
    inverse = _symmetric_inverse(cov + lam * np.eye(d))
    return cov, lam, inverse


def build_signature(
    class_name: str,
    vectors,
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    pixel_covariances: Optional[Sequence[np.ndarray]] = None,
) -> PolymerSignature:
    """Signature from raw feature vectors (rows of an (n, d) array).

    The class covariance is the sample covariance of the vectors (divisor
    n - 1; zero for a single sample), or the mean of the supplied
    within-particle pixel covariances. A trace-relative ridge
    ``lambda_rel * trace / d`` (floored at 1e-9) keeps it invertible.
    """
    if lambda_rel < 0:
        raise LibraryError("lambda_rel must be >= 0")
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n, d = vectors.shape
    if n < 1:
        raise LibraryError(f"class {class_name!r} has no sample vectors")
    mean = vectors.mean(axis=0)
    if pixel_covariances is not None:
        mats = [np.asarray(m, dtype=np.float64) for m in pixel_covariances]
        if len(mats) != n or any(m.shape != (d, d) for m in mats):
            raise LibraryError(
                f"class {class_name!r}: pixel covariances do not match the samples"
            )
        cov = np.mean(mats, axis=0)
    elif n == 1:
        cov = np.zeros((d, d))
    else:
        cov = np.cov(vectors, rowvar=False, ddof=1)
    cov, lam, inverse = _regularize(cov, lambda_rel)
    return PolymerSignature(
        class_name=class_name,
        mean_vector=mean,
        covariance=cov,
        inverse_covariance=inverse,
        regularization_lambda=lam,
        sample_count=n,
    )


def build_library(
    samples: Mapping[str, Sequence[ParticleFingerprint]],
    lambda_rel: float = DEFAULT_LAMBDA_REL,
    use_pixel_covariance: bool = False,
    manifest_digest: str = "",
) -> FingerprintLibrary:
    """Train one signature per class from its sample fingerprints.

    With ``use_pixel_covariance`` the class spread comes from the samples'
    within-particle pixel covariances instead of the (possibly degenerate)
    sample covariance; that is the meaningful estimate when training from
    one exemplar per class.
    """
    if not samples:
        raise LibraryError("no training classes supplied")

    dims = set()
    encodings = set()
    counts = set()
    for name, fps in samples.items():
        if not fps:
            raise LibraryError(f"class {name!r} has no sample fingerprints")
        for fp in fps:
            dims.add(fp.dimension)
            encodings.add(fp.encoding)
            counts.add(fp.condition_count)
    if len(dims) != 1:
        raise LibraryError(f"sample fingerprints disagree on dimension: {sorted(dims)}")
    if len(encodings) != 1:
        raise LibraryError(f"sample fingerprints disagree on encoding: {sorted(encodings)}")
    (encoding,) = encodings
    (condition_count,) = counts

    signatures = []
    for name in samples:
        fps = list(samples[name])
        vectors = np.vstack([fp.feature_vector for fp in fps])
        pixel_covs = None
        if use_pixel_covariance:
            missing = [fp.region_id for fp in fps if fp.pixel_covariance is None]
            if missing:
                raise LibraryError(
                    f"class {name!r}: sample(s) {missing} carry no pixel covariance; "
                    "re-extract with pixel statistics enabled"
                )
            pixel_covs = [fp.pixel_covariance for fp in fps]
        signatures.append(build_signature(name, vectors, lambda_rel, pixel_covs))
    return FingerprintLibrary(
        signatures=tuple(signatures),
        manifest_digest=manifest_digest,
        feature_encoding=encoding,
        condition_count=condition_count,
    )


def save_library(library: FingerprintLibrary, path) -> None:
    """Write a library file (flat TOML; matrices stored row-major)."""
    doc = {
        "schema_version": library.schema_version,
        "manifest_digest": library.manifest_digest,
        "feature_encoding": library.feature_encoding,
        "condition_count": library.condition_count,
        "signatures": [
            {
                "class_name": s.class_name,
                "sample_count": s.sample_count,
                "regularization_lambda": s.regularization_lambda,
                "mean_vector": [float(x) for x in s.mean_vector],
                "covariance": [float(x) for x in s.covariance.ravel()],
                "inverse_covariance": [float(x) for x in s.inverse_covariance.ravel()],
            }
            for s in library.signatures
        ],
    }
    Path(path).write_text(tomlkit.dumps(doc))


def load_library(path, manifest: Optional[StackManifest] = None) -> FingerprintLibrary:
    """Read a library file back; numerically lossless round trip.

    If a manifest is supplied, a digest mismatch is reported as a warning:
    the library was trained on a different condition set.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except FileNotFoundError as exc:
        raise LibraryError(f"library not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise LibraryError(f"cannot parse library {path}: {exc}") from exc

    version = doc.get("schema_version")
    if version != LIBRARY_SCHEMA_VERSION:
        raise LibraryError(
            f"unsupported library schema_version {version!r} "
            f"(this build reads version {LIBRARY_SCHEMA_VERSION})"
        )

    signatures = []
    for entry in doc.get("signatures", []):
        mean = np.asarray(entry["mean_vector"], dtype=np.float64)
        d = mean.size
        signatures.append(
            PolymerSignature(
                class_name=str(entry["class_name"]),
                mean_vector=mean,
                covariance=np.asarray(entry["covariance"], dtype=np.float64).reshape(d, d),
                inverse_covariance=np.asarray(
                    entry["inverse_covariance"], dtype=np.float64
                ).reshape(d, d),
                regularization_lambda=float(entry["regularization_lambda"]),
                sample_count=int(entry["sample_count"]),
            )
        )
    library = FingerprintLibrary(
        signatures=tuple(signatures),
        manifest_digest=str(doc.get("manifest_digest", "")),
        feature_encoding=str(doc.get("feature_encoding", DEFAULT_ENCODING)),
        condition_count=int(doc.get("condition_count", 0)),
    )
    if manifest is not None and library.manifest_digest:
        digest = manifest.condition_digest()
        if digest != library.manifest_digest:
            warnings.warn(
                f"library {path.name} was built on a different condition set "
                f"(digest {library.manifest_digest}, manifest {digest})",
                DataQualityWarning,
                stacklevel=2,
            )
    return library


def save_fingerprints(
    fingerprints: Sequence[ParticleFingerprint],
    path,
    manifest_digest: str = "",
) -> None:
    """Write extracted fingerprints (with their per-condition statistics)."""
    if not fingerprints:
        raise ValueError("no fingerprints to save")
    encodings = {fp.encoding for fp in fingerprints}
    counts = {fp.condition_count for fp in fingerprints}
    if len(encodings) != 1 or len(counts) != 1:
        raise ValueError("fingerprints disagree on encoding or condition count")
    doc = {
        "schema_version": FINGERPRINT_SCHEMA_VERSION,
        "manifest_digest": manifest_digest,
        "feature_encoding": next(iter(encodings)),
        "condition_count": next(iter(counts)),
        "fingerprints": [],
    }
    for fp in fingerprints:
        entry = {
            "region_id": fp.region_id,
            "pixel_count": fp.pixel_count,
            "feature_vector": [float(x) for x in fp.feature_vector],
            "mean_h": [st.mean_h for st in fp.per_condition],
            "std_h": [st.std_h for st in fp.per_condition],
            "mean_s": [st.mean_s for st in fp.per_condition],
            "std_s": [st.std_s for st in fp.per_condition],
            "mean_v": [st.mean_v for st in fp.per_condition],
            "std_v": [st.std_v for st in fp.per_condition],
        }
        if fp.pixel_covariance is not None:
            entry["pixel_covariance"] = [float(x) for x in fp.pixel_covariance.ravel()]
        doc["fingerprints"].append(entry)
    Path(path).write_text(tomlkit.dumps(doc))


def load_fingerprints(path) -> tuple[list[ParticleFingerprint], str]:
    """Read a fingerprints file; returns (fingerprints, manifest_digest)."""
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except FileNotFoundError as exc:
        raise LibraryError(f"fingerprints file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise LibraryError(f"cannot parse fingerprints {path}: {exc}") from exc

    version = doc.get("schema_version")
    if version != FINGERPRINT_SCHEMA_VERSION:
        raise LibraryError(f"unsupported fingerprints schema_version {version!r}")
    encoding = str(doc.get("feature_encoding", DEFAULT_ENCODING))
    condition_count = int(doc["condition_count"])

    out = []
    for entry in doc.get("fingerprints", []):
        stats = tuple(
            HSVStats(
                mean_h=float(entry["mean_h"][i]),
                std_h=float(entry["std_h"][i]),
                mean_s=float(entry["mean_s"][i]),
                std_s=float(entry["std_s"][i]),
                mean_v=float(entry["mean_v"][i]),
                std_v=float(entry["std_v"][i]),
            )
            for i in range(condition_count)
        )
        pixel_cov = None
        if "pixel_covariance" in entry:
            flat = np.asarray(entry["pixel_covariance"], dtype=np.float64)
            d = int(round(np.sqrt(flat.size)))
            pixel_cov = flat.reshape(d, d)
        out.append(
            ParticleFingerprint(
                region_id=int(entry["region_id"]),
                per_condition=stats,
                feature_vector=np.asarray(entry["feature_vector"], dtype=np.float64),
                condition_count=condition_count,
                encoding=encoding,
                pixel_count=int(entry.get("pixel_count", 0)),
                pixel_covariance=pixel_cov,
            )
        )
    return out, str(doc.get("manifest_digest", ""))
