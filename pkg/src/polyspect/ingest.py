"""Capture-manifest loading and image-stack ingestion.

A manifest is a TOML file declaring the illumination conditions of one
capture session: for every condition an index, the excitation wavelength,
the optical filter, and the image file. Images for all conditions of one
stack must share dimensions; after registration they are aligned to the
mask condition by translation only and cropped to the common overlap.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomlkit
from PIL import Image

from .colorspace import luminance
from .errors import DataQualityWarning, ManifestError, RegistrationError, StackError

log = logging.getLogger(__name__)

VALID_WAVELENGTHS_NM = (265, 310, 365, 405, 450)
VALID_FILTERS = ("none", "yellow", "orange", "red", "green")
CANONICAL_FILTERS = ("green", "yellow", "orange", "red")
CANONICAL_CONDITION_COUNT = 20

DEFAULT_MASK_CONDITION_INDEX = 12
DEFAULT_PIXEL_SCALE_UM_PER_PX = 11.65
DEFAULT_MAX_SHIFT_PX = 20

LOSSY_FORMATS = {"JPEG", "JPEG2000", "WEBP"}


@dataclass(frozen=True)
class IlluminationCondition:
    """One (excitation wavelength, optical filter) capture setting."""

    index: int
    excitation_wavelength_nm: int
    optical_filter: str
    image_path: Path
    high_ev_companion_path: Optional[Path] = None

    def __post_init__(self):
        if self.index < 1:
            raise ManifestError(f"condition index must be >= 1, got {self.index}")
        if self.excitation_wavelength_nm not in VALID_WAVELENGTHS_NM:
            raise ManifestError(
                f"condition {self.index}: unsupported wavelength "
                f"{self.excitation_wavelength_nm} nm (expected one of {VALID_WAVELENGTHS_NM})"
            )
        if self.optical_filter not in VALID_FILTERS:
            raise ManifestError(
                f"condition {self.index}: unknown filter {self.optical_filter!r} "
                f"(expected one of {VALID_FILTERS})"
            )


@dataclass(frozen=True)
class StackManifest:
    """Validated capture manifest: conditions plus stack-level settings."""

    conditions: tuple[IlluminationCondition, ...]
    mask_condition_index: int = DEFAULT_MASK_CONDITION_INDEX
    pixel_scale_um_per_px: float = DEFAULT_PIXEL_SCALE_UM_PER_PX
    name: str = ""

    def __post_init__(self):
        if not self.conditions:
            raise ManifestError("manifest declares no conditions")
        indices = [c.index for c in self.conditions]
        seen = set()
        for idx in indices:
            if idx in seen:
                raise ManifestError(f"duplicate condition index {idx}")
            seen.add(idx)
        if self.mask_condition_index not in seen:
            raise ManifestError(
                f"mask condition index {self.mask_condition_index} not among "
                f"declared conditions {sorted(seen)}"
            )
        if not self.pixel_scale_um_per_px > 0:
            raise ManifestError(
                f"pixel scale must be positive, got {self.pixel_scale_um_per_px}"
            )

    @property
    def condition_count(self) -> int:
        return len(self.conditions)

    @property
    def is_canonical(self) -> bool:
        """True when the manifest is the full 5-wavelength x 4-color-filter rig."""
        if len(self.conditions) != CANONICAL_CONDITION_COUNT:
            return False
        combos = {(c.excitation_wavelength_nm, c.optical_filter) for c in self.conditions}
        expected = {(w, f) for f in CANONICAL_FILTERS for w in VALID_WAVELENGTHS_NM}
        return combos == expected

    def mask_position(self) -> int:
        """Position of the mask condition within the conditions list."""
        for pos, cond in enumerate(self.conditions):
            if cond.index == self.mask_condition_index:
                return pos
        raise ManifestError("mask condition missing")  # unreachable after validation

    def condition_digest(self) -> str:
        """Hash of the condition set, used to detect library/stack mismatches."""
        lines = sorted(
            f"{c.index}:{c.excitation_wavelength_nm}:{c.optical_filter}"
            for c in self.conditions
        )
        h = hashlib.sha256("\n".join(lines).encode("ascii"))
        return f"sha256:{h.hexdigest()[:16]}"


@dataclass
class ImageStack:
    """Decoded condition images in manifest order.

    ``registration_offsets[i]`` is the (dx, dy) translation that was applied
    to image i; all zero for an unregistered stack. ``high_ev`` maps a
    condition position to its decoded high-exposure companion frame.
    Arrays are marked read-only; stacks are safe to share between workers.
    """

    images: np.ndarray  # (n, H, W, 3) uint8
    registration_offsets: np.ndarray  # (n, 2) float64, (dx, dy) applied
    high_ev: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images)
        self.registration_offsets = np.asarray(self.registration_offsets, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise StackError(f"expected (n, H, W, 3) image array, got {self.images.shape}")
        if self.registration_offsets.shape != (len(self.images), 2):
            raise StackError("registration_offsets must be (n, 2)")
        self.images.setflags(write=False)
        self.registration_offsets.setflags(write=False)
        for img in self.high_ev.values():
            img.setflags(write=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def load_manifest(path) -> StackManifest:
    """Parse and validate a manifest file; image paths resolve relative to it."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc

    raw_conditions = doc.get("conditions")
    if not raw_conditions:
        raise ManifestError(f"manifest {path} declares no [[conditions]]")

    base = path.parent
    conditions = []
    for entry in raw_conditions:
        try:
            idx = int(entry["index"])
            wavelength = int(entry["wavelength_nm"])
            filt = str(entry["filter"])
            image = base / str(entry["image"])
        except KeyError as exc:
            raise ManifestError(f"condition entry missing field {exc}") from exc
        high = entry.get("high_ev_image")
        conditions.append(
            IlluminationCondition(
                index=idx,
                excitation_wavelength_nm=wavelength,
                optical_filter=filt,
                image_path=image,
                high_ev_companion_path=(base / str(high)) if high else None,
            )
        )

    indices = {c.index for c in conditions}
    mask_index = doc.get("mask_condition_index")
    if mask_index is None:
        if DEFAULT_MASK_CONDITION_INDEX in indices:
            mask_index = DEFAULT_MASK_CONDITION_INDEX
        else:
            mask_index = min(indices)
            warnings.warn(
                f"manifest has no mask_condition_index and no condition "
                f"{DEFAULT_MASK_CONDITION_INDEX}; falling back to condition {mask_index}",
                DataQualityWarning,
                stacklevel=2,
            )

    manifest = StackManifest(
        conditions=tuple(conditions),
        mask_condition_index=int(mask_index),
        pixel_scale_um_per_px=float(
            doc.get("pixel_scale_um_per_px", DEFAULT_PIXEL_SCALE_UM_PER_PX)
        ),
        name=str(doc.get("name", path.stem)),
    )
    if not manifest.is_canonical:
        warnings.warn(
            f"manifest {manifest.name!r} is non-canonical "
            f"({manifest.condition_count} conditions); fingerprints will carry "
            f"{manifest.condition_count} coordinates",
            DataQualityWarning,
            stacklevel=2,
        )
    return manifest


def save_manifest(manifest: StackManifest, path) -> None:
    """Write a manifest file with image paths relative to its directory."""
    path = Path(path)
    base = path.parent

    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    doc = {
        "name": manifest.name,
        "pixel_scale_um_per_px": manifest.pixel_scale_um_per_px,
        "mask_condition_index": manifest.mask_condition_index,
        "conditions": [
            {
                "index": c.index,
                "wavelength_nm": c.excitation_wavelength_nm,
                "filter": c.optical_filter,
                "image": rel(c.image_path),
                **(
                    {"high_ev_image": rel(c.high_ev_companion_path)}
                    if c.high_ev_companion_path
                    else {}
                ),
            }
            for c in manifest.conditions
        ],
    }
    path.write_text(tomlkit.dumps(doc))


def _decode_rgb(path: Path, what: str) -> np.ndarray:
    """Decode one image file to (H, W, 3) uint8, tolerating odd inputs."""
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt in LOSSY_FORMATS:
                warnings.warn(
                    f"{what}: {path.name} is stored in lossy format {fmt}",
                    DataQualityWarning,
                    stacklevel=3,
                )
            if im.mode == "RGB":
                arr = np.asarray(im)
            elif im.mode == "L":
                warnings.warn(
                    f"{what}: {path.name} is grayscale; replicating channels",
                    DataQualityWarning,
                    stacklevel=3,
                )
                gray = np.asarray(im)
                arr = np.repeat(gray[..., None], 3, axis=-1)
            else:
                warnings.warn(
                    f"{what}: {path.name} has mode {im.mode}; converting to RGB",
                    DataQualityWarning,
                    stacklevel=3,
                )
                arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise StackError(f"{what}: image not found: {path}") from exc
    except (OSError, ValueError) as exc:
        raise StackError(f"{what}: cannot decode {path}: {exc}") from exc
    return np.ascontiguousarray(arr, dtype=np.uint8)


def load_stack(manifest: StackManifest) -> ImageStack:
    """Load every condition image (and high-EV companions), unregistered."""
    images = []
    shape = None
    for cond in manifest.conditions:
        arr = _decode_rgb(cond.image_path, f"condition {cond.index}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise StackError(
                f"dimension mismatch: condition {cond.index} is "
                f"{arr.shape[1]}x{arr.shape[0]}, expected {shape[1]}x{shape[0]}"
            )
        images.append(arr)

    high_ev = {}
    for pos, cond in enumerate(manifest.conditions):
        if cond.high_ev_companion_path is None:
            continue
        arr = _decode_rgb(cond.high_ev_companion_path, f"condition {cond.index} (high EV)")
        if arr.shape != shape:
            raise StackError(
                f"dimension mismatch: high-EV companion of condition {cond.index} is "
                f"{arr.shape[1]}x{arr.shape[0]}, expected {shape[1]}x{shape[0]}"
            )
        high_ev[pos] = arr

    n = len(images)
    return ImageStack(
        images=np.stack(images),
        registration_offsets=np.zeros((n, 2)),
        high_ev=high_ev,
    )


_MIN_OVERLAP_PX = 8
_PEAK_CANDIDATES = 5
_MAX_CLIMB_STEPS = 200


def _overlap_score(ref: np.ndarray, mov: np.ndarray, dx: int, dy: int) -> float:
    """Pearson correlation of the two planes over their overlap at (dx, dy)."""
    h, w = ref.shape
    x0, x1 = max(0, dx), w + min(0, dx)
    y0, y1 = max(0, dy), h + min(0, dy)
    if x1 - x0 < _MIN_OVERLAP_PX or y1 - y0 < _MIN_OVERLAP_PX:
        return -np.inf
    a = ref[y0:y1, x0:x1]
    b = np.roll(mov, (dy, dx), axis=(0, 1))[y0:y1, x0:x1]
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 1.0 if np.abs(a - b).max() == 0 else 0.0
    return float((a * b).sum() / denom)


def _wrapped_peaks(surface: np.ndarray, n: int) -> list[tuple[int, int]]:
    h, w = surface.shape
    flat = np.argpartition(surface.ravel(), -n)[-n:]
    peaks = []
    for f in flat:
        py, px = divmod(int(f), w)
        dy = py - h if py > h // 2 else py
        dx = px - w if px > w // 2 else px
        peaks.append((dx, dy))
    return peaks


def estimate_translation(reference, moving) -> tuple[int, int]:
    """Integer (dx, dy) that best aligns ``moving`` onto ``reference``.

    Candidate shifts come from the top peaks of the Hann-windowed phase
    correlation and cross correlation surfaces; each candidate (with its
    3x3 neighborhood) is verified by the real-space overlap correlation,
    and the winner is refined by an integer hill climb on that score.
    The dual proposal covers both sparse scenes, where whitened phase
    correlation is sharp, and smooth low-texture frames, where it is not.
    Ties prefer the smaller shift, so identical frames return (0, 0).
    """
    ref = np.asarray(reference, dtype=np.float64)
    mov = np.asarray(moving, dtype=np.float64)
    if ref.shape != mov.shape or ref.ndim != 2:
        raise ValueError("estimate_translation expects two equal-shape 2-D planes")
    h, w = ref.shape
    window = np.hanning(h)[:, None] * np.hanning(w)[None, :]
    f_ref = np.fft.fft2((ref - ref.mean()) * window)
    f_mov = np.fft.fft2((mov - mov.mean()) * window)
    cross = f_ref * np.conj(f_mov)
    phase_surface = np.fft.ifft2(cross / np.maximum(np.abs(cross), 1e-12)).real
    cc_surface = np.fft.ifft2(cross).real

    candidates = {(0, 0)}
    proposals = _wrapped_peaks(phase_surface, _PEAK_CANDIDATES)
    proposals += _wrapped_peaks(cc_surface, _PEAK_CANDIDATES)
    for dx, dy in proposals:
        for ny in (-1, 0, 1):
            for nx in (-1, 0, 1):
                candidates.add((dx + nx, dy + ny))

    by_magnitude = lambda c: (abs(c[0]) + abs(c[1]), c)
    scores = {c: _overlap_score(ref, mov, *c) for c in sorted(candidates, key=by_magnitude)}
    best = max(sorted(scores, key=by_magnitude), key=scores.__getitem__)
    for _ in range(_MAX_CLIMB_STEPS):
        neighbors = sorted(
            ((best[0] + nx, best[1] + ny) for ny in (-1, 0, 1) for nx in (-1, 0, 1)),
            key=by_magnitude,
        )
        for c in neighbors:
            if c not in scores:
                scores[c] = _overlap_score(ref, mov, *c)
        up = max(neighbors, key=scores.__getitem__)
        if scores[up] > scores[best]:
            best = up
        else:
            break
    return best


def _roll_crop(img: np.ndarray, dx: int, dy: int, box: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = box
    rolled = np.roll(img, (dy, dx), axis=(0, 1))
    return np.ascontiguousarray(rolled[y0:y1, x0:x1])


def register_stack(
    stack: ImageStack,
    manifest: StackManifest,
    max_shift_px: int = DEFAULT_MAX_SHIFT_PX,
) -> ImageStack:
    """Align every condition image to the mask condition by pure translation.

    Offsets are estimated on the luminance plane by phase correlation. All
    frames (including high-EV companions, which share their condition's
    offset) are cropped to the common overlap. A correlation peak beyond
    ``max_shift_px`` on either axis aborts with the offending condition.
    """
    if max_shift_px < 0:
        raise ValueError("max_shift_px must be >= 0")
    if len(stack) != manifest.condition_count:
        raise StackError(
            f"stack has {len(stack)} images but manifest declares "
            f"{manifest.condition_count} conditions"
        )

    ref_pos = manifest.mask_position()
    ref_y = luminance(stack.images[ref_pos])

    offsets = np.zeros((len(stack), 2), dtype=np.float64)
    for pos in range(len(stack)):
        if pos == ref_pos:
            continue
        dx, dy = estimate_translation(ref_y, luminance(stack.images[pos]))
        if abs(dx) > max_shift_px or abs(dy) > max_shift_px:
            raise RegistrationError(
                manifest.conditions[pos].index,
                f"correlation peak at ({dx}, {dy}) px exceeds the "
                f"+/-{max_shift_px} px search bound; registration unreliable",
            )
        offsets[pos] = (dx, dy)
        if dx or dy:
            log.debug(
                "condition %d aligned with offset (%d, %d)",
                manifest.conditions[pos].index, dx, dy,
            )

    h, w = stack.height, stack.width
    ox = offsets[:, 0].astype(int)
    oy = offsets[:, 1].astype(int)
    x0 = max(0, int(ox.max()))
    x1 = w + min(0, int(ox.min()))
    y0 = max(0, int(oy.max()))
    y1 = h + min(0, int(oy.min()))
    if x1 <= x0 or y1 <= y0:
        raise StackError("registration offsets leave no common overlap")
    box = (x0, y0, x1, y1)

    images = np.stack(
        [_roll_crop(stack.images[i], ox[i], oy[i], box) for i in range(len(stack))]
    )
    high_ev = {
        pos: _roll_crop(img, ox[pos], oy[pos], box)
        for pos, img in stack.high_ev.items()
    }
    return ImageStack(images=images, registration_offsets=offsets, high_ev=high_ev)
