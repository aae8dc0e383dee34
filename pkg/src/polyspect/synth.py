"""Synthetic multispectral stacks with exact ground truth.

Scenes place non-overlapping particles (disks, ellipses, rectangles) on a
dark background; every particle carries a class whose color is specified
per condition in HSV. Rendering adds seeded Gaussian noise in HSV before
converting to RGB, so oracle error analysis stays closed-form. Distractor
placements (shadows, residue) are rendered but excluded from the truth
label map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
import tomlkit

from .colorspace import hsv_to_rgb
from .errors import SynthError
from .ingest import (
    CANONICAL_FILTERS,
    VALID_WAVELENGTHS_NM,
    IlluminationCondition,
    ImageStack,
    StackManifest,
)
from .segment import LabelMap, regions_from_labels

SHAPES = ("disk", "ellipse", "rectangle")
MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SynthClassSpec:
    """Per-condition HSV color of one class plus its noise level."""

    class_name: str
    per_condition_hsv: tuple[tuple[float, float, float], ...]
    hsv_noise_sigma: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if min(self.hsv_noise_sigma) < 0:
            raise SynthError(f"class {self.class_name!r}: noise sigma must be >= 0")
        if not self.per_condition_hsv:
            raise SynthError(f"class {self.class_name!r}: no per-condition colors")


@dataclass(frozen=True)
class ParticlePlacement:
    class_name: str
    shape: str  # disk | ellipse | rectangle
    center: tuple[float, float]
    size: tuple[float, ...]  # disk: (r,)  ellipse: (rx, ry)  rectangle: (w, h)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SynthError(f"unknown shape {self.shape!r}")
        want = {"disk": 1, "ellipse": 2, "rectangle": 2}[self.shape]
        if len(self.size) != want:
            raise SynthError(f"shape {self.shape!r} takes {want} size parameter(s)")
        if min(self.size) <= 0:
            raise SynthError("size parameters must be positive")

    def extent(self) -> tuple[float, float]:
        """Half-extent (x, y) of the footprint."""
        if self.shape == "disk":
            return self.size[0], self.size[0]
        if self.shape == "ellipse":
            return self.size[0], self.size[1]
        return self.size[0] / 2.0, self.size[1] / 2.0


@dataclass(frozen=True)
class SynthSceneSpec:
    width: int
    height: int
    particles: tuple[ParticlePlacement, ...]
    distractors: tuple[ParticlePlacement, ...] = ()
    background_v: float = 0.05
    rng_seed: int = 0
    vignette_strength: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SynthError("scene dimensions must be positive")
        if not 0.0 <= self.background_v <= 0.2:
            raise SynthError("background_v must be in [0, 0.2]")
        if not 0.0 <= self.vignette_strength <= 1.0:
            raise SynthError("vignette_strength must be in [0, 1]")


def _rasterize(p: ParticlePlacement, width: int, height: int) -> np.ndarray:
    ex, ey = p.extent()
    cx, cy = p.center
    if cx - ex < 0 or cy - ey < 0 or cx + ex > width - 1 or cy + ey > height - 1:
        raise SynthError(
            f"{p.shape} at ({cx}, {cy}) size {p.size} does not fit in "
            f"{width}x{height}"
        )
    ys, xs = np.mgrid[0:height, 0:width]
    if p.shape == "disk":
        r = p.size[0]
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
    if p.shape == "ellipse":
        rx, ry = p.size
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    w, h = p.size
    return (np.abs(xs - cx) <= w / 2.0) & (np.abs(ys - cy) <= h / 2.0)


def _vignette(width: int, height: int, strength: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return 1.0 - strength * d2 / d2.max()


def generate_stack(
    scene: SynthSceneSpec,
    classes: Sequence[SynthClassSpec],
    manifest: StackManifest,
) -> tuple[ImageStack, LabelMap, dict[int, str]]:
    """Render a scene into a stack; returns pixel-exact truth.

    Truth regions are numbered 1..n in particle listing order; the labels
    mapping pairs each region id with its generator class name.
    """
    class_map = {c.class_name: c for c in classes}
    n_cond = manifest.condition_count
    for c in classes:
        if len(c.per_condition_hsv) != n_cond:
            raise SynthError(
                f"class {c.class_name!r} has {len(c.per_condition_hsv)} condition "
                f"colors, manifest declares {n_cond}"
            )
    placements = list(scene.particles) + list(scene.distractors)
    for p in placements:
        if p.class_name not in class_map:
            raise SynthError(f"placement references unknown class {p.class_name!r}")

    footprints = [_rasterize(p, scene.width, scene.height) for p in placements]
    occupied = np.zeros((scene.height, scene.width), dtype=bool)
    for p, fp in zip(placements, footprints):
        if (occupied & fp).any():
            raise SynthError(f"placement {p.class_name} at {p.center} overlaps another")
        occupied |= fp

    labels = np.zeros((scene.height, scene.width), dtype=np.int32)
    label_names = {}
    for i, (p, fp) in enumerate(zip(scene.particles, footprints), start=1):
        labels[fp] = i
        label_names[i] = p.class_name
    truth = LabelMap(labels=labels, regions=regions_from_labels(labels))

    rng = np.random.default_rng(scene.rng_seed)
    vignette = (
        _vignette(scene.width, scene.height, scene.vignette_strength)
        if scene.vignette_strength > 0
        else None
    )

    images = []
    for ci in range(n_cond):
        hsv = np.zeros((scene.height, scene.width, 3))
        hsv[..., 2] = scene.background_v
        for p, fp in zip(placements, footprints):
            spec = class_map[p.class_name]
            h0, s0, v0 = spec.per_condition_hsv[ci]
            sh, ss, sv = spec.hsv_noise_sigma
            n = int(fp.sum())
            h = np.mod(h0 + rng.normal(0.0, sh, n), 360.0) if sh > 0 else np.full(n, h0 % 360.0)
            s = np.clip(s0 + rng.normal(0.0, ss, n), 0.0, 1.0) if ss > 0 else np.full(n, s0)
            v = np.clip(v0 + rng.normal(0.0, sv, n), 0.0, 1.0) if sv > 0 else np.full(n, v0)
            hsv[fp] = np.column_stack([h, s, v])
        if vignette is not None:
            hsv[..., 2] *= vignette
        rgb = hsv_to_rgb(hsv)
        images.append(np.clip(np.rint(rgb), 0, 255).astype(np.uint8))

    stack = ImageStack(
        images=np.stack(images),
        registration_offsets=np.zeros((n_cond, 2)),
    )
    return stack, truth, label_names


def random_scene(
    width: int,
    height: int,
    class_names: Sequence[str],
    n_particles: int,
    rng_seed: int,
    radius_range: tuple[float, float] = (6.0, 14.0),
    background_v: float = 0.05,
    vignette_strength: float = 0.0,
    gap_px: float = 3.0,
    distractor_specs: Sequence[tuple[str, float]] = (),
) -> SynthSceneSpec:
    """Scene with randomly placed, non-overlapping disks.

    Placement is by rejection: a candidate disk is kept only if its bounding
    circle clears every accepted one by ``gap_px`` (which also prevents
    8-connected merging of adjacent truth regions). ``distractor_specs``
    adds (class_name, radius) disks rendered but excluded from truth.
    """
    rng = np.random.default_rng(rng_seed)
    accepted: list[tuple[float, float, float]] = []

    def place(radius: float) -> tuple[float, float]:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            cx = rng.uniform(radius + 1, width - radius - 2)
            cy = rng.uniform(radius + 1, height - radius - 2)
            if all(
                np.hypot(cx - ox, cy - oy) > radius + orad + gap_px
                for ox, oy, orad in accepted
            ):
                accepted.append((cx, cy, radius))
                return cx, cy
        raise SynthError(
            f"could not place a particle of radius {radius} after "
            f"{MAX_PLACEMENT_ATTEMPTS} attempts"
        )

    particles = []
    for i in range(n_particles):
        radius = float(rng.uniform(*radius_range))
        cx, cy = place(radius)
        particles.append(
            ParticlePlacement(
                class_name=class_names[i % len(class_names)],
                shape="disk",
                center=(round(cx, 1), round(cy, 1)),
                size=(round(radius, 1),),
            )
        )
    distractors = []
    for name, radius in distractor_specs:
        cx, cy = place(float(radius))
        distractors.append(
            ParticlePlacement(
                class_name=name, shape="disk", center=(round(cx, 1), round(cy, 1)),
                size=(float(radius),),
            )
        )
    return SynthSceneSpec(
        width=width,
        height=height,
        particles=tuple(particles),
        distractors=tuple(distractors),
        background_v=background_v,
        rng_seed=rng_seed,
        vignette_strength=vignette_strength,
    )


def synthetic_manifest(
    n_conditions: int,
    directory,
    pixel_scale_um_per_px: float = 11.65,
    name: str = "synthetic",
) -> StackManifest:
    """Manifest for a rendered scene, pointing at cond_XX.png files.

    For 20 conditions the canonical filter-major layout is used (condition
    12 lands on 310 nm / orange, condition 20 on 450 nm / red); smaller
    counts cycle through the same wavelength/filter sequence.
    """
    directory = Path(directory)
    combos = [(w, f) for f in CANONICAL_FILTERS for w in VALID_WAVELENGTHS_NM]
    conditions = []
    for i in range(n_conditions):
        w, f = combos[i % len(combos)]
        conditions.append(
            IlluminationCondition(
                index=i + 1,
                excitation_wavelength_nm=w,
                optical_filter=f,
                image_path=directory / f"cond_{i + 1:02d}.png",
            )
        )
    mask_index = 12 if n_conditions >= 12 else 1
    return StackManifest(
        conditions=tuple(conditions),
        mask_condition_index=mask_index,
        pixel_scale_um_per_px=pixel_scale_um_per_px,
        name=name,
    )


def _placement_doc(p: ParticlePlacement) -> dict:
    return {
        "class_name": p.class_name,
        "shape": p.shape,
        "center": [float(p.center[0]), float(p.center[1])],
        "size": [float(s) for s in p.size],
    }


def save_scene_spec(path, scene: SynthSceneSpec, classes: Sequence[SynthClassSpec]) -> None:
    doc = {
        "scene": {
            "width": scene.width,
            "height": scene.height,
            "background_v": scene.background_v,
            "rng_seed": scene.rng_seed,
            "vignette_strength": scene.vignette_strength,
            "particles": [_placement_doc(p) for p in scene.particles],
            "distractors": [_placement_doc(p) for p in scene.distractors],
        },
        "classes": [
            {
                "class_name": c.class_name,
                "hsv_noise_sigma": [float(x) for x in c.hsv_noise_sigma],
                "per_condition_hsv": [[float(x) for x in hsv] for hsv in c.per_condition_hsv],
            }
            for c in classes
        ],
    }
    Path(path).write_text(tomlkit.dumps(doc))


def _parse_placement(entry: dict) -> ParticlePlacement:
    return ParticlePlacement(
        class_name=str(entry["class_name"]),
        shape=str(entry["shape"]),
        center=tuple(float(x) for x in entry["center"]),
        size=tuple(float(x) for x in entry["size"]),
    )


def load_scene_spec(path) -> tuple[SynthSceneSpec, list[SynthClassSpec]]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except FileNotFoundError as exc:
        raise SynthError(f"scene spec not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise SynthError(f"cannot parse scene spec {path}: {exc}") from exc

    try:
        s = doc["scene"]
        scene = SynthSceneSpec(
            width=int(s["width"]),
            height=int(s["height"]),
            particles=tuple(_parse_placement(e) for e in s.get("particles", [])),
            distractors=tuple(_parse_placement(e) for e in s.get("distractors", [])),
            background_v=float(s.get("background_v", 0.05)),
            rng_seed=int(s.get("rng_seed", 0)),
            vignette_strength=float(s.get("vignette_strength", 0.0)),
        )
        classes = [
            SynthClassSpec(
                class_name=str(c["class_name"]),
                per_condition_hsv=tuple(
                    (float(h), float(sv), float(vv)) for h, sv, vv in c["per_condition_hsv"]
                ),
                hsv_noise_sigma=tuple(float(x) for x in c.get("hsv_noise_sigma", (0, 0, 0))),
            )
            for c in doc.get("classes", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SynthError(f"malformed scene spec {path}: {exc}") from exc
    return scene, classes
