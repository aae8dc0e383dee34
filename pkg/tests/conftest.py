"""Shared fixtures: frozen reference tables and synthetic-stack helpers."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from PIL import Image

from polyspect import AreaSeries, DistanceMatrix, SynthClassSpec

settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")

DATA_DIR = Path(__file__).parent / "data"

# Printed per-polymer overlap row the area fixture reproduces (2 decimals).
PRINTED_IOU_ROW = {
    "PP": 1.00, "HDPE": 1.00, "LDPE": 0.96, "EPS": 0.47, "PS": 0.88,
    "ABS": 0.85, "PC": 0.98, "PVC": 0.93, "PET": 0.92, "PA": 0.79,
}

# Mask-vs-reference percentages (reference method as in the area fixture).
ROI_ANCHORS = {
    "PS": 113.8, "EPS": 46.7, "PET": 92.0, "PA": 78.6,
    "ABS": 117.8, "PVC": 107.9,
}


def load_area_series() -> list[AreaSeries]:
    series = []
    with open(DATA_DIR / "particle_area_series.csv", newline="") as f:
        reader = csv.DictReader(f)
        cond_cols = [c for c in reader.fieldnames if c.startswith("c")]
        for row in reader:
            series.append(
                AreaSeries(
                    particle_name=row["particle"],
                    mask_area_px=float(row["mask_area_px"]),
                    condition_areas_px=tuple(float(row[c]) for c in cond_cols),
                    reference_method=row["reference_method"],
                )
            )
    return series


def load_distance_matrix(filename: str) -> DistanceMatrix:
    with open(DATA_DIR / filename, newline="") as f:
        rows = list(csv.reader(f))
    names = tuple(rows[0][1:])
    n = len(names)
    values = np.zeros((n, n))
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if cell != "":
                values[i, j] = float(cell)
    values = np.maximum(values, values.T)
    return DistanceMatrix(class_names=names, values=values)


def tone_separations_ycbcr(hsv_tones) -> np.ndarray:
    """Pairwise distances of rendered-and-quantized tones in YCbCr."""
    from polyspect import hsv_to_rgb, rgb_to_ycbcr

    vecs = [rgb_to_ycbcr(np.rint(hsv_to_rgb(np.asarray(t, float)))) for t in hsv_tones]
    out = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            out.append(float(np.linalg.norm(vecs[i] - vecs[j])))
    return np.asarray(out)


def three_tone_scene(seed: int, noise_sigma_v: float = 0.0, n_conditions: int = 5):
    """Scene family for segmentation oracles: dark background, one bright
    particle class, one mid-gray shadow distractor. All tones are separated
    by at least 100 channel units in YCbCr (asserted by construction)."""
    rng = np.random.default_rng(seed)
    hue = float(rng.uniform(55.0, 85.0))
    particle_hsv = (hue, 0.6, 0.95)
    shadow_hsv = (0.0, 0.0, 0.42)
    background_v = 0.02
    seps = tone_separations_ycbcr([particle_hsv, shadow_hsv, (0.0, 0.0, background_v)])
    assert seps.min() >= 100.0, f"tone palette too close: {seps}"

    classes = [
        SynthClassSpec(
            "bright",
            tuple(particle_hsv for _ in range(n_conditions)),
            (0.0, 0.0, noise_sigma_v),
        ),
        SynthClassSpec("shadow", tuple(shadow_hsv for _ in range(n_conditions))),
    ]
    from polyspect import random_scene

    scene = random_scene(
        width=128,
        height=128,
        class_names=["bright"],
        n_particles=int(rng.integers(2, 5)),
        rng_seed=seed,
        radius_range=(7.0, 13.0),
        background_v=background_v,
        distractor_specs=[("shadow", 9.0)],
    )
    return scene, classes


def hue_wheel_classes(
    n_classes: int,
    n_conditions: int,
    noise_sigma=(0.0, 0.0, 0.0),
    saturation: float = 0.65,
    value: float = 0.9,
) -> list[SynthClassSpec]:
    """Classes with evenly spaced base hues (>= 360/n degrees apart) whose
    color drifts mildly across conditions."""
    classes = []
    for i in range(n_classes):
        base = 360.0 * i / n_classes
        per = tuple(
            ((base + 1.5 * c) % 360.0, saturation, value - 0.004 * c)
            for c in range(n_conditions)
        )
        classes.append(SynthClassSpec(f"C{i:02d}", per, tuple(noise_sigma)))
    return classes


def write_stack_files(
    directory: Path,
    images: list[np.ndarray],
    mask_condition_index: int | None = 1,
    pixel_scale: float | None = None,
    high_ev: dict[int, np.ndarray] | None = None,
) -> Path:
    """Write condition PNGs plus a manifest; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    wavelengths = (265, 310, 365, 405, 450)
    filters = ("green", "yellow", "orange", "red")
    lines = []
    if mask_condition_index is not None:
        lines.append(f"mask_condition_index = {mask_condition_index}")
    if pixel_scale is not None:
        lines.append(f"pixel_scale_um_per_px = {pixel_scale}")
    high_ev = high_ev or {}
    for i, img in enumerate(images):
        name = f"cond_{i + 1:02d}.png"
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(directory / name)
        lines += [
            "",
            "[[conditions]]",
            f"index = {i + 1}",
            f"wavelength_nm = {wavelengths[i % 5]}",
            f'filter = "{filters[(i // 5) % 4]}"',
            f'image = "{name}"',
        ]
        if i in high_ev:
            hname = f"cond_{i + 1:02d}_hi.png"
            Image.fromarray(np.asarray(high_ev[i], dtype=np.uint8)).save(directory / hname)
            lines.append(f'high_ev_image = "{hname}"')
    path = directory / "manifest.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def area_series():
    return load_area_series()
