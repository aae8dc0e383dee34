"""Command-line pipeline: file-in/file-out subcommands over stacks.

Each stage reads declared inputs, writes declared outputs into an output
directory together with a run log (inputs, config, version, seed), and
never mutates its inputs. Outputs are deterministic: identical inputs and
seed produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import re
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomlkit
from PIL import Image

from . import __version__
from .colorspace import absolute_ev, luminous_exposure
from .errors import DataQualityWarning, PolyspectError
from .fingerprint import (
    build_library,
    extract_fingerprint,
    load_fingerprints,
    load_library,
    save_fingerprints,
    save_library,
)
from .ingest import ImageStack, load_manifest, load_stack, register_stack, save_manifest
from .metrics import (
    AreaSeries,
    LabeledDetection,
    area_table,
    detection_confusion,
    scores,
    size_category_counts,
)
from .classify import (
    DEFAULT_CONFUSABLE_THRESHOLD,
    DEFAULT_TAU,
    classify_particle,
    distance_matrix,
    flag_confusable_pairs,
)
from .segment import (
    LabelMap,
    SegmentationConfig,
    build_mask,
    label_regions,
    px_to_um,
    px_area_to_um2,
    regions_from_labels,
)
from .synth import generate_stack, load_scene_spec, synthetic_manifest


# ---------------------------------------------------------------------------
# file helpers

def _write_run_log(output_dir: Path, command: str, config: dict, inputs: dict,
                   outputs: Sequence[str]) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "config": config,
        "outputs": [str(o) for o in outputs],
    }
    path = output_dir / f"{command}_run.toml"
    path.write_text(tomlkit.dumps(doc))
    return path


def _write_mask_png(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask.astype(np.uint8)) * 255).save(path)


def _write_labels_png(labels: np.ndarray, path: Path) -> None:
    if labels.max() > np.iinfo(np.uint16).max:
        raise PolyspectError(f"too many regions for 16-bit export: {labels.max()}")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def _read_labels_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def _write_regions_csv(label_map: LabelMap, scale: float, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "id", "area_px", "area_um2", "centroid_x", "centroid_y",
            "minor_axis_px", "minor_axis_um",
            "bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1",
        ])
        for r in label_map.regions:
            writer.writerow([
                r.id, r.area_px,
                f"{px_area_to_um2(r.area_px, scale):.2f}",
                f"{r.centroid[0]:.3f}", f"{r.centroid[1]:.3f}",
                f"{r.minor_axis_px:.3f}", f"{px_to_um(r.minor_axis_px, scale):.3f}",
                *r.bbox,
            ])


def _read_centroids_csv(path: Path) -> dict[int, tuple[float, float]]:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["id"])] = (float(row["centroid_x"]), float(row["centroid_y"]))
    return out


def _read_class_labels_csv(path: Path) -> dict[int, str]:
    """region_id,class_name rows."""
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["region_id"])] = row["class_name"].strip()
    return out


def _read_results_csv(path: Path) -> dict[int, str]:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["region_id"])] = row["assigned_class"].strip()
    return out


def _read_truth_csv(path: Path) -> list[LabeledDetection]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                LabeledDetection(
                    id=int(row["region_id"]),
                    centroid=(float(row["centroid_x"]), float(row["centroid_y"])),
                    label=row["class_name"].strip(),
                )
            )
    return out


_COND_COLUMN = re.compile(r"^c\d+$")


def _read_area_series_csv(path: Path, default_method: str) -> list[AreaSeries]:
    series = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        cond_cols = [c for c in reader.fieldnames or [] if _COND_COLUMN.match(c)]
        if not cond_cols:
            raise PolyspectError(f"{path}: no condition area columns (c01, c02, ...)")
        for row in reader:
            method = (row.get("reference_method") or default_method).strip()
            series.append(
                AreaSeries(
                    particle_name=row["particle"].strip(),
                    mask_area_px=float(row["mask_area_px"]),
                    condition_areas_px=tuple(float(row[c]) for c in cond_cols),
                    reference_method=method,
                )
            )
    return series


def _registered_stack(manifest, register: bool, max_shift: int) -> ImageStack:
    stack = load_stack(manifest)
    if register:
        stack = register_stack(stack, manifest, max_shift_px=max_shift)
    return stack


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "undefined" if value is None else f"{value:.{digits}f}"


# ---------------------------------------------------------------------------
# subcommands

def cmd_segment(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    cfg = SegmentationConfig(
        k=args.k,
        rng_seed=args.seed,
        min_area_px=args.min_area,
        feature_space=args.feature_space,
        fill_holes=not args.no_fill_holes,
    )
    stack = _registered_stack(manifest, not args.no_register, args.max_shift)
    pos = manifest.mask_position()
    mask = build_mask(stack.images[pos], cfg, high_ev_image=stack.high_ev.get(pos))
    label_map = label_regions(mask, cfg.min_area_px)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_mask_png(mask, out / "mask.png")
    _write_labels_png(label_map.labels, out / "labels.png")
    _write_regions_csv(label_map, manifest.pixel_scale_um_per_px, out / "regions.csv")

    counts = {}
    if args.size_thresholds:
        thresholds = [int(t) for t in args.size_thresholds.split(",")]
        counts = size_category_counts(label_map.regions, thresholds)
        for t, c in counts.items():
            print(f"particles >= {t} px^2: {c}")

    _write_run_log(
        out, "segment",
        config={
            "k": cfg.k, "min_area_px": cfg.min_area_px, "rng_seed": cfg.rng_seed,
            "feature_space": cfg.feature_space, "fill_holes": cfg.fill_holes,
            "register": not args.no_register, "max_shift_px": args.max_shift,
            "size_category_counts": {str(t): c for t, c in counts.items()},
        },
        inputs={"manifest": args.manifest},
        outputs=["mask.png", "labels.png", "regions.csv"],
    )
    print(f"segmented {len(label_map.regions)} region(s) -> {out}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    labels = _read_labels_png(Path(args.labels))
    stack = _registered_stack(manifest, not args.no_register, args.max_shift)
    if labels.shape != (stack.height, stack.width):
        raise PolyspectError(
            f"label map {labels.shape[1]}x{labels.shape[0]} does not match the "
            f"registered stack {stack.width}x{stack.height}; "
            "use the same --no-register choice as the segment stage"
        )
    regions = regions_from_labels(labels)
    if not regions:
        raise PolyspectError("label map contains no regions")
    fingerprints = [
        extract_fingerprint(
            stack, r, manifest,
            encoding=args.encoding,
            with_pixel_covariance=not args.no_pixel_covariance,
        )
        for r in regions
    ]

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_fingerprints(fingerprints, out / "fingerprints.toml",
                      manifest_digest=manifest.condition_digest())
    _write_run_log(
        out, "extract",
        config={
            "encoding": args.encoding,
            "pixel_covariance": not args.no_pixel_covariance,
            "register": not args.no_register, "max_shift_px": args.max_shift,
        },
        inputs={"manifest": args.manifest, "labels": args.labels},
        outputs=["fingerprints.toml"],
    )
    print(f"extracted {len(fingerprints)} fingerprint(s) -> {out / 'fingerprints.toml'}")
    return 0


def cmd_build_library(args: argparse.Namespace) -> int:
    if len(args.fingerprints) != len(args.labels):
        raise PolyspectError("--fingerprints and --labels must be given in pairs")
    samples: dict[str, list] = {}
    digests = set()
    for fp_path, label_path in zip(args.fingerprints, args.labels):
        fingerprints, digest = load_fingerprints(fp_path)
        digests.add(digest)
        class_of = _read_class_labels_csv(Path(label_path))
        for fp in fingerprints:
            if fp.region_id not in class_of:
                continue  # unlabeled regions are not training data
            samples.setdefault(class_of[fp.region_id], []).append(fp)
    if not samples:
        raise PolyspectError("no labeled fingerprints found")
    digest = digests.pop() if len(digests) == 1 else ""

    library = build_library(
        samples,
        lambda_rel=args.lambda_rel,
        use_pixel_covariance=args.covariance == "pixel",
        manifest_digest=digest,
    )
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_library(library, out)
    _write_run_log(
        out.parent, "build-library",
        config={
            "lambda_rel": args.lambda_rel,
            "covariance": args.covariance,
            "classes": {name: len(fps) for name, fps in samples.items()},
        },
        inputs={f"fingerprints_{i}": p for i, p in enumerate(args.fingerprints)}
        | {f"labels_{i}": p for i, p in enumerate(args.labels)},
        outputs=[out.name],
    )
    print(
        f"library with {len(library.signatures)} class(es), "
        f"d={library.dimension} -> {out}"
    )
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    if args.tau <= 0:
        raise PolyspectError(f"--tau must be positive, got {args.tau}")
    fingerprints, fp_digest = load_fingerprints(args.fingerprints)
    library = load_library(args.library)
    if library.manifest_digest and fp_digest and library.manifest_digest != fp_digest:
        warnings.warn(
            "library and fingerprints were produced from different condition "
            f"sets ({library.manifest_digest} vs {fp_digest})",
            DataQualityWarning,
            stacklevel=1,
        )
    if fingerprints and fingerprints[0].encoding != library.feature_encoding:
        warnings.warn(
            f"fingerprints use encoding {fingerprints[0].encoding!r} but the "
            f"library was trained with {library.feature_encoding!r}",
            DataQualityWarning,
            stacklevel=1,
        )
    results = [classify_particle(fp, library, tau=args.tau) for fp in fingerprints]

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = library.class_names
    with open(out / "results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["region_id", "assigned_class", *[f"d_{n}" for n in names],
                         "threshold_used"])
        for r in results:
            writer.writerow([
                r.region_id, r.assigned_class,
                *[f"{r.distances[n]:.6f}" for n in names],
                f"{r.threshold_used:.3f}",
            ])
    _write_run_log(
        out, "classify",
        config={"tau": args.tau},
        inputs={"fingerprints": args.fingerprints, "library": args.library},
        outputs=["results.csv"],
    )
    assigned = sum(1 for r in results if r.assigned_class != "UNCLASSIFIED")
    print(f"classified {assigned}/{len(results)} particle(s) -> {out / 'results.csv'}")
    return 0


def cmd_distance_matrix(args: argparse.Namespace) -> int:
    library = load_library(args.library)
    dm = distance_matrix(library)
    pairs = flag_confusable_pairs(dm, threshold=args.threshold)

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = dm.class_names
    with open(out / "distance_matrix.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", *names])
        for i, name in enumerate(names):
            writer.writerow([name, *[f"{v:.4f}" for v in dm.values[i]]])
    with open(out / "distance_matrix_upper.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", *names])
        for i, name in enumerate(names):
            row = [""] * i + ["0"] + [f"{dm.values[i, j]:.4f}" for j in range(i + 1, len(names))]
            writer.writerow([name, *row])
    with open(out / "confusable_pairs.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class_a", "class_b", "distance"])
        for a, b, d in pairs:
            writer.writerow([a, b, f"{d:.4f}"])
    _write_run_log(
        out, "distance-matrix",
        config={"threshold": args.threshold},
        inputs={"library": args.library},
        outputs=["distance_matrix.csv", "distance_matrix_upper.csv", "confusable_pairs.csv"],
    )
    print(f"{len(names)} classes, {len(pairs)} pair(s) under {args.threshold} SD -> {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    if not args.truth and not args.areas:
        raise PolyspectError("evaluate needs --truth (with predictions) and/or --areas")
    out = Path(args.output_dir)
    report_lines = []
    outputs = []

    counts = None
    if args.truth:
        if not (args.pred_regions and args.pred_labels):
            raise PolyspectError("--truth requires --pred-regions and --pred-labels")
        centroids = _read_centroids_csv(Path(args.pred_regions))
        labels = _read_results_csv(Path(args.pred_labels))
        predicted = [
            LabeledDetection(id=rid, centroid=centroids[rid], label=label)
            for rid, label in sorted(labels.items())
            if rid in centroids
        ]
        truth = _read_truth_csv(Path(args.truth))
        counts = detection_confusion(
            predicted, truth,
            match_radius_px=args.match_radius,
            non_mp_labels=frozenset(args.non_mp_label),
        )
        sc = scores(counts)
        report_lines += [
            f"counts: tp={counts.tp} fp={counts.fp} tn={counts.tn} fn={counts.fn}",
            f"iou={_fmt(sc.iou)} accuracy={_fmt(sc.accuracy)} "
            f"precision={_fmt(sc.precision)} recall={_fmt(sc.recall)} f1={_fmt(sc.f1)}",
        ]

    rows = []
    mean_iou = None
    if args.areas:
        series = _read_area_series_csv(Path(args.areas), args.reference)
        rows, mean_iou = area_table(series)
        report_lines.append(f"area table: {len(rows)} particle(s), mean IoU {mean_iou:.3f}")

    out.mkdir(parents=True, exist_ok=True)
    if counts is not None:
        sc = scores(counts)
        with open(out / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["tp", "fp", "tn", "fn", "iou", "accuracy",
                             "precision", "recall", "f1"])
            writer.writerow([
                counts.tp, counts.fp, counts.tn, counts.fn,
                _fmt(sc.iou), _fmt(sc.accuracy), _fmt(sc.precision),
                _fmt(sc.recall), _fmt(sc.f1),
            ])
        outputs.append("metrics.csv")
    if rows:
        with open(out / "area_table.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["particle", "reference_method", "mask_area_px",
                             "reference_area_px", "iou", "roi_percent"])
            for r in rows:
                writer.writerow([
                    r.particle_name, r.reference_method, f"{r.mask_area_px:.1f}",
                    f"{r.reference_area_px:.2f}", f"{r.iou:.3f}", f"{r.roi_percent:.1f}",
                ])
            writer.writerow(["mean", "", "", "", f"{mean_iou:.3f}", ""])
        outputs.append("area_table.csv")

    (out / "report.txt").write_text("\n".join(report_lines) + "\n")
    outputs.append("report.txt")
    _write_run_log(
        out, "evaluate",
        config={
            "match_radius": args.match_radius,
            "reference": args.reference,
            "non_mp_labels": list(args.non_mp_label),
        },
        inputs={
            k: v for k, v in [
                ("truth", args.truth), ("pred_regions", args.pred_regions),
                ("pred_labels", args.pred_labels), ("areas", args.areas),
            ] if v
        },
        outputs=outputs,
    )
    for line in report_lines:
        print(line)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    scene, classes = load_scene_spec(args.spec)
    if args.seed is not None:
        from dataclasses import replace

        scene = replace(scene, rng_seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_cond = len(classes[0].per_condition_hsv) if classes else 0
    manifest = synthetic_manifest(n_cond, out)
    stack, truth, label_names = generate_stack(scene, classes, manifest)

    for i in range(len(stack)):
        Image.fromarray(stack.images[i]).save(manifest.conditions[i].image_path)
    save_manifest(manifest, out / "manifest.toml")
    _write_labels_png(truth.labels, out / "truth_labels.png")
    with open(out / "truth.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["region_id", "class_name", "centroid_x", "centroid_y", "area_px"])
        for r in truth.regions:
            writer.writerow([
                r.id, label_names[r.id],
                f"{r.centroid[0]:.3f}", f"{r.centroid[1]:.3f}", r.area_px,
            ])
    _write_run_log(
        out, "synth",
        config={"rng_seed": scene.rng_seed, "width": scene.width, "height": scene.height,
                "particles": len(scene.particles), "distractors": len(scene.distractors)},
        inputs={"spec": args.spec},
        outputs=[c.image_path.name for c in manifest.conditions]
        + ["manifest.toml", "truth_labels.png", "truth.csv"],
    )
    print(f"rendered {len(stack)} condition(s), {len(truth.regions)} particle(s) -> {out}")
    return 0


def cmd_calibrate_ev(args: argparse.Namespace) -> int:
    if args.aperture is None and args.lux is None:
        raise PolyspectError("give --aperture (absolute EV) and/or --lux (luminous exposure)")
    if args.aperture is not None:
        ev = absolute_ev(args.aperture, args.shutter, args.iso)
        print(f"absolute EV: {ev:.2f}")
    if args.lux is not None:
        lxs = luminous_exposure(args.lux, args.shutter)
        print(f"luminous exposure: {lxs:.1f} lx·s")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyspect",
        description="Multispectral fluorescence particle segmentation, "
                    "fingerprinting and polymer classification",
    )
    parser.add_argument("--version", action="version", version=f"polyspect {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_register_flags(p):
        p.add_argument("--no-register", action="store_true",
                       help="assume the stack is already aligned")
        p.add_argument("--max-shift", type=int, default=20,
                       help="registration search bound in pixels (default 20)")

    p = sub.add_parser("segment", help="build the particle mask and region table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--k", type=int, default=3, help="number of clusters (4 for turbid samples)")
    p.add_argument("--min-area", type=int, default=9,
                   help="discard regions smaller than this many pixels (default 9)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--feature-space", choices=["ycbcr", "rgb"], default="ycbcr")
    p.add_argument("--no-fill-holes", action="store_true")
    p.add_argument("--size-thresholds", default="",
                   help="comma-separated area thresholds to tally, e.g. 10,50,100")
    add_register_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("extract", help="extract per-particle spectral fingerprints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="label map PNG from the segment stage")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--encoding", choices=["chroma", "chroma_std"], default="chroma")
    p.add_argument("--no-pixel-covariance", action="store_true",
                   help="skip within-particle covariance estimation")
    add_register_flags(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-library", help="train class signatures from fingerprints")
    p.add_argument("--fingerprints", "-f", action="append", required=True,
                   help="fingerprints file (repeatable, paired with --labels)")
    p.add_argument("--labels", "-l", action="append", required=True,
                   help="CSV mapping region_id to class_name")
    p.add_argument("--output", required=True, help="library file to write")
    p.add_argument("--lambda-rel", type=float, default=1e-3,
                   help="trace-relative covariance ridge (default 1e-3)")
    p.add_argument("--covariance", choices=["sample", "pixel"], default="sample",
                   help="per-class sample covariance, or mean within-particle "
                        "pixel covariance (for one exemplar per class)")
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("classify", help="assign each fingerprint its nearest class")
    p.add_argument("--fingerprints", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU,
                   help="distance threshold in SD units beyond which a particle "
                        "is UNCLASSIFIED (default 5.0)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("distance-matrix", help="pairwise class distances of a library")
    p.add_argument("--library", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_CONFUSABLE_THRESHOLD,
                   help="flag class pairs closer than this many SD (default 1.0)")
    p.set_defaults(func=cmd_distance_matrix)

    p = sub.add_parser("evaluate", help="confusion metrics and/or area tables")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--truth", help="truth CSV (region_id,class_name,centroid_x,centroid_y,...)")
    p.add_argument("--pred-regions", help="regions.csv from the segment stage")
    p.add_argument("--pred-labels", help="results.csv from the classify stage")
    p.add_argument("--match-radius", type=float, default=50.0)
    p.add_argument("--non-mp-label", action="append", default=["NOM"],
                   help="label(s) that mean 'not a particle of interest'")
    p.add_argument("--areas", help="per-condition area series CSV")
    p.add_argument("--reference", choices=["median", "q1"], default="median")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="render a synthetic stack with ground truth")
    p.add_argument("--spec", required=True, help="scene/class spec file")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the scene seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate-ev", help="exposure calculators for capture setup")
    p.add_argument("--shutter", type=float, required=True, help="shutter time in seconds")
    p.add_argument("--aperture", type=float, default=None, help="f-number")
    p.add_argument("--iso", type=float, default=100.0)
    p.add_argument("--lux", type=float, default=None, help="illuminance at the sample plane")
    p.set_defaults(func=cmd_calibrate_ev)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # normalize the evaluate --reference alias before dispatch
    if getattr(args, "reference", None) == "q1":
        args.reference = "first_quartile"
    try:
        return args.func(args)
    except (PolyspectError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
