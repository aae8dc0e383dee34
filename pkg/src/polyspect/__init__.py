"""Multispectral fluorescence particle analysis.

Segment fluorescent particles from multispectral image stacks by k-means
clustering, extract per-condition HSV spectral fingerprints, and classify
particles against a polymer signature library by Mahalanobis-distance
nearest neighbor.
"""

__version__ = "0.1.0"

from .classify import (
    UNCLASSIFIED,
    ClassificationResult,
    DistanceMatrix,
    classify_particle,
    distance_matrix,
    flag_confusable_pairs,
    mahalanobis,
)
from .colorspace import (
    absolute_ev,
    hsv_to_rgb,
    luminance,
    luminous_exposure,
    rgb_to_hsv,
    rgb_to_ycbcr,
)
from .errors import (
    DataQualityWarning,
    LibraryError,
    ManifestError,
    PolyspectError,
    RegistrationError,
    SegmentationError,
    StackError,
    SynthError,
)
from .fingerprint import (
    FingerprintLibrary,
    HSVStats,
    ParticleFingerprint,
    PolymerSignature,
    build_library,
    build_signature,
    circular_hue_stats,
    encode_features,
    extract_fingerprint,
    load_fingerprints,
    load_library,
    save_fingerprints,
    save_library,
)
from .ingest import (
    IlluminationCondition,
    ImageStack,
    StackManifest,
    estimate_translation,
    load_manifest,
    load_stack,
    register_stack,
    save_manifest,
)
from .metrics import (
    AreaSeries,
    ConfusionCounts,
    LabeledDetection,
    Scores,
    area_ratio_iou,
    area_table,
    detection_confusion,
    reference_area,
    roi_percentage,
    scores,
    size_category_counts,
)
from .segment import (
    KMeansResult,
    LabelMap,
    Region,
    SegmentationConfig,
    build_mask,
    kmeans_cluster,
    label_regions,
    px_area_to_um2,
    px_to_um,
    regions_from_labels,
    select_particle_cluster,
)
from .synth import (
    ParticlePlacement,
    SynthClassSpec,
    SynthSceneSpec,
    generate_stack,
    load_scene_spec,
    random_scene,
    save_scene_spec,
    synthetic_manifest,
)

__all__ = [name for name in dir() if not name.startswith("_")]
