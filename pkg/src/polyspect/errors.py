"""Exception and warning types shared across the pipeline."""


class PolyspectError(Exception):
    """Base class for all pipeline errors."""


class ManifestError(PolyspectError):
    """Manifest file missing, unparseable, or violating its invariants."""


class StackError(PolyspectError):
    """Image stack could not be loaded consistently (decode or size issues)."""


class RegistrationError(PolyspectError):
    """Translation estimate is unreliable (peak at or beyond the search bound)."""

    def __init__(self, condition_index: int, message: str):
        self.condition_index = condition_index
        super().__init__(f"condition {condition_index}: {message}")


class SegmentationError(PolyspectError):
    """Clustering preconditions violated (e.g. fewer pixels than clusters)."""


class LibraryError(PolyspectError):
    """Fingerprint library is inconsistent or has an unsupported schema."""


class SynthError(PolyspectError):
    """Synthetic scene cannot be rendered (unknown class, overlap, placement)."""


class DataQualityWarning(UserWarning):
    """Input accepted but flagged: non-canonical rigs, lossy or grayscale
    images, library/manifest digest mismatches."""
