"""Exception hierarchy shared by all ctseg modules.

Every data-dependent failure raises a subclass of CtsegError so the CLI
can map them to a single "data error" exit code.
"""


class CtsegError(Exception):
    """Base class for all ctseg errors."""


# --- binary format / volume model ---

class FormatError(CtsegError):
    """Bad magic, version, element code or structurally invalid header."""


class TruncationError(CtsegError):
    """Payload length does not match the dims declared in the header."""


class RangeError(CtsegError):
    """A stored value lies outside its permitted range."""


class NormalizationError(CtsegError):
    """A probability map voxel does not form a valid distribution."""


class VolumeIOError(CtsegError):
    """Underlying byte sink/source failed; carries the byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


# --- preprocessing ---

class EmptyInputError(CtsegError):
    """An operation requiring at least one element received none."""


class DegenerateWindowError(CtsegError):
    """Windowing bounds collapsed to a single value (lo == hi)."""


class StatsError(CtsegError):
    """Intensity statistics could not be estimated from the sample."""


class NoForegroundError(CtsegError):
    """Training-mode slice selection found no slice with foreground labels."""


class UpsampleRefusedError(CtsegError):
    """Requested in-plane target size exceeds the source size."""


# --- augmentation ---

class TooFewSlicesError(CtsegError):
    """A slice-level augmentation needs more slices than are present."""


# --- objectives / linear algebra ---

class ShapeError(CtsegError):
    """Operand dimensions are incompatible."""


# --- dataset / folds ---

class ManifestError(CtsegError):
    """Manifest-level invariant violated (e.g. duplicate id)."""


class ParseError(CtsegError):
    """A text record could not be parsed; carries the line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class FoldError(CtsegError):
    """Fold assignment is impossible for the given manifest and k."""


# --- training / ensembling ---

class DivergenceError(CtsegError):
    """Training produced a non-finite loss."""


class WeightError(CtsegError):
    """Combiner weights are unusable (e.g. all zero)."""


# --- synthesis ---

class GeometryError(CtsegError):
    """Phantom geometry cannot be realized for the requested dims."""
