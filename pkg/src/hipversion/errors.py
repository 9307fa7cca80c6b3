"""Exception hierarchy. Every error the CLI reports maps to one of these."""


class HipVersionError(Exception):
    """Base class for all package errors."""

    category = "error"


class SchemaError(HipVersionError):
    """Metadata table is missing a required column or has a malformed header."""

    category = "schema-error"


class IngestionError(HipVersionError):
    """A record failed validation during ingestion (bad value, missing image,
    duplicate id)."""

    category = "ingestion-error"


class EmptyDatasetError(HipVersionError):
    """An operation that needs at least one record received none."""

    category = "empty-dataset"


class ConfigError(HipVersionError):
    """Invalid configuration value or file."""

    category = "config-error"


class DataError(HipVersionError):
    """Runtime data handed to the model violates its preconditions
    (non-finite values, wrong side, aux out of range)."""

    category = "data-error"


class BundleError(HipVersionError):
    """Problems saving or loading a model bundle (corrupt archive,
    format-version mismatch, missing weights)."""

    category = "bundle-error"


class BundleIntegrityError(BundleError):
    """Bundle is loadable but lacks state required by the requested
    operation (e.g. angle_max for degree predictions)."""

    category = "bundle-integrity"


class NonFiniteGradientError(HipVersionError):
    """A gradient turned NaN/inf during an optimizer step."""

    category = "non-finite-gradient"

    def __init__(self, param_name: str, detail: str = ""):
        self.param_name = param_name
        msg = f"non-finite gradient for parameter '{param_name}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TrainingDivergedError(HipVersionError):
    """Training loss became non-finite; carries the history up to the abort."""

    category = "training-diverged"

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


class DecodeError(HipVersionError):
    """The phantom reference decoder could not locate a rim."""

    category = "decode-error"
