"""Exception hierarchy.

Every error raised by the package derives from :class:`ClusterPSError`.
Validation problems (bad input data or configuration) derive from
:class:`ValidationError`; failures that happen while estimating derive from
:class:`EstimationError`. The CLI maps the two families to exit codes 2 and 3.
"""

from __future__ import annotations


class ClusterPSError(Exception):
    """Base class for all package errors."""

    code = "ClusterPSError"

    def record(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ValidationError(ClusterPSError):
    code = "ValidationError"


class EstimationError(ClusterPSError):
    code = "EstimationError"


# --- data model -----------------------------------------------------------

class MissingColumn(ValidationError):
    code = "MissingColumn"


class NonBinary(ValidationError):
    code = "NonBinary"

    def __init__(self, column: str, detail: str = ""):
        self.column = column
        super().__init__(f"column {column!r} must be 0/1{': ' + detail if detail else ''}")


class InconsistentClusterConstant(ValidationError):
    code = "InconsistentClusterConstant"


class EmptyFile(ValidationError):
    code = "EmptyFile"


class IndexOutOfRange(ValidationError):
    code = "IndexOutOfRange"


class NonPositiveWeight(ValidationError):
    code = "NonPositiveWeight"


class InvalidDataset(ValidationError):
    code = "InvalidDataset"


class ConfigError(ValidationError):
    code = "ConfigError"


# --- nuisance fitting -----------------------------------------------------

class SingularDesign(EstimationError):
    code = "SingularDesign"


class DegenerateStack(EstimationError):
    code = "DegenerateStack"


class TooFewClusters(ValidationError):
    code = "TooFewClusters"


class FoldDegenerate(EstimationError):
    code = "FoldDegenerate"


# --- estimation -----------------------------------------------------------

class ZeroDenominator(EstimationError):
    code = "ZeroDenominator"


class StratumUnavailable(ValidationError):
    code = "StratumUnavailable"


class InvalidCell(ValidationError):
    code = "InvalidCell"


class ArmMissing(EstimationError):
    code = "ArmMissing"


class MixedStrata(ValidationError):
    code = "MixedStrata"


# --- inference ------------------------------------------------------------

class TooManyFailedReplicates(EstimationError):
    code = "TooManyFailedReplicates"


class InsufficientReplicates(EstimationError):
    code = "InsufficientReplicates"


# --- sensitivity ----------------------------------------------------------

class NonPositiveDenominator(EstimationError):
    code = "NonPositiveDenominator"

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"{message} (feature row {row})")
