"""Exception hierarchy shared by every module.

Every domain error derives from :class:`SosGmmError` so that the command
line layer can map them to exit code 1 and a typed JSON payload.
"""

from __future__ import annotations


class SosGmmError(Exception):
    """Base class for domain errors raised by this package."""

    code = "domain_error"

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "code": self.code, "message": str(self)}


# gaussians
class SingularCovariance(SosGmmError):
    code = "singular_covariance"


class InvalidSampleCount(SosGmmError):
    code = "invalid_sample_count"


class InvalidParameter(SosGmmError, ValueError):
    code = "invalid_parameter"


# separation
class InvalidEpsilon(SosGmmError, ValueError):
    code = "invalid_epsilon"


class NoPartitionFound(SosGmmError):
    code = "no_partition_found"


# anticoncentration
class ApproximationFailed(SosGmmError):
    code = "approximation_failed"


class InvalidDegree(SosGmmError, ValueError):
    code = "invalid_degree"


class PreconditionFailed(SosGmmError):
    code = "precondition_failed"


class ConstructionFailed(SosGmmError):
    code = "construction_failed"

    def __init__(self, message: str, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class PrecisionWarning(UserWarning):
    """Raised as a warning when a quadrature rule had to be enlarged."""


# moments
class DegenerateSubset(SosGmmError):
    code = "degenerate_subset"


class InvalidPartition(SosGmmError, ValueError):
    code = "invalid_partition"


class NoRoot(SosGmmError):
    code = "no_root"


# sos
class InvalidShape(SosGmmError, ValueError):
    code = "invalid_shape"


class Infeasible(SosGmmError):
    code = "infeasible"

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


class SolverStall(SosGmmError):
    code = "solver_stall"

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class DegreeTooHigh(SosGmmError, ValueError):
    code = "degree_too_high"


class DegenerateSelection(SosGmmError):
    code = "degenerate_selection"


# clustering
class BudgetExceeded(UserWarning):
    """Warning emitted when the candidate budget truncates the recursion."""


class WeightsNotCommensurate(SosGmmError):
    code = "weights_not_commensurate"


# robust
class BudgetExhausted(UserWarning):
    """Warning emitted when the filter hits its removal budget."""


class AllCandidatesRejected(SosGmmError):
    code = "all_candidates_rejected"


class PipelineFailed(SosGmmError):
    code = "pipeline_failed"


# cli
class MissingInput(SosGmmError):
    code = "missing_input"


class ConfigError(SosGmmError, ValueError):
    code = "config_error"
