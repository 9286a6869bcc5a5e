"""Error taxonomy shared across the package.

Three broad classes map onto the CLI exit-code contract:

* ``ConfigError``    -> exit 1 (bad flags, invalid configuration)
* ``DataError``      -> exit 2 (malformed or insufficient input data)
* ``RuntimeFailure`` -> exit 3 (mid-run failures: divergence, client errors)
"""

from __future__ import annotations


class HandcastError(Exception):
    """Base class for all package errors."""


class ConfigError(HandcastError):
    """Invalid configuration or argument combination."""


class DataError(HandcastError):
    """Input data is malformed, inconsistent, or insufficient."""


class RuntimeFailure(HandcastError):
    """A run failed after starting (divergence, remote failure, ...)."""


# --- geometry ---------------------------------------------------------------

class DegenerateConfiguration(DataError):
    """Point configuration does not determine a homography (rank deficient)."""


class InsufficientInliers(DataError):
    """RANSAC could not find a consensus set of the required size."""


class AtInfinity(DataError):
    """Projected point lies on the plane at infinity (w ~ 0)."""


class ShapeMismatch(DataError):
    """An array argument has the wrong shape or resolution."""


# --- gt pipeline ------------------------------------------------------------

class MissingHomography(DataError):
    """A frame pair on the projection path has no homography."""


# --- tokens -----------------------------------------------------------------

class HorizonMismatch(DataError):
    """Number of hand steps disagrees with the expected horizon."""


class MalformedGeneration(DataError):
    """Generated token ids and decoded hand steps are inconsistent."""


class UnknownToken(DataError):
    """Token id outside the vocabulary."""


# --- model ------------------------------------------------------------------

class LengthExceeded(DataError):
    """Sequence longer than the model's maximum context length."""


class EmptyBatch(DataError):
    """Loss or forward called with an empty batch."""


class NonFiniteLoss(RuntimeFailure):
    """Training loss became NaN/Inf; aborted with diagnostics."""


# --- evaluation -------------------------------------------------------------

class NoValidFinalStep(DataError):
    """FDE undefined: ground truth has no valid side at the final step."""


class EmptyGenerationSet(DataError):
    """Self-consistency aggregation called with zero generations."""


class SchemaMismatch(DataError):
    """A record file does not match the documented schema."""


# --- dataset generation -----------------------------------------------------

class ClientTimeout(RuntimeFailure):
    """Chat endpoint did not answer within the deadline (after retries)."""


class ClientRejection(RuntimeFailure):
    """Chat endpoint returned a non-success status or refused the request."""


class ValidationFailed(DataError):
    """LLM output failed post-validation (bad format or answer leak)."""


class ReplayMiss(RuntimeFailure):
    """Replay transcript has no entry for the issued request."""
