"""Exception types shared across the package."""


class PoseSearchError(Exception):
    """Base class for all package-specific errors."""


class PoleDegenerate(PoseSearchError):
    """Viewpoint elevation at or beyond +/-90 deg; look-at basis undefined."""


class NonRotationInput(PoseSearchError):
    """Matrix is not orthonormal with determinant +1 within tolerance."""


class InvalidCount(PoseSearchError):
    """A count argument was zero or negative."""


class InvalidScheduleParams(PoseSearchError):
    """Noise-schedule parameters outside their valid range."""


class ShapeMismatch(PoseSearchError):
    """Tensor shapes do not agree."""


class BackendUnavailable(PoseSearchError):
    """Backend cannot serve requests (not ready, shut down, ...)."""


class InvalidConditioning(PoseSearchError):
    """Conditioning input rejected by the backend."""


class Unreachable(PoseSearchError):
    """Remote server could not be reached after exhausting retries."""


class ProtocolMismatch(PoseSearchError):
    """Remote server speaks a different protocol version."""


class ServerError(PoseSearchError):
    """Well-formed error response from the remote server (never retried)."""


class PartialFailure(PoseSearchError):
    """Batch call where some items failed; carries per-item status.

    ``statuses`` is a list aligned with the request batch: each entry is
    ``(ok, payload_or_error_message)``.
    """

    def __init__(self, statuses):
        self.statuses = statuses
        failed = sum(1 for ok, _ in statuses if not ok)
        super().__init__(f"{failed}/{len(statuses)} batch items failed")


class IoFailure(PoseSearchError):
    """Dataset or report I/O failed."""
