"""Domain exceptions with machine-readable codes.

The CLI prints ``to_dict()`` as a JSON line on failure and the service turns
the same payload into an HTTP 422 response.
"""
from typing import Any, Dict


class LinkAdaptError(Exception):
    code = "LINK_ADAPT_ERROR"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": self.code, "message": self.message}
        payload.update(self.details)
        return payload


class ConfigError(LinkAdaptError):
    code = "INVALID_CONFIG"


class GeometryError(LinkAdaptError):
    code = "INVALID_GEOMETRY"


class EmptyCoverage(LinkAdaptError):
    code = "EMPTY_COVERAGE"


class ImpossibleObservation(LinkAdaptError):
    code = "IMPOSSIBLE_OBSERVATION"


class ThresholdBracketError(LinkAdaptError):
    code = "NO_SIGN_CHANGE"


class NotConverged(LinkAdaptError):
    code = "NON_CONVERGED"


class SingularSystem(LinkAdaptError):
    code = "SINGULAR_SYSTEM"


class ArtifactMismatch(LinkAdaptError):
    code = "ARTIFACT_MISMATCH"
