"""Exception hierarchy.

Every error carries enough context (witness points, measured values) to be
dumped into a report.  ``HypothesisError`` subclasses map to CLI exit code 3,
``CertificationError`` subclasses to exit code 4 and ``InputError`` to 2.
"""


class ReifenbergError(Exception):
    """Base class; ``details`` is a JSON-friendly dict."""

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class InputError(ReifenbergError, ValueError):
    pass


class HypothesisError(ReifenbergError):
    pass


class CertificationError(ReifenbergError):
    pass


# geometry
class NonPositiveRadius(InputError):
    pass


class EmptyBall(InputError):
    pass


class InsufficientSampling(InputError):
    pass


class InvalidPointCloud(InputError):
    pass


class EmptySet(InputError):
    pass


# net
class ColorBudgetExceeded(CertificationError):
    pass


# surface
class DegeneratePair(CertificationError):
    pass


class SamplesNotLipschitz(CertificationError):
    pass


class StageInvariantViolated(CertificationError):
    pass


class FlatnessBudgetExceeded(HypothesisError):
    pass


# smooth
class GridTooCoarse(InputError):
    pass


class PatchMismatch(InputError):
    pass


class DerivativeBudgetExceeded(CertificationError):
    pass


# codim1
class OrientationConflict(CertificationError):
    pass


class DisconnectedAtlas(CertificationError):
    pass


class ContractionFailure(CertificationError):
    pass


class SandwichViolated(CertificationError):
    pass


class ResolutionTooCoarse(InputError):
    pass


class UnsupportedCodimension(InputError):
    """The operation needs d = n - 1."""


class NotChainConnected(HypothesisError):
    pass


class SideSelectionAmbiguous(CertificationError):
    pass


class NestingViolated(CertificationError):
    pass


class ComponentCountMismatch(CertificationError):
    pass


class ResourceLimitExceeded(HypothesisError):
    """Requested run would exceed the configured cell or patch budget."""


# synth
class InvalidSpec(InputError):
    pass
