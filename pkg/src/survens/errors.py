"""Exception types raised across the package."""


class SurvensError(Exception):
    """Base class for every error raised by survens."""


class ValidationError(SurvensError, ValueError):
    """Input data or configuration failed validation."""


# dataset
class MalformedRow(ValidationError):
    pass


class DuplicateVisit(ValidationError):
    pass


class MissingOutcome(ValidationError):
    pass


# synth
class InvalidConfig(ValidationError):
    pass


# impute
class NoCompletePredictors(ValidationError):
    pass


class SingularDesign(SurvensError):
    pass


# features
class ZeroInterval(SurvensError):
    pass


class ConstantFeature(SurvensError):
    pass


# coxnet
class NoEvents(ValidationError):
    pass


class NonConvergence(SurvensError):
    pass


class FeatureMismatch(ValidationError):
    pass


class EmptySelection(SurvensError):
    pass


# rsf
class TooFewEvents(ValidationError):
    pass


# deepsurv
class DivergedLoss(SurvensError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


# ensemble
class LengthMismatch(ValidationError):
    pass


# metrics
class NoComparablePairs(ValidationError):
    pass


# pipeline
class EmptyBin(SurvensError):
    pass
