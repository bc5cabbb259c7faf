"""Exception types raised by the toolkit."""


class Error(Exception):
    """Base class for all errors raised by this package."""


class NonFinite(Error):
    """A path or sample contains NaN or Inf."""


class OutOfRange(Error):
    """Requested time lies outside the represented window."""


class InvalidTolerance(Error):
    """Tolerance outside the open interval (0, 1)."""


class NotFadingMemory(Error):
    """Proposed history does not belong to the fading-memory space."""


class GridMismatch(Error):
    """A lag or time is not aligned with the time grid."""


class KernelUnbounded(Error):
    """A sampled kernel value is not finite."""


class EstimatorNotFitted(Error):
    """Projection requested at a node that has not been fitted."""


class UnderdeterminedFit(Error):
    """Too few trajectories for the requested regression basis."""


class SingularNormalMatrix(Error):
    """Normal equations are numerically singular and no ridge was given."""


class Blowup(Error):
    """Simulated state exceeded the blow-up guard."""


class NoConvergence(Error):
    """An iteration failed to make progress."""


class StepTooSmall(Error):
    """Finite-difference step is swamped by rounding noise."""


class SingularWeight(Error):
    """Control weight is not uniformly positive definite."""


class StiffRiccati(Error):
    """Riccati integration is not resolved by the chosen step."""


class ConfigInvalid(Error):
    """Experiment configuration failed validation."""


class CheckFailed(Error):
    """A verification check in a CLI verb failed."""
