"""Exception types shared across the package."""


class FlipmatchError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FlipmatchError):
    """A configuration file or TrainConfig field is invalid."""


class ShapeMismatch(FlipmatchError):
    """An array argument has the wrong shape for the operation."""


class TooLarge(FlipmatchError):
    """The model has too many variables for exact enumeration."""


class PartialAssignment(FlipmatchError):
    """A full assignment was required but some variables are uninstantiated."""


class SameValue(FlipmatchError):
    """A flip was requested to the value the variable already has."""


class MissingParent(FlipmatchError):
    """A conditional was requested but some parent is uninstantiated."""


class MissingBlanket(FlipmatchError):
    """A local loss term needs the full neighborhood of the flipped variable."""


class EmptyBatch(FlipmatchError):
    """An operation over a batch received zero rows."""


class EmptyDataset(FlipmatchError):
    """A training routine received an empty dataset."""


class NonFiniteLoss(FlipmatchError):
    """A loss or gradient evaluated to NaN or infinity."""


class OrderViolation(FlipmatchError):
    """A prefix of instantiated variables does not follow the sampling order."""


class TooFewChildren(FlipmatchError):
    """The two-index gradient estimator needs at least two child terms."""


class LatentCoversAll(FlipmatchError):
    """Latent-variable training requires at least one observed variable."""
