"""Exception hierarchy shared across the package.

Every error that callers are expected to handle derives from
:class:`StainlabError`; the CLI maps subtrees of this hierarchy to
stable process exit codes (config 2, data 3, numerical 4).
"""


class StainlabError(Exception):
    """Base class for all stainlab errors."""


class ConfigInvalid(StainlabError):
    """A configuration value or file failed validation.

    The message names the offending field path, e.g. ``synth.noise_sigma``.
    """


class DataMissing(StainlabError):
    """An expected dataset file or directory is absent."""


class ShapeMismatch(StainlabError):
    """Tensor operands have incompatible shapes."""


class NonFiniteValue(StainlabError):
    """A NaN or Inf appeared where finite values are required."""


class NonFiniteLoss(NonFiniteValue):
    """Training loss became NaN/Inf; the run is aborted."""


class DegenerateBatch(StainlabError):
    """Batch statistics are undefined (single-element normalization axis)."""


class InsufficientTissue(StainlabError):
    """Too few above-threshold optical-density pixels for stain estimation."""


class DegenerateStain(StainlabError):
    """The optical-density scatter is effectively rank one (single stain)."""


class MissingAugmentation(StainlabError):
    """The model variant requires augmented images but none were supplied."""


class MissingStainTarget(StainlabError):
    """The model variant requires stain-matrix targets but none were supplied."""


class EmptySet(StainlabError):
    """An image set passed to an aggregate computation is empty."""
