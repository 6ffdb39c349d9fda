class ConfigError(ValueError):
    """Invalid experiment, benchmark or CLI configuration."""


class OnlineConstraintError(RuntimeError):
    """A stream sample was presented to the learner more than once."""


class GradientLeakError(AssertionError):
    """Classification loss produced a gradient on saliency encoder parameters."""
