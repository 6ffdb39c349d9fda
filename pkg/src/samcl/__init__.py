"""Selective attention-driven modulation for online continual learning."""

from samcl.errors import ConfigError, GradientLeakError, OnlineConstraintError

__version__ = "0.1.0"

__all__ = ["ConfigError", "GradientLeakError", "OnlineConstraintError", "__version__"]
