"""Knowledge distillation and mutual learning with mixed prediction/feature sharing."""

__version__ = "0.1.0"
