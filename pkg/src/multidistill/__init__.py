"""Multi-teacher feature distillation into a spatial-token student encoder."""

__version__ = "0.1.0"
