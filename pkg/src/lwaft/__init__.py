"""Layer-wise adaptive freeze-tuning (LW-AFT) on small numpy models."""

__version__ = "0.1.0"
