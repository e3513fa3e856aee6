"""Data-free distillation for semantic segmentation at desk scale: a numpy
tensor engine, toy teacher/student networks, a synthetic open-world corpus,
BN-statistics sample selection, and weighted progressive distillation."""

__version__ = "0.1.0"
