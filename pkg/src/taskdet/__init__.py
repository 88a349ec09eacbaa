"""Task-oriented detection and segmentation on a synthetic affordance
benchmark, with noun-to-pronoun feature distillation."""

__version__ = "0.1.0"
