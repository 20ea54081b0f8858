"""Few-shot image classification with generated-caption features."""

__version__ = "0.1.0"
