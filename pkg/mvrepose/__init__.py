"""Multi-view pose-guided human image generation on a synthetic multi-view dataset."""

__version__ = "1.0.0"
