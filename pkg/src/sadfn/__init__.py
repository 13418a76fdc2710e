"""Segmentation-aware deep fusion networks for compressed-sensing MRI,
implemented on a small numpy autodiff engine."""

__version__ = "0.1.0"
