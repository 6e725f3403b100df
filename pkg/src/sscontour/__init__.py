"""Semi-supervised structured-forest contour detection."""

__version__ = "0.1.0"
