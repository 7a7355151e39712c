"""Joint facial-landmark / emotion network with Grad-CAM landmark analysis."""

__version__ = "0.1.0"
