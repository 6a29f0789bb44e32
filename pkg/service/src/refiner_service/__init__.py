"""Refiner sidecar: serves the image-refinement wire protocol over HTTP."""

__version__ = "0.1.0"
