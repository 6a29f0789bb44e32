"""Desk-scale Gaussian-splat engine: sparse high-elevation reconstruction plus
curriculum-driven iterative dataset refinement with pluggable image oracles."""

__version__ = "0.1.0"

from .geometry import CameraPinhole, GaussianCloud  # noqa: F401
from .render import RenderOutput, render, render_backward  # noqa: F401
