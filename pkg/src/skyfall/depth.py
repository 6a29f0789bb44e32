"""Depth-estimation oracle interface and the mocks used for testing.

The contract is behavioral: image in, scale-invariant depth map of the same
resolution out, all values finite. Monotone equivalence with true depth is
NOT assumed; the correlation loss absorbs affine ambiguity.
"""

from __future__ import annotations

from typing import Protocol

import torch

from .errors import OracleError
from .geometry import CameraPinhole, GaussianCloud
from .utils import np_rng


class DepthOracle(Protocol):
    def estimate(self, image: torch.Tensor, camera: CameraPinhole) -> torch.Tensor:
        """Scale-invariant depth for ``image`` (rendered from ``camera``).

        The camera is metadata every caller has at hand; real monocular
        estimators ignore it, reference mocks may use it.
        """
        ...


class MockAffineDepthOracle:
    """Returns a * D_true + b where D_true is the reference scene's rendered
    depth for the requested camera; a > 0 and b are drawn once per oracle."""

    def __init__(self, reference: GaussianCloud, seed: int = 0, a: float | None = None, b: float | None = None):
        rng = np_rng(seed)
        self.reference = reference
        self.a = float(rng.uniform(0.5, 2.0)) if a is None else float(a)
        self.b = float(rng.uniform(-5.0, 5.0)) if b is None else float(b)
        if self.a <= 0:
            raise ValueError("affine scale must be positive")

    def estimate(self, image: torch.Tensor, camera: CameraPinhole) -> torch.Tensor:
        from .render import render

        with torch.no_grad():
            true = render(self.reference, camera).depth
        return self.a * true + self.b


class ConstantDepthOracle:
    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def estimate(self, image: torch.Tensor, camera: CameraPinhole) -> torch.Tensor:
        return torch.full((camera.height, camera.width), self.value, dtype=image.dtype)


class FailingDepthOracle:
    """Always raises; exercises the fail-soft path in the training loop."""

    def estimate(self, image: torch.Tensor, camera: CameraPinhole) -> torch.Tensor:
        raise OracleError("mock oracle configured to fail")


def estimate_depth(oracle: DepthOracle, image: torch.Tensor, camera: CameraPinhole) -> torch.Tensor:
    """Query an oracle and enforce the behavioral contract."""
    depth = oracle.estimate(image, camera)
    if tuple(depth.shape) != (camera.height, camera.width):
        raise OracleError(
            f"oracle returned shape {tuple(depth.shape)}, expected {(camera.height, camera.width)}"
        )
    if not bool(torch.isfinite(depth).all()):
        raise OracleError("oracle returned non-finite depth values")
    return depth
