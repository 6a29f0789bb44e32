"""Scalar training objectives and the PSNR/SSIM metric kernels.

Reductions are means (over pixels and over Gaussians) so weights stay
scale-free as image sizes and Gaussian counts change. SSIM constants are
pinned bit-exactly: 11x11 Gaussian window with sigma 1.5, K1 = 0.01,
K2 = 0.03, dynamic range L = 1, statistics taken over the valid (uncropped)
convolution region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError
from .geometry import DTYPE
from .utils import gaussian_kernel1d, separable_filter

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 99.0
ENTROPY_EPS = 1e-6
PEARSON_EPS = 1e-8


@dataclass
class LossWeights:
    """Weights of the composite objectives; defaults match the protocol."""

    lambda_dssim: float = 0.2
    lambda_op: float = 10.0
    lambda_depth: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.lambda_dssim <= 1.0):
            raise ContractError("lambda_dssim must lie in [0, 1]")
        if self.lambda_op < 0 or self.lambda_depth < 0:
            raise ContractError("loss weights must be non-negative")


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if tuple(pred.shape) != tuple(target.shape):
        raise ContractError(
            f"image shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )


def _as_chw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img.unsqueeze(0)
    if img.dim() == 3:
        return img.permute(2, 0, 1)
    raise ContractError(f"expected (H, W) or (H, W, C) image, got {tuple(img.shape)}")


def ssim(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean local SSIM; symmetric in its arguments."""
    _check_same_shape(pred, target)
    x = _as_chw(torch.as_tensor(pred, dtype=DTYPE))
    y = _as_chw(torch.as_tensor(target, dtype=DTYPE))
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ContractError(f"images must be at least {SSIM_WINDOW} px on each side")
    kernel = gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = separable_filter(x, kernel)
    mu_y = separable_filter(y, kernel)
    var_x = separable_filter(x * x, kernel) - mu_x * mu_x
    var_y = separable_filter(y * y, kernel) - mu_y * mu_y
    cov = separable_filter(x * y, kernel) - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def dssim(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (1.0 - ssim(pred, target)) / 2.0


def psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    """10 log10(1 / MSE) in dB, capped at 99 dB for MSE below 1e-10."""
    _check_same_shape(pred, target)
    mse = float(((torch.as_tensor(pred, dtype=DTYPE) - torch.as_tensor(target, dtype=DTYPE)) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def loss_color(pred: torch.Tensor, target: torch.Tensor, lambda_dssim: float) -> torch.Tensor:
    """lambda * DSSIM + (1 - lambda) * mean-L1."""
    _check_same_shape(pred, target)
    l1 = (pred - torch.as_tensor(target, dtype=DTYPE)).abs().mean()
    if lambda_dssim == 0.0:
        return l1
    return lambda_dssim * dssim(pred, target) + (1.0 - lambda_dssim) * l1


def opacity_entropy(alphas: torch.Tensor) -> torch.Tensor:
    """Mean binary entropy of per-Gaussian opacities.

    Minimized as opacities saturate toward {0, 1}; the mean reduction keeps
    the weight scale-free as densification changes the Gaussian count.
    """
    alphas = torch.as_tensor(alphas, dtype=DTYPE).reshape(-1)
    if alphas.numel() == 0:
        return torch.zeros((), dtype=DTYPE)
    a = alphas.clamp(ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    return (-(a * torch.log(a) + (1.0 - a) * torch.log1p(-a))).mean()


def pearson(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Pearson correlation over (masked) pixels, in [-1, 1].

    The denominator is floored at 1e-8, so an all-constant input degenerates
    to correlation 0 rather than a division error.
    """
    a = torch.as_tensor(a, dtype=DTYPE).reshape(-1)
    b = torch.as_tensor(b, dtype=DTYPE).reshape(-1)
    if a.numel() != b.numel():
        raise ContractError("depth maps differ in size")
    if mask is not None:
        m = torch.as_tensor(mask).reshape(-1).bool()
        a, b = a[m], b[m]
    if a.numel() < 2:
        raise ContractError("pearson needs at least 2 valid pixels")
    da = a - a.mean()
    db = b - b.mean()
    cov = (da * db).mean()
    # the floor is applied inside the sqrt (same value: sqrt is monotone) so
    # the gradient stays finite when a variance underflows
    denom = torch.sqrt(torch.clamp(da.square().mean() * db.square().mean(), min=PEARSON_EPS**2))
    return cov / denom


def loss_depth(
    depth_gs: torch.Tensor,
    depth_est: torch.Tensor,
    mask: torch.Tensor | None = None,
    variant: str = "one_minus_corr",
) -> torch.Tensor:
    """Correlation-based depth supervision, invariant to positive affine
    transforms of the estimate.

    ``variant`` selects 1 - PCorr (default, rewards positive correlation) or
    1 - |PCorr| (``one_minus_abs``). Fewer than 2 valid pixels or a
    degenerate correlation yield the neutral value 1.
    """
    if variant not in ("one_minus_corr", "one_minus_abs"):
        raise ContractError(f"unknown depth loss variant {variant!r}")
    if mask is not None:
        valid = int(torch.as_tensor(mask).sum())
        if valid < 2:
            return torch.ones((), dtype=DTYPE)
    elif torch.as_tensor(depth_gs).numel() < 2:
        return torch.ones((), dtype=DTYPE)
    with torch.no_grad():
        a = torch.as_tensor(depth_gs, dtype=DTYPE).reshape(-1)
        b = torch.as_tensor(depth_est, dtype=DTYPE).reshape(-1)
        if mask is not None:
            m = torch.as_tensor(mask).reshape(-1).bool()
            a, b = a[m], b[m]
        degenerate = float(a.var(unbiased=False)) < 1e-12 or float(b.var(unbiased=False)) < 1e-12
    if degenerate:
        # constant input: correlation is meaningless and its gradient would
        # blow up against the epsilon floor; return the neutral value
        return torch.ones((), dtype=DTYPE)
    r = pearson(depth_gs, depth_est, mask)
    if variant == "one_minus_abs":
        return 1.0 - r.abs()
    return 1.0 - r


def _pairs(renders, targets):
    if isinstance(renders, torch.Tensor):
        renders, targets = [renders], [targets]
    if len(renders) != len(targets):
        raise ContractError("renders and targets differ in count")
    return renders, targets


def loss_sat(renders, targets, alphas, depth_pairs, weights: LossWeights) -> torch.Tensor:
    """Reconstruction-stage objective: color + opacity entropy + depth.

    ``depth_pairs`` is a possibly empty list of (depth_gs, depth_est, mask)
    triples; the depth term is present only when pairs are supplied
    (pseudo-camera steps).
    """
    renders, targets = _pairs(renders, targets)
    total = torch.stack(
        [loss_color(p, t, weights.lambda_dssim) for p, t in zip(renders, targets)]
    ).mean()
    total = total + weights.lambda_op * opacity_entropy(alphas)
    if depth_pairs:
        depth = torch.stack([loss_depth(g, e, m) for g, e, m in depth_pairs]).mean()
        total = total + weights.lambda_depth * depth
    return total


def loss_idu(renders, refined_targets, depth_pairs, weights: LossWeights) -> torch.Tensor:
    """Episode objective: color + depth; opacity regularization is absent."""
    renders, refined_targets = _pairs(renders, refined_targets)
    total = torch.stack(
        [loss_color(p, t, weights.lambda_dssim) for p, t in zip(renders, refined_targets)]
    ).mean()
    if depth_pairs:
        depth = torch.stack([loss_depth(g, e, m) for g, e, m in depth_pairs]).mean()
        total = total + weights.lambda_depth * depth
    return total
