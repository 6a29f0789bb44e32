"""Differentiable forward rendering of a Gaussian cloud.

The rasterizer is fragment-based: every Gaussian in front of the camera is
projected to a screen-space ellipse, expanded into the pixels of its 3-sigma
bounding box, and composited front-to-back in one global depth order
(ties broken by Gaussian index). Per pixel the weight of splat k is

    w_k = ahat_k * prod_{j<k} (1 - ahat_j),   ahat_k = min(alpha_k * G2_k, 0.99)

where G2_k is the 2D Gaussian footprint. Contributions with ahat < 1/255 or
outside the 3-sigma ellipse are exactly zero and do not touch transmittance.
Transmittance products are accumulated as log1p sums, which is safe because
ahat <= 0.99 keeps every factor positive.

Two execution modes share all math: "deterministic" runs the whole image as
one band; "parallel" splits the image into row bands, culls per band, and may
run bands on a thread pool. Band results are independent, so outputs do not
depend on the worker count.

The backward pass is derived by automatic differentiation through this
explicitly written forward graph and is exposed via :func:`render_backward`;
tests validate it against central finite differences.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from .errors import ContractError
from .geometry import (
    DTYPE,
    SH_C0,
    CameraPinhole,
    GaussianCloud,
    project_covariances,
    project_points,
    quat_normalize,
    quat_to_rotmat,
    sh_eval,
)

ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
FOOTPRINT_CHI2 = 9.0  # quadratic-form cutoff: the 3-sigma ellipse
MAX_IMAGE_DIM = 4096
DEFAULT_FRAGMENT_BUDGET = 1 << 20


@dataclass
class RenderOutput:
    """RGB in [0,1], alpha-blended camera-space depth, accumulated alpha."""

    rgb: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)


@dataclass
class RenderAux:
    """Per-visible-Gaussian byproducts the training loop consumes.

    ``kept`` maps rows of ``mean2d``/``radii_px``/``depths`` back to Gaussian
    indices in the input cloud. ``mean2d`` stays attached to the autograd
    graph so screen-space positional gradients can be harvested after a
    backward pass (densification statistic).
    """

    kept: torch.Tensor  # (K,) int64 indices into the cloud
    mean2d: torch.Tensor  # (K, 2) px
    radii_px: torch.Tensor  # (K,)
    depths: torch.Tensor  # (K,)


@dataclass
class RenderGradients:
    """Gradients of a scalar image loss w.r.t. every cloud parameter class."""

    d_positions: torch.Tensor
    d_rotations: torch.Tensor
    d_log_scales: torch.Tensor
    d_opacity_logits: torch.Tensor
    d_sh_coeffs: torch.Tensor
    d_appearance_codes: torch.Tensor
    pos2d_grad_norm: torch.Tensor  # (N,) NDC-scaled screen gradient magnitude
    visible: torch.Tensor  # (N,) bool


class _Prepared:
    """Projected, color-resolved, depth-sorted per-Gaussian tensors.

    ``mean2d`` is the single graph node all fragment math reads from, so
    screen-space positional gradients accumulate on it.
    """

    __slots__ = (
        "kept",
        "mean2d",
        "mean_x",
        "mean_y",
        "ia",
        "ib",
        "ic",
        "radius",
        "depth",
        "alpha",
        "color",
        "x0",
        "x1",
        "y0",
        "y1",
    )

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _resolve_colors(cloud_sh, cloud_codes, positions, cam, appearance):
    """Per-Gaussian RGB: SH evaluation, optional affine appearance transform,
    clamped to [0, 1] so composited images honor the output range."""
    dirs = positions - cam.center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    base = sh_eval(cloud_sh, dirs)
    if appearance is not None:
        dc_rgb = SH_C0 * cloud_sh[:, 0, :] + 0.5
        gamma, beta = appearance.affine_params(cloud_codes, dc_rgb)
        base = torch.clamp(gamma * base + beta, min=0.0)
    return torch.clamp(base, 0.0, 1.0)


def _prepare(positions, rotations, log_scales, opacity_logits, sh_coeffs, codes, cam, appearance):
    """Project and sort the cloud for one view; None when nothing is visible."""
    n = positions.shape[0]
    if n == 0:
        return None
    alphas = torch.sigmoid(opacity_logits)
    mean2d, depth, in_front = project_points(positions, cam)
    # alpha below the skip threshold can never contribute; culling it here
    # keeps downstream fragment batching independent of dead Gaussians
    keep = in_front & (alphas >= ALPHA_SKIP)
    idx = keep.nonzero(as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return None

    pos_f = positions[idx]
    rot = quat_to_rotmat(quat_normalize(rotations[idx]))
    var = torch.exp(2.0 * log_scales[idx])
    cov3d = rot @ (var.unsqueeze(-1) * rot.transpose(-1, -2))
    cov2d = project_covariances(pos_f, cov3d, cam)

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det
    lam_max = 0.5 * (a + c) + torch.sqrt(torch.clamp(0.25 * (a - c) ** 2 + b * b, min=0.0))
    radius = 3.0 * torch.sqrt(lam_max)

    color = _resolve_colors(sh_coeffs[idx], codes[idx], pos_f, cam, appearance)

    order = torch.argsort(depth[idx], stable=True)
    kept = idx[order]
    m2d = mean2d[idx][order]

    with torch.no_grad():
        mx, my = m2d[:, 0], m2d[:, 1]
        # tight axis-aligned bounds of the contributing region: the chi^2
        # cutoff is the 3-sigma ellipse, shrunk further where the skip
        # threshold alpha * g < 1/255 already zeroes the tail exactly
        alpha_o = alphas[idx][order]
        chi2 = torch.clamp(2.0 * torch.log(255.0 * alpha_o), max=FOOTPRINT_CHI2)
        rx = torch.sqrt(chi2 * a[order])
        ry = torch.sqrt(chi2 * c[order])
        x0 = torch.ceil(mx - rx).clamp(0, cam.width - 1).long()
        x1 = torch.floor(mx + rx).clamp(0, cam.width - 1).long()
        y0 = torch.ceil(my - ry).clamp(0, cam.height - 1).long()
        y1 = torch.floor(my + ry).clamp(0, cam.height - 1).long()
        onscreen = (
            (mx + rx >= 0)
            & (mx - rx <= cam.width - 1)
            & (my + ry >= 0)
            & (my - ry <= cam.height - 1)
            & (x1 >= x0)
            & (y1 >= y0)
        )
    sel = onscreen.nonzero(as_tuple=False).squeeze(-1)
    if sel.numel() == 0:
        return None

    m2d_sel = m2d[sel]
    return _Prepared(
        kept=kept[sel],
        mean2d=m2d_sel,
        mean_x=m2d_sel[:, 0],
        mean_y=m2d_sel[:, 1],
        ia=ia[order][sel],
        ib=ib[order][sel],
        ic=ic[order][sel],
        radius=radius[order][sel],
        depth=depth[idx][order][sel],
        alpha=alphas[idx][order][sel],
        color=color[order][sel],
        x0=x0[sel],
        x1=x1[sel],
        y0=y0[sel],
        y1=y1[sel],
    )


def _composite_band(prep: _Prepared, width: int, row0: int, row1: int, budget: int):
    """Front-to-back compositing for image rows [row0, row1)."""
    rows = row1 - row0
    npix = rows * width
    rgb = torch.zeros((npix, 3), dtype=DTYPE)
    dep = torch.zeros(npix, dtype=DTYPE)
    acc = torch.zeros(npix, dtype=DTYPE)

    with torch.no_grad():
        yb0 = torch.clamp(prep.y0, min=row0)
        yb1 = torch.clamp(prep.y1, max=row1 - 1)
        live = (yb1 >= yb0).nonzero(as_tuple=False).squeeze(-1)
    if live.numel() == 0:
        return rgb.view(rows, width, 3), dep.view(rows, width), acc.view(rows, width)

    nx = (prep.x1[live] - prep.x0[live] + 1).long()
    counts = nx * (yb1[live] - yb0[live] + 1)
    total = int(counts.sum())
    csum = torch.cumsum(counts, dim=0)
    start = csum - counts

    log_t_run = torch.zeros(npix, dtype=DTYPE)

    # greedy batches of whole Gaussians, bounded by the fragment budget
    bounds = [0]
    while bounds[-1] < live.numel():
        lo = bounds[-1]
        base = int(start[lo])
        hi = int(torch.searchsorted(csum, base + budget, right=True))
        bounds.append(max(hi, lo + 1))

    for lo, hi in zip(bounds[:-1], bounds[1:]):
        g = live[lo:hi]
        cnt = counts[lo:hi]
        nxb = nx[lo:hi]
        fcount = int(cnt.sum())
        rep = torch.repeat_interleave(torch.arange(hi - lo), cnt)
        fid = torch.arange(fcount) - torch.repeat_interleave(csum[lo:hi] - cnt - int(start[lo]), cnt)
        px = prep.x0[g][rep] + fid % nxb[rep]
        py = yb0[g][rep] + fid // nxb[rep]

        gi = g[rep]
        dx = px.to(DTYPE) - prep.mean_x[gi]
        dy = py.to(DTYPE) - prep.mean_y[gi]
        quad = prep.ia[gi] * dx * dx + 2.0 * prep.ib[gi] * dx * dy + prep.ic[gi] * dy * dy
        ahat = torch.clamp(prep.alpha[gi] * torch.exp(-0.5 * quad), max=ALPHA_CLAMP)
        fmask = (quad <= FOOTPRINT_CHI2) & (ahat >= ALPHA_SKIP)
        if not bool(fmask.any()):
            continue

        eff = ahat[fmask]
        pid = (py[fmask] - row0) * width + px[fmask]
        gsel = gi[fmask]

        order = torch.argsort(pid, stable=True)
        pid = pid[order]
        eff = eff[order]
        gsel = gsel[order]

        log_t = torch.log1p(-eff)
        cs = torch.cumsum(log_t, dim=0)
        excl = cs - log_t
        first = torch.ones_like(pid, dtype=torch.bool)
        first[1:] = pid[1:] != pid[:-1]
        seg_id = torch.cumsum(first.long(), dim=0) - 1
        seg_start = first.nonzero(as_tuple=False).squeeze(-1)
        prefix = excl - excl[seg_start][seg_id]
        trans = torch.exp(prefix + log_t_run[pid])
        w = eff * trans

        rgb = rgb.index_add(0, pid, w.unsqueeze(-1) * prep.color[gsel])
        dep = dep.index_add(0, pid, w * prep.depth[gsel])
        acc = acc.index_add(0, pid, w)

        seg_end = torch.cat([seg_start[1:] - 1, torch.tensor([pid.numel() - 1])])
        seg_total = cs[seg_end] - excl[seg_start]
        log_t_run = log_t_run.index_add(0, pid[seg_start], seg_total)

    return rgb.view(rows, width, 3), dep.view(rows, width), acc.view(rows, width)


def render_with_aux(
    cloud: GaussianCloud,
    cam: CameraPinhole,
    appearance=None,
    *,
    mode: str = "deterministic",
    band_rows: int = 128,
    max_workers: int = 1,
    fragment_budget: int = DEFAULT_FRAGMENT_BUDGET,
) -> tuple[RenderOutput, RenderAux | None]:
    """Render and additionally return per-visible-Gaussian auxiliaries."""
    if cam.width > MAX_IMAGE_DIM or cam.height > MAX_IMAGE_DIM:
        raise ContractError(f"image dimensions exceed the configured max {MAX_IMAGE_DIM}")
    if mode not in ("deterministic", "parallel"):
        raise ContractError(f"unknown render mode {mode!r}")

    h, w = cam.height, cam.width
    prep = _prepare(
        cloud.positions,
        cloud.rotations,
        cloud.log_scales,
        cloud.opacity_logits,
        cloud.sh_coeffs,
        cloud.appearance_codes,
        cam,
        appearance,
    )
    if prep is None:
        zero = torch.zeros((h, w), dtype=DTYPE)
        out = RenderOutput(torch.zeros((h, w, 3), dtype=DTYPE), zero, zero.clone())
        return out, None

    if mode == "deterministic":
        bands = [(0, h)]
    else:
        bands = [(r, min(r + band_rows, h)) for r in range(0, h, band_rows)]

    if len(bands) == 1 or max_workers <= 1:
        pieces = [_composite_band(prep, w, r0, r1, fragment_budget) for r0, r1 in bands]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            pieces = list(
                pool.map(lambda b: _composite_band(prep, w, b[0], b[1], fragment_budget), bands)
            )

    rgb = torch.cat([p[0] for p in pieces], dim=0)
    dep = torch.cat([p[1] for p in pieces], dim=0)
    acc = torch.cat([p[2] for p in pieces], dim=0)

    aux = RenderAux(
        kept=prep.kept,
        mean2d=prep.mean2d,
        radii_px=prep.radius.detach(),
        depths=prep.depth.detach(),
    )
    return RenderOutput(rgb, dep, acc), aux


def render(cloud: GaussianCloud, cam: CameraPinhole, appearance=None, **kwargs) -> RenderOutput:
    """Render RGB / alpha-blended depth / accumulated alpha for one view.

    Pure with respect to the cloud snapshot. An empty or fully culled cloud
    yields a black image with zero alpha (not an error).
    """
    out, _ = render_with_aux(cloud, cam, appearance, **kwargs)
    return out


def render_backward(
    cloud: GaussianCloud,
    cam: CameraPinhole,
    appearance,
    upstream_grad: torch.Tensor,
    **kwargs,
) -> RenderGradients:
    """Gradients of sum(upstream_grad * [rgb, depth, alpha]) w.r.t. the cloud.

    ``upstream_grad`` is (H, W, 5): three RGB channels, then depth, then
    alpha. The chain rule runs through compositing, projection, the
    covariance factorization, and spherical harmonics via autograd over the
    explicit forward graph.
    """
    upstream_grad = torch.as_tensor(upstream_grad, dtype=DTYPE)
    if tuple(upstream_grad.shape) != (cam.height, cam.width, 5):
        raise ContractError(
            f"upstream_grad must have shape {(cam.height, cam.width, 5)}, "
            f"got {tuple(upstream_grad.shape)}"
        )
    n = cloud.count
    leaves = GaussianCloud(
        cloud.positions.detach().clone().requires_grad_(True),
        cloud.rotations.detach().clone().requires_grad_(True),
        cloud.log_scales.detach().clone().requires_grad_(True),
        cloud.opacity_logits.detach().clone().requires_grad_(True),
        cloud.sh_coeffs.detach().clone().requires_grad_(True),
        cloud.appearance_codes.detach().clone().requires_grad_(True),
    )
    out, aux = render_with_aux(leaves, cam, appearance, **kwargs)
    if aux is not None:
        aux.mean2d.retain_grad()
    scalar = (
        (out.rgb * upstream_grad[..., 0:3]).sum()
        + (out.depth * upstream_grad[..., 3]).sum()
        + (out.alpha * upstream_grad[..., 4]).sum()
    )
    if scalar.requires_grad:
        scalar.backward()

    def grad_of(t, like):
        return t.grad if t.grad is not None else torch.zeros_like(like)

    pos2d = torch.zeros(n, dtype=DTYPE)
    visible = torch.zeros(n, dtype=torch.bool)
    if aux is not None:
        visible[aux.kept] = True
        if aux.mean2d.grad is not None:
            scaled = aux.mean2d.grad * torch.tensor([cam.width / 2.0, cam.height / 2.0], dtype=DTYPE)
            pos2d[aux.kept] = scaled.norm(dim=-1)
    return RenderGradients(
        d_positions=grad_of(leaves.positions, cloud.positions),
        d_rotations=grad_of(leaves.rotations, cloud.rotations),
        d_log_scales=grad_of(leaves.log_scales, cloud.log_scales),
        d_opacity_logits=grad_of(leaves.opacity_logits, cloud.opacity_logits),
        d_sh_coeffs=grad_of(leaves.sh_coeffs, cloud.sh_coeffs),
        d_appearance_codes=grad_of(leaves.appearance_codes, cloud.appearance_codes),
        pos2d_grad_norm=pos2d,
        visible=visible,
    )
