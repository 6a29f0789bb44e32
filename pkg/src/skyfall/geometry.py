"""Gaussian-cloud parameterization, pinhole cameras, spherical harmonics, and
the EWA screen-space projection that every other module consumes.

Conventions (stated once, all modules conform):
  * world frame is right-handed with z up (ground plane is z = 0);
  * camera frame is right-handed, looks down +z, image y grows downward;
  * pixel centers sit at integer coordinates, so a W-wide image spans
    x in [0, W-1] and the principal point of a centered camera is (W-1)/2;
  * quaternions are (w, x, y, z) and unit-norm.

All tensors are float64: desk scale makes double precision affordable and it
keeps finite-difference gradient checks meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError, ParameterError

DTYPE = torch.float64

# Real spherical-harmonics basis constants, degree 0 and 1.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

SH_BASIS = 4  # one DC + three degree-1 coefficients
APPEARANCE_CODE_DIM = 24

# Screen-space dilation added to both diagonal entries of every projected
# covariance (px^2): anti-aliasing floor, also keeps the 2x2 invertible.
SCREEN_DILATION = 0.3

QUAT_NORM_TOL = 1e-6


def tensorize(x, shape: tuple[int, ...] | None = None) -> torch.Tensor:
    """Convert to a float64 tensor, optionally checking the trailing shape."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if shape is not None and tuple(t.shape[-len(shape):]) != shape:
        raise ContractError(f"expected trailing shape {shape}, got {tuple(t.shape)}")
    return t


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrix for unit quaternion(s) (w, x, y, z); shape (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a*b, both (..., 4) in (w, x, y, z) order."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_about_axis(axis, angle_rad: float) -> torch.Tensor:
    axis = tensorize(axis, (3,))
    axis = axis / axis.norm()
    half = angle_rad / 2.0
    return torch.cat([torch.tensor([math.cos(half)], dtype=DTYPE), math.sin(half) * axis])


def covariance_from_params(q: torch.Tensor, log_scales: torch.Tensor) -> torch.Tensor:
    """World-space covariance R S^2 R^T from unit quaternion(s) and log-scale(s).

    Accepts a single (4,)/(3,) pair or batches (..., 4)/(..., 3). The factored
    form is PSD by construction; eigenvalues are exp(2 * log_scales).
    """
    q = tensorize(q, (4,))
    log_scales = tensorize(log_scales, (3,))
    norm_err = (q.norm(dim=-1) - 1.0).abs()
    if bool((norm_err > QUAT_NORM_TOL).any()):
        raise ParameterError(
            f"quaternion norm deviates from 1 by {float(norm_err.max()):.3e} "
            f"(tolerance {QUAT_NORM_TOL})"
        )
    rot = quat_to_rotmat(quat_normalize(q))
    var = torch.exp(2.0 * log_scales)
    return rot @ (var.unsqueeze(-1) * rot.transpose(-1, -2))


def sh_eval(sh_coeffs: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
    """View-dependent RGB from degree-0/1 spherical harmonics.

    ``sh_coeffs`` is (..., 4, 3) with basis order [DC, -y, +z, -x] (standard
    splat layout), ``view_dir`` a unit (..., 3). The DC convention maps the
    stored coefficient to color via c * Y00 + 0.5.
    """
    sh_coeffs = tensorize(sh_coeffs, (SH_BASIS, 3))
    view_dir = tensorize(view_dir, (3,))
    norm_err = (view_dir.norm(dim=-1) - 1.0).abs()
    if bool((norm_err > QUAT_NORM_TOL).any()):
        raise ParameterError("view_dir must be unit-norm within 1e-6")
    x, y, z = view_dir[..., 0:1], view_dir[..., 1:2], view_dir[..., 2:3]
    rgb = (
        SH_C0 * sh_coeffs[..., 0, :]
        - SH_C1 * y * sh_coeffs[..., 1, :]
        + SH_C1 * z * sh_coeffs[..., 2, :]
        - SH_C1 * x * sh_coeffs[..., 3, :]
    )
    return rgb + 0.5


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1.0 - x))


@dataclass
class GaussianCloud:
    """All per-Gaussian optimizable parameters.

    positions (N, 3) world units; rotations (N, 4) unit quaternions;
    log_scales (N, 3) log world units; opacity_logits (N,) with
    alpha = sigmoid(logit); sh_coeffs (N, 4, 3); appearance_codes (N, 24).
    """

    positions: torch.Tensor
    rotations: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh_coeffs: torch.Tensor
    appearance_codes: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.positions = tensorize(self.positions, (3,))
        self.rotations = tensorize(self.rotations, (4,))
        self.log_scales = tensorize(self.log_scales, (3,))
        self.opacity_logits = tensorize(self.opacity_logits)
        self.sh_coeffs = tensorize(self.sh_coeffs, (SH_BASIS, 3))
        n = self.positions.shape[0]
        if self.appearance_codes is None:
            self.appearance_codes = torch.zeros((n, APPEARANCE_CODE_DIM), dtype=DTYPE)
        else:
            self.appearance_codes = tensorize(self.appearance_codes, (APPEARANCE_CODE_DIM,))
        shapes = {
            "rotations": (self.rotations, (n, 4)),
            "log_scales": (self.log_scales, (n, 3)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "sh_coeffs": (self.sh_coeffs, (n, SH_BASIS, 3)),
            "appearance_codes": (self.appearance_codes, (n, APPEARANCE_CODE_DIM)),
        }
        for name, (t, want) in shapes.items():
            if tuple(t.shape) != want:
                raise ContractError(f"{name} has shape {tuple(t.shape)}, expected {want}")

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def covariances(self) -> torch.Tensor:
        return covariance_from_params(quat_normalize(self.rotations), self.log_scales)

    def renormalize_rotations_(self) -> None:
        with torch.no_grad():
            self.rotations.copy_(quat_normalize(self.rotations))

    def detached(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.detach().clone(),
            self.rotations.detach().clone(),
            self.log_scales.detach().clone(),
            self.opacity_logits.detach().clone(),
            self.sh_coeffs.detach().clone(),
            self.appearance_codes.detach().clone(),
        )

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.sh_coeffs[index],
            self.appearance_codes[index],
        )

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            torch.zeros((0, 3), dtype=DTYPE),
            torch.zeros((0, 4), dtype=DTYPE),
            torch.zeros((0, 3), dtype=DTYPE),
            torch.zeros((0,), dtype=DTYPE),
            torch.zeros((0, SH_BASIS, 3), dtype=DTYPE),
            torch.zeros((0, APPEARANCE_CODE_DIM), dtype=DTYPE),
        )

    @staticmethod
    def concatenate(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(
            torch.cat([a.positions, b.positions]),
            torch.cat([a.rotations, b.rotations]),
            torch.cat([a.log_scales, b.log_scales]),
            torch.cat([a.opacity_logits, b.opacity_logits]),
            torch.cat([a.sh_coeffs, b.sh_coeffs]),
            torch.cat([a.appearance_codes, b.appearance_codes]),
        )


@dataclass
class CameraPinhole:
    """Rigid pose + intrinsics for one perspective view.

    ``rotation`` is world-to-camera; a world point p maps to camera space as
    R p + t. fx/fy/cx/cy are in pixels.
    """

    rotation: torch.Tensor
    translation: torch.Tensor
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 1e4

    def __post_init__(self):
        self.rotation = tensorize(self.rotation, (3, 3))
        self.translation = tensorize(self.translation, (3,))
        rtr = self.rotation @ self.rotation.T
        if float((rtr - torch.eye(3, dtype=DTYPE)).abs().max()) > 1e-6:
            raise ParameterError("camera rotation is not orthonormal within 1e-6")
        if float(torch.det(self.rotation)) < 0:
            raise ParameterError("camera rotation must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ParameterError("require 0 < near < far")

    @property
    def center(self) -> torch.Tensor:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        points = tensorize(points, (3,))
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(
        center,
        target,
        width: int,
        height: int,
        fov_deg: float = 20.0,
        near: float = 0.1,
        far: float = 1e4,
    ) -> "CameraPinhole":
        """Camera at ``center`` looking at ``target`` with world z as up.

        Rejects optical axes parallel to the up vector (degenerate frame).
        """
        center = tensorize(center, (3,))
        target = tensorize(target, (3,))
        fwd = target - center
        dist = float(fwd.norm())
        if dist == 0.0:
            raise ParameterError("camera center and target coincide")
        fwd = fwd / dist
        up = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)
        right = torch.linalg.cross(fwd, up)
        if float(right.norm()) < 1e-8:
            raise ParameterError("optical axis parallel to the up vector")
        right = right / right.norm()
        down = torch.linalg.cross(fwd, right)
        rot = torch.stack([right, down, fwd])
        fx = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return CameraPinhole(
            rotation=rot,
            translation=-rot @ center,
            fx=fx,
            fy=fx,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            near=near,
            far=far,
        )


def project_points(positions: torch.Tensor, cam: CameraPinhole):
    """Batched pinhole projection.

    Returns (mean2d (N, 2) px, depth (N,), in_front (N,) bool). Entries behind
    the near plane hold garbage in mean2d; callers must cull by the mask.
    """
    p_cam = positions @ cam.rotation.T + cam.translation
    depth = p_cam[:, 2]
    in_front = depth > cam.near
    z = torch.where(in_front, depth, torch.ones_like(depth))
    u = cam.fx * p_cam[:, 0] / z + cam.cx
    v = cam.fy * p_cam[:, 1] / z + cam.cy
    return torch.stack([u, v], dim=-1), depth, in_front


def project_covariances(
    positions: torch.Tensor, covariances: torch.Tensor, cam: CameraPinhole
) -> torch.Tensor:
    """EWA projection J W Sigma W^T J^T + dilation for each Gaussian.

    ``positions`` must already be culled to points in front of the camera;
    the Jacobian J is the affine approximation of the pinhole map at the mean.
    """
    p_cam = positions @ cam.rotation.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    zero = torch.zeros_like(z)
    row0 = torch.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], dim=-1)
    row1 = torch.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], dim=-1)
    jac = torch.stack([row0, row1], dim=-2)  # (N, 2, 3)
    m = jac @ cam.rotation
    cov2d = m @ covariances @ m.transpose(-1, -2)
    return cov2d + SCREEN_DILATION * torch.eye(2, dtype=DTYPE)


def project_gaussian(mean, cov, cam: CameraPinhole):
    """Project one world-space Gaussian to screen space.

    Returns (mean2d (2,), cov2d (2, 2), depth) or None when the mean lies at
    or behind the near plane (a culling signal, not a fault).
    """
    mean = tensorize(mean, (3,)).reshape(1, 3)
    cov = tensorize(cov, (3, 3)).reshape(1, 3, 3)
    mean2d, depth, in_front = project_points(mean, cam)
    if not bool(in_front[0]):
        return None
    cov2d = project_covariances(mean, cov, cam)
    return mean2d[0], cov2d[0], float(depth[0])


def scene_extent(cameras: list[CameraPinhole], targets: torch.Tensor | None = None) -> float:
    """Radius of the bounding sphere of camera centers and look-at targets.

    Used as the self-scaling reference for densification thresholds and the
    position learning rate.
    """
    pts = [cam.center for cam in cameras]
    if targets is not None and targets.numel():
        pts.extend(tensorize(targets, (3,)).reshape(-1, 3))
    stack = torch.stack(pts) if pts else torch.zeros((1, 3), dtype=DTYPE)
    centroid = stack.mean(dim=0)
    return float((stack - centroid).norm(dim=-1).max())
