"""Pseudo-camera sampling for depth supervision and orbital view generation
with the per-episode descent schedule.

Elevation/radius schedules are linear and inclusive of both endpoints.
Pseudo-camera look-at points are drawn on the ground plane with
x, y ~ Normal(0, sigma=128) — standard deviation, matching a 512-unit block
footprint — and the per-iteration elevation/radius interpolate from
(80 deg, 300) down to (45 deg, 250).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .geometry import DTYPE, CameraPinhole

DEFAULT_FOV_DEG = 20.0

PSEUDO_LOOKAT_SIGMA = 128.0
PSEUDO_ELEV_RANGE = (80.0, 45.0)
PSEUDO_RADIUS_RANGE = (300.0, 250.0)
PSEUDO_IMAGE_SIZE = 1024


@dataclass(frozen=True)
class CurriculumSchedule:
    """Per-episode camera elevation (strictly decreasing, degrees) and orbit
    radius (non-increasing, world units)."""

    elevations_deg: tuple[float, ...]
    radii: tuple[float, ...]

    def __post_init__(self):
        if len(self.elevations_deg) != len(self.radii):
            raise ContractError("elevation and radius sequences differ in length")
        if any(b >= a for a, b in zip(self.elevations_deg, self.elevations_deg[1:])):
            raise ContractError("elevations must be strictly decreasing")
        if any(b > a for a, b in zip(self.radii, self.radii[1:])):
            raise ContractError("radii must be non-increasing")

    def __len__(self) -> int:
        return len(self.elevations_deg)


def curriculum_schedule(
    n_episodes: int,
    elev_start: float = 85.0,
    elev_end: float = 45.0,
    radius_start: float = 300.0,
    radius_end: float = 250.0,
) -> CurriculumSchedule:
    """Linear schedule over ``n_episodes`` inclusive of both endpoints."""
    if n_episodes < 2:
        raise ContractError("a schedule needs at least 2 episodes")
    if elev_start <= elev_end:
        raise ContractError("elevations must decrease across episodes")
    steps = n_episodes - 1
    elev = tuple(elev_start + i * (elev_end - elev_start) / steps for i in range(n_episodes))
    radii = tuple(radius_start + i * (radius_end - radius_start) / steps for i in range(n_episodes))
    return CurriculumSchedule(elev, radii)


@dataclass(frozen=True)
class LookatGrid:
    """Ground-plane (z = 0) look-at points."""

    points: torch.Tensor  # (P, 3)

    def __post_init__(self):
        pts = torch.as_tensor(self.points, dtype=DTYPE).reshape(-1, 3)
        if pts.numel() and float(pts[:, 2].abs().max()) > 0:
            raise ContractError("look-at points must lie on the ground plane z = 0")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @staticmethod
    def grid(rows: int = 3, cols: int = 3, width: float = 512.0) -> "LookatGrid":
        """rows x cols grid spanning ``width`` units, centered at the origin."""
        xs = np.linspace(-width / 2.0, width / 2.0, cols) if cols > 1 else np.zeros(1)
        ys = np.linspace(-width / 2.0, width / 2.0, rows) if rows > 1 else np.zeros(1)
        pts = [(x, y, 0.0) for y in ys for x in xs]
        return LookatGrid(torch.tensor(pts, dtype=DTYPE))

    @staticmethod
    def single(x: float = 0.0, y: float = 0.0) -> "LookatGrid":
        return LookatGrid(torch.tensor([[x, y, 0.0]], dtype=DTYPE))


def orbit_center(point: torch.Tensor, radius: float, elevation_deg: float, azimuth_rad: float):
    e = math.radians(elevation_deg)
    offset = torch.tensor(
        [
            radius * math.cos(e) * math.cos(azimuth_rad),
            radius * math.cos(e) * math.sin(azimuth_rad),
            radius * math.sin(e),
        ],
        dtype=DTYPE,
    )
    return point + offset


def orbit_views(
    points: LookatGrid,
    radius: float,
    elevation_deg: float,
    n_views: int,
    *,
    image_size: int = 1024,
    fov_deg: float = DEFAULT_FOV_DEG,
    near: float = 0.1,
) -> list[CameraPinhole]:
    """Cameras on orbital rings: ``n_views`` uniformly spaced azimuths around
    every look-at point, all aimed at their point with world z as up."""
    if not (0.0 < elevation_deg < 90.0):
        raise ContractError("elevation must lie strictly between 0 and 90 degrees")
    if radius <= 0:
        raise ContractError("radius must be positive")
    if n_views < 1:
        raise ContractError("need at least one view per look-at point")
    cams = []
    for point in points.points:
        for k in range(n_views):
            azimuth = 2.0 * math.pi * k / n_views
            center = orbit_center(point, radius, elevation_deg, azimuth)
            cams.append(
                CameraPinhole.look_at(
                    center,
                    point,
                    width=image_size,
                    height=image_size,
                    fov_deg=fov_deg,
                    near=near,
                    far=10.0 * radius,
                )
            )
    return cams


def sample_pseudo_lookats(
    rng: np.random.Generator, n: int, sigma: float = PSEUDO_LOOKAT_SIGMA
) -> np.ndarray:
    """Ground-plane look-at draws: x, y ~ Normal(0, sigma), z = 0; (n, 3)."""
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.normal(0.0, sigma, size=(n, 2))
    return pts


def pseudo_schedule(iteration: int, total_iters: int, elev_range, radius_range):
    """Linear per-iteration interpolation of (elevation_deg, radius)."""
    t = 0.0 if total_iters <= 0 else min(max(iteration / total_iters, 0.0), 1.0)
    elevation = elev_range[0] + t * (elev_range[1] - elev_range[0])
    radius = radius_range[0] + t * (radius_range[1] - radius_range[0])
    return elevation, radius


def sample_pseudo_cameras(
    rng: np.random.Generator,
    iteration: int,
    total_iters: int,
    n: int = 24,
    *,
    image_size: int = PSEUDO_IMAGE_SIZE,
    fov_deg: float = DEFAULT_FOV_DEG,
    lookat_sigma: float = PSEUDO_LOOKAT_SIGMA,
    elev_range: tuple[float, float] = PSEUDO_ELEV_RANGE,
    radius_range: tuple[float, float] = PSEUDO_RADIUS_RANGE,
) -> list[CameraPinhole]:
    """Seeded pseudo-cameras for depth supervision.

    Elevation and radius interpolate linearly in iteration/total_iters from
    (80 deg, 300) to (45 deg, 250); azimuths are uniform in [0, 2pi) and
    look-at points are ground-plane normal draws.
    """
    elevation, radius = pseudo_schedule(iteration, total_iters, elev_range, radius_range)
    lookats = sample_pseudo_lookats(rng, n, lookat_sigma)
    azimuths = rng.uniform(0.0, 2.0 * math.pi, size=n)
    cams = []
    for i in range(n):
        point = torch.as_tensor(lookats[i], dtype=DTYPE)
        center = orbit_center(point, radius, elevation, azimuths[i])
        cams.append(
            CameraPinhole.look_at(
                center,
                point,
                width=image_size,
                height=image_size,
                fov_deg=fov_deg,
                near=0.1,
                far=10.0 * radius,
            )
        )
    return cams


@dataclass(frozen=True)
class ViewPreset:
    """Named orbit/schedule preset selectable from the config file.

    ``declared_lookats`` records the nominal look-at count of the preset
    separately from the actual point layout; the two are independent fields
    on purpose (presets with a single orbit center still advertise their
    nominal count).
    """

    name: str
    lookats: LookatGrid
    n_views: int = 6
    n_samples: int = 2
    elev_start: float = 85.0
    elev_end: float = 45.0
    radius_start: float = 300.0
    radius_end: float = 250.0
    declared_lookats: int | None = None

    def schedule(self, n_episodes: int = 5) -> CurriculumSchedule:
        return curriculum_schedule(
            n_episodes, self.elev_start, self.elev_end, self.radius_start, self.radius_end
        )


PRESETS: dict[str, ViewPreset] = {
    "dfc2019": ViewPreset(name="dfc2019", lookats=LookatGrid.grid(3, 3, 512.0)),
    "googleearth": ViewPreset(
        name="googleearth",
        lookats=LookatGrid.single(),
        radius_start=600.0,
        radius_end=600.0,
        declared_lookats=16,
    ),
}
