"""Procedural city-block scenes for tests and demos.

A scene is a ground plane plus box "buildings", realized directly as a dense
Gaussian cloud so the renderer itself is the image source: the rendered views
double as the "satellite" dataset and the ground-truth depths fall out of the
same render. Optional per-date perturbation (global tint + zero-mean
per-quadrant brightness) emulates appearance variation across capture dates.
Everything is deterministic under the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .datasets import SceneDataset, TrainingImage
from .errors import ContractError
from .geometry import DTYPE, SH_C0, CameraPinhole, GaussianCloud, inverse_sigmoid
from .render import render
from .utils import np_rng
from .views import orbit_center


@dataclass
class SynthSpec:
    """Knobs of the procedural block; defaults sit at the protocol's world
    scale (a ~512-unit block) so the stock pseudo-camera and orbit settings
    look at sensible content."""

    width: float = 512.0
    n_gaussians: int = 2000
    n_buildings: int = 6
    n_views: int = 20
    n_dates: int = 1
    perturb_amplitude: float = 0.0
    elevation_range: tuple[float, float] = (70.0, 85.0)
    azimuth_range_deg: tuple[float, float] | None = None  # None: full circle
    orbit_radius: float | None = None  # default 1.4 * width
    image_size: int = 96
    fov_deg: float = 40.0

    def __post_init__(self):
        if self.n_gaussians < 10:
            raise ContractError("need at least 10 Gaussians")
        if self.n_views < 1 or self.n_dates < 1:
            raise ContractError("need at least one view and one date")
        if self.perturb_amplitude < 0:
            raise ContractError("perturbation amplitude must be non-negative")

    @property
    def radius(self) -> float:
        return self.orbit_radius if self.orbit_radius is not None else 1.4 * self.width


@dataclass
class SyntheticScene:
    spec: SynthSpec
    seed: int
    cloud: GaussianCloud  # ground truth
    view_cameras: list[CameraPinhole]
    depths: list[torch.Tensor]  # per view, date-independent
    dataset: SceneDataset  # n_dates * n_views satellite images
    date_tints: torch.Tensor  # (n_dates, 3)

    @property
    def target(self) -> torch.Tensor:
        return torch.zeros(3, dtype=DTYPE)


def _ground_cloud(rng: np.random.Generator, n: int, width: float):
    g = max(int(math.sqrt(n)), 2)
    spacing = width / g
    coords = (np.arange(g) + 0.5) * spacing - width / 2.0
    xs, ys = np.meshgrid(coords, coords)
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(g * g)], axis=1)
    pts[:, :2] += rng.normal(0.0, 0.08 * spacing, size=(g * g, 2))
    checker = ((xs.ravel() // spacing + ys.ravel() // spacing) % 2).astype(float)
    base = np.where(checker[:, None] > 0, [0.42, 0.42, 0.40], [0.30, 0.33, 0.28])
    colors = np.clip(base + rng.normal(0.0, 0.03, size=(g * g, 3)), 0.05, 0.95)
    scales = np.full((g * g, 3), spacing * 0.55)
    scales[:, 2] = spacing * 0.12  # flat against the ground
    return pts, colors, scales


def _building_cloud(rng: np.random.Generator, n: int, width: float, n_buildings: int):
    pts, cols, scls = [], [], []
    per = max(n // max(n_buildings, 1), 8)
    for _ in range(n_buildings):
        cx, cy = rng.uniform(-0.32 * width, 0.32 * width, size=2)
        hx = rng.uniform(0.04, 0.09) * width
        hy = rng.uniform(0.04, 0.09) * width
        h = rng.uniform(0.10, 0.24) * width
        color = np.clip(rng.uniform(0.25, 0.85, size=3), 0.05, 0.95)
        areas = np.array([4 * hx * hy, 2 * hy * h, 2 * hy * h, 2 * hx * h, 2 * hx * h])
        share = np.maximum((areas / areas.sum() * per).astype(int), 1)
        spacing = math.sqrt(areas.sum() / per)
        for face, count in enumerate(share):
            u = rng.uniform(-1.0, 1.0, size=count)
            v = rng.uniform(-1.0, 1.0, size=count)
            s = np.full((count, 3), spacing * 0.6)
            if face == 0:  # roof
                p = np.stack([cx + u * hx, cy + v * hy, np.full(count, h)], axis=1)
                s[:, 2] = spacing * 0.12
            elif face in (1, 2):  # +x / -x walls
                x = cx + (hx if face == 1 else -hx)
                p = np.stack([np.full(count, x), cy + u * hy, (v + 1) / 2 * h], axis=1)
                s[:, 0] = spacing * 0.12
            else:  # +y / -y walls
                y = cy + (hy if face == 3 else -hy)
                p = np.stack([cx + u * hx, np.full(count, y), (v + 1) / 2 * h], axis=1)
                s[:, 1] = spacing * 0.12
            face_tone = color * (0.75 + 0.25 * rng.random())
            pts.append(p)
            cols.append(np.clip(face_tone + rng.normal(0, 0.02, size=(count, 3)), 0.05, 0.95))
            scls.append(s)
    return np.concatenate(pts), np.concatenate(cols), np.concatenate(scls)


def build_block_cloud(seed: int, spec: SynthSpec) -> GaussianCloud:
    """Ground plane + buildings as a Gaussian cloud with solid opacities."""
    rng = np_rng(seed)
    n_ground = int(spec.n_gaussians * 0.55)
    n_build = max(spec.n_gaussians - n_ground, 8)
    gp, gc, gs = _ground_cloud(rng, n_ground, spec.width)
    bp, bc, bs = _building_cloud(rng, n_build, spec.width, spec.n_buildings)
    pts = torch.as_tensor(np.concatenate([gp, bp]), dtype=DTYPE)
    col = torch.as_tensor(np.concatenate([gc, bc]), dtype=DTYPE)
    scl = torch.as_tensor(np.concatenate([gs, bs]), dtype=DTYPE)
    n = pts.shape[0]
    rot = torch.zeros((n, 4), dtype=DTYPE)
    rot[:, 0] = 1.0
    sh = torch.zeros((n, 4, 3), dtype=DTYPE)
    sh[:, 0, :] = (col - 0.5) / SH_C0
    sh[:, 1:, :] = torch.as_tensor(
        rng.normal(0.0, 0.02, size=(n, 3, 3)), dtype=DTYPE
    )
    logits = torch.full((n,), float(inverse_sigmoid(torch.tensor(0.95, dtype=DTYPE))), dtype=DTYPE)
    return GaussianCloud(pts, rot, torch.log(scl), logits, sh)


def scene_view_cameras(seed: int, spec: SynthSpec) -> list[CameraPinhole]:
    """Capture views; a narrow azimuth sector emulates the limited parallax
    of real overhead collections."""
    rng = np_rng(seed + 1)
    cams = []
    for k in range(spec.n_views):
        if spec.azimuth_range_deg is None:
            azimuth = 2.0 * math.pi * k / spec.n_views + rng.uniform(-0.12, 0.12)
        else:
            a0, a1 = (math.radians(a) for a in spec.azimuth_range_deg)
            frac = k / max(spec.n_views - 1, 1)
            azimuth = a0 + frac * (a1 - a0) + rng.uniform(-0.04, 0.04)
        elevation = rng.uniform(*spec.elevation_range)
        center = orbit_center(torch.zeros(3, dtype=DTYPE), spec.radius, elevation, azimuth)
        cams.append(
            CameraPinhole.look_at(
                center,
                torch.zeros(3, dtype=DTYPE),
                width=spec.image_size,
                height=spec.image_size,
                fov_deg=spec.fov_deg,
                near=0.1,
                far=10.0 * spec.radius,
            )
        )
    return cams


def _date_perturbations(rng: np.random.Generator, n_dates: int, amplitude: float):
    """Per-date global tints spanning +-amplitude plus zero-mean quadrant
    brightness offsets."""
    if n_dates == 1:
        spread = np.zeros(1)
    else:
        spread = np.linspace(-1.0, 1.0, n_dates)
    tints = 1.0 + amplitude * spread[:, None] + rng.normal(
        0.0, 0.10 * amplitude if amplitude else 0.0, size=(n_dates, 3)
    )
    quads = rng.normal(0.0, 0.25 * amplitude if amplitude else 0.0, size=(n_dates, 4))
    quads -= quads.mean(axis=1, keepdims=True)  # keeps per-date mean brightness pure tint
    return torch.as_tensor(tints, dtype=DTYPE), torch.as_tensor(quads, dtype=DTYPE)


def _apply_date(image: torch.Tensor, tint: torch.Tensor, quad: torch.Tensor) -> torch.Tensor:
    out = image * tint
    h, w = image.shape[0], image.shape[1]
    hh, hw = h // 2, w // 2
    out[:hh, :hw] += quad[0]
    out[:hh, hw:] += quad[1]
    out[hh:, :hw] += quad[2]
    out[hh:, hw:] += quad[3]
    return out.clamp(0.0, 1.0)


def synth_scene(seed: int, spec: SynthSpec | None = None) -> SyntheticScene:
    """Generate the block, its cameras, satellite images, and true depths."""
    spec = spec or SynthSpec()
    cloud = build_block_cloud(seed, spec)
    cams = scene_view_cameras(seed, spec)
    rng = np_rng(seed + 2)
    tints, quads = _date_perturbations(rng, spec.n_dates, spec.perturb_amplitude)

    bases = []
    depths = []
    with torch.no_grad():
        for cam in cams:
            out = render(cloud, cam)
            bases.append(out.rgb)
            depths.append(out.depth)

    images = []
    for d in range(spec.n_dates):
        for v, cam in enumerate(cams):
            img = _apply_date(bases[v].clone(), tints[d], quads[d])
            images.append(
                TrainingImage(
                    image=img,
                    camera=cam,
                    provenance="satellite",
                    embedding_index=d * spec.n_views + v,
                )
            )
    return SyntheticScene(
        spec=spec,
        seed=seed,
        cloud=cloud,
        view_cameras=cams,
        depths=depths,
        dataset=SceneDataset(images),
        date_tints=tints,
    )


def sfm_points_from_cloud(
    cloud: GaussianCloud,
    width: float,
    seed: int = 0,
    fraction: float = 0.5,
    pos_noise_frac: float = 0.01,
    color_noise: float = 0.08,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Noisy subsample of a reference surface, standing in for sparse SfM points."""
    rng = np_rng(seed + 3)
    n = cloud.count
    k = max(int(n * fraction), 8)
    idx = rng.choice(n, size=min(k, n), replace=False)
    idx.sort()
    pts = cloud.positions[idx].clone()
    pts += torch.as_tensor(rng.normal(0.0, pos_noise_frac * width, size=(len(idx), 3)), dtype=DTYPE)
    colors = (SH_C0 * cloud.sh_coeffs[idx, 0, :] + 0.5).clone()
    colors += torch.as_tensor(rng.normal(0.0, color_noise, size=(len(idx), 3)), dtype=DTYPE)
    return pts, colors.clamp(0.0, 1.0)


def sfm_like_points(scene: SyntheticScene, seed: int = 0, **kw) -> tuple[torch.Tensor, torch.Tensor]:
    return sfm_points_from_cloud(scene.cloud, scene.spec.width, seed=seed, **kw)
