"""Per-episode render -> refine -> retrain loop with the descent schedule.

Each episode renders orbit views of the current model, sends them through the
refinement oracle (N_s independent samples per view, all of which enter the
training pool with equal weight), and retrains on the refined set mixed with
the original satellite images. Refined datasets from earlier episodes are
discarded when a new episode's dataset arrives.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from .appearance import AppearanceContext, AppearanceModel
from .datasets import SceneDataset, TrainingImage
from .depth import DepthOracle
from .errors import ContractError, RefinerError, TrainingDiverged
from .geometry import CameraPinhole, GaussianCloud
from .refiners import (
    DEFAULT_N_MAX,
    DEFAULT_N_MIN,
    DEFAULT_SOURCE_PROMPT,
    DEFAULT_TARGET_PROMPT,
    RefinerRequest,
    validate_response,
)
from .render import render
from .train import TrainConfig, train_episode
from .utils import derive_seed, np_rng
from .views import CurriculumSchedule, LookatGrid, curriculum_schedule, orbit_views

log = logging.getLogger(__name__)


@dataclass
class IduPlan:
    """Episode schedule, orbit layout, and refiner parameters for one run."""

    n_episodes: int = 5
    n_views: int = 6
    n_samples: int = 2
    lookats: LookatGrid = field(default_factory=lambda: LookatGrid.grid(3, 3, 512.0))
    schedule: CurriculumSchedule = field(default_factory=lambda: curriculum_schedule(5))
    source_prompt: str = DEFAULT_SOURCE_PROMPT
    target_prompt: str = DEFAULT_TARGET_PROMPT
    n_min: int = DEFAULT_N_MIN
    n_max: int = DEFAULT_N_MAX
    render_size: int = 2048
    fov_deg: float = 20.0
    train: TrainConfig = field(default_factory=TrainConfig)
    max_concurrent_refine: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")
        if len(self.schedule) != self.n_episodes:
            raise ContractError(
                f"schedule length {len(self.schedule)} != n_episodes {self.n_episodes}"
            )
        if not self.source_prompt or not self.target_prompt:
            raise ContractError("prompts must be non-empty")


@dataclass
class EpisodeRecord:
    index: int
    elevation_deg: float
    radius: float
    n_rendered: int
    n_refined: int
    cameras: list[CameraPinhole]


@dataclass
class IduResult:
    cloud: GaussianCloud
    model: AppearanceModel | None
    episodes: list[EpisodeRecord]
    status: str
    fixed_embedding_index: int | None


def refine_views(
    renders: list[tuple[CameraPinhole, torch.Tensor]],
    plan: IduPlan,
    refiner,
    seed_salt: int = 0,
) -> SceneDataset:
    """Refine every rendered view into ``n_samples`` training targets.

    Requests for distinct views may run concurrently (bounded by the plan);
    results are order-stabilized by view index. A backend failure aborts the
    episode with a partial-results report.
    """

    def one(view_index: int):
        cam, image = renders[view_index]
        request = RefinerRequest(
            image=image,
            source_prompt=plan.source_prompt,
            target_prompt=plan.target_prompt,
            n_min=plan.n_min,
            n_max=plan.n_max,
            num_samples=plan.n_samples,
            seed=derive_seed(plan.seed, seed_salt, view_index),
        )
        response = refiner.refine(request)
        validate_response(request, response)
        return [
            TrainingImage(image=im, camera=cam, provenance="refined")
            for im in response.images
        ]

    results: list[list[TrainingImage] | None] = [None] * len(renders)
    try:
        if plan.max_concurrent_refine > 1 and len(renders) > 1:
            with ThreadPoolExecutor(max_workers=plan.max_concurrent_refine) as pool:
                for i, items in enumerate(pool.map(one, range(len(renders)))):
                    results[i] = items
        else:
            for i in range(len(renders)):
                results[i] = one(i)
    except RefinerError as exc:
        done = sum(r is not None for r in results)
        raise RefinerError(
            f"refinement failed after {done}/{len(renders)} views: {exc}",
            completed=done,
            total=len(renders),
        ) from exc
    images: list[TrainingImage] = []
    for items in results:
        images.extend(items or [])
    return SceneDataset(images)


def idu_run(
    cloud: GaussianCloud,
    model: AppearanceModel | None,
    plan: IduPlan,
    satellite_dataset: SceneDataset,
    refiner,
    depth_oracle: DepthOracle | None = None,
) -> IduResult:
    """Run the full synthesis loop and return the refined cloud.

    The appearance embedding is selected uniformly at random (seeded) once at
    the start and held fixed for every episode render; satellite draws inside
    episode training keep their own per-image embeddings. An episode failure
    stops the loop and returns the last good checkpoint with diagnostics.
    """
    rng = np_rng(derive_seed(plan.seed, 0xF1D0))
    fixed_index = None
    fixed_embedding = None
    if model is not None and model.n_images:
        fixed_index = int(rng.integers(model.n_images))
        fixed_embedding = model.embeddings[fixed_index].detach().clone()

    current = cloud
    episodes: list[EpisodeRecord] = []
    for i in range(plan.n_episodes):
        elevation = plan.schedule.elevations_deg[i]
        radius = plan.schedule.radii[i]
        cams = orbit_views(
            plan.lookats,
            radius,
            elevation,
            plan.n_views,
            image_size=plan.render_size,
            fov_deg=plan.fov_deg,
        )
        context = None
        if model is not None and fixed_embedding is not None:
            context = AppearanceContext(model, embedding=fixed_embedding)
        with torch.no_grad():
            renders = [
                (cam, render(current, cam, context, mode=plan.train.render_mode)) for cam in cams
            ]
        renders = [(cam, out.rgb) for cam, out in renders]

        try:
            refined = refine_views(renders, plan, refiner, seed_salt=i)
        except RefinerError as exc:
            log.error("episode %d refinement failed: %s", i, exc)
            return IduResult(current, model, episodes, f"failed:episode_{i}:{exc}", fixed_index)

        try:
            current, model, _stats = train_episode(
                current,
                refined,
                satellite_dataset,
                plan.train,
                model,
                fixed_embedding,
                depth_oracle,
            )
        except TrainingDiverged as exc:
            log.error("episode %d training diverged: %s", i, exc)
            return IduResult(current, model, episodes, f"failed:episode_{i}:{exc}", fixed_index)

        episodes.append(
            EpisodeRecord(
                index=i,
                elevation_deg=elevation,
                radius=radius,
                n_rendered=len(cams),
                n_refined=len(refined),
                cameras=cams,
            )
        )
    return IduResult(current, model, episodes, "ok", fixed_index)
