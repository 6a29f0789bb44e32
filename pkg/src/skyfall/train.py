"""Optimization loop for the reconstruction stage and per-episode synthesis
training: parameter updates, densification, pruning, scheduling.

One Trainer owns the mutable cloud and appearance model (single writer).
Rendering inside a step may parallelize internally; pseudo-camera depth
oracle queries may run concurrently and are joined before the loss forms.
Training is deterministic given (seed, config, datasets).
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .appearance import AppearanceContext, AppearanceModel
from .datasets import SceneDataset, TrainingImage
from .depth import DepthOracle, estimate_depth
from .errors import ContractError, OracleError, TrainingDiverged
from .geometry import DTYPE, GaussianCloud, inverse_sigmoid, quat_normalize, quat_to_rotmat
from .losses import LossWeights, loss_color, loss_depth, opacity_entropy
from .render import render_with_aux
from .utils import derive_seed, np_rng, torch_generator
from .views import (
    PSEUDO_ELEV_RANGE,
    PSEUDO_IMAGE_SIZE,
    PSEUDO_LOOKAT_SIGMA,
    PSEUDO_RADIUS_RANGE,
    sample_pseudo_cameras,
)

log = logging.getLogger(__name__)

PER_GAUSSIAN_GROUPS = ("xyz", "f_dc", "f_rest", "opacity", "scaling", "rotation", "app_codes")


@dataclass
class TrainConfig:
    """Hyperparameters for one optimization run (reconstruction or episode)."""

    total_iters: int = 30_000
    seed: int = 0

    # densification / pruning
    densify_start: int = 1_000
    densify_end: int = 21_000
    densify_interval: int = 100
    densify_grad_threshold: float = 0.001
    opacity_reset_interval: int = 3_000
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    max_covariance_prune: float = 20.0
    max_screen_px: float | None = None  # None: footprint beyond max(W, H)

    # learning rates (position LR is scaled by the scene extent and decays
    # exponentially to its final value over total_iters)
    position_lr_init: float = 0.00016
    position_lr_final: float = 1.6e-6
    position_lr_delay_mult: float = 0.01
    feature_lr: float = 0.0025
    opacity_lr: float = 0.05
    scaling_lr: float = 0.001
    rotation_lr: float = 0.001
    embed_lr: float = 0.001
    gauss_code_lr: float = 0.005
    mlp_lr: float = 0.0005
    adam_eps: float = 1e-15

    # pseudo-camera depth supervision
    pseudo_interval: int = 10
    pseudo_views: int = 24
    pseudo_size: int = PSEUDO_IMAGE_SIZE
    pseudo_fov_deg: float = 20.0
    pseudo_lookat_sigma: float = PSEUDO_LOOKAT_SIGMA
    pseudo_elev_range: tuple[float, float] = PSEUDO_ELEV_RANGE
    pseudo_radius_range: tuple[float, float] = PSEUDO_RADIUS_RANGE
    oracle_workers: int = 4

    weights: LossWeights = field(default_factory=LossWeights)
    depth_variant: str = "one_minus_corr"

    # episode training
    episode_iters: int = 10_000
    episode_densify_end: int = 9_000
    refined_fraction: float = 0.75

    # rendering
    render_mode: str = "deterministic"
    band_rows: int = 128
    render_workers: int = 1
    fragment_budget: int = 1 << 20

    assert_finite_every: int = 500
    log_path: str | None = None

    def __post_init__(self):
        if self.total_iters > 0 and not (
            0 <= self.densify_start < self.densify_end <= self.total_iters
        ):
            raise ContractError("require 0 <= densify_start < densify_end <= total_iters")
        for name in ("densify_grad_threshold", "min_opacity", "max_covariance_prune"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not (0.0 <= self.refined_fraction <= 1.0):
            raise ContractError("refined_fraction must lie in [0, 1]")

    def for_episode(self) -> "TrainConfig":
        end = min(self.episode_densify_end, self.episode_iters)
        start = min(self.densify_start, max(end - 1, 0))
        return dataclasses.replace(
            self,
            total_iters=self.episode_iters,
            densify_start=start,
            densify_end=end,
        )


def expon_lr(
    step: int,
    lr_init: float,
    lr_final: float,
    max_steps: int,
    delay_mult: float = 1.0,
    delay_steps: int = 0,
) -> float:
    """Log-linear decay from lr_init to lr_final with an optional warmup dip."""
    if lr_init == 0.0:
        return 0.0
    t = min(max(step / max(max_steps, 1), 0.0), 1.0)
    lr = math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)
    if delay_steps > 0:
        delay = delay_mult + (1 - delay_mult) * math.sin(
            0.5 * math.pi * min(max(step / delay_steps, 0.0), 1.0)
        )
        lr *= delay
    return lr


def sample_mixing(rng: np.random.Generator, n: int, refined_fraction: float) -> np.ndarray:
    """Per-step dataset choice for episode training: True draws refined."""
    return rng.random(n) < refined_fraction


def init_cloud_from_points(
    points: torch.Tensor,
    colors: torch.Tensor,
    seed: int = 0,
    initial_opacity: float = 0.6,
) -> GaussianCloud:
    """Seed a cloud from SfM-like points: isotropic scales from mean
    3-nearest-neighbor distance, identity rotations, DC-only color.

    Opacity starts above the entropy regularizer's watershed at 0.5 so the
    binary-opacity pull saturates surface splats instead of erasing them."""
    from scipy.spatial import cKDTree

    points = torch.as_tensor(points, dtype=DTYPE).reshape(-1, 3)
    colors = torch.as_tensor(colors, dtype=DTYPE).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        return GaussianCloud.empty()
    if n >= 4:
        tree = cKDTree(points.numpy())
        dist, _ = tree.query(points.numpy(), k=4)
        mean_dist = np.clip(dist[:, 1:].mean(axis=1), 1e-7, None)
    else:
        mean_dist = np.full(n, 0.1)
    log_scales = torch.log(torch.as_tensor(mean_dist, dtype=DTYPE)).unsqueeze(-1).expand(n, 3)
    rot = torch.zeros((n, 4), dtype=DTYPE)
    rot[:, 0] = 1.0
    sh = torch.zeros((n, 4, 3), dtype=DTYPE)
    sh[:, 0, :] = (colors.clamp(0.0, 1.0) - 0.5) / 0.28209479177387814
    logits = torch.full((n,), float(inverse_sigmoid(torch.tensor(initial_opacity, dtype=DTYPE))), dtype=DTYPE)
    return GaussianCloud(points.clone(), rot, log_scales.clone(), logits, sh)


@dataclass
class StepLog:
    iteration: int
    loss_color: float
    loss_op: float
    loss_depth: float
    num_gaussians: int


class Trainer:
    """Single-writer optimizer over a cloud + appearance model."""

    def __init__(
        self,
        cloud: GaussianCloud,
        model: AppearanceModel | None,
        config: TrainConfig,
        scene_extent: float,
        depth_oracle: DepthOracle | None = None,
    ):
        self.config = config
        self.extent = max(scene_extent, 1e-6)
        self.oracle = depth_oracle
        self.model = model
        self.rng = np_rng(config.seed)
        self.tgen = torch_generator(derive_seed(config.seed, 1))
        self._perm: list[int] = []
        self._mix_perms: dict[str, list[int]] = {"refined": [], "satellite": []}
        self.step_logs: list[StepLog] = []
        self._csv = None

        def leaf(t):
            return t.detach().clone().requires_grad_(True)

        self._xyz = leaf(cloud.positions)
        self._rot = leaf(cloud.rotations)
        self._scale = leaf(cloud.log_scales)
        self._logit = leaf(cloud.opacity_logits)
        self._sh_dc = leaf(cloud.sh_coeffs[:, :1, :])
        self._sh_rest = leaf(cloud.sh_coeffs[:, 1:, :])
        self._codes = leaf(cloud.appearance_codes)

        groups = [
            {"params": [self._xyz], "lr": config.position_lr_init * self.extent, "name": "xyz"},
            {"params": [self._sh_dc], "lr": config.feature_lr, "name": "f_dc"},
            {"params": [self._sh_rest], "lr": config.feature_lr / 20.0, "name": "f_rest"},
            {"params": [self._logit], "lr": config.opacity_lr, "name": "opacity"},
            {"params": [self._scale], "lr": config.scaling_lr, "name": "scaling"},
            {"params": [self._rot], "lr": config.rotation_lr, "name": "rotation"},
            {"params": [self._codes], "lr": config.gauss_code_lr, "name": "app_codes"},
        ]
        if model is not None:
            model.embeddings = model.embeddings.detach().clone().requires_grad_(True)
            mlp = [p.detach().clone().requires_grad_(True) for p in model.mlp_parameters()]
            model.w1, model.b1, model.w2, model.b2, model.w3, model.b3 = mlp
            groups.append({"params": [model.embeddings], "lr": config.embed_lr, "name": "app_embed"})
            groups.append({"params": mlp, "lr": config.mlp_lr, "name": "app_mlp"})
        self.optimizer = torch.optim.Adam(groups, lr=0.0, betas=(0.9, 0.999), eps=config.adam_eps)

        n = cloud.count
        self.grad_accum = torch.zeros(n, dtype=DTYPE)
        self.grad_denom = torch.zeros(n, dtype=DTYPE)
        self.max_radii = torch.zeros(n, dtype=DTYPE)
        self.screen_bound = 0.0

        if config.log_path:
            path = Path(config.log_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._csv = path.open("w", newline="")
            self._writer = csv.writer(self._csv)
            self._writer.writerow(["iter", "loss_color", "loss_op", "loss_depth", "num_gaussians"])

    # ------------------------------------------------------------------ state

    @property
    def count(self) -> int:
        return int(self._xyz.shape[0])

    def cloud(self) -> GaussianCloud:
        return GaussianCloud(
            self._xyz,
            self._rot,
            self._scale,
            self._logit,
            torch.cat([self._sh_dc, self._sh_rest], dim=1),
            self._codes,
        )

    def snapshot(self) -> GaussianCloud:
        return self.cloud().detached()

    def close(self):
        if self._csv is not None:
            self._csv.close()
            self._csv = None

    def _group(self, name: str):
        for g in self.optimizer.param_groups:
            if g["name"] == name:
                return g
        raise KeyError(name)

    # ------------------------------------------------------------- rendering

    def _render(self, cam, context):
        out, aux = render_with_aux(
            self.cloud(),
            cam,
            context,
            mode=self.config.render_mode,
            band_rows=self.config.band_rows,
            max_workers=self.config.render_workers,
            fragment_budget=self.config.fragment_budget,
        )
        if aux is not None:
            aux.mean2d.retain_grad()
        self.screen_bound = max(self.screen_bound, float(max(cam.width, cam.height)))
        return out, aux

    def _harvest_stats(self, aux, cam):
        if aux is None or aux.mean2d.grad is None:
            return
        with torch.no_grad():
            scale = torch.tensor([cam.width / 2.0, cam.height / 2.0], dtype=DTYPE)
            norms = (aux.mean2d.grad * scale).norm(dim=-1)
            self.grad_accum.index_add_(0, aux.kept, norms)
            self.grad_denom.index_add_(0, aux.kept, torch.ones_like(norms))
            self.max_radii[aux.kept] = torch.maximum(self.max_radii[aux.kept], aux.radii_px)

    # ------------------------------------------------------------- optimizer

    def check_finite(self):
        for g in self.optimizer.param_groups:
            for p in g["params"]:
                if not bool(torch.isfinite(p).all()):
                    raise TrainingDiverged(f"parameter class {g['name']!r} became non-finite")

    def _check_grad_finite(self):
        for g in self.optimizer.param_groups:
            for p in g["params"]:
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise TrainingDiverged(f"NaN gradient in parameter class {g['name']!r}")

    def optimizer_step(self, iteration: int):
        """One adaptive-moment update; quaternions renormalized afterwards."""
        self._check_grad_finite()
        self._group("xyz")["lr"] = expon_lr(
            iteration,
            self.config.position_lr_init * self.extent,
            self.config.position_lr_final * self.extent,
            self.config.total_iters,
            self.config.position_lr_delay_mult,
        )
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        with torch.no_grad():
            self._rot.copy_(quat_normalize(self._rot))

    # --------------------------------------------------------- densification

    def _replace_per_gaussian(self, name: str, new_tensor: torch.Tensor, keep=None, extra=None):
        """Swap a per-Gaussian parameter tensor, carrying Adam state through
        prune masks and zero-padding it for appended rows."""
        group = self._group(name)
        old = group["params"][0]
        state = self.optimizer.state.pop(old, None)
        new_param = new_tensor.detach().clone().requires_grad_(True)
        if state is not None:
            if keep is not None:
                state["exp_avg"] = state["exp_avg"][keep]
                state["exp_avg_sq"] = state["exp_avg_sq"][keep]
            if extra is not None and extra > 0:
                pad = new_param.shape[0] - state["exp_avg"].shape[0]
                zeros = torch.zeros((pad, *new_param.shape[1:]), dtype=DTYPE)
                state["exp_avg"] = torch.cat([state["exp_avg"], zeros])
                state["exp_avg_sq"] = torch.cat([state["exp_avg_sq"], zeros.clone()])
            self.optimizer.state[new_param] = state
        group["params"][0] = new_param
        return new_param

    def _apply_cloud_edit(self, keep_mask: torch.Tensor | None, appended: GaussianCloud | None):
        tensors = {
            "xyz": self._xyz,
            "f_dc": self._sh_dc,
            "f_rest": self._sh_rest,
            "opacity": self._logit,
            "scaling": self._scale,
            "rotation": self._rot,
            "app_codes": self._codes,
        }
        added = {}
        if appended is not None and appended.count:
            added = {
                "xyz": appended.positions,
                "f_dc": appended.sh_coeffs[:, :1, :],
                "f_rest": appended.sh_coeffs[:, 1:, :],
                "opacity": appended.opacity_logits,
                "scaling": appended.log_scales,
                "rotation": appended.rotations,
                "app_codes": appended.appearance_codes,
            }
        n_extra = appended.count if appended is not None else 0
        new = {}
        for name, tensor in tensors.items():
            data = tensor.detach()
            if keep_mask is not None:
                data = data[keep_mask]
            if name in added:
                data = torch.cat([data, added[name].detach()])
            new[name] = self._replace_per_gaussian(name, data, keep=keep_mask, extra=n_extra)
        self._xyz = new["xyz"]
        self._sh_dc = new["f_dc"]
        self._sh_rest = new["f_rest"]
        self._logit = new["opacity"]
        self._scale = new["scaling"]
        self._rot = new["rotation"]
        self._codes = new["app_codes"]
        n = self.count
        self.grad_accum = torch.zeros(n, dtype=DTYPE)
        self.grad_denom = torch.zeros(n, dtype=DTYPE)
        self.max_radii = torch.zeros(n, dtype=DTYPE)

    def densify_and_prune(self, iteration: int, allow_growth: bool = True):
        """Clone small / split large high-gradient Gaussians inside the
        densification window, then prune dead, oversized, or over-screen ones."""
        cfg = self.config
        with torch.no_grad():
            mean_grad = self.grad_accum / self.grad_denom.clamp(min=1.0)
            mean_grad = torch.nan_to_num(mean_grad, nan=0.0)
            scales = torch.exp(self._scale)
            max_scale = scales.max(dim=1).values

            appended = None
            split_mask = torch.zeros(self.count, dtype=torch.bool)
            if allow_growth and cfg.densify_start <= iteration <= cfg.densify_end:
                hot = mean_grad > cfg.densify_grad_threshold
                small = max_scale < cfg.percent_dense * self.extent
                clone_mask = hot & small
                split_mask = hot & ~small

                pieces = []
                if bool(clone_mask.any()):
                    pieces.append(self.snapshot().select(clone_mask))
                if bool(split_mask.any()):
                    src = self.snapshot().select(split_mask)
                    rotmat = quat_to_rotmat(quat_normalize(src.rotations))
                    for _ in range(2):
                        offsets = torch.normal(
                            torch.zeros_like(src.positions),
                            torch.exp(src.log_scales),
                            generator=self.tgen,
                        )
                        child = GaussianCloud(
                            src.positions + (rotmat @ offsets.unsqueeze(-1)).squeeze(-1),
                            src.rotations.clone(),
                            src.log_scales - math.log(1.6),
                            src.opacity_logits.clone(),
                            src.sh_coeffs.clone(),
                            src.appearance_codes.clone(),
                        )
                        pieces.append(child)
                if pieces:
                    appended = pieces[0]
                    for extra in pieces[1:]:
                        appended = GaussianCloud.concatenate(appended, extra)

            alpha = torch.sigmoid(self._logit)
            prune = alpha < cfg.min_opacity
            prune |= torch.exp(2.0 * self._scale).max(dim=1).values > cfg.max_covariance_prune
            bound = cfg.max_screen_px if cfg.max_screen_px is not None else self.screen_bound
            if bound:
                prune |= self.max_radii > bound
            prune |= split_mask  # split sources are replaced by their children
            keep = ~prune
        if appended is not None or bool(prune.any()):
            self._apply_cloud_edit(keep if bool(prune.any()) else None, appended)

    def reset_opacity(self):
        with torch.no_grad():
            alpha = torch.sigmoid(self._logit).clamp(max=0.01)
            self._logit.copy_(inverse_sigmoid(alpha))
        state = self.optimizer.state.get(self._logit)
        if state is not None:
            state["exp_avg"].zero_()
            state["exp_avg_sq"].zero_()

    # ------------------------------------------------------------ loss steps

    def _context_for(self, image: TrainingImage):
        if self.model is None or image.embedding_index is None:
            return None
        return AppearanceContext(self.model, image_index=image.embedding_index)

    def _pseudo_depth_term(self, iteration: int):
        """Render pseudo cameras and correlate their depth with the oracle's.

        Oracle queries run on a bounded pool; any oracle failure downgrades
        the step to color-only (fail-soft) with a logged warning.
        """
        cfg = self.config
        cams = sample_pseudo_cameras(
            self.rng,
            iteration,
            cfg.total_iters,
            n=cfg.pseudo_views,
            image_size=cfg.pseudo_size,
            fov_deg=cfg.pseudo_fov_deg,
            lookat_sigma=cfg.pseudo_lookat_sigma,
            elev_range=cfg.pseudo_elev_range,
            radius_range=cfg.pseudo_radius_range,
        )
        context = None
        if self.model is not None and self.model.n_images:
            idx = int(self.rng.integers(self.model.n_images))
            context = AppearanceContext(self.model, image_index=idx)
        renders = []
        for cam in cams:
            out, aux = self._render(cam, context)
            renders.append((cam, out, aux))

        def query(item):
            cam, out, _ = item
            return estimate_depth(self.oracle, out.rgb.detach(), cam)

        try:
            if cfg.oracle_workers > 1 and len(renders) > 1:
                with ThreadPoolExecutor(max_workers=cfg.oracle_workers) as pool:
                    estimates = list(pool.map(query, renders))
            else:
                estimates = [query(r) for r in renders]
        except OracleError as exc:
            log.warning("depth oracle failed at iteration %d: %s (term skipped)", iteration, exc)
            return None, []

        terms = []
        auxes = []
        for (cam, out, aux), est in zip(renders, estimates):
            mask = (out.alpha >= 0.5).detach()
            terms.append(loss_depth(out.depth, est, mask, self.config.depth_variant))
            auxes.append((aux, cam))
        return torch.stack(terms).mean(), auxes

    def _next_image(self, dataset: SceneDataset, pool: str = "default") -> int:
        perm = self._perm if pool == "default" else self._mix_perms[pool]
        if not perm:
            perm.extend(self.rng.permutation(len(dataset)).tolist())
        return perm.pop()

    def _write_log(self, entry: StepLog):
        self.step_logs.append(entry)
        if self._csv is not None:
            self._writer.writerow(
                [
                    entry.iteration,
                    f"{entry.loss_color:.8f}",
                    f"{entry.loss_op:.8f}",
                    f"{entry.loss_depth:.8f}",
                    entry.num_gaussians,
                ]
            )

    def _post_step(self, iteration: int, allow_growth: bool = True):
        cfg = self.config
        self.optimizer_step(iteration)
        if iteration < cfg.densify_end and iteration >= cfg.densify_start:
            if iteration % cfg.densify_interval == 0:
                self.densify_and_prune(iteration, allow_growth=allow_growth)
        if iteration < cfg.densify_end and cfg.opacity_reset_interval > 0:
            if iteration > 0 and iteration % cfg.opacity_reset_interval == 0:
                self.reset_opacity()
        if cfg.assert_finite_every and iteration % cfg.assert_finite_every == 0:
            self.check_finite()

    def step_satellite(self, iteration: int, dataset: SceneDataset):
        """One reconstruction step: color + opacity entropy, plus the depth
        term on the pseudo-camera cadence."""
        cfg = self.config
        image = dataset[self._next_image(dataset)]
        out, aux = self._render(image.camera, self._context_for(image))
        color = loss_color(out.rgb, image.image, cfg.weights.lambda_dssim)
        total = color
        entropy_val = 0.0
        if cfg.weights.lambda_op > 0:
            entropy = opacity_entropy(torch.sigmoid(self._logit))
            total = total + cfg.weights.lambda_op * entropy
            entropy_val = float(entropy.detach())

        depth_val = 0.0
        pseudo_auxes = []
        use_depth = (
            self.oracle is not None
            and cfg.weights.lambda_depth > 0
            and cfg.pseudo_interval > 0
            and iteration % cfg.pseudo_interval == 0
        )
        if use_depth:
            term, pseudo_auxes = self._pseudo_depth_term(iteration)
            if term is not None:
                total = total + cfg.weights.lambda_depth * term
                depth_val = float(term.detach())

        if total.requires_grad:
            total.backward()
        self._harvest_stats(aux, image.camera)
        for paux, pcam in pseudo_auxes:
            self._harvest_stats(paux, pcam)
        self._write_log(StepLog(iteration, float(color.detach()), entropy_val, depth_val, self.count))
        self._post_step(iteration)

    def step_episode(self, iteration: int, refined: SceneDataset, satellite: SceneDataset,
                     fixed_embedding: torch.Tensor | None, use_refined: bool):
        """One synthesis-episode step: color (+ cadence depth), no entropy."""
        cfg = self.config
        if use_refined and len(refined):
            image = refined[self._next_image(refined, "refined")]
            context = None
            if self.model is not None and fixed_embedding is not None:
                context = AppearanceContext(self.model, embedding=fixed_embedding)
        else:
            image = satellite[self._next_image(satellite, "satellite")]
            context = self._context_for(image)
        out, aux = self._render(image.camera, context)
        color = loss_color(out.rgb, image.image, cfg.weights.lambda_dssim)
        total = color

        depth_val = 0.0
        pseudo_auxes = []
        use_depth = (
            self.oracle is not None
            and cfg.weights.lambda_depth > 0
            and cfg.pseudo_interval > 0
            and iteration % cfg.pseudo_interval == 0
        )
        if use_depth:
            term, pseudo_auxes = self._pseudo_depth_term(iteration)
            if term is not None:
                total = total + cfg.weights.lambda_depth * term
                depth_val = float(term.detach())

        if total.requires_grad:
            total.backward()
        self._harvest_stats(aux, image.camera)
        for paux, pcam in pseudo_auxes:
            self._harvest_stats(paux, pcam)
        self._write_log(StepLog(iteration, float(color.detach()), 0.0, depth_val, self.count))
        self._post_step(iteration)


def reconstruct_stage(
    dataset: SceneDataset,
    config: TrainConfig,
    init: GaussianCloud,
    model: AppearanceModel | None = None,
    depth_oracle: DepthOracle | None = None,
    scene_targets: torch.Tensor | None = None,
) -> tuple[GaussianCloud, AppearanceModel | None, list[StepLog]]:
    """Fit a cloud (+ appearance) to satellite views per the stage objective."""
    if len(dataset) == 0:
        raise ContractError("need at least one training image")
    from .geometry import scene_extent as extent_of

    extent = extent_of(dataset.cameras, scene_targets)
    trainer = Trainer(init, model, config, extent, depth_oracle)
    try:
        for it in range(1, config.total_iters + 1):
            trainer.step_satellite(it, dataset)
    finally:
        trainer.close()
    return trainer.snapshot(), trainer.model, trainer.step_logs


def train_episode(
    cloud: GaussianCloud,
    refined_dataset: SceneDataset,
    satellite_dataset: SceneDataset,
    config: TrainConfig,
    model: AppearanceModel | None = None,
    fixed_embedding: torch.Tensor | None = None,
    depth_oracle: DepthOracle | None = None,
    scene_targets: torch.Tensor | None = None,
) -> tuple[GaussianCloud, AppearanceModel | None, dict]:
    """One synthesis episode: mixed refined/satellite sampling, episode loss."""
    if len(refined_dataset) == 0:
        raise ContractError("episode training requires a non-empty refined dataset")
    from .geometry import scene_extent as extent_of

    cfg = config.for_episode()
    cams = refined_dataset.cameras + satellite_dataset.cameras
    extent = extent_of(cams, scene_targets)
    trainer = Trainer(cloud, model, cfg, extent, depth_oracle)
    draws = sample_mixing(trainer.rng, cfg.total_iters, cfg.refined_fraction)
    if len(satellite_dataset) == 0:
        draws = np.ones_like(draws)
    try:
        for it in range(1, cfg.total_iters + 1):
            trainer.step_episode(
                it, refined_dataset, satellite_dataset, fixed_embedding, bool(draws[it - 1])
            )
    finally:
        trainer.close()
    stats = {
        "refined_draws": int(draws.sum()),
        "satellite_draws": int((~draws).sum()),
        "logs": trainer.step_logs,
    }
    return trainer.snapshot(), trainer.model, stats
