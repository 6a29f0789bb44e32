"""Command-line interface.

Subcommands: synth-scene, train-sat, idu, render, eval, export-ply. Every
flag can also come from a JSON config file (--config); flags win over the
file, and the SKYFALL_SEED environment variable overrides the file's seed
(but not an explicit --seed flag).

Exit codes: 0 success, 2 usage error, 3 data error, 4 oracle/backend failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .appearance import AppearanceContext, AppearanceModel
from .datasets import SceneDataset, TrainingImage
from .depth import MockAffineDepthOracle
from .errors import ContractError, DataError, OracleError, RefinerError, SkyfallError
from .idu import IduPlan, idu_run
from .losses import LossWeights
from .refiners import make_refiner
from .render import render
from .sceneio import (
    SceneBundle,
    eval_report,
    export_ply,
    load_bundle,
    load_scene_dir,
    save_bundle,
    write_scene_dir,
)
from .synth import SynthSpec, sfm_points_from_cloud, synth_scene
from .train import TrainConfig, init_cloud_from_points, reconstruct_stage
from .utils import save_png
from .views import PRESETS, CurriculumSchedule, LookatGrid, orbit_views

log = logging.getLogger("skyfall")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"config file is not valid JSON: {exc}") from exc


def _resolve_seed(flag_seed: int | None, cfg: dict) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("SKYFALL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ContractError(f"SKYFALL_SEED must be an integer, got {env!r}") from None
    return int(cfg.get("seed", 0))


def train_config_from_dict(d: dict, **overrides) -> TrainConfig:
    """Build a TrainConfig from a config-file section plus flag overrides."""
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    merged = {k: v for k, v in d.items() if k in known}
    unknown = set(d) - known - {"seed"}
    if unknown:
        raise ContractError(f"unknown train config keys: {sorted(unknown)}")
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(merged.get("weights"), dict):
        merged["weights"] = LossWeights(**merged["weights"])
    if isinstance(merged.get("pseudo_elev_range"), list):
        merged["pseudo_elev_range"] = tuple(merged["pseudo_elev_range"])
    if isinstance(merged.get("pseudo_radius_range"), list):
        merged["pseudo_radius_range"] = tuple(merged["pseudo_radius_range"])
    return TrainConfig(**merged)


def _bundle_manifest(dataset: SceneDataset, scene_dir: Path, bundle_path: Path) -> list[dict]:
    entries = []
    for i, item in enumerate(dataset.images):
        if item.path is None:
            continue
        image_abs = (scene_dir / item.path).resolve()
        rel = os.path.relpath(image_abs, bundle_path.resolve().parent)
        entries.append(
            {
                "path": rel,
                "provenance": item.provenance,
                "embedding_index": item.embedding_index,
                "camera": i,
            }
        )
    return entries


def _dataset_from_bundle(bundle: SceneBundle, bundle_path: Path) -> SceneDataset:
    from .utils import load_png

    images = []
    for entry in bundle.manifest:
        p = Path(entry["path"])
        if not p.is_absolute():
            p = bundle_path.parent / p
        images.append(
            TrainingImage(
                image=load_png(p),
                camera=bundle.cameras[entry["camera"]],
                provenance=entry["provenance"],
                embedding_index=entry["embedding_index"],
                path=str(entry["path"]),
            )
        )
    return SceneDataset(images)


# ------------------------------------------------------------------ commands


def cmd_synth_scene(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    spec = SynthSpec(
        width=args.width,
        n_gaussians=args.gaussians,
        n_buildings=args.buildings,
        n_views=args.views,
        n_dates=args.dates,
        perturb_amplitude=args.perturb,
        image_size=args.size,
    )
    scene = synth_scene(seed, spec)
    write_scene_dir(scene, args.out)
    print(f"wrote scene with {scene.cloud.count} Gaussians, "
          f"{len(scene.dataset)} images to {args.out}")
    return 0


def cmd_train_sat(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    dataset, cameras, manifest, gt = load_scene_dir(args.scene)
    config = train_config_from_dict(
        cfg.get("train", {}), total_iters=args.iters, log_path=args.log, seed=seed
    )

    width = float(manifest.get("spec", {}).get("width", 512.0))
    if gt is None:
        raise DataError("scene directory lacks gt_cloud.ply; cannot derive seed points")
    points, colors = sfm_points_from_cloud(gt, width, seed)
    init = init_cloud_from_points(points, colors, seed=seed)
    model = AppearanceModel(n_images=len(dataset), seed=seed)

    oracle = None
    if args.oracle == "mock:affine":
        oracle = MockAffineDepthOracle(gt, seed=seed)
    elif args.oracle not in (None, "none"):
        raise ContractError(f"unknown depth oracle {args.oracle!r}")

    cloud, model, _ = reconstruct_stage(dataset, config, init, model, oracle)
    out_path = Path(args.out)
    bundle = SceneBundle(
        cloud=cloud,
        model=model,
        cameras=[im.camera for im in dataset.images],
        manifest=_bundle_manifest(dataset, Path(args.scene), out_path),
        config={"train": dataclasses.asdict(config), "scene": str(args.scene)},
        seed=seed,
    )
    save_bundle(bundle, out_path)
    print(f"trained {cloud.count} Gaussians over {config.total_iters} iterations -> {out_path}")
    return 0


def cmd_idu(args) -> int:
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed, cfg)
    bundle_path = Path(args.ckpt)
    bundle = load_bundle(bundle_path)
    dataset = _dataset_from_bundle(bundle, bundle_path)

    preset = PRESETS[args.preset]
    idu_cfg = cfg.get("idu", {})
    n_views = args.views if args.views is not None else idu_cfg.get("n_views", preset.n_views)
    n_samples = args.samples if args.samples is not None else idu_cfg.get("n_samples", preset.n_samples)
    render_size = args.render_size if args.render_size is not None else idu_cfg.get("render_size", 2048)
    episodes = args.episodes if args.episodes is not None else idu_cfg.get("n_episodes", 5)
    train_cfg = train_config_from_dict(cfg.get("train", {}), seed=seed)
    if args.iters is not None:
        train_cfg = dataclasses.replace(train_cfg, episode_iters=args.iters)
    if episodes >= 2:
        schedule = preset.schedule(episodes)
    else:
        full = preset.schedule(2)
        schedule = CurriculumSchedule(full.elevations_deg[:episodes], full.radii[:episodes])
    plan = IduPlan(
        n_episodes=episodes,
        n_views=n_views,
        n_samples=n_samples,
        lookats=preset.lookats,
        schedule=schedule,
        render_size=render_size,
        train=train_cfg,
        seed=seed,
    )

    refiner = make_refiner(args.refiner)
    result = idu_run(bundle.cloud, bundle.model, plan, dataset, refiner)
    if not result.status.startswith("ok"):
        log.error("synthesis loop stopped early: %s", result.status)
    out_path = Path(args.out)
    new_config = dict(bundle.config)
    new_config["idu"] = {
        "episodes": episodes,
        "status": result.status,
        "fixed_embedding_index": result.fixed_embedding_index,
        "refiner": args.refiner,
    }
    manifest = [dict(e) for e in bundle.manifest]
    for entry in manifest:
        p = Path(entry["path"])
        if not p.is_absolute():
            entry["path"] = os.path.relpath((bundle_path.parent / p).resolve(), out_path.resolve().parent)
    save_bundle(
        SceneBundle(
            cloud=result.cloud,
            model=result.model,
            cameras=bundle.cameras,
            manifest=manifest,
            config=new_config,
            seed=seed,
        ),
        out_path,
    )
    print(f"synthesis {result.status}; {result.cloud.count} Gaussians -> {out_path}")
    return 0 if result.status == "ok" else 4


def cmd_render(args) -> int:
    bundle = load_bundle(args.ckpt)
    try:
        elev, radius, n = args.orbit.split(",")
        elev, radius, n = float(elev), float(radius), int(n)
    except ValueError:
        raise ContractError("--orbit expects 'elevation_deg,radius,n_views'") from None
    cams = orbit_views(LookatGrid.single(), radius, elev, n, image_size=args.size)
    context = None
    if bundle.model is not None and bundle.model.n_images:
        idx = bundle.config.get("idu", {}).get("fixed_embedding_index") or 0
        context = AppearanceContext(bundle.model, image_index=int(idx))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i, cam in enumerate(cams):
            save_png(render(bundle.cloud, cam, context).rgb, out / f"v{i:03d}.png")
    print(f"rendered {len(cams)} views -> {out}")
    return 0


def cmd_eval(args) -> int:
    report = eval_report(args.pred, args.ref)
    print(report)
    if args.out:
        report.to_csv(args.out)
    return 0


def cmd_export_ply(args) -> int:
    bundle = load_bundle(args.ckpt)
    export_ply(bundle.cloud, args.out)
    print(f"exported {bundle.cloud.count} Gaussians -> {args.out}")
    return 0


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skyfall", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="generate a procedural city-block dataset")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--dates", type=int, default=1)
    p.add_argument("--perturb", type=float, default=0.0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--width", type=float, default=512.0)
    p.add_argument("--gaussians", type=int, default=2000)
    p.add_argument("--buildings", type=int, default=6)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("train-sat", help="reconstruction stage on a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--oracle", default="none", help="mock:affine | none")
    p.add_argument("--log", default=None, help="CSV progress log path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train_sat)

    p = sub.add_parser("idu", help="synthesis stage: iterative dataset update")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--refiner", required=True, help="mock:identity | mock:blur[:s] | mock:noise[:s] | http://host:port")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--iters", type=int, default=None, help="iterations per episode")
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--render-size", type=int, default=None)
    p.add_argument("--preset", default="dfc2019", choices=sorted(PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_idu)

    p = sub.add_parser("render", help="render an orbit from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--orbit", required=True, help="elevation_deg,radius,n_views")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM between two render directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None, help="also write a CSV table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="export a checkpoint as splat PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OracleError, RefinerError) as exc:
        print(f"oracle/backend failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, SkyfallError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
