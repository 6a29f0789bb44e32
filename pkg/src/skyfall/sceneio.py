"""Persistence: splat-PLY interop, the versioned scene bundle, synthetic-scene
directories, and the evaluation report.

All on-disk formats are byte-stable: little-endian fixed-width numerics, no
timestamps, fully specified field orders.

The PLY layout matches the splat ecosystem (float32 properties x, y, z,
nx..nz zeros, f_dc_0..2, f_rest_0..8, opacity logit, scale_0..2 log,
rot_0..3), so exports load directly in mainstream viewers. f_rest is
channel-major: f_rest_[c*3 + k] holds degree-1 basis k for channel c.
Per-Gaussian appearance codes are not part of the interchange format and
import as zeros; the bundle is the lossless container.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .appearance import AppearanceModel
from .datasets import SceneDataset, TrainingImage
from .errors import (
    BundleChecksumError,
    BundleError,
    BundleVersionError,
    DataError,
    PlyParseError,
)
from .geometry import DTYPE, CameraPinhole, GaussianCloud
from .losses import psnr, ssim
from .utils import load_png, save_png, sha256_hex

PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(9)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)

BUNDLE_MAGIC = b"SKYBNDL1"
BUNDLE_VERSION = 1


# ---------------------------------------------------------------------- PLY


def export_ply(cloud: GaussianCloud, path: str | Path) -> None:
    """Write the cloud as binary little-endian splat PLY (float32)."""
    n = cloud.count
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        + "".join(f"property float {name}\n" for name in PLY_PROPERTIES)
        + "end_header\n"
    )
    data = np.zeros((n, len(PLY_PROPERTIES)), dtype="<f4")
    data[:, 0:3] = cloud.positions.numpy()
    # normals stay zero
    data[:, 6:9] = cloud.sh_coeffs[:, 0, :].numpy()
    rest = cloud.sh_coeffs[:, 1:, :].permute(0, 2, 1).reshape(n, 9)  # channel-major
    data[:, 9:18] = rest.numpy()
    data[:, 18] = cloud.opacity_logits.numpy()
    data[:, 19:22] = cloud.log_scales.numpy()
    data[:, 22:26] = cloud.rotations.numpy()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def import_ply(path: str | Path) -> GaussianCloud:
    """Parse a splat PLY written by :func:`export_ply` (inverts it exactly).

    Malformed headers, unknown property layouts, and truncated payloads
    raise PlyParseError carrying the byte offset of the failure.
    """
    raw = Path(path).read_bytes()
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if not raw.startswith(b"ply\n"):
        raise PlyParseError("missing 'ply' magic", offset=0)
    if end < 0:
        raise PlyParseError("header is not terminated by end_header", offset=len(raw))
    header_lines = raw[:end].decode("ascii", errors="replace").split("\n")
    payload_off = end + len(end_marker)

    count = None
    props: list[str] = []
    offset = 0
    for line in header_lines:
        stripped = line.strip()
        if stripped == "format binary_little_endian 1.0":
            pass
        elif stripped.startswith("format"):
            raise PlyParseError(f"unsupported format line {stripped!r}", offset=offset)
        elif stripped.startswith("element vertex"):
            try:
                count = int(stripped.split()[-1])
            except ValueError:
                raise PlyParseError("bad vertex count", offset=offset) from None
        elif stripped.startswith("element"):
            raise PlyParseError(f"unsupported element {stripped!r}", offset=offset)
        elif stripped.startswith("property"):
            parts = stripped.split()
            if len(parts) != 3 or parts[1] != "float":
                raise PlyParseError(f"unsupported property {stripped!r}", offset=offset)
            props.append(parts[2])
        offset += len(line) + 1
    if count is None:
        raise PlyParseError("missing 'element vertex' declaration", offset=payload_off)
    missing = [p for p in PLY_PROPERTIES if p not in props]
    if missing:
        raise PlyParseError(f"missing required properties: {', '.join(missing)}", offset=payload_off)

    want = count * len(props) * 4
    if len(raw) - payload_off < want:
        raise PlyParseError(
            f"payload truncated: need {want} bytes, have {len(raw) - payload_off}",
            offset=len(raw),
        )
    table = np.frombuffer(raw, dtype="<f4", count=count * len(props), offset=payload_off)
    table = table.reshape(count, len(props))
    col = {name: i for i, name in enumerate(props)}

    def grab(names):
        idx = [col[n] for n in names]
        return torch.as_tensor(np.ascontiguousarray(table[:, idx]), dtype=DTYPE)

    sh = torch.zeros((count, 4, 3), dtype=DTYPE)
    sh[:, 0, :] = grab([f"f_dc_{i}" for i in range(3)])
    rest = grab([f"f_rest_{i}" for i in range(9)]).reshape(count, 3, 3)
    sh[:, 1:, :] = rest.permute(0, 2, 1)
    return GaussianCloud(
        positions=grab(["x", "y", "z"]),
        rotations=grab([f"rot_{i}" for i in range(4)]),
        log_scales=grab([f"scale_{i}" for i in range(3)]),
        opacity_logits=grab(["opacity"]).squeeze(-1),
        sh_coeffs=sh,
    )


# -------------------------------------------------------------------- bundle


@dataclass
class SceneBundle:
    """Lossless checkpoint: cloud, appearance model, cameras, manifest,
    config snapshot, and the run seed."""

    cloud: GaussianCloud
    model: AppearanceModel | None
    cameras: list[CameraPinhole]
    manifest: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: int = BUNDLE_VERSION


def _pack_cameras(cameras: list[CameraPinhole]):
    m = len(cameras)
    rot = torch.zeros((m, 3, 3), dtype=DTYPE)
    trans = torch.zeros((m, 3), dtype=DTYPE)
    intr = torch.zeros((m, 8), dtype=DTYPE)
    for i, cam in enumerate(cameras):
        rot[i] = cam.rotation
        trans[i] = cam.translation
        intr[i] = torch.tensor(
            [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.near, cam.far],
            dtype=DTYPE,
        )
    return rot, trans, intr


def _unpack_cameras(rot, trans, intr) -> list[CameraPinhole]:
    cams = []
    for i in range(rot.shape[0]):
        fx, fy, cx, cy, w, h, near, far = (float(v) for v in intr[i])
        cams.append(
            CameraPinhole(
                rotation=rot[i],
                translation=trans[i],
                fx=fx,
                fy=fy,
                cx=cx,
                cy=cy,
                width=int(w),
                height=int(h),
                near=near,
                far=far,
            )
        )
    return cams


def _validate_manifest(manifest: list[dict], base: Path) -> None:
    for entry in manifest:
        p = Path(entry["path"])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise BundleError(f"manifest references missing image file {p}")


def save_bundle(bundle: SceneBundle, path: str | Path) -> None:
    """Serialize to a single byte-stable file with a payload checksum."""
    path = Path(path)
    arrays: dict[str, torch.Tensor] = {
        "cloud/positions": bundle.cloud.positions,
        "cloud/rotations": bundle.cloud.rotations,
        "cloud/log_scales": bundle.cloud.log_scales,
        "cloud/opacity_logits": bundle.cloud.opacity_logits,
        "cloud/sh_coeffs": bundle.cloud.sh_coeffs,
        "cloud/appearance_codes": bundle.cloud.appearance_codes,
    }
    if bundle.model is not None:
        for name, tensor in bundle.model.state_arrays().items():
            arrays[f"app/{name}"] = tensor
    rot, trans, intr = _pack_cameras(bundle.cameras)
    arrays["cams/rotations"] = rot
    arrays["cams/translations"] = trans
    arrays["cams/intrinsics"] = intr

    _validate_manifest(bundle.manifest, path.parent)

    payload = io.BytesIO()
    table = []
    for name in sorted(arrays):
        arr = arrays[name].detach().to(DTYPE).numpy().astype("<f8")
        blob = arr.tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "offset": payload.tell(), "nbytes": len(blob)}
        )
        payload.write(blob)
    blob = payload.getvalue()

    header = {
        "format_version": bundle.version,
        "payload_sha256": sha256_hex(blob),
        "seed": bundle.seed,
        "has_model": bundle.model is not None,
        "manifest": bundle.manifest,
        "config": bundle.config,
        "arrays": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_bundle(path: str | Path) -> SceneBundle:
    """Read and verify a bundle; refuses unknown future versions."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read bundle: {exc}") from exc
    if len(raw) < len(BUNDLE_MAGIC) + 4 or not raw.startswith(BUNDLE_MAGIC):
        raise BundleError("not a scene bundle (bad magic)")
    head_len = struct.unpack_from("<I", raw, len(BUNDLE_MAGIC))[0]
    head_start = len(BUNDLE_MAGIC) + 4
    try:
        header = json.loads(raw[head_start : head_start + head_len])
    except json.JSONDecodeError as exc:
        raise BundleError(f"corrupt bundle header: {exc}") from exc
    version = header.get("format_version")
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"bundle format version {version} is not supported")
    blob = raw[head_start + head_len :]
    if sha256_hex(blob) != header["payload_sha256"]:
        raise BundleChecksumError("payload checksum mismatch")

    arrays = {}
    for entry in header["arrays"]:
        arr = np.frombuffer(
            blob, dtype="<f8", count=int(np.prod(entry["shape"], initial=1)), offset=entry["offset"]
        ).reshape(entry["shape"])
        arrays[entry["name"]] = torch.as_tensor(arr.copy(), dtype=DTYPE)

    cloud = GaussianCloud(
        positions=arrays["cloud/positions"],
        rotations=arrays["cloud/rotations"],
        log_scales=arrays["cloud/log_scales"],
        opacity_logits=arrays["cloud/opacity_logits"],
        sh_coeffs=arrays["cloud/sh_coeffs"],
        appearance_codes=arrays["cloud/appearance_codes"],
    )
    model = None
    if header.get("has_model"):
        model = AppearanceModel.from_state(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("app/")}
        )
    cameras = _unpack_cameras(
        arrays["cams/rotations"], arrays["cams/translations"], arrays["cams/intrinsics"]
    )
    _validate_manifest(header["manifest"], path.parent)
    return SceneBundle(
        cloud=cloud,
        model=model,
        cameras=cameras,
        manifest=header["manifest"],
        config=header["config"],
        seed=header["seed"],
        version=version,
    )


# ------------------------------------------------------- scene directories


def write_scene_dir(scene, out_dir: str | Path) -> None:
    """Materialize a synthetic scene: PNG images, cameras, depths, manifest,
    and the ground-truth cloud (as splat PLY)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)

    entries = []
    for i, item in enumerate(scene.dataset.images):
        date = i // scene.spec.n_views
        view = i % scene.spec.n_views
        rel = f"images/d{date:02d}_v{view:03d}.png"
        save_png(item.image, out / rel)
        entries.append(
            {
                "path": rel,
                "provenance": item.provenance,
                "embedding_index": item.embedding_index,
                "camera": view,
                "date": date,
            }
        )
    for v, depth in enumerate(scene.depths):
        np.save(out / "depths" / f"v{v:03d}.npy", depth.numpy().astype("<f8"))

    rot, trans, intr = _pack_cameras(scene.view_cameras)
    cameras = {
        "rotations": rot.numpy().tolist(),
        "translations": trans.numpy().tolist(),
        "intrinsics": intr.numpy().tolist(),
    }
    (out / "cameras.json").write_text(json.dumps(cameras, sort_keys=True, indent=1))
    manifest = {
        "seed": scene.seed,
        "spec": dataclasses.asdict(scene.spec),
        "n_views": scene.spec.n_views,
        "n_dates": scene.spec.n_dates,
        "images": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    export_ply(scene.cloud, out / "gt_cloud.ply")


def load_scene_dir(scene_dir: str | Path):
    """Load a scene directory -> (dataset, view cameras, manifest dict,
    ground-truth cloud or None)."""
    root = Path(scene_dir)
    manifest_path = root / "manifest.json"
    cameras_path = root / "cameras.json"
    if not manifest_path.exists() or not cameras_path.exists():
        raise DataError(f"{root} is not a scene directory (missing manifest/cameras)")
    manifest = json.loads(manifest_path.read_text())
    cams_raw = json.loads(cameras_path.read_text())
    cameras = _unpack_cameras(
        torch.tensor(cams_raw["rotations"], dtype=DTYPE),
        torch.tensor(cams_raw["translations"], dtype=DTYPE),
        torch.tensor(cams_raw["intrinsics"], dtype=DTYPE),
    )
    images = []
    for entry in manifest["images"]:
        img_path = root / entry["path"]
        if not img_path.exists():
            raise DataError(f"manifest references missing image {img_path}")
        images.append(
            TrainingImage(
                image=load_png(img_path),
                camera=cameras[entry["camera"]],
                provenance=entry["provenance"],
                embedding_index=entry["embedding_index"],
                path=entry["path"],
            )
        )
    gt = None
    gt_path = root / "gt_cloud.ply"
    if gt_path.exists():
        gt = import_ply(gt_path)
    return SceneDataset(images), cameras, manifest, gt


# ------------------------------------------------------------------- report


@dataclass
class EvalRow:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]

    @property
    def mean_psnr(self) -> float:
        return sum(r.psnr_db for r in self.rows) / len(self.rows)

    @property
    def mean_ssim(self) -> float:
        return sum(r.ssim for r in self.rows) / len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        lines = ["name,psnr_db,ssim"]
        lines += [f"{r.name},{r.psnr_db:.6f},{r.ssim:.6f}" for r in self.rows]
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def __str__(self) -> str:
        width = max([len(r.name) for r in self.rows] + [4])
        out = [f"{'view':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>7}"]
        for r in self.rows:
            out.append(f"{r.name:<{width}}  {r.psnr_db:9.3f}  {r.ssim:7.4f}")
        out.append(f"{'mean':<{width}}  {self.mean_psnr:9.3f}  {self.mean_ssim:7.4f}")
        return "\n".join(out)


def eval_report(pred_dir: str | Path, ref_dir: str | Path) -> EvalReport:
    """Per-view PSNR/SSIM between two directories of equally named PNGs."""
    pred = sorted(Path(pred_dir).glob("*.png"))
    ref = sorted(Path(ref_dir).glob("*.png"))
    if len(pred) == 0:
        raise DataError(f"no PNG files in {pred_dir}")
    if len(pred) != len(ref):
        raise DataError(f"view count mismatch: {len(pred)} predictions vs {len(ref)} references")
    rows = []
    for p, r in zip(pred, ref):
        a = load_png(p)
        b = load_png(r)
        if a.shape != b.shape:
            raise DataError(f"resolution mismatch between {p.name} and {r.name}")
        rows.append(EvalRow(name=p.name, psnr_db=psnr(a, b), ssim=float(ssim(a, b))))
    return EvalReport(rows)
