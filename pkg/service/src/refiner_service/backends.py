"""Refinement backends.

Mock backends are deterministic and run anywhere; the model backend is a thin
adapter around a pretrained flow-matching text-to-image editor and only
activates when its optional dependencies and weights are available.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image, ImageFilter

from .config import ServiceConfig


class ModelNotLoaded(RuntimeError):
    """Raised when model mode is requested but the editor is unavailable."""


def decode_png(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
        return img.convert("RGB")
    except Exception as exc:
        raise ValueError(f"not a decodable image: {exc}") from exc


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _derive_seed(seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{seed}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class MockBackend:
    """identity: echoes input bytes; blur: Gaussian blur; noise: seeded
    per-sample pixel noise. All deterministic in (input, seed, index)."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.name = f"mock:{config.mock_kind}"

    def refine(self, png: bytes, source_prompt: str, target_prompt: str,
               n_min: int, n_max: int, num_samples: int, seed: int) -> list[bytes]:
        kind = self.config.mock_kind
        if kind == "identity":
            return [png] * num_samples
        img = decode_png(png)
        if kind == "blur":
            blurred = img.filter(ImageFilter.GaussianBlur(self.config.mock_sigma))
            data = encode_png(blurred)
            return [data] * num_samples
        arr = np.asarray(img, dtype=np.float64)
        out = []
        for s in range(num_samples):
            rng = np.random.Generator(np.random.PCG64(_derive_seed(seed, s)))
            noisy = arr + rng.normal(0.0, self.config.mock_sigma * 255.0 / 25.0, size=arr.shape)
            out.append(encode_png(Image.fromarray(np.clip(noisy, 0, 255).astype(np.uint8))))
        return out


class FlowEditBackend:
    """Adapter over a pretrained flow-matching editor (prompt-to-prompt).

    The editor stack (diffusers + the published weights) is an optional,
    GPU-sized dependency; construction is lazy and refine() reports
    ModelNotLoaded until a pipeline is available. All editing parameters
    other than (n_min, n_max, prompts, seed) use the editor's defaults.
    """

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.name = f"model:{config.model_id}"
        self._pipeline = None

    def _load(self):
        if self._pipeline is not None:
            return
        try:
            import torch  # noqa: F401
            from diffusers import FluxPipeline
        except ImportError as exc:
            raise ModelNotLoaded(f"editor dependencies unavailable: {exc}") from exc
        try:
            self._pipeline = FluxPipeline.from_pretrained(self.config.model_id)
            self._pipeline.to(self.config.device)
        except Exception as exc:
            raise ModelNotLoaded(f"cannot load {self.config.model_id}: {exc}") from exc

    def refine(self, png: bytes, source_prompt: str, target_prompt: str,
               n_min: int, n_max: int, num_samples: int, seed: int) -> list[bytes]:
        self._load()
        import torch

        from .flowedit import flowedit_sample

        img = decode_png(png)
        out = []
        for s in range(num_samples):
            generator = torch.Generator(self.config.device).manual_seed(_derive_seed(seed, s))
            edited = flowedit_sample(
                self._pipeline,
                img,
                source_prompt=source_prompt,
                target_prompt=target_prompt,
                n_min=n_min,
                n_max=n_max,
                generator=generator,
            )
            out.append(encode_png(edited))
        return out


def make_backend(config: ServiceConfig):
    if config.mode == "mock":
        return MockBackend(config)
    return FlowEditBackend(config)
