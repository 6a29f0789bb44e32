"""Small shared helpers: seeding, image conversion, separable Gaussian filters."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import DTYPE


def np_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen


def derive_seed(seed: int, *salts: int) -> int:
    """Stable child seed from a root seed and integer salts."""
    h = hashlib.sha256(("/".join(str(s) for s in (seed, *salts))).encode())
    return int.from_bytes(h.digest()[:8], "little")


def gaussian_kernel1d(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def separable_filter(img: torch.Tensor, kernel: torch.Tensor, padding: str = "valid") -> torch.Tensor:
    """Filter (C, H, W) with a 1D kernel along both axes."""
    k = kernel.numel()
    c = img.shape[0]
    x = img.unsqueeze(1)  # (C, 1, H, W)
    if padding == "reflect":
        pad = k // 2
        x = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = torch.nn.functional.conv2d(x, kernel.view(1, 1, k, 1))
    x = torch.nn.functional.conv2d(x, kernel.view(1, 1, 1, k))
    return x.squeeze(1)


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Blur an (H, W, 3) image, reflect-padded so the size is preserved."""
    size = max(3, int(2 * round(3 * sigma) + 1))
    k = gaussian_kernel1d(size, sigma)
    chw = image.permute(2, 0, 1)
    return separable_filter(chw, k, padding="reflect").permute(1, 2, 0)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().clamp(0.0, 1.0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.array(arr), dtype=DTYPE) / 255.0


def save_png(image: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(to_uint8(image)).save(str(path), format="PNG")


def load_png(path: str | Path) -> torch.Tensor:
    with Image.open(str(path)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def png_bytes(image: torch.Tensor) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> torch.Tensor:
    import io

    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
