"""Image-refinement oracle: wire protocol, in-process mocks, HTTP client.

The refiner is isolated behind a wire protocol because production backends
are pretrained editing models; the primary component carries only the
protocol and deterministic mocks.

Wire protocol (HTTP):
  POST /refine  request  {image: base64 PNG, source_prompt, target_prompt,
                          n_min: int, n_max: int, num_samples: int, seed: int}
                response {images: [base64 PNG x num_samples], backend: str}
  GET  /health  -> {status: "ok", mode: "mock"|"model"}
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import torch

from .errors import ContractError, RefinerError
from .utils import derive_seed, gaussian_blur, image_from_png_bytes, np_rng, png_bytes

DEFAULT_SOURCE_PROMPT = (
    "Satellite image of an urban area with modern and older buildings, roads, "
    "green spaces. Some areas appear distorted, with blurring and warping artifacts."
)
DEFAULT_TARGET_PROMPT = (
    "Clear satellite image of an urban area with sharp buildings, smooth edges, "
    "natural lighting, and well-defined textures."
)
DEFAULT_N_MIN = 4
DEFAULT_N_MAX = 10

REQUEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RefinerRequest",
    "type": "object",
    "required": ["image", "source_prompt", "target_prompt", "n_min", "n_max", "num_samples", "seed"],
    "properties": {
        "image": {"type": "string", "minLength": 1},
        "source_prompt": {"type": "string", "minLength": 1},
        "target_prompt": {"type": "string", "minLength": 1},
        "n_min": {"type": "integer", "minimum": 0},
        "n_max": {"type": "integer", "minimum": 0},
        "num_samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "additionalProperties": True,
}

RESPONSE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RefinerResponse",
    "type": "object",
    "required": ["images", "backend"],
    "properties": {
        "images": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
        "backend": {"type": "string", "minLength": 1},
    },
    "additionalProperties": True,
}

HEALTH_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RefinerHealth",
    "type": "object",
    "required": ["status", "mode"],
    "properties": {
        "status": {"type": "string"},
        "mode": {"type": "string", "enum": ["mock", "model"]},
    },
    "additionalProperties": True,
}


@dataclass
class RefinerRequest:
    """One view to refine; ``num_samples`` independent edits are requested."""

    image: torch.Tensor
    source_prompt: str = DEFAULT_SOURCE_PROMPT
    target_prompt: str = DEFAULT_TARGET_PROMPT
    n_min: int = DEFAULT_N_MIN
    n_max: int = DEFAULT_N_MAX
    num_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1:
            raise ContractError("num_samples must be >= 1")
        if not self.source_prompt or not self.target_prompt:
            raise ContractError("prompts must be non-empty")


@dataclass
class RefinerResponse:
    images: list[torch.Tensor]
    backend: str
    seed: int = 0


def validate_response(request: RefinerRequest, response: RefinerResponse) -> None:
    if len(response.images) != request.num_samples:
        raise RefinerError(
            f"backend returned {len(response.images)} samples, requested {request.num_samples}"
        )
    want = tuple(request.image.shape)
    for im in response.images:
        if tuple(im.shape) != want:
            raise RefinerError(f"backend changed image shape {want} -> {tuple(im.shape)}")


class IdentityRefiner:
    """Returns bit-equal copies of the input; the synthesis no-op baseline."""

    name = "mock:identity"

    def refine(self, request: RefinerRequest) -> RefinerResponse:
        images = [request.image.detach().clone() for _ in range(request.num_samples)]
        return RefinerResponse(images=images, backend=self.name, seed=request.seed)


class BlurRefiner:
    """Gaussian-blurs the input; a deterministic degradation stand-in."""

    def __init__(self, sigma: float = 1.5):
        if sigma <= 0:
            raise ContractError("blur sigma must be positive")
        self.sigma = sigma
        self.name = f"mock:blur:{sigma:g}"

    def refine(self, request: RefinerRequest) -> RefinerResponse:
        blurred = gaussian_blur(request.image.detach(), self.sigma).clamp(0.0, 1.0)
        return RefinerResponse(
            images=[blurred.clone() for _ in range(request.num_samples)],
            backend=self.name,
            seed=request.seed,
        )


class SeededNoiseRefiner:
    """Adds seeded Gaussian pixel noise; distinct per sample, reproducible."""

    def __init__(self, sigma: float = 0.05):
        if sigma < 0:
            raise ContractError("noise sigma must be non-negative")
        self.sigma = sigma
        self.name = f"mock:noise:{sigma:g}"

    def refine(self, request: RefinerRequest) -> RefinerResponse:
        base = request.image.detach()
        images = []
        for s in range(request.num_samples):
            rng = np_rng(derive_seed(request.seed, s))
            noise = torch.as_tensor(rng.normal(0.0, self.sigma, size=tuple(base.shape)))
            images.append((base + noise).clamp(0.0, 1.0))
        return RefinerResponse(images=images, backend=self.name, seed=request.seed)


class HttpRefiner:
    """Client speaking the wire protocol to an external refiner service.

    Transient transport failures are retried up to ``max_retries`` times;
    persistent failure raises RefinerError for the episode driver to handle.
    """

    def __init__(self, base_url: str, timeout: float = 120.0, max_retries: int = 3):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.name = f"http:{self.base_url}"

    def _post(self, payload: dict) -> dict:
        import requests

        last = None
        for attempt in range(self.max_retries):
            try:
                r = requests.post(
                    f"{self.base_url}/refine", json=payload, timeout=self.timeout
                )
                if r.status_code != 200:
                    raise RefinerError(f"refiner returned HTTP {r.status_code}: {r.text[:200]}")
                return r.json()
            except (requests.Timeout, requests.ConnectionError) as exc:
                last = exc
                time.sleep(0.1 * (attempt + 1))
        raise RefinerError(f"refiner unreachable after {self.max_retries} attempts: {last}")

    def refine(self, request: RefinerRequest) -> RefinerResponse:
        import base64

        import jsonschema

        payload = {
            "image": base64.b64encode(png_bytes(request.image)).decode("ascii"),
            "source_prompt": request.source_prompt,
            "target_prompt": request.target_prompt,
            "n_min": request.n_min,
            "n_max": request.n_max,
            "num_samples": request.num_samples,
            "seed": request.seed,
        }
        jsonschema.validate(payload, REQUEST_SCHEMA)
        body = self._post(payload)
        try:
            jsonschema.validate(body, RESPONSE_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise RefinerError(f"response violates the wire schema: {exc.message}") from exc
        images = [image_from_png_bytes(base64.b64decode(s)) for s in body["images"]]
        return RefinerResponse(images=images, backend=body["backend"], seed=request.seed)

    def health(self) -> dict:
        import requests

        r = requests.get(f"{self.base_url}/health", timeout=self.timeout)
        if r.status_code != 200:
            raise RefinerError(f"health check failed with HTTP {r.status_code}")
        return r.json()


def make_refiner(spec: str):
    """Refiner factory for CLI/config strings.

    Accepts ``mock:identity``, ``mock:blur[:sigma]``, ``mock:noise[:sigma]``,
    or an ``http(s)://`` service URL.
    """
    if spec.startswith(("http://", "https://")):
        return HttpRefiner(spec)
    parts = spec.split(":")
    if parts[0] == "mock" and len(parts) >= 2:
        kind = parts[1]
        arg = float(parts[2]) if len(parts) > 2 else None
        if kind == "identity":
            return IdentityRefiner()
        if kind == "blur":
            return BlurRefiner(arg if arg is not None else 1.5)
        if kind == "noise":
            return SeededNoiseRefiner(arg if arg is not None else 0.05)
    raise ContractError(f"unknown refiner spec {spec!r}")
