"""Service configuration: YAML/JSON file plus environment overrides.

Environment variables (REFINER_MODE, REFINER_MOCK_KIND, REFINER_MODEL_ID,
REFINER_DEVICE, REFINER_MAX_JOBS) override file values.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

DEFAULT_SOURCE_PROMPT = (
    "Satellite image of an urban area with modern and older buildings, roads, "
    "green spaces. Some areas appear distorted, with blurring and warping artifacts."
)
DEFAULT_TARGET_PROMPT = (
    "Clear satellite image of an urban area with sharp buildings, smooth edges, "
    "natural lighting, and well-defined textures."
)

MAX_IMAGE_SIDE = 2048


@dataclass
class ServiceConfig:
    mode: str = "mock"  # mock | model
    mock_kind: str = "identity"  # identity | blur | noise
    mock_sigma: float = 1.5
    model_id: str = "black-forest-labs/FLUX.1-dev"
    device: str = "cuda"
    source_prompt: str = DEFAULT_SOURCE_PROMPT
    target_prompt: str = DEFAULT_TARGET_PROMPT
    n_min: int = 4
    n_max: int = 10
    max_concurrent_jobs: int = 1
    max_image_side: int = MAX_IMAGE_SIDE

    def __post_init__(self):
        if self.mode not in ("mock", "model"):
            raise ValueError(f"mode must be 'mock' or 'model', got {self.mode!r}")
        if self.mock_kind not in ("identity", "blur", "noise"):
            raise ValueError(f"unknown mock kind {self.mock_kind!r}")
        if not self.source_prompt or not self.target_prompt:
            raise ValueError("default prompts must be non-empty")
        if self.max_concurrent_jobs < 1:
            raise ValueError("max_concurrent_jobs must be >= 1")


def load_config(path: str | os.PathLike | None = None) -> ServiceConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    env_map = {
        "REFINER_MODE": "mode",
        "REFINER_MOCK_KIND": "mock_kind",
        "REFINER_MODEL_ID": "model_id",
        "REFINER_DEVICE": "device",
        "REFINER_MAX_JOBS": "max_concurrent_jobs",
    }
    for env, key in env_map.items():
        if env in os.environ:
            value = os.environ[env]
            data[key] = int(value) if key == "max_concurrent_jobs" else value
    known = set(ServiceConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ServiceConfig(**data)
