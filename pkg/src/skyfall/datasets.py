"""Training-image containers shared by the reconstruction and synthesis loops."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError
from .geometry import CameraPinhole

PROVENANCES = ("satellite", "refined", "pseudo")


@dataclass
class TrainingImage:
    """One training target: pixels, its camera, an optional per-image
    embedding index, and a provenance tag."""

    image: torch.Tensor  # (H, W, 3) in [0, 1]
    camera: CameraPinhole
    provenance: str
    embedding_index: int | None = None
    path: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"provenance must be one of {PROVENANCES}")
        if self.image.dim() != 3 or self.image.shape[-1] != 3:
            raise ContractError("image must be (H, W, 3)")
        if (self.image.shape[0], self.image.shape[1]) != (self.camera.height, self.camera.width):
            raise ContractError("image resolution does not match its camera")


@dataclass
class SceneDataset:
    """An ordered list of training images with uniform provenance checks."""

    images: list[TrainingImage]

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> TrainingImage:
        return self.images[i]

    @property
    def cameras(self) -> list[CameraPinhole]:
        return [im.camera for im in self.images]
