"""Per-image and per-Gaussian appearance embeddings with a small MLP that
produces an affine color transform, applied per Gaussian before compositing.

The MLP maps (image embedding, Gaussian code, DC color) = 32 + 24 + 3 inputs
through two ReLU hidden layers of 128 units to 6 outputs interpreted as
(delta_gamma, beta). Gain is parameterized as gamma = 1 + delta_gamma and the
final layer is zero-initialized, so a fresh model is exactly the identity
transform. Hidden layers use seeded He-uniform initialization.
"""

from __future__ import annotations

import math

import torch

from .errors import ContractError
from .geometry import APPEARANCE_CODE_DIM, DTYPE
from .utils import torch_generator

IMAGE_EMBED_DIM = 32
HIDDEN_DIM = 128
MLP_IN = IMAGE_EMBED_DIM + APPEARANCE_CODE_DIM + 3
MLP_OUT = 6


def _he_uniform(shape: tuple[int, int], gen: torch.Generator) -> torch.Tensor:
    fan_in = shape[1]
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


class AppearanceModel:
    """Trainable appearance state: image embeddings e_j and the affine MLP f.

    Per-Gaussian codes g_i live in the GaussianCloud; this class holds
    everything that is not per-Gaussian.
    """

    def __init__(self, n_images: int, seed: int = 0):
        if n_images < 0:
            raise ContractError("n_images must be >= 0")
        gen = torch_generator(seed)
        self.embeddings = torch.zeros((n_images, IMAGE_EMBED_DIM), dtype=DTYPE)
        self.w1 = _he_uniform((HIDDEN_DIM, MLP_IN), gen)
        self.b1 = torch.zeros(HIDDEN_DIM, dtype=DTYPE)
        self.w2 = _he_uniform((HIDDEN_DIM, HIDDEN_DIM), gen)
        self.b2 = torch.zeros(HIDDEN_DIM, dtype=DTYPE)
        self.w3 = torch.zeros((MLP_OUT, HIDDEN_DIM), dtype=DTYPE)  # identity start
        self.b3 = torch.zeros(MLP_OUT, dtype=DTYPE)

    @property
    def n_images(self) -> int:
        return int(self.embeddings.shape[0])

    def mlp_parameters(self) -> list[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.mlp_parameters())

    def _forward(self, inputs: torch.Tensor) -> torch.Tensor:
        h = torch.relu(inputs @ self.w1.T + self.b1)
        h = torch.relu(h @ self.w2.T + self.b2)
        return h @ self.w3.T + self.b3

    def appearance_params(
        self, embedding: torch.Tensor, codes: torch.Tensor, dc_color: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(gamma, beta) for each Gaussian given one image embedding.

        ``embedding`` is (32,), ``codes`` (N, 24), ``dc_color`` (N, 3).
        """
        embedding = torch.as_tensor(embedding, dtype=DTYPE)
        codes = torch.as_tensor(codes, dtype=DTYPE)
        dc_color = torch.as_tensor(dc_color, dtype=DTYPE)
        if embedding.shape != (IMAGE_EMBED_DIM,):
            raise ContractError(f"embedding must be ({IMAGE_EMBED_DIM},)")
        if codes.dim() != 2 or codes.shape[1] != APPEARANCE_CODE_DIM:
            raise ContractError(f"codes must be (N, {APPEARANCE_CODE_DIM})")
        if dc_color.shape != (codes.shape[0], 3):
            raise ContractError("dc_color must be (N, 3)")
        inputs = torch.cat(
            [embedding.unsqueeze(0).expand(codes.shape[0], -1), codes, dc_color], dim=-1
        )
        out = self._forward(inputs)
        return 1.0 + out[:, :3], out[:, 3:]

    def state_arrays(self) -> dict[str, torch.Tensor]:
        return {
            "embeddings": self.embeddings,
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "w3": self.w3,
            "b3": self.b3,
        }

    @staticmethod
    def from_state(arrays: dict) -> "AppearanceModel":
        model = AppearanceModel(n_images=0)
        model.embeddings = torch.as_tensor(arrays["embeddings"], dtype=DTYPE).reshape(
            -1, IMAGE_EMBED_DIM
        )
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            setattr(model, name, torch.as_tensor(arrays[name], dtype=DTYPE))
        return model

    def detached_copy(self) -> "AppearanceModel":
        return AppearanceModel.from_state(
            {k: v.detach().clone() for k, v in self.state_arrays().items()}
        )


class AppearanceContext:
    """Binds a model to the embedding used for one render.

    ``image_index`` selects a per-image embedding; passing ``embedding``
    directly supports the fixed embedding used throughout the synthesis loop.
    """

    def __init__(
        self,
        model: AppearanceModel,
        image_index: int | None = None,
        embedding: torch.Tensor | None = None,
    ):
        if (image_index is None) == (embedding is None):
            raise ContractError("provide exactly one of image_index or embedding")
        if image_index is not None and not (0 <= image_index < model.n_images):
            raise ContractError(
                f"embedding index {image_index} out of range [0, {model.n_images})"
            )
        self.model = model
        self.image_index = image_index
        self._embedding = embedding

    @property
    def embedding(self) -> torch.Tensor:
        if self._embedding is not None:
            return self._embedding
        return self.model.embeddings[self.image_index]

    def affine_params(self, codes: torch.Tensor, dc_color: torch.Tensor):
        return self.model.appearance_params(self.embedding, codes, dc_color)


def appearance_params(model: AppearanceModel, embedding, codes, dc_color):
    """Functional alias for :meth:`AppearanceModel.appearance_params`."""
    return model.appearance_params(embedding, codes, dc_color)


def apply_appearance(c_hat: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Elementwise gamma * c + beta, clamped to be non-negative."""
    return torch.clamp(torch.as_tensor(c_hat, dtype=DTYPE) * gamma + beta, min=0.0)


def appearance_backward(
    model: AppearanceModel,
    embedding: torch.Tensor,
    codes: torch.Tensor,
    dc_color: torch.Tensor,
    base_colors: torch.Tensor,
    upstream_grad: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Gradients of sum(upstream_grad * transformed_colors) w.r.t. the
    embedding, the per-Gaussian codes, and every MLP weight.

    Validated against central finite differences in the test suite.
    """
    upstream_grad = torch.as_tensor(upstream_grad, dtype=DTYPE)
    base_colors = torch.as_tensor(base_colors, dtype=DTYPE)
    if upstream_grad.shape != base_colors.shape:
        raise ContractError("upstream_grad must match base_colors shape")
    work = model.detached_copy()
    for p in work.mlp_parameters():
        p.requires_grad_(True)
    e = torch.as_tensor(embedding, dtype=DTYPE).detach().clone().requires_grad_(True)
    g = torch.as_tensor(codes, dtype=DTYPE).detach().clone().requires_grad_(True)
    gamma, beta = work.appearance_params(e, g, dc_color)
    out = apply_appearance(base_colors, gamma, beta)
    (out * upstream_grad).sum().backward()
    grads = {"embedding": e.grad, "codes": g.grad}
    for name, p in zip(("w1", "b1", "w2", "b2", "w3", "b3"), work.mlp_parameters()):
        grads[name] = p.grad if p.grad is not None else torch.zeros_like(p)
    for key in ("embedding", "codes"):
        if grads[key] is None:
            grads[key] = torch.zeros_like(e if key == "embedding" else g)
    return grads
