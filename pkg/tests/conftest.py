import pytest
import torch

from skyfall.geometry import DTYPE, CameraPinhole, GaussianCloud


def random_cloud(n: int, seed: int, spread: float = 2.0, scale_mu: float = -0.5) -> GaussianCloud:
    g = torch.Generator().manual_seed(seed)
    return GaussianCloud(
        positions=torch.randn(n, 3, dtype=DTYPE, generator=g) * spread,
        rotations=torch.nn.functional.normalize(
            torch.randn(n, 4, dtype=DTYPE, generator=g), dim=-1
        ),
        log_scales=torch.randn(n, 3, dtype=DTYPE, generator=g) * 0.3 + scale_mu,
        opacity_logits=torch.randn(n, dtype=DTYPE, generator=g),
        sh_coeffs=torch.randn(n, 4, 3, dtype=DTYPE, generator=g) * 0.3,
        appearance_codes=torch.randn(n, 24, dtype=DTYPE, generator=g) * 0.1,
    )


def make_camera(width=32, height=32, fov_deg=45.0, dist=8.0) -> CameraPinhole:
    return CameraPinhole.look_at(
        center=[dist, 0.0, dist / 2.0],
        target=[0.0, 0.0, 0.0],
        width=width,
        height=height,
        fov_deg=fov_deg,
    )


@pytest.fixture
def cam32():
    return make_camera()


@pytest.fixture
def small_cloud():
    return random_cloud(20, seed=3)


def upstream(h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(h, w, 5, dtype=DTYPE, generator=g)
