import numpy as np
import pytest
import torch

from skyfall.errors import ContractError
from skyfall.geometry import DTYPE, CameraPinhole, GaussianCloud, inverse_sigmoid
from skyfall.render import render

from conftest import make_camera, random_cloud
from oracles import brute_pixel


def one_pixel_camera():
    return CameraPinhole(
        rotation=torch.eye(3, dtype=DTYPE),
        translation=torch.zeros(3, dtype=DTYPE),
        fx=50.0,
        fy=50.0,
        cx=0.0,
        cy=0.0,
        width=1,
        height=1,
    )


def stack_cloud(n, seed, huge=False):
    """Gaussians on/near the optical axis of the 1-pixel camera."""
    g = torch.Generator().manual_seed(seed)
    pos = torch.randn(n, 3, dtype=DTYPE, generator=g) * 0.02
    pos[:, 2] = 4.0 + 3.0 * torch.rand(n, dtype=DTYPE, generator=g)
    scale = 1.5 if huge else 0.0
    return GaussianCloud(
        positions=pos,
        rotations=torch.nn.functional.normalize(
            torch.randn(n, 4, dtype=DTYPE, generator=g), dim=-1
        ),
        log_scales=torch.randn(n, 3, dtype=DTYPE, generator=g) * 0.2 + scale - 1.0,
        opacity_logits=torch.randn(n, dtype=DTYPE, generator=g) * 2.0,
        sh_coeffs=torch.randn(n, 4, 3, dtype=DTYPE, generator=g) * 0.4,
    )


class TestCompositing:
    def test_single_saturated_splat(self):
        cam = one_pixel_camera()
        color = torch.tensor([0.8, 0.3, 0.6], dtype=DTYPE)
        sh = torch.zeros(1, 4, 3, dtype=DTYPE)
        sh[0, 0] = (color - 0.5) / 0.28209479177387814
        cloud = GaussianCloud(
            positions=torch.tensor([[0.0, 0.0, 5.0]], dtype=DTYPE),
            rotations=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            log_scales=torch.full((1, 3), 2.0, dtype=DTYPE),
            opacity_logits=torch.tensor([20.0], dtype=DTYPE),
            sh_coeffs=sh,
        )
        out = render(cloud, cam)
        assert float(out.alpha[0, 0]) == pytest.approx(0.99, abs=1e-9)
        assert torch.allclose(out.rgb[0, 0], 0.99 * color, atol=1e-9)
        assert float(out.depth[0, 0]) == pytest.approx(0.99 * 5.0, abs=1e-9)

    def test_two_coincident_half_opacity(self):
        cam = one_pixel_camera()
        c1 = torch.tensor([0.9, 0.1, 0.2], dtype=DTYPE)
        c2 = torch.tensor([0.2, 0.7, 0.4], dtype=DTYPE)
        sh = torch.zeros(2, 4, 3, dtype=DTYPE)
        sh[0, 0] = (c1 - 0.5) / 0.28209479177387814
        sh[1, 0] = (c2 - 0.5) / 0.28209479177387814
        cloud = GaussianCloud(
            positions=torch.tensor([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]], dtype=DTYPE),
            rotations=torch.tensor([[1.0, 0, 0, 0], [1.0, 0, 0, 0]], dtype=DTYPE),
            log_scales=torch.full((2, 3), 4.0, dtype=DTYPE),  # footprint ~ flat at pixel
            opacity_logits=torch.zeros(2, dtype=DTYPE),  # alpha = 0.5
            sh_coeffs=sh,
        )
        out = render(cloud, cam)
        # ties broken by index: gaussian 0 composites in front
        assert torch.allclose(out.rgb[0, 0], 0.5 * c1 + 0.25 * c2, atol=1e-6)
        assert float(out.alpha[0, 0]) == pytest.approx(0.75, abs=1e-6)

    def test_transparent_append_bit_identical(self, cam32):
        cloud = random_cloud(15, seed=5)
        base = render(cloud, cam32)
        ghost = GaussianCloud(
            positions=torch.tensor([[0.5, 0.5, 0.5]], dtype=DTYPE),
            rotations=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            log_scales=torch.zeros(1, 3, dtype=DTYPE),
            opacity_logits=torch.tensor([-40.0], dtype=DTYPE),
            sh_coeffs=torch.zeros(1, 4, 3, dtype=DTYPE),
        )
        appended = render(GaussianCloud.concatenate(cloud, ghost), cam32)
        assert torch.equal(base.rgb, appended.rgb)
        assert torch.equal(base.depth, appended.depth)
        assert torch.equal(base.alpha, appended.alpha)

    def test_empty_cloud_black_image(self, cam32):
        out = render(GaussianCloud.empty(), cam32)
        assert float(out.rgb.abs().max()) == 0.0
        assert float(out.alpha.abs().max()) == 0.0

    @pytest.mark.parametrize("seed", range(30))
    def test_brute_force_oracle(self, seed):
        n = 1 + seed % 6
        cloud = stack_cloud(n, seed, huge=seed % 2 == 0)
        cam = one_pixel_camera()
        out = render(cloud, cam)
        rgb, depth, alpha = brute_pixel(cloud, cam, 0, 0)
        assert np.allclose(out.rgb[0, 0].numpy(), rgb, atol=1e-12)
        assert float(out.depth[0, 0]) == pytest.approx(depth, abs=1e-12)
        assert float(out.alpha[0, 0]) == pytest.approx(alpha, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_oracle_on_full_image(self, seed):
        cloud = random_cloud(8, seed=seed + 40)
        cam = make_camera(width=8, height=8)
        out = render(cloud, cam)
        for px in range(0, 8, 3):
            for py in range(0, 8, 3):
                rgb, depth, alpha = brute_pixel(cloud, cam, px, py)
                assert np.allclose(out.rgb[py, px].numpy(), rgb, atol=1e-12)
                assert float(out.alpha[py, px]) == pytest.approx(alpha, abs=1e-12)
                assert float(out.depth[py, px]) == pytest.approx(depth, abs=1e-12)


class TestInvariants:
    def test_deterministic_repeat(self, cam32, small_cloud):
        a = render(small_cloud, cam32)
        b = render(small_cloud, cam32)
        assert torch.equal(a.rgb, b.rgb) and torch.equal(a.depth, b.depth)

    def test_modes_agree(self, cam32, small_cloud):
        det = render(small_cloud, cam32, mode="deterministic")
        par = render(small_cloud, cam32, mode="parallel", band_rows=8, max_workers=3)
        assert float((det.rgb - par.rgb).abs().max()) <= 1e-6
        assert float((det.depth - par.depth).abs().max()) <= 1e-6
        assert float((det.alpha - par.alpha).abs().max()) <= 1e-6

    def test_parallel_independent_of_worker_count(self, cam32, small_cloud):
        a = render(small_cloud, cam32, mode="parallel", band_rows=8, max_workers=1)
        b = render(small_cloud, cam32, mode="parallel", band_rows=8, max_workers=4)
        assert torch.equal(a.rgb, b.rgb)

    @pytest.mark.parametrize("seed", range(5))
    def test_alpha_monotone_under_append(self, seed, cam32):
        cloud = random_cloud(12, seed=seed + 60)
        extra = random_cloud(3, seed=seed + 100)
        before = render(cloud, cam32).alpha
        after = render(GaussianCloud.concatenate(cloud, extra), cam32).alpha
        assert float((after - before).min()) >= -1e-12

    def test_single_splat_depth_matches_camera_depth(self):
        cam = one_pixel_camera()
        cloud = GaussianCloud(
            positions=torch.tensor([[0.0, 0.0, 7.5]], dtype=DTYPE),
            rotations=torch.tensor([[1.0, 0, 0, 0]], dtype=DTYPE),
            log_scales=torch.full((1, 3), 2.0, dtype=DTYPE),
            opacity_logits=torch.tensor([float(inverse_sigmoid(torch.tensor(0.7)))], dtype=DTYPE),
            sh_coeffs=torch.zeros(1, 4, 3, dtype=DTYPE),
        )
        out = render(cloud, cam)
        alpha = float(out.alpha[0, 0])
        assert alpha > 0
        # alpha-blended depth: exactly alpha * z for one splat
        assert float(out.depth[0, 0]) == pytest.approx(alpha * 7.5, abs=1e-12)
        assert float(out.depth[0, 0] / out.alpha[0, 0]) == pytest.approx(7.5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_output_ranges(self, seed):
        cloud = random_cloud(25, seed=seed + 200, spread=3.0)
        cam = make_camera()
        out = render(cloud, cam)
        assert float(out.alpha.min()) >= 0.0 and float(out.alpha.max()) <= 1.0
        assert float(out.rgb.min()) >= 0.0 and float(out.rgb.max()) <= 1.0
        assert bool(torch.isfinite(out.rgb).all())
        covered = out.alpha > 0
        assert float(out.depth[covered].min() if covered.any() else 1.0) >= 0.0

    def test_rejects_oversized_images(self, small_cloud):
        cam = CameraPinhole(
            rotation=torch.eye(3, dtype=DTYPE),
            translation=torch.zeros(3),
            fx=10,
            fy=10,
            cx=0,
            cy=0,
            width=5000,
            height=8,
        )
        with pytest.raises(ContractError):
            render(small_cloud, cam)

    def test_rejects_unknown_mode(self, cam32, small_cloud):
        with pytest.raises(ContractError):
            render(small_cloud, cam32, mode="warp")
