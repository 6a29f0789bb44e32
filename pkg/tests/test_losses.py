import math

import pytest
import torch

from skyfall.errors import ContractError
from skyfall.geometry import DTYPE
from skyfall.losses import (
    LossWeights,
    dssim,
    loss_color,
    loss_depth,
    loss_idu,
    loss_sat,
    opacity_entropy,
    pearson,
    psnr,
    ssim,
)


def image(seed, h=24, w=24, c=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(h, w, c, dtype=DTYPE, generator=g)


class TestLossColor:
    @pytest.mark.parametrize("lam", [0.0, 0.2, 0.5, 1.0])
    def test_zero_on_identical(self, lam):
        x = image(0)
        assert float(loss_color(x, x, lam)) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        x = image(1) * 0.5
        assert float(loss_color(x + 0.1, x, 0.0)) == pytest.approx(0.1, abs=1e-12)

    def test_pure_dssim_identical(self):
        x = image(2)
        assert float(loss_color(x, x, 1.0)) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            loss_color(image(0), image(0, h=16), 0.2)


class TestOpacityEntropy:
    def test_half(self):
        val = float(opacity_entropy(torch.tensor([0.5], dtype=DTYPE)))
        assert val == pytest.approx(math.log(2.0), abs=1e-9)

    def test_saturated(self):
        assert float(opacity_entropy(torch.tensor([1.0 - 1e-6], dtype=DTYPE))) <= 2e-5

    def test_pair_mean(self):
        val = float(opacity_entropy(torch.tensor([0.5, 1.0 - 1e-6], dtype=DTYPE)))
        assert val == pytest.approx(0.34657, abs=1e-4)

    def test_empty(self):
        assert float(opacity_entropy(torch.zeros(0, dtype=DTYPE))) == 0.0

    def test_symmetric_and_peak_at_half(self):
        grid = torch.linspace(0.01, 0.99, 99, dtype=DTYPE)
        vals = torch.tensor([float(opacity_entropy(a.reshape(1))) for a in grid], dtype=DTYPE)
        flipped = torch.tensor(
            [float(opacity_entropy((1 - a).reshape(1))) for a in grid], dtype=DTYPE
        )
        assert torch.allclose(vals, flipped, atol=1e-12)
        assert int(vals.argmax()) == 49  # alpha = 0.5
        assert float(vals.max()) == pytest.approx(math.log(2.0), abs=1e-9)


class TestPearson:
    def test_positive_affine(self):
        a = image(3, c=1).squeeze(-1)
        assert float(pearson(a, 3 * a + 7)) == pytest.approx(1.0, abs=1e-6)

    def test_negation(self):
        a = image(4, c=1).squeeze(-1)
        assert float(pearson(a, -a)) == pytest.approx(-1.0, abs=1e-6)

    def test_hand_example(self):
        a = torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=DTYPE)
        b = torch.tensor([1.0, 3.0, 2.0, 4.0], dtype=DTYPE)
        assert float(pearson(a, b)) == pytest.approx(0.8, abs=1e-12)

    def test_constant_degenerates_to_zero(self):
        a = torch.ones(10, dtype=DTYPE)
        b = torch.arange(10, dtype=DTYPE)
        assert float(pearson(a, b)) == 0.0

    @pytest.mark.parametrize("c1", [-2.0, -0.1, 0.3, 5.0])
    def test_sign_of_scale(self, c1):
        g = torch.Generator().manual_seed(9)
        a = torch.randn(50, dtype=DTYPE, generator=g)
        r = float(pearson(a, c1 * a + 0.7))
        assert r == pytest.approx(math.copysign(1.0, c1), abs=1e-6)

    def test_too_few_pixels(self):
        with pytest.raises(ContractError):
            pearson(torch.tensor([1.0]), torch.tensor([2.0]))

    def test_mask(self):
        a = torch.tensor([1.0, 2.0, 3.0, 100.0], dtype=DTYPE)
        b = torch.tensor([1.0, 2.0, 3.0, -50.0], dtype=DTYPE)
        mask = torch.tensor([True, True, True, False])
        assert float(pearson(a, b, mask)) == pytest.approx(1.0, abs=1e-6)


class TestLossDepth:
    def test_affine_invariance(self):
        d = image(5, c=1).squeeze(-1)
        assert float(loss_depth(d, 2 * d + 5)) == pytest.approx(0.0, abs=1e-6)

    def test_negation_gives_two(self):
        d = image(6, c=1).squeeze(-1)
        assert float(loss_depth(d, -d)) == pytest.approx(2.0, abs=1e-6)

    def test_constant_neutral(self):
        d = torch.ones(8, 8, dtype=DTYPE)
        est = image(7, h=8, w=8, c=1).squeeze(-1)
        assert float(loss_depth(d, est)) == 1.0

    def test_abs_variant(self):
        d = image(8, c=1).squeeze(-1)
        assert float(loss_depth(d, -3 * d, variant="one_minus_abs")) == pytest.approx(0.0, abs=1e-6)

    def test_mask_too_small_neutral(self):
        d = image(9, c=1).squeeze(-1)
        mask = torch.zeros_like(d, dtype=torch.bool)
        assert float(loss_depth(d, d, mask)) == 1.0

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            loss_depth(image(0), image(0), variant="bogus")


class TestMetrics:
    def test_psnr_identical_capped(self):
        x = image(10)
        assert psnr(x, x) == 99.0

    def test_psnr_uniform_offset(self):
        x = torch.full((16, 16, 3), 0.4, dtype=DTYPE)
        assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ContractError):
            psnr(image(0), image(0, h=12))

    def test_ssim_identical(self):
        x = image(11)
        assert float(ssim(x, x)) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_symmetric(self):
        a, b = image(12), image(13)
        assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-9)

    def test_ssim_anticorrelated_binary(self):
        g = torch.Generator().manual_seed(14)
        a = (torch.rand(24, 24, 1, dtype=DTYPE, generator=g) > 0.5).to(DTYPE)
        assert float(ssim(1.0 - a, a)) <= 0.0

    @pytest.mark.parametrize("seed", range(4))
    def test_dssim_in_unit_interval(self, seed):
        a, b = image(seed * 2 + 20), image(seed * 2 + 21)
        val = float(dssim(a, b))
        assert 0.0 <= val <= 1.0


class TestComposites:
    def test_loss_sat_color_only(self):
        x = image(30)
        w = LossWeights(lambda_dssim=0.2, lambda_op=0.0, lambda_depth=0.0)
        assert float(loss_sat([x], [x], torch.tensor([0.3]), [], w)) == pytest.approx(0.0, abs=1e-12)

    def test_loss_sat_entropy_scaling(self):
        x = image(31)
        w = LossWeights(lambda_dssim=0.2, lambda_op=10.0, lambda_depth=0.0)
        alphas = torch.full((7,), 0.5, dtype=DTYPE)
        val = float(loss_sat([x], [x], alphas, [], w))
        assert val == pytest.approx(10.0 * math.log(2.0), abs=1e-9)

    def test_loss_sat_perfect_affine_depth(self):
        x = image(32)
        d = image(33, c=1).squeeze(-1)
        w = LossWeights(lambda_dssim=0.2, lambda_op=0.0, lambda_depth=0.5)
        val = float(loss_sat([x], [x], torch.zeros(0), [(d, 2 * d + 5, None)], w))
        assert val == pytest.approx(0.0, abs=1e-6)

    def test_loss_idu_identity_has_depth_only(self):
        x = image(34)
        d = image(35, c=1).squeeze(-1)
        est = image(36, c=1).squeeze(-1)
        w = LossWeights(lambda_dssim=0.2, lambda_op=10.0, lambda_depth=0.5)
        val = float(loss_idu([x], [x], [(d, est, None)], w))
        expect = 0.5 * float(loss_depth(d, est))
        assert val == pytest.approx(expect, abs=1e-9)

    def test_loss_idu_reduces_to_color(self):
        a, b = image(37), image(38)
        w = LossWeights(lambda_dssim=0.2, lambda_op=10.0, lambda_depth=0.0)
        assert float(loss_idu([a], [b], [], w)) == pytest.approx(
            float(loss_color(a, b, 0.2)), abs=1e-12
        )

    def test_loss_idu_identity_affine_depth_is_zero(self):
        x = image(39)
        d = image(40, c=1).squeeze(-1)
        w = LossWeights()
        assert float(loss_idu([x], [x], [(d, 0.5 * d + 1, None)], w)) == pytest.approx(
            0.0, abs=1e-6
        )

    def test_weight_validation(self):
        with pytest.raises(ContractError):
            LossWeights(lambda_dssim=1.5)
        with pytest.raises(ContractError):
            LossWeights(lambda_op=-1.0)
