import pytest
import torch

from skyfall.appearance import (
    AppearanceContext,
    AppearanceModel,
    appearance_params,
    apply_appearance,
)
from skyfall.errors import ContractError
from skyfall.geometry import DTYPE


def test_identity_at_initialization():
    model = AppearanceModel(n_images=4, seed=0)
    codes = torch.randn(5, 24, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    dc = torch.rand(5, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(2))
    gamma, beta = model.appearance_params(model.embeddings[0], codes, dc)
    assert torch.equal(gamma, torch.ones(5, 3, dtype=DTYPE))
    assert torch.equal(beta, torch.zeros(5, 3, dtype=DTYPE))


def test_deterministic_forward():
    model = AppearanceModel(n_images=2, seed=3)
    codes = torch.randn(4, 24, dtype=DTYPE, generator=torch.Generator().manual_seed(4))
    dc = torch.rand(4, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(5))
    out1 = appearance_params(model, model.embeddings[1], codes, dc)
    out2 = appearance_params(model, model.embeddings[1], codes, dc)
    assert torch.equal(out1[0], out2[0]) and torch.equal(out1[1], out2[1])


def test_embedding_sensitivity_with_nonzero_head():
    model = AppearanceModel(n_images=2, seed=6)
    gen = torch.Generator().manual_seed(7)
    model.w3 = torch.randn(6, 128, dtype=DTYPE, generator=gen) * 0.1
    codes = torch.randn(3, 24, dtype=DTYPE, generator=gen)
    dc = torch.rand(3, 3, dtype=DTYPE, generator=gen)
    e = torch.randn(32, dtype=DTYPE, generator=gen)
    g1, b1 = model.appearance_params(e, codes, dc)
    g2, b2 = model.appearance_params(e + 0.5, codes, dc)
    assert not torch.allclose(g1, g2) or not torch.allclose(b1, b2)


def test_architecture_dimensions_and_param_count():
    model = AppearanceModel(n_images=1, seed=0)
    assert model.w1.shape == (128, 32 + 24 + 3)
    assert model.w2.shape == (128, 128)
    assert model.w3.shape == (6, 128)
    expected = (59 * 128 + 128) + (128 * 128 + 128) + (128 * 6 + 6)
    assert model.param_count == expected


def test_input_dimension_contracts():
    model = AppearanceModel(n_images=1, seed=0)
    with pytest.raises(ContractError):
        model.appearance_params(torch.zeros(16, dtype=DTYPE), torch.zeros(2, 24), torch.zeros(2, 3))
    with pytest.raises(ContractError):
        model.appearance_params(torch.zeros(32, dtype=DTYPE), torch.zeros(2, 16), torch.zeros(2, 3))
    with pytest.raises(ContractError):
        model.appearance_params(torch.zeros(32, dtype=DTYPE), torch.zeros(2, 24), torch.zeros(3, 3))


class TestApplyAppearance:
    def test_identity(self):
        c = torch.tensor([0.2, 0.6, 0.9], dtype=DTYPE)
        out = apply_appearance(c, torch.ones(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))
        assert torch.equal(out, c)

    def test_hand_arithmetic(self):
        c = torch.full((3,), 0.3, dtype=DTYPE)
        gamma = torch.full((3,), 2.0, dtype=DTYPE)
        beta = torch.full((3,), -0.1, dtype=DTYPE)
        assert torch.allclose(apply_appearance(c, gamma, beta), torch.full((3,), 0.5, dtype=DTYPE))

    def test_zero_gain_gives_offset(self):
        c = torch.rand(3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
        beta = torch.tensor([0.1, 0.4, 0.9], dtype=DTYPE)
        assert torch.equal(apply_appearance(c, torch.zeros(3, dtype=DTYPE), beta), beta)

    def test_clamped_below_zero(self):
        c = torch.full((3,), 0.5, dtype=DTYPE)
        out = apply_appearance(c, torch.ones(3, dtype=DTYPE), torch.full((3,), -2.0, dtype=DTYPE))
        assert torch.equal(out, torch.zeros(3, dtype=DTYPE))


class TestContext:
    def test_requires_exactly_one_selector(self):
        model = AppearanceModel(n_images=2, seed=0)
        with pytest.raises(ContractError):
            AppearanceContext(model)
        with pytest.raises(ContractError):
            AppearanceContext(model, image_index=0, embedding=torch.zeros(32, dtype=DTYPE))

    def test_index_bounds(self):
        model = AppearanceModel(n_images=2, seed=0)
        with pytest.raises(ContractError):
            AppearanceContext(model, image_index=2)

    def test_fixed_embedding_path(self):
        model = AppearanceModel(n_images=2, seed=0)
        e = torch.randn(32, dtype=DTYPE, generator=torch.Generator().manual_seed(8))
        ctx = AppearanceContext(model, embedding=e)
        assert torch.equal(ctx.embedding, e)


def test_seeded_init_reproducible():
    a = AppearanceModel(n_images=3, seed=42)
    b = AppearanceModel(n_images=3, seed=42)
    for pa, pb in zip(a.mlp_parameters(), b.mlp_parameters()):
        assert torch.equal(pa, pb)
    c = AppearanceModel(n_images=3, seed=43)
    assert not torch.equal(a.w1, c.w1)


def test_state_roundtrip():
    model = AppearanceModel(n_images=2, seed=9)
    gen = torch.Generator().manual_seed(10)
    model.embeddings = torch.randn(2, 32, dtype=DTYPE, generator=gen)
    clone = AppearanceModel.from_state(model.state_arrays())
    for a, b in zip(clone.mlp_parameters(), model.mlp_parameters()):
        assert torch.equal(a, b)
    assert torch.equal(clone.embeddings, model.embeddings)
