import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hfc_oracle, mask_oracle
from rsamseg.errors import DataError, ParameterError, ShapeError
from rsamseg.freq_prompt import (
    PromptGenerator,
    PromptGeneratorConfig,
    extract_hfc,
    extract_lfc,
    make_hfc_mask,
)

TAUS = (0.0, 0.1, 0.25, 0.5, 1.0)


def test_mask_tau_zero_is_center_cross():
    grid = make_hfc_mask(8, 8, 0.0).grid
    expected = torch.ones(8, 8)
    expected[4, :] = 0
    expected[:, 4] = 0
    assert torch.equal(grid, expected)


def test_mask_tau_one_is_all_zero():
    assert make_hfc_mask(8, 8, 1.0).grid.sum() == 0


def test_mask_quarter_matches_enumeration():
    mask = make_hfc_mask(8, 8, 0.25)
    oracle = mask_oracle(8, 8, 0.25)
    assert mask.zero_count == sum(row.count(0) for row in oracle) == 43


@pytest.mark.parametrize("h,w", [(8, 8), (15, 9), (7, 12), (2, 2)])
@pytest.mark.parametrize("tau", TAUS + (0.03, 1 / 3))
def test_mask_matches_enumeration_everywhere(h, w, tau):
    grid = make_hfc_mask(h, w, tau).grid
    assert grid.tolist() == mask_oracle(h, w, tau)


@pytest.mark.parametrize("tau", [-0.1, 1.5, float("nan")])
def test_mask_rejects_bad_tau(tau):
    with pytest.raises(ParameterError):
        make_hfc_mask(8, 8, tau)


@given(st.integers(2, 12), st.integers(2, 12), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_mask_nesting(h, w, a, b):
    lo, hi = sorted((a, b))
    small, large = make_hfc_mask(h, w, lo).grid, make_hfc_mask(h, w, hi).grid
    # raising tau only adds zeros
    assert torch.all(large <= small)


def test_constant_image_has_no_high_frequency():
    for shape in [(8, 8), (16, 16), (15, 8)]:
        for tau in TAUS:
            out = extract_hfc(torch.full((3, *shape), 7.5), tau)
            assert out.abs().max() < 1e-5


def test_constant_odd_image_keeps_dc_below_one_pixel_of_tau():
    # with both sides odd the DC bin is off the product-zero locus
    image = torch.full((1, 15, 9), 2.0)
    assert torch.allclose(extract_hfc(image, 0.0), image, atol=1e-5)
    assert extract_hfc(image, 1 / 135).abs().max() < 1e-5


def test_full_mask_zeroes_everything():
    image = torch.randn(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert extract_hfc(image, 1.0).abs().max() == 0


def test_random_eight_by_eight_matches_dft_oracle():
    rng = np.random.default_rng(3)
    image = rng.normal(size=(8, 8))
    got = extract_hfc(torch.tensor(image[None]), 0.25)[0].numpy()
    np.testing.assert_allclose(got, hfc_oracle(image.tolist(), 0.25), atol=1e-5)


def test_non_finite_input_raises():
    image = torch.zeros(1, 8, 8)
    image[0, 2, 3] = float("inf")
    with pytest.raises(DataError):
        extract_hfc(image, 0.25)


@given(st.integers(0, 2**16), st.sampled_from(TAUS), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_hfc_is_linear(seed, tau, alpha):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(2, 12, 10, generator=g, dtype=torch.float64)
    lhs = extract_hfc(alpha * x + y, tau)
    rhs = alpha * extract_hfc(x, tau) + extract_hfc(y, tau)
    assert torch.allclose(lhs, rhs, atol=1e-9)


@given(st.integers(0, 2**16), st.sampled_from([(8, 8), (16, 16), (15, 9)]), st.floats(0, 1))
@settings(max_examples=25, deadline=None)
def test_hfc_plus_lfc_reconstructs(seed, shape, tau):
    image = torch.randn(3, *shape, generator=torch.Generator().manual_seed(seed))
    total = extract_hfc(image, tau) + extract_lfc(image, tau)
    assert (total - image).abs().max() < 1e-5


def test_even_dims_leave_no_imaginary_residue():
    image = torch.randn(1, 16, 16, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    for tau in TAUS:
        grid = make_hfc_mask(16, 16, tau).grid.to(torch.float64)
        spec = torch.fft.fftshift(torch.fft.fft2(image), dim=(-2, -1)) * grid
        back = torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)))
        assert back.imag.abs().max() < 1e-9


def _generator(embed_dim=16, depth=2, tune_dim=4, patch=4, in_chans=3, **kw):
    torch.manual_seed(0)
    cfg = PromptGeneratorConfig(embed_dim=embed_dim, depth=depth, tune_dim=tune_dim, **kw)
    return PromptGenerator(cfg, in_chans=in_chans, patch_size=patch)


def test_embed_hfc_token_count():
    gen = _generator(patch=16)
    assert gen.embed_hfc(torch.randn(1, 3, 64, 64)).shape == (1, 16, 4)


def test_embed_hfc_zero_image_zero_bias():
    gen = _generator()
    with torch.no_grad():
        gen.hfc_embed.bias.zero_()
    assert gen.embed_hfc(torch.zeros(2, 3, 16, 16)).abs().max() == 0


def test_embed_hfc_rejects_indivisible():
    with pytest.raises(ShapeError):
        _generator(patch=8).embed_hfc(torch.zeros(1, 3, 20, 16))


def test_embed_hfc_per_patch_oracle():
    gen = _generator(patch=8)
    image = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(2))
    tokens = gen.embed_hfc(image)[0]
    w = gen.hfc_embed.weight.detach().reshape(4, -1)
    b = gen.hfc_embed.bias.detach()
    for k in range(16):
        r, c = divmod(k, 4)
        patch = image[0, :, 8 * r : 8 * r + 8, 8 * c : 8 * c + 8].reshape(-1)
        assert torch.allclose(tokens[k], w @ patch + b, atol=1e-5)


def test_tune_embedding_zero_scale():
    gen = _generator(fpe_scale=0.0)
    out = gen.tune_embedding(torch.randn(2, 5, 16))
    assert out.abs().max() == 0


def test_tune_embedding_identity():
    gen = _generator(embed_dim=8, tune_dim=8)
    with torch.no_grad():
        gen.embedding_generator.weight.copy_(torch.eye(8))
        gen.embedding_generator.bias.zero_()
    x = torch.randn(3, 4, 8)
    assert torch.equal(gen.tune_embedding(x), x)


def test_tune_embedding_matmul_oracle():
    gen = _generator(fpe_scale=0.7)
    x = torch.randn(2, 6, 16, dtype=torch.float64)
    gen = gen.double()
    w, b = gen.embedding_generator.weight.detach(), gen.embedding_generator.bias.detach()
    expected = np.einsum("bnd,td->bnt", x.numpy(), w.numpy()) + b.numpy()
    np.testing.assert_allclose(gen.tune_embedding(x).detach().numpy(), 0.7 * expected, atol=1e-6)


def test_tune_embedding_dim_mismatch():
    with pytest.raises(ShapeError):
        _generator().tune_embedding(torch.zeros(1, 4, 15))


def test_generate_prompt_zero_fixed_point():
    gen = _generator()
    with torch.no_grad():
        for lin in [*gen.tune, gen.up]:
            lin.bias.zero_()
    zero = torch.zeros(2, 9, 4)
    assert gen.generate_prompt(zero, zero, 1).abs().max() == 0


def test_generate_prompt_shape():
    gen = _generator(embed_dim=64, tune_dim=8)
    out = gen.generate_prompt(torch.randn(2, 16, 8), torch.randn(2, 16, 8), 0)
    assert out.shape == (2, 16, 64)


def test_generate_prompt_scalar_oracle():
    gen = _generator(embed_dim=1, depth=1, tune_dim=1, patch=1, in_chans=1)
    with torch.no_grad():
        gen.tune[0].weight.fill_(1.3)
        gen.tune[0].bias.fill_(-0.2)
        gen.up.weight.fill_(0.8)
        gen.up.bias.fill_(0.05)
    fpe, fhfc = 0.4, -0.9
    z = 1.3 * (fpe + fhfc) - 0.2
    expected = 0.8 * (0.5 * z * (1 + math.erf(z / math.sqrt(2)))) + 0.05
    got = gen.generate_prompt(torch.tensor([[[fpe]]]), torch.tensor([[[fhfc]]]), 0)
    assert abs(got.item() - expected) < 1e-6


def test_generate_prompt_errors():
    gen = _generator()
    with pytest.raises(ShapeError):
        gen.generate_prompt(torch.zeros(1, 4, 4), torch.zeros(1, 5, 4), 0)
    with pytest.raises(ParameterError):
        gen.generate_prompt(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), 2)


def test_tied_layers_give_identical_prompts():
    gen = _generator(depth=3)
    with torch.no_grad():
        for lin in gen.tune[1:]:
            lin.load_state_dict(gen.tune[0].state_dict())
    prompts = gen(torch.randn(1, 3, 16, 16), torch.randn(1, 16, 16))
    assert len(prompts) == 3
    assert torch.equal(prompts[0], prompts[1]) and torch.equal(prompts[1], prompts[2])


def test_prompt_config_validation():
    with pytest.raises(ParameterError):
        PromptGeneratorConfig(embed_dim=8, depth=1, tune_dim=9)
    with pytest.raises(ParameterError):
        PromptGeneratorConfig(embed_dim=8, depth=1, tau=1.2)
    assert PromptGeneratorConfig(embed_dim=64, depth=2).tune_dim == 4
