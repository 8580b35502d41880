import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from errors import ConfigError, DataError, DomainError
from models import (
    DsvddModel,
    MlpModel,
    VaeModel,
    build_model,
    dsvdd_center_init,
    dsvdd_loss,
    kl_diag_gaussian,
    reconstruction_score,
    vae_encode,
    vae_loss,
)
from numeric import (
    DTYPE,
    FlatParams,
    MlpSpec,
    Rng,
    central_difference,
    gaussian_sample,
    init_params,
    layout_for,
    per_sample_gradient,
    unflatten,
)


def _vae_1d(encoder_weight, encoder_bias, decoder_weight, decoder_bias, mc_samples=1) -> VaeModel:
    """1-D data, 1-D latent, one affine layer each way"""
    encoder = MlpSpec(layer_widths=(1, 2))
    decoder = MlpSpec(layer_widths=(1, 1))
    tensors = [
        torch.tensor(encoder_weight, dtype=DTYPE).reshape(2, 1),
        torch.tensor(encoder_bias, dtype=DTYPE),
        torch.tensor([[decoder_weight]], dtype=DTYPE),
        torch.tensor([decoder_bias], dtype=DTYPE),
    ]
    params = FlatParams.flatten(tensors, layout_for(encoder, decoder))
    return VaeModel(encoder, decoder, params, latent_dim=1, mc_samples=mc_samples)


def _identity_dsvdd(dim=2) -> DsvddModel:
    spec = MlpSpec(layer_widths=(dim, dim), final_bias=False)
    return DsvddModel(spec, FlatParams.flatten([torch.eye(dim, dtype=DTYPE)], layout_for(spec)))


# =========================================================================
# VAE
# =========================================================================

def test_zero_encoder_gives_standard_posterior(rng):
    model = VaeModel.build(5, (4,), 3, rng)
    model = model.with_params(model.params.with_values(torch.zeros(len(model.params), dtype=DTYPE)))
    mu, sigma = vae_encode(model, np.ones(5))
    assert torch.equal(mu, torch.zeros(3, dtype=DTYPE))
    assert torch.equal(sigma, torch.ones(3, dtype=DTYPE))


def test_sigma_is_always_positive(rng):
    model = VaeModel.build(4, (6, 5), 2, rng)
    _, sigma = vae_encode(model, torch.randn(50, 4, dtype=DTYPE) * 10)
    assert (sigma > 0).all()


def test_encoder_matches_hand_evaluation():
    model = _vae_1d([2.0, 0.5], [0.1, -0.3], 1.0, 0.0)
    mu, sigma = vae_encode(model, [1.5])
    assert float(mu[0]) == pytest.approx(3.1)
    assert float(sigma[0]) == pytest.approx(math.exp(0.5 * 0.45))


@pytest.mark.parametrize("mu, sigma, expected", [
    ([0.0], [1.0], 0.0),
    ([1.0], [1.0], 0.5),
    ([0.0], [2.0], 0.5 * (4.0 - 1.0 - math.log(4.0))),
])
def test_kl_closed_form(mu, sigma, expected):
    assert kl_diag_gaussian(mu, sigma) == pytest.approx(expected, abs=1e-12)


def test_kl_spot_value():
    assert kl_diag_gaussian([0.0], [2.0]) == pytest.approx(0.80685, abs=1e-5)


def test_kl_is_non_negative():
    gen = np.random.default_rng(3)
    for _ in range(200):
        dim = int(gen.integers(1, 6))
        assert kl_diag_gaussian(gen.normal(size=dim), np.exp(gen.normal(size=dim))) >= 0.0


def test_kl_rejects_non_positive_sigma():
    with pytest.raises(DomainError):
        kl_diag_gaussian([0.0, 0.0], [1.0, 0.0])


def test_perfect_decoder_has_zero_loss():
    # mu = 0, log sigma^2 = 0 for every input and a decoder that ignores z
    model = _vae_1d([0.0, 0.0], [0.0, 0.0], 0.0, 0.7, mc_samples=4)
    assert vae_loss(model, [0.7], Rng(0)) == 0.0


def test_vae_loss_is_non_negative(rng):
    model = VaeModel.build(3, (4,), 2, rng, mc_samples=3)
    gen = np.random.default_rng(1)
    for seed in range(30):
        assert vae_loss(model, gen.normal(size=3) * 3, Rng(seed)) >= 0.0


def test_vae_loss_matches_hand_trace():
    # mu = x, sigma = 1, decoder = identity: loss = mean 1/2 eps^2 + 1/2 x^2
    model = _vae_1d([1.0, 0.0], [0.0, 0.0], 1.0, 0.0, mc_samples=2)
    eps = gaussian_sample(Rng(5), 2, 1).reshape(-1)
    expected = 0.5 * float((eps ** 2).mean()) + 0.5 * 0.5 ** 2
    assert vae_loss(model, [0.5], Rng(5)) == pytest.approx(expected, abs=1e-14)


def test_reconstruction_score_examples():
    decoder_constant = _vae_1d([0.3, 0.0], [0.0, 0.0], 0.0, 0.5)
    assert reconstruction_score(decoder_constant, [2.0]) == pytest.approx(2.25)
    identity = _vae_1d([1.0, 0.0], [0.0, -5.0], 1.0, 0.0)
    assert reconstruction_score(identity, [1.7]) == 0.0


def test_reconstruction_score_is_non_negative_and_batched(rng):
    model = VaeModel.build(4, (3,), 2, rng)
    rows = torch.randn(20, 4, dtype=DTYPE)
    scores = model.baseline_scores(rows)
    assert (scores >= 0).all()
    assert scores[7] == pytest.approx(reconstruction_score(model, rows[7]))


def _random_architecture(gen: np.random.Generator):
    input_dim = int(gen.integers(1, 6))
    hidden = tuple(int(w) for w in gen.integers(1, 7, size=int(gen.integers(0, 3))))
    return input_dim, hidden, int(gen.integers(1, 4))


@pytest.mark.parametrize("seed", range(100))
def test_vae_gradient_matches_finite_differences_with_frozen_noise(seed):
    gen = np.random.default_rng(seed)
    input_dim, hidden, latent_dim = _random_architecture(gen)
    mc_samples = int(gen.integers(1, 4))
    model = VaeModel.build(input_dim, hidden, latent_dim, Rng(seed), mc_samples=mc_samples)
    objective = model.objective()
    x = torch.as_tensor(gen.normal(size=input_dim), dtype=DTYPE)
    noise = gaussian_sample(Rng(seed + 100), mc_samples, latent_dim)

    analytic = per_sample_gradient(None, model.params, x, objective, noise).values
    numeric = central_difference(lambda theta: objective(unflatten(theta, model.params.layout), x, noise),
                                 model.params.values)
    assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-4, atol=1e-8)


@pytest.mark.slow
def test_reconstruction_variance_shrinks_like_one_over_l():
    base = VaeModel.build(3, (4,), 2, Rng(9))
    x = [1.0, -0.5, 2.0]
    mu, sigma = vae_encode(base, x)
    kl = kl_diag_gaussian(mu, sigma)
    sizes = [4, 16, 64, 256]
    variances = []
    for l in sizes:
        model = VaeModel(base.encoder_spec, base.decoder_spec, base.params, base.latent_dim, mc_samples=l)
        values = [vae_loss(model, x, Rng(1000 * l + s)) - kl for s in range(400)]
        variances.append(np.var(values, ddof=1))
    slope = np.polyfit(np.log(sizes), np.log(variances), 1)[0]
    assert -1.2 < slope < -0.8


def test_vae_rejects_mismatched_parts(rng):
    model = VaeModel.build(4, (3,), 2, rng)
    with pytest.raises(ConfigError):
        VaeModel(model.encoder_spec, model.decoder_spec, model.params, latent_dim=3)


# =========================================================================
# DEEP SVDD
# =========================================================================

def test_center_of_zero_encoder_is_clamped():
    spec = MlpSpec(layer_widths=(3, 4, 2), final_bias=False)
    size = sum(s.size for s in layout_for(spec))
    model = DsvddModel(spec, FlatParams(torch.zeros(size, dtype=DTYPE), layout_for(spec)))
    center = dsvdd_center_init(model, torch.randn(10, 3, dtype=DTYPE))
    assert center.tolist() == [0.1, 0.1]


def test_center_of_identity_encoder_is_the_mean():
    model = _identity_dsvdd()
    center = dsvdd_center_init(model, [[1.0, 2.0], [3.0, 4.0]])
    assert center.tolist() == [2.0, 3.0]
    assert torch.equal(center, dsvdd_center_init(model, [[1.0, 2.0], [3.0, 4.0]]))


def test_center_keeps_sign_when_clamping():
    center = dsvdd_center_init(_identity_dsvdd(), [[-0.02, 0.5], [0.0, 0.7]])
    assert center.tolist() == pytest.approx([-0.1, 0.6])


def test_center_needs_rows():
    with pytest.raises(DataError):
        dsvdd_center_init(_identity_dsvdd(), torch.zeros(0, 2, dtype=DTYPE))


def test_dsvdd_loss_examples():
    model = _identity_dsvdd().with_center(torch.zeros(2, dtype=DTYPE))
    assert dsvdd_loss(model, [3.0, 4.0]) == 25.0
    at_center = _identity_dsvdd().with_center(torch.tensor([1.5, -2.0], dtype=DTYPE))
    assert dsvdd_loss(at_center, [1.5, -2.0]) == 0.0


def test_dsvdd_loss_is_non_negative_and_matches_baseline(rng):
    model = DsvddModel.build(4, (5,), 3, rng)
    rows = torch.randn(30, 4, dtype=DTYPE)
    model = model.with_center(dsvdd_center_init(model, rows))
    scores = model.baseline_scores(rows)
    assert (scores >= 0).all()
    assert scores[3] == pytest.approx(dsvdd_loss(model, rows[3]))


@pytest.mark.parametrize("seed", range(100))
def test_dsvdd_gradient_matches_finite_differences(seed):
    gen = np.random.default_rng(seed)
    input_dim, hidden, latent_dim = _random_architecture(gen)
    model = DsvddModel.build(input_dim, hidden, latent_dim, Rng(seed))
    model = model.with_center(dsvdd_center_init(model, gaussian_sample(Rng(seed + 200), 8, input_dim)))
    objective = model.objective()
    x = torch.as_tensor(gen.normal(size=input_dim), dtype=DTYPE)

    analytic = per_sample_gradient(None, model.params, x, objective).values
    numeric = central_difference(lambda theta: objective(unflatten(theta, model.params.layout), x, None),
                                 model.params.values)
    assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-5, atol=1e-8)


def test_dsvdd_rejects_final_bias_and_missing_center(rng):
    with_bias = MlpSpec(layer_widths=(3, 2))
    with pytest.raises(ConfigError):
        DsvddModel(with_bias, init_params(rng, with_bias))
    with pytest.raises(ConfigError, match="center"):
        DsvddModel.build(3, (4,), 2, rng).objective()


# =========================================================================
# FACTORY AND FINGERPRINTS
# =========================================================================

def test_build_model_dispatch(rng):
    assert isinstance(build_model("vae", 4, (3,), 2, rng), VaeModel)
    assert isinstance(build_model("dsvdd", 4, (3,), 2, rng), DsvddModel)
    with pytest.raises(ConfigError):
        build_model("isolation-forest", 4, (3,), 2, rng)


def test_fingerprint_tracks_the_architecture_not_the_values():
    a = VaeModel.build(4, (3,), 2, Rng(0))
    b = VaeModel.build(4, (3,), 2, Rng(1))
    c = VaeModel.build(4, (5,), 2, Rng(0))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()
    assert len(a.fingerprint()) == 32


def test_mlp_model_baseline_is_squared_error():
    spec = MlpSpec(layer_widths=(2, 2))
    params = FlatParams.flatten([torch.zeros(2, 2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)], layout_for(spec))
    model = MlpModel(spec, params)
    assert model.baseline_scores([[3.0, 4.0]]).tolist() == [25.0]
