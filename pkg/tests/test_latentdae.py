import numpy as np
import pytest

from voxwalk.latentdae import (AffineDenoiser, IdentityDenoiser, LatentDenoiser,
                               LatentNormalizer, NoiseModel, corrupt, fit_normalizer, score)


# -- normaliser -----------------------------------------------------------------

def test_constant_dataset_is_clamped():
    norm = fit_normalizer(np.full((3, 2, 2, 2, 2), 4.0))
    assert np.all(norm.mean_ == 4.0)
    assert np.all(norm.scale_ == 1e-8)
    assert norm.clamped_.tolist() == [0, 1]


def test_two_point_statistics():
    z = np.stack([-np.ones((3, 2, 2, 2)), np.ones((3, 2, 2, 2))])
    norm = fit_normalizer(z)
    assert np.allclose(norm.mean_, 0.0) and np.allclose(norm.scale_, 1.0)
    assert norm.clamped_.size == 0


def test_round_trip_and_single_latent():
    rng = np.random.default_rng(0)
    z = rng.normal(3.0, 2.0, (5, 4, 2, 2, 2)) * np.arange(1, 5)[None, :, None, None, None]
    norm = fit_normalizer(z)
    assert np.abs(norm.inverse_transform(norm.transform(z)) - z).max() <= 1e-10
    v = rng.standard_normal((4, 2, 2, 2))
    assert np.abs(norm.transform(norm.inverse_transform(v)) - v).max() <= 1e-10
    assert np.allclose(norm.transform(z)[2], norm.transform(z[2]))
    # normalised channels are standardised
    t = norm.transform(z)
    assert np.allclose(t.mean(axis=(0, 2, 3, 4)), 0, atol=1e-12)
    assert np.allclose(t.std(axis=(0, 2, 3, 4)), 1, atol=1e-12)


def test_normalizer_errors():
    with pytest.raises(ValueError):
        fit_normalizer([])
    with pytest.raises(ValueError):
        LatentNormalizer().fit(np.zeros((1, 2, 2)))


# -- corruption -------------------------------------------------------------------

def test_corrupt_limits_and_determinism():
    z = np.random.default_rng(0).standard_normal((4, 3))
    assert np.abs(corrupt(z, NoiseModel(1e-12)) - z).max() <= 1e-9
    assert np.array_equal(corrupt(z, NoiseModel(1.8, seed=5)), corrupt(z, NoiseModel(1.8, seed=5)))
    eps = corrupt(np.zeros(100_000), NoiseModel(1.8, seed=1))
    assert abs(eps.var() / 1.8 ** 2 - 1) <= 0.02
    with pytest.raises(ValueError):
        NoiseModel(0.0)


# -- score ------------------------------------------------------------------------

def test_identity_score_is_zero():
    y = np.random.default_rng(0).standard_normal(10)
    assert not score(y, IdentityDenoiser(1.8), 1.8).any()


def test_affine_score_matches_smoothed_density():
    sigma = 1.8
    y = np.linspace(-6, 6, 241)
    g = score(y, AffineDenoiser.gaussian_posterior(sigma), NoiseModel(sigma))
    # N(0, 1) smoothed by N(0, sigma^2) is N(0, 1 + sigma^2)
    assert np.abs(g - (-y / (1 + sigma ** 2))).max() <= 1e-12


def test_score_scaling_and_errors():
    y = np.array([1.0, -2.0])
    den = AffineDenoiser(0.3)
    assert np.allclose(score(y, den, 2.0), score(y, den, 1.0) / 4, rtol=1e-15)
    with pytest.raises(ValueError):
        score(y, den, 0.0)


# -- training ---------------------------------------------------------------------

def test_linear_denoiser_fits_noise_free_data():
    z = np.random.default_rng(0).standard_normal((256, 3))
    den = LatentDenoiser("linear", sigma=1e-12, lr=1e-2, weight_decay=0.0, epochs=150,
                         batch_size=64, use_ema=False).fit(z)
    assert den.loss_curve_[-1] <= 1e-6


def test_linear_denoiser_learns_bayes_shrinkage():
    z = np.random.default_rng(1).standard_normal((4000, 1))
    den = LatentDenoiser("linear", sigma=1.0, lr=3e-3, weight_decay=0.0, epochs=40,
                         batch_size=100, use_ema=False).fit(z)
    w = den.net_.params["weight"].item()
    b = den.net_.params["bias"].item()
    assert w == pytest.approx(0.5, abs=0.03)
    assert abs(b) < 0.05
    # the Bayes risk at sigma = 1 is the posterior variance 1/2 > 0
    assert min(den.loss_curve_) > 0.4


def _prototype_latents(seed, n=48, channels=4, m=4):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((4, channels, m, m, m))
    z = protos[rng.integers(0, 4, n)]
    return fit_normalizer(z).transform(z)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unet_loss_halves(seed):
    z = _prototype_latents(seed)
    den = LatentDenoiser(widths=(8, 16), lr=2e-3, epochs=10, batch_size=8, dropout=0.0,
                         random_state=seed).fit(z)
    assert den.loss_curve_[-1] <= 0.5 * den.loss_curve_[0]


def test_fit_is_deterministic_and_checkpoints(tmp_path):
    z = _prototype_latents(3, n=8)
    a = LatentDenoiser(widths=(4, 8), epochs=2, batch_size=4).fit(z)
    b = LatentDenoiser(widths=(4, 8), epochs=2, batch_size=4).fit(z)
    assert a.loss_curve_ == b.loss_curve_
    norm = fit_normalizer(z + 1.0)
    a.save(tmp_path / "d.tnnc", norm)
    back, back_norm = LatentDenoiser.load(tmp_path / "d.tnnc")
    assert back.sigma == a.sigma and back.get_params() == a.get_params()
    assert np.array_equal(back.predict(z[:2]), a.predict(z[:2]))
    assert np.array_equal(back_norm.transform(z), norm.transform(z))
    assert np.array_equal(a.predict(z[0]), a.predict(z[:1])[0])


def test_learned_score_uses_training_sigma():
    z = _prototype_latents(4, n=4)
    den = LatentDenoiser(widths=(4, 8), epochs=1, batch_size=4, sigma=0.7).fit(z)
    assert np.allclose(den.latent_score(z[:1]), (den.predict(z[:1]) - z[:1]) / 0.49)
