"""Latent normalisation, fixed-noise corruption and the latent denoiser.

The denoiser is trained at a single noise level ``sigma``; by the empirical
Bayes identity its least-squares estimate yields the score of the smoothed
latent density, ``(denoise(y) - y) / sigma**2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tensornn import checkpoint
from .tensornn.layers import Layer, Linear, NonFiniteError
from .tensornn.model import prefixed, unprefixed
from .tensornn.optim import AdamW, EmaShadow
from .tensornn.unet import UNet3d

logger = logging.getLogger(__name__)

MIN_SCALE = 1e-8


class LatentNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel standardisation of latents shaped ``[N, C, ...]``.

    Statistics use the population (divide-by-N) convention over the batch and
    spatial axes. Channels whose spread falls below ``1e-8`` are clamped and
    listed in ``clamped_``.
    """

    def fit(self, X, y=None):
        X = _as_batch(X)
        if X.shape[0] < 2:
            raise ValueError("fit_normalizer needs at least two latents")
        axes = (0,) + tuple(range(2, X.ndim))
        self.ndim_ = X.ndim
        self.mean_ = X.mean(axis=axes)
        scale = X.std(axis=axes)
        self.clamped_ = np.flatnonzero(scale < MIN_SCALE)
        self.scale_ = np.maximum(scale, MIN_SCALE)
        if self.clamped_.size:
            logger.warning("clamped %d near-constant latent channels", self.clamped_.size)
        return self

    def _stats(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X)
        # a single latent lacks the batch axis seen at fit time
        lead = (1,) if X.ndim == self.ndim_ else ()
        shape = lead + (-1,) + (1,) * (X.ndim - len(lead) - 1)
        return X, self.mean_.reshape(shape), self.scale_.reshape(shape)

    def transform(self, X):
        X, mean, scale = self._stats(X)
        return (X - mean) / scale

    def inverse_transform(self, X):
        X, mean, scale = self._stats(X)
        return X * scale + mean

    normalize = transform
    unnormalize = inverse_transform


def _as_batch(X) -> np.ndarray:
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ValueError(f"latents need a batch and channel axis, got {X.shape}")
    return X


def fit_normalizer(latents) -> LatentNormalizer:
    if len(latents) == 0:
        raise ValueError("fit_normalizer got no latents")
    return LatentNormalizer().fit(latents)


@dataclass
class NoiseModel:
    sigma: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("noise level sigma must be positive")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def corrupt(z: np.ndarray, noise: NoiseModel, rng: np.random.Generator | None = None):
    """``y = z + sigma * eps`` with standard normal ``eps``."""
    rng = noise.rng() if rng is None else rng
    return z + noise.sigma * rng.standard_normal(np.shape(z))


class AffineDenoiser:
    """Fixed ``scale * y + shift``; the exact posterior mean for Gaussian data."""

    def __init__(self, scale: float, shift: float = 0.0, sigma: float = 1.8):
        self.scale, self.shift, self.sigma = scale, shift, sigma

    @classmethod
    def gaussian_posterior(cls, sigma: float, prior_var: float = 1.0):
        return cls(prior_var / (prior_var + sigma ** 2), 0.0, sigma)

    def predict(self, y):
        return self.scale * np.asarray(y) + self.shift


class IdentityDenoiser:
    def __init__(self, sigma: float = 1.8):
        self.sigma = sigma

    def predict(self, y):
        return np.array(y, copy=True)


class LatentDenoiser(BaseEstimator):
    """Trainable denoiser ``zeta(y) -> z`` with EMA weights for inference.

    Parameters
    ----------
    network : "unet" (default) or "linear" (channel-wise affine map).
    sigma : training noise level, stored with the weights.
    widths, heads, dropout : U-Net settings.
    lr, weight_decay, ema_decay : optimisation settings.
    epochs, batch_size : used by :meth:`fit`.
    """

    def __init__(self, network="unet", sigma=1.8, widths=(32, 64), heads=1, dropout=0.1,
                 lr=1e-5, weight_decay=1e-2, ema_decay=0.999, epochs=30, batch_size=32,
                 subsample=1.0, random_state=0, dtype=np.float64, use_ema=True):
        self.network = network
        self.sigma = sigma
        self.widths = widths
        self.heads = heads
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.subsample = subsample
        self.random_state = random_state
        self.dtype = dtype
        self.use_ema = use_ema

    def build(self, channels: int) -> "LatentDenoiser":
        rng = np.random.default_rng(self.random_state)
        if self.network == "unet":
            net = UNet3d(channels, channels, tuple(self.widths), self.heads, self.dropout,
                         rng=rng, dtype=self.dtype)
        elif self.network == "linear":
            net = Linear(channels, channels, rng=rng, dtype=self.dtype)
        else:
            raise ValueError(f"unknown denoiser network {self.network!r}")
        self.net_ = net
        self.channels_ = channels
        self.opt_ = AdamW(self.lr, weight_decay=self.weight_decay)
        self.ema_ = EmaShadow(net.params, self.ema_decay)
        self.rng_ = np.random.default_rng([self.random_state, 1])
        self.loss_curve_: list[float] = []
        return self

    def fit(self, Z, y=None):
        """Train on clean normalised latents ``Z`` shaped ``[N, C, ...]``."""
        for _ in range(self.epochs):
            self.partial_fit(Z)
        return self

    def partial_fit(self, Z, y=None):
        """One epoch over a fresh ``subsample`` draw of ``Z``."""
        Z = np.asarray(Z, dtype=self.dtype)
        if not hasattr(self, "net_"):
            self.build(Z.shape[1])
        noise = NoiseModel(self.sigma)
        n = len(Z)
        take = max(1, int(round(self.subsample * n)))
        order = self.rng_.permutation(n)[:take]
        losses = []
        for start in range(0, take, self.batch_size):
            batch = Z[order[start:start + self.batch_size]]
            losses.append(dae_train_step(batch, self, noise, self.opt_, self.rng_))
        self.loss_curve_.append(float(np.mean(losses)))
        logger.info("dae epoch %d loss %.6g", len(self.loss_curve_) - 1, self.loss_curve_[-1])
        return self

    def inference_params(self):
        return self.ema_.shadow if self.use_ema else self.net_.params

    def predict(self, Y):
        """Denoised estimate; accepts a single latent or a batch."""
        check_is_fitted(self, "net_")
        Y = np.asarray(Y, dtype=self.dtype)
        single = Y.ndim == (5 if self.network == "unet" else 2) - 1
        if single:
            Y = Y[None]
        live = self.net_.params
        self.net_.load_params(self.inference_params())
        try:
            out = self.net_.forward(Y, train=False)[0]
        finally:
            self.net_.load_params(live)
        return out[0] if single else out

    def latent_score(self, Y):
        return score(Y, self, NoiseModel(self.sigma))

    # -- persistence ----------------------------------------------------------

    def to_tensors(self, normalizer: LatentNormalizer | None = None) -> tuple[dict, dict]:
        """Live + EMA weights; the latent normalizer travels with them."""
        check_is_fitted(self, "net_")
        tensors = prefixed("live", self.net_.params)
        tensors.update(prefixed("ema", self.ema_.shadow))
        meta = {"kind": "denoiser", "sigma": float(self.sigma), "channels": self.channels_,
                "estimator": checkpoint.estimator_meta(self.get_params()),
                "loss_curve": self.loss_curve_}
        if normalizer is not None:
            tensors["normalizer.mean"] = normalizer.mean_
            tensors["normalizer.scale"] = normalizer.scale_
            meta["normalizer"] = {"ndim": normalizer.ndim_,
                                  "clamped": normalizer.clamped_.tolist()}
        return tensors, meta

    def save(self, path, normalizer: LatentNormalizer | None = None):
        checkpoint.save(path, *self.to_tensors(normalizer))

    @classmethod
    def from_tensors(cls, tensors, meta):
        """Returns ``(denoiser, normalizer or None)``."""
        if meta.get("kind") != "denoiser":
            raise checkpoint.CheckpointError("checkpoint does not hold a latent denoiser")
        model = cls(**checkpoint.estimator_kwargs(meta["estimator"], ("widths",)))
        model.build(int(meta["channels"]))
        dtype = model.dtype
        model.net_.load_params({k: v.astype(dtype)
                                for k, v in unprefixed("live", tensors).items()})
        model.ema_.shadow = {k: v.astype(dtype) for k, v in unprefixed("ema", tensors).items()}
        model.loss_curve_ = list(meta.get("loss_curve", []))
        normalizer = None
        if "normalizer" in meta:
            normalizer = LatentNormalizer()
            normalizer.ndim_ = int(meta["normalizer"]["ndim"])
            normalizer.mean_ = tensors["normalizer.mean"]
            normalizer.scale_ = tensors["normalizer.scale"]
            normalizer.clamped_ = np.asarray(meta["normalizer"]["clamped"], dtype=np.int64)
        return model, normalizer

    @classmethod
    def load(cls, path):
        return cls.from_tensors(*checkpoint.load(path))


def dae_train_step(batch, denoiser: LatentDenoiser, noise: NoiseModel, opt: AdamW,
                   rng: np.random.Generator) -> float:
    """One optimisation step on ``||z - zeta(z + sigma * eps)||^2`` (batch mean).

    Fresh noise is drawn per sample; the step updates live and EMA weights.
    """
    z = np.asarray(batch, dtype=denoiser.dtype)
    y = corrupt(z, noise, rng).astype(z.dtype)
    net = denoiser.net_
    zhat, cache = net.forward(y, train=True)
    resid = zhat - z
    b = z.shape[0]
    loss = float((resid ** 2).sum() / b)
    if not np.isfinite(loss):
        raise NonFiniteError("denoising loss is not finite; step aborted")
    _, grads = net.backward(cache, 2.0 * resid / b)
    params = net.params
    opt.step(params, grads)
    denoiser.ema_.update(params)
    return loss


def score(y, denoiser, noise: NoiseModel | float):
    """Empirical-Bayes score ``(zeta(y) - y) / sigma**2``."""
    sigma = noise.sigma if isinstance(noise, NoiseModel) else float(noise)
    if sigma == 0:
        raise ValueError("score is undefined at sigma = 0")
    y = np.asarray(y)
    return (denoiser.predict(y) - y) / sigma ** 2


def denoiser_network(denoiser) -> Layer | None:
    return getattr(denoiser, "net_", None)
