"""Central finite-difference checks for layer gradients."""

from __future__ import annotations

import numpy as np

from .layers import Layer


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max abs difference over the larger max magnitude.

    ``floor`` keeps parameters whose true gradient is zero (a bias feeding a
    normalisation) from turning finite-difference round-off into a large ratio.
    """
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d x for scalar ``f`` by central differences; perturbs ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator,
                eps: float = 1e-5) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``sum(w * layer(x))``.

    Returns the relative error for the input and every parameter.
    """
    y, _ = layer.forward(x)
    w = rng.standard_normal(y.shape)

    def loss():
        return float((layer.forward(x)[0] * w).sum())

    _, cache = layer.forward(x)
    dx, grads = layer.backward(cache, w)
    errors = {"input": relative_error(dx, numeric_grad(loss, x, eps))}
    for name, p in layer.params.items():
        errors[name] = relative_error(grads[name], numeric_grad(loss, p, eps))
    return errors
