"""AdamW with decoupled weight decay, and EMA shadow weights."""

from __future__ import annotations

import numpy as np

from .layers import NonFiniteError, ShapeError


def _check_pair(params, other, what):
    for name, p in params.items():
        if name not in other:
            raise ShapeError(f"{what} missing entry {name!r}")
        if other[name].shape != p.shape:
            raise ShapeError(f"{what} {name!r}: shape {other[name].shape} != {p.shape}")


class AdamW:
    def __init__(self, lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2,
                 no_decay=()):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        """Update ``params`` in place and return them."""
        _check_pair(params, grads, "gradient")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and name not in self.no_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count])}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out


def adamw_step(opt: AdamW, params, grads):
    return opt.step(params, grads)


class EmaShadow:
    """Exponential moving average of a parameter set."""

    def __init__(self, params: dict[str, np.ndarray], decay: float = 0.999):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, live: dict[str, np.ndarray]):
        _check_pair(self.shadow, live, "live parameters")
        d = self.decay
        for name, s in self.shadow.items():
            s *= d
            s += (1.0 - d) * live[name]
        return self.shadow


def ema_update(shadow: EmaShadow, live):
    return shadow.update(live)
