"""Composite networks built from :mod:`layers`."""

from __future__ import annotations

import numpy as np

from .layers import Layer, check_finite


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)

    @property
    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                out[f"{i}.{name}"] = p
        return out

    @params.setter
    def params(self, value):
        # Layer.__init__ assigns an empty dict; ignore it
        if value:
            self.load_params(value)

    def load_params(self, params: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            layer.load_params(unprefixed(str(i), params))

    def forward(self, x, train=False):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        check_finite(x, "sequential output")
        return x, caches

    def backward(self, caches, dy):
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(caches[i], dy)
            for name, v in g.items():
                grads[f"{i}.{name}"] = v
        return dy, grads

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Sequential(\n  {inner}\n)"


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def unprefixed(prefix: str, params: dict) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def n_parameters(params: dict) -> int:
    return int(sum(p.size for p in params.values()))
