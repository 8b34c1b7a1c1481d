"""Two-level 3D U-Net with one encoder-decoder skip connection."""

from __future__ import annotations

import numpy as np

from .layers import (Attention, Conv3d, ConvTranspose3d, Dropout, GroupNorm, Layer, SiLU,
                     check_finite)
from .model import Sequential, prefixed, unprefixed


def norm_groups(channels: int, max_groups: int = 8) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class UNet3d(Layer):
    """``in -> [stem, conv] -(skip)-> [down, conv, attention, up] -> concat -> head -> out``.

    Spatial size must be even; the bottleneck runs at half resolution.
    """

    kind = "unet3d"

    def __init__(self, in_channels, out_channels=None, widths=(32, 64), heads=1,
                 dropout=0.1, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        out_channels = in_channels if out_channels is None else out_channels
        w0, w1 = widths
        self.in_channels, self.out_channels, self.widths = in_channels, out_channels, tuple(widths)
        kw = dict(rng=rng, dtype=dtype)
        self.enc = Sequential(
            Conv3d(in_channels, w0, 1, **kw),
            GroupNorm(norm_groups(w0), w0, dtype=dtype), SiLU(),
            Conv3d(w0, w0, 3, **kw),
        )
        self.mid = Sequential(
            Conv3d(w0, w1, 4, stride=2, padding=1, **kw),
            GroupNorm(norm_groups(w1), w1, dtype=dtype), SiLU(),
            Conv3d(w1, w1, 3, **kw),
            Attention(w1, heads, **kw),
            Dropout(dropout, rng=np.random.default_rng(rng.integers(2 ** 63))),
            ConvTranspose3d(w1, w0, 4, 2, 1, **kw),
        )
        self.dec = Sequential(
            GroupNorm(norm_groups(2 * w0), 2 * w0, dtype=dtype), SiLU(),
            Conv3d(2 * w0, w0, 3, **kw),
            GroupNorm(norm_groups(w0), w0, dtype=dtype), SiLU(),
            Conv3d(w0, out_channels, 1, **kw),
        )

    @property
    def params(self):
        out = {}
        for name in ("enc", "mid", "dec"):
            out.update(prefixed(name, getattr(self, name).params))
        return out

    @params.setter
    def params(self, value):
        if value:
            self.load_params(value)

    def load_params(self, params):
        for name in ("enc", "mid", "dec"):
            getattr(self, name).load_params(unprefixed(name, params))

    def astype(self, dtype):
        for name in ("enc", "mid", "dec"):
            getattr(self, name).astype(dtype)
        return self

    def forward(self, x, train=False):
        if x.ndim != 5 or x.shape[1] != self.in_channels or any(s % 2 for s in x.shape[2:]):
            raise ValueError(f"unet expects [N, {self.in_channels}, even D/H/W], got {x.shape}")
        h, c_enc = self.enc.forward(x, train)
        u, c_mid = self.mid.forward(h, train)
        y, c_dec = self.dec.forward(np.concatenate([u, h], axis=1), train)
        check_finite(y, "unet output")
        return y, (c_enc, c_mid, c_dec, u.shape[1])

    def backward(self, cache, dy):
        c_enc, c_mid, c_dec, split = cache
        dcat, g_dec = self.dec.backward(c_dec, dy)
        du, dh_skip = dcat[:, :split], dcat[:, split:]
        dh, g_mid = self.mid.backward(c_mid, du)
        dx, g_enc = self.enc.backward(c_enc, dh + dh_skip)
        grads = {}
        grads.update(prefixed("enc", g_enc))
        grads.update(prefixed("mid", g_mid))
        grads.update(prefixed("dec", g_dec))
        return dx, grads
