"""Layers with explicit forward/backward passes over numpy arrays.

Every layer maps ``x -> (y, cache)`` in :meth:`forward` and
``(cache, dy) -> (dx, grads)`` in :meth:`backward`. Spatial tensors are laid
out ``[batch, channels, D, H, W]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def _fan_in_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)[0]

    def load_params(self, params: dict[str, np.ndarray]):
        """Adopt the given arrays (shared, not copied) for matching names."""
        for name in list(self.params):
            if name in params:
                if params[name].shape != self.params[name].shape:
                    raise ShapeError(f"{self.kind} parameter {name!r}: shape "
                                     f"{params[name].shape} != {self.params[name].shape}")
                self.params[name] = params[name]

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{type(self).__name__}({shapes})"


# -- convolution helpers --------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, out: tuple[int, int, int]) -> np.ndarray:
    """Strided view ``[N, C, oD, oH, oW, k, k, k]`` over a padded input."""
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    return win[:, :, :out[0], :out[1], :out[2]]


def _scatter(cols: np.ndarray, k: int, stride: int, padded: tuple) -> np.ndarray:
    """Adjoint of :func:`_windows`.

    ``cols`` is laid out ``[C, k, k, k, N, oD, oH, oW]``; the patches are added
    back onto a zero tensor of shape ``padded`` (``[N, C, D, H, W]``). Offsets
    are accumulated per stride phase into contiguous buffers and interleaved
    once at the end.
    """
    c, n, od, oh, ow = cols.shape[0], *cols.shape[4:]
    s = stride
    kq = -(-k // s)
    buf = np.zeros((s, s, s, c, n, od + kq - 1, oh + kq - 1, ow + kq - 1), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                qa, qb, qe = a // s, b // s, e // s
                buf[a % s, b % s, e % s, :, :, qa:qa + od, qb:qb + oh, qe:qe + ow] += \
                    cols[:, a, b, e]
    span = tuple(s * m for m in buf.shape[5:])
    full = buf.transpose(4, 3, 5, 0, 6, 1, 7, 2).reshape((n, c) + span)
    out = np.zeros(padded, dtype=cols.dtype)
    d, h, w = (min(x, y) for x, y in zip(span, padded[2:]))
    out[:, :, :d, :h, :w] = full[:, :, :d, :h, :w]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _unpad(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p, p:-p]


def _conv(xp, weight, stride, out_sp):
    """Cross-correlation of a padded input; returns output and the windows view."""
    k = weight.shape[-1]
    win = _windows(xp, k, stride, out_sp)
    y = np.tensordot(win, weight, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, 4, 1)), win


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        fan_in = in_channels * kernel_size ** 3
        self.params = {
            "weight": _fan_in_init(rng, (out_channels, in_channels) + (kernel_size,) * 3,
                                   fan_in, dtype),
            "bias": _fan_in_init(rng, (out_channels,), fan_in, dtype),
        }

    def output_shape(self, spatial):
        k, s, p = self.kernel_size, self.stride, self.padding
        return tuple((n + 2 * p - k) // s + 1 for n in spatial)

    def forward(self, x, train=False):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv3d expects [N, {self.in_channels}, D, H, W], got {x.shape}")
        out_sp = self.output_shape(x.shape[2:])
        if min(out_sp) < 1:
            raise ShapeError(f"input {x.shape} too small for kernel {self.kernel_size}")
        xp = _pad(x, self.padding)
        y, win = _conv(xp, self.params["weight"], self.stride, out_sp)
        y += self.params["bias"][None, :, None, None, None]
        return y, (x.shape, xp.shape, win)

    def backward(self, cache, dy):
        x_shape, xp_shape, win = cache
        w = self.params["weight"]
        gw = np.tensordot(dy, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = dy.sum(axis=(0, 2, 3, 4))
        cols = np.tensordot(w, dy, axes=([0], [1]))           # C, k, k, k, N, oD, oH, oW
        dxp = _scatter(cols, self.kernel_size, self.stride, xp_shape)
        return _unpad(dxp, self.padding), {"weight": gw, "bias": gb}


class ConvTranspose3d(Layer):
    """Transposed convolution, the adjoint of :class:`Conv3d` with the same
    kernel/stride/padding. Weight layout is ``[in, out, k, k, k]``."""

    kind = "conv3d_transpose"

    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2, padding=1,
                 rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size ** 3 / stride ** 3
        self.params = {
            "weight": _fan_in_init(rng, (in_channels, out_channels) + (kernel_size,) * 3,
                                   fan_in, dtype),
            "bias": _fan_in_init(rng, (out_channels,), fan_in, dtype),
        }

    def output_shape(self, spatial):
        k, s, p = self.kernel_size, self.stride, self.padding
        return tuple((n - 1) * s - 2 * p + k for n in spatial)

    def forward(self, x, train=False):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv3d_transpose expects [N, {self.in_channels}, D, H, W], got {x.shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        out_sp = self.output_shape(x.shape[2:])
        cols = np.tensordot(self.params["weight"], x, axes=([0], [1]))  # O, k,k,k, N, iD,iH,iW
        padded = (x.shape[0], self.out_channels) + tuple(n + 2 * p for n in out_sp)
        y = _unpad(_scatter(cols, k, s, padded), p)
        y = y + self.params["bias"][None, :, None, None, None]
        return np.ascontiguousarray(y), (x, padded)

    def backward(self, cache, dy):
        x, padded = cache
        k, s, p = self.kernel_size, self.stride, self.padding
        dyp = _pad(dy, p)
        win = _windows(dyp, k, s, x.shape[2:])                    # N, O, iD, iH, iW, k,k,k
        dx = np.tensordot(win, self.params["weight"], axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        dx = np.moveaxis(dx, 4, 1)
        gw = np.tensordot(x, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = dy.sum(axis=(0, 2, 3, 4))
        return np.ascontiguousarray(dx), {"weight": gw, "bias": gb}


class GroupNorm(Layer):
    kind = "groupnorm"

    def __init__(self, groups, channels, eps=1e-5, dtype=np.float64):
        super().__init__()
        if channels % groups:
            raise ShapeError(f"{channels} channels not divisible into {groups} groups")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.params = {"weight": np.ones(channels, dtype=dtype),
                       "bias": np.zeros(channels, dtype=dtype)}

    def forward(self, x, train=False):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ShapeError(f"groupnorm expects {self.channels} channels, got {x.shape}")
        n = x.shape[0]
        xg = x.reshape(n, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mean) * inv).reshape(x.shape)
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        y = xhat * self.params["weight"].reshape(bshape) + self.params["bias"].reshape(bshape)
        return y, (xhat, inv, x.shape)

    def backward(self, cache, dy):
        xhat, inv, shape = cache
        n = shape[0]
        axes = (0,) + tuple(range(2, len(shape)))
        bshape = (1, -1) + (1,) * (len(shape) - 2)
        gw = (dy * xhat).sum(axis=axes)
        gb = dy.sum(axis=axes)
        dxhat = (dy * self.params["weight"].reshape(bshape)).reshape(n, self.groups, -1)
        xh = xhat.reshape(n, self.groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(shape), {"weight": gw, "bias": gb}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class SiLU(Layer):
    kind = "silu"

    def forward(self, x, train=False):
        s = _sigmoid(x)
        return x * s, (x, s)

    def backward(self, cache, dy):
        x, s = cache
        return dy * s * (1.0 + x * (1.0 - s)), {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        s = _sigmoid(x)
        return s, s

    def backward(self, cache, dy):
        s = cache
        return dy * s * (1.0 - s), {}


class Linear(Layer):
    """Affine map over axis 1: ``[N, in, ...] -> [N, out, ...]``."""

    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.params = {
            "weight": _fan_in_init(rng, (out_features, in_features), in_features, dtype),
            "bias": _fan_in_init(rng, (out_features,), in_features, dtype),
        }

    def forward(self, x, train=False):
        if x.ndim < 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects {self.in_features} features, got {x.shape}")
        xm = np.moveaxis(x, 1, -1)
        y = xm @ self.params["weight"].T + self.params["bias"]
        return np.ascontiguousarray(np.moveaxis(y, -1, 1)), xm

    def backward(self, cache, dy):
        xm = cache
        dym = np.moveaxis(dy, 1, -1)
        gw = dym.reshape(-1, self.out_features).T @ xm.reshape(-1, self.in_features)
        gb = dym.reshape(-1, self.out_features).sum(axis=0)
        dx = dym @ self.params["weight"]
        return np.ascontiguousarray(np.moveaxis(dx, -1, 1)), {"weight": gw, "bias": gb}


class Attention(Layer):
    """Multi-head dot-product self-attention across flattened spatial positions.

    With ``residual=True`` the block returns ``x + attn(x)``.
    """

    kind = "attention"

    def __init__(self, channels, heads=1, residual=True, rng=None, dtype=np.float64):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"{channels} channels not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.heads, self.residual = channels, heads, residual
        self.params = {
            "w_qkv": _fan_in_init(rng, (3 * channels, channels), channels, dtype),
            "b_qkv": np.zeros(3 * channels, dtype=dtype),
            "w_out": _fan_in_init(rng, (channels, channels), channels, dtype),
            "b_out": np.zeros(channels, dtype=dtype),
        }

    def forward(self, x, train=False):
        if x.ndim < 3 or x.shape[1] != self.channels:
            raise ShapeError(f"attention expects {self.channels} channels, got {x.shape}")
        n, c = x.shape[:2]
        h, dh = self.heads, c // self.heads
        tok = x.reshape(n, c, -1).transpose(0, 2, 1)                  # N, P, C
        qkv = tok @ self.params["w_qkv"].T + self.params["b_qkv"]     # N, P, 3C
        p = tok.shape[1]
        q, k, v = (qkv[..., i * c:(i + 1) * c].reshape(n, p, h, dh).transpose(0, 2, 1, 3)
                   for i in range(3))                                  # N, h, P, dh
        scale = 1.0 / np.sqrt(dh)
        logits = q @ k.transpose(0, 1, 3, 2) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=-1, keepdims=True)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(n, p, c)
        out = ctx @ self.params["w_out"].T + self.params["b_out"]
        y = out.transpose(0, 2, 1).reshape(x.shape)
        if self.residual:
            y = y + x
        return np.ascontiguousarray(y), (tok, q, k, v, a, ctx, x.shape)

    def backward(self, cache, dy):
        tok, q, k, v, a, ctx, shape = cache
        n, c = shape[:2]
        h, dh = self.heads, c // self.heads
        p = tok.shape[1]
        scale = 1.0 / np.sqrt(dh)
        dout = dy.reshape(n, c, -1).transpose(0, 2, 1)                 # N, P, C
        g = {
            "w_out": dout.reshape(-1, c).T @ ctx.reshape(-1, c),
            "b_out": dout.sum(axis=(0, 1)),
        }
        dctx = (dout @ self.params["w_out"]).reshape(n, p, h, dh).transpose(0, 2, 1, 3)
        da = dctx @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dctx
        dlogits = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = dlogits @ k
        dk = dlogits.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(n, p, c) for t in (dq, dk, dv)], axis=-1)
        g["w_qkv"] = dqkv.reshape(-1, 3 * c).T @ tok.reshape(-1, c)
        g["b_qkv"] = dqkv.sum(axis=(0, 1))
        dtok = dqkv @ self.params["w_qkv"]
        dx = dtok.transpose(0, 2, 1).reshape(shape)
        if self.residual:
            dx = dx + dy
        return np.ascontiguousarray(dx), g


class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    kind = "dropout"

    def __init__(self, rate=0.1, rng=None):
        super().__init__()
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            return x, None
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, cache, dy):
        if cache is None:
            return dy, {}
        return dy * cache, {}


def forward(layer: Layer, x: np.ndarray, train: bool = False):
    y, cache = layer.forward(x, train)
    check_finite(y, f"{layer.kind} output")
    return y, cache


def backward(layer: Layer, cache, grad_out: np.ndarray):
    return layer.backward(cache, grad_out)
