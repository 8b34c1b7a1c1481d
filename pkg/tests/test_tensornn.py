import math

import numpy as np
import pytest

from gradcases import CASES, input_for
from voxwalk.tensornn import checkpoint
from voxwalk.tensornn.gradcheck import check_layer
from voxwalk.tensornn.layers import (Attention, Conv3d, ConvTranspose3d, Dropout, GroupNorm,
                                     Linear, NonFiniteError, ShapeError, SiLU, forward)
from voxwalk.tensornn.model import Sequential
from voxwalk.tensornn.optim import AdamW, EmaShadow, adamw_step, ema_update
from voxwalk.tensornn.unet import UNet3d


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck(name):
    layer = CASES[name][0]()
    errors = check_layer(layer, input_for(name), np.random.default_rng(0))
    assert max(errors.values()) <= 1e-4, errors


@pytest.mark.parametrize("name", ["conv k3 s1", "convT k4 s2 p1", "groupnorm g2",
                                  "attention h2", "silu"])
def test_zero_upstream_gradient(name):
    layer = CASES[name][0]()
    y, cache = layer.forward(input_for(name))
    dx, grads = layer.backward(cache, np.zeros_like(y))
    assert not dx.any()
    assert all(not g.any() for g in grads.values())


def test_silu_values():
    silu = SiLU()
    assert silu(np.array([0.0]))[0] == 0.0
    x = np.array([-50.0, -1.0, 2.0])
    assert np.allclose(silu(x), x / (1 + np.exp(-x)))
    y, cache = silu.forward(np.array([-40.0]))
    dx, _ = silu.backward(cache, np.ones(1))
    assert abs(dx[0]) < 1e-15


def test_identity_conv():
    conv = Conv3d(3, 3, 1)
    conv.params["weight"][:] = np.eye(3).reshape(3, 3, 1, 1, 1)
    conv.params["bias"][:] = 0
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4, 4))
    assert np.array_equal(conv(x), x)


def test_two_position_attention_by_hand():
    att = Attention(1, 1, residual=False)
    att.params["w_qkv"][:] = 1.0
    att.params["w_out"][:] = 1.0
    x = np.array([1.0, 2.0]).reshape(1, 1, 2)
    out = att(x).ravel()
    # q = k = v = x, logits x_i * x_j
    w0 = math.exp(1) / (math.exp(1) + math.exp(2))
    w1 = math.exp(2) / (math.exp(2) + math.exp(4))
    expect = [w0 * 1 + (1 - w0) * 2, w1 * 1 + (1 - w1) * 2]
    assert np.allclose(out, expect, atol=1e-14)


def test_shape_maps():
    x = np.zeros((1, 2, 8, 8, 8))
    down = Conv3d(2, 4, 4, 2, 1)
    y = down(x)
    assert y.shape == (1, 4, 4, 4, 4)
    up = ConvTranspose3d(4, 2, 4, 2, 1)
    assert up(y).shape == x.shape
    for n in (2, 6, 16, 32):
        assert up.output_shape(down.output_shape((n,) * 3)) == (n,) * 3


def test_shape_errors():
    with pytest.raises(ShapeError):
        Conv3d(2, 3)(np.zeros((1, 3, 4, 4, 4)))
    with pytest.raises(ShapeError):
        GroupNorm(3, 4)
    with pytest.raises(ShapeError):
        Attention(5, 2)
    with pytest.raises(ShapeError):
        Linear(3, 2)(np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        Conv3d(1, 1, 5, padding=0)(np.zeros((1, 1, 3, 3, 3)))


def test_non_finite_output_raises():
    conv = Conv3d(1, 1, 1)
    with pytest.raises(NonFiniteError):
        forward(conv, np.full((1, 1, 2, 2, 2), np.nan))


def test_forward_is_deterministic():
    a = UNet3d(2, 2, (4, 8), dropout=0.0, rng=np.random.default_rng(3))
    b = UNet3d(2, 2, (4, 8), dropout=0.0, rng=np.random.default_rng(3))
    x = np.random.default_rng(1).standard_normal((2, 2, 4, 4, 4))
    assert np.array_equal(a(x), b(x))
    assert np.array_equal(a(x), a(x))


def test_dropout_eval_identity_and_train_scaling():
    drop = Dropout(0.5, rng=np.random.default_rng(0))
    x = np.ones((1, 1, 20, 20, 20))
    assert drop(x) is x
    y = drop(x, train=True)
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


# -- optimiser --------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    AdamW(lr=0.1, weight_decay=0.0).step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adamw_one_step_by_hand():
    opt = AdamW(lr=0.1, weight_decay=0.01)
    p = {"w": np.array([1.0])}
    adamw_step(opt, p, {"w": np.array([0.5])})
    # m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25
    expect = 1.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
    assert abs(p["w"][0] - expect) <= 1e-12


def test_adamw_decay_only():
    opt = AdamW(lr=0.1, weight_decay=0.2)
    p = {"w": np.array([3.0])}
    opt.step(p, {"w": np.zeros(1)})
    assert p["w"][0] == pytest.approx(3.0 * (1 - 0.02), abs=1e-15)


def test_adamw_errors():
    opt = AdamW()
    with pytest.raises(ShapeError):
        opt.step({"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(NonFiniteError):
        opt.step({"w": np.zeros(2)}, {"w": np.array([0.0, np.inf])})
    opt.step({"w": np.zeros(2)}, {"w": np.ones(2)})
    assert opt.m["w"].shape == opt.v["w"].shape == (2,)


def test_ema_examples():
    live = {"w": np.array([1.0, 2.0])}
    ema = EmaShadow(live)
    ema_update(ema, live)
    assert np.array_equal(ema.shadow["w"], live["w"])

    ema = EmaShadow({"w": np.zeros(1)})
    ema.update({"w": np.ones(1)})
    assert ema.shadow["w"][0] == pytest.approx(0.001, abs=1e-15)
    for _ in range(99):
        ema.update({"w": np.ones(1)})
    assert ema.shadow["w"][0] == pytest.approx(1 - 0.999 ** 100, abs=1e-12)

    with pytest.raises(ShapeError):
        ema.update({"w": np.ones(2)})


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64),
               "c": np.float32([0.5])}
    checkpoint.save(tmp_path / "x.tnnc", tensors, {"k": [1, 2]})
    back, meta = checkpoint.load(tmp_path / "x.tnnc")
    assert meta == {"k": [1, 2]}
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_bad_blobs(tmp_path):
    blob = checkpoint.dumps({"a": np.zeros(1)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + blob[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:4] + b"\x09" + blob[5:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "missing.tnnc")


def test_load_params_checks_shapes():
    seq = Sequential(Conv3d(1, 2, 3), SiLU())
    with pytest.raises(ShapeError):
        seq.load_params({"0.weight": np.zeros((2, 1, 1, 1, 1))})
    new = {k: v + 1 for k, v in seq.params.items()}
    seq.load_params(new)
    assert seq.params["0.bias"] is new["0.bias"]
