import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxwalk.molgraph import Molecule
from voxwalk.tensornn.gradcheck import numeric_grad, relative_error
from voxwalk.tensornn.layers import ConvTranspose3d, Conv3d, ShapeError, Sigmoid
from voxwalk.tensornn.model import Sequential
from voxwalk.voxelizer import voxelize
from voxwalk.vqvae import (VQVAE, Codebook, VqLoss, nearest_codes, quantize,
                           reconstruction_iou, vq_gradients, vq_train_step)


def tiny(**kw):
    base = dict(edge_length=16, spacing=0.5, channels=("C", "O"), widths=(4, 8), code_dim=4,
                n_codes=8, lr=1e-2, epochs=2, batch_size=4, subsample=1.0, use_ema=False)
    base.update(kw)
    return VQVAE(**base).build()


def brute_force(vectors, emb):
    out = []
    for v in vectors:
        d = [float(np.sum((v - e) ** 2)) for e in emb]
        out.append(min(range(len(d)), key=lambda j: (d[j], j)))
    return np.array(out)


# -- quantize -----------------------------------------------------------------

def test_quantize_spec_examples():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    z = np.array([0.2, 0.1]).reshape(2, 1, 1, 1)
    assert quantize(z, cb).indices.item() == 0

    emb = np.random.default_rng(0).standard_normal((5, 3))
    code = quantize(emb[3].reshape(3, 1, 1, 1), Codebook(emb))
    assert code.indices.item() == 3
    assert np.array_equal(code.z_q, code.z_e)

    mid = np.array([0.5, 0.5]).reshape(2, 1, 1, 1)
    assert quantize(mid, cb).indices.item() == 0


def test_quantize_assembles_rows_and_counts_usage():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.standard_normal((6, 3)))
    z = rng.standard_normal((2, 3, 2, 2, 2))
    code = quantize(z, cb)
    assert code.indices.shape == (2, 2, 2, 2)
    for n, a, b, c in np.ndindex(code.indices.shape):
        assert np.array_equal(code.z_q[n, :, a, b, c], cb.embeddings[code.indices[n, a, b, c]])
    assert cb.usage.sum() == 16
    assert np.array_equal(cb.usage, np.bincount(code.indices.ravel(), minlength=6))
    quantize(z, cb, count=False)
    assert cb.usage.sum() == 16


def test_quantize_errors():
    with pytest.raises(ValueError):
        Codebook(np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        quantize(np.zeros((4, 1, 1, 1)), Codebook(np.zeros((2, 3))))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.integers(1, 5),
       st.booleans())
def test_nearest_matches_brute_force(seed, k, d, ties):
    rng = np.random.default_rng(seed)
    if ties:
        # small integer lattice: exact ties and duplicate codes are common
        emb = rng.integers(-2, 3, (k, d)).astype(float)
        vec = rng.integers(-2, 3, (30, d)) + rng.choice([0.0, 0.5], (30, d))
    else:
        emb = rng.standard_normal((k, d))
        vec = rng.standard_normal((30, d))
    assert np.array_equal(nearest_codes(vec, emb), brute_force(vec, emb))


def test_quantize_idempotent():
    rng = np.random.default_rng(2)
    cb = Codebook(rng.standard_normal((16, 4)))
    first = quantize(rng.standard_normal((3, 4, 2, 2, 2)), cb)
    second = quantize(first.z_q, cb)
    assert np.array_equal(second.z_q, first.z_q)
    assert np.array_equal(second.indices, first.indices)


def test_iou_helper():
    x = np.zeros((1, 2, 4, 4, 4))
    x[0, 0, :2] = 1.0
    y = x.copy()
    y[0, 0, 1] = 0.0
    assert reconstruction_iou(x, x) == 1.0
    assert reconstruction_iou(x, y) == pytest.approx(0.5)
    assert reconstruction_iou(np.zeros_like(x), np.zeros_like(x)) == 1.0


# -- model ----------------------------------------------------------------------

def test_desk_latent_shape_and_counts():
    model = VQVAE()
    assert model.latent_shape == (256, 8, 8, 8)
    counts = VQVAE.preset("paper-shape").compression_counts()
    assert counts["latent_elements"] == 524_288
    assert counts["voxel_elements"] == 2_097_152
    with pytest.raises(ValueError):
        VQVAE.preset("huge")


def test_encoder_zero_grid_and_translation():
    model = tiny()
    z0 = model.encode(np.zeros((1,) + model.grid_spec.shape))
    assert z0.shape == (1,) + model.latent_shape
    assert np.all(np.isfinite(z0))
    mol = Molecule(("C", "O"), np.array([[0.0, 0, 0], [1.2, 0, 0]]))
    spec = model.grid_spec
    a = voxelize(mol, spec, center=False).data[None]
    b = voxelize(mol.with_positions(mol.positions + [0.5, 0.5, 0]), spec, center=False).data
    assert not np.allclose(model.encode(a), model.encode(b[None]))


def test_decode_range_and_shape_errors():
    model = tiny()
    z = np.random.default_rng(0).standard_normal((2,) + model.latent_shape) * 5
    out = model.decode(z)
    assert out.shape == (2,) + model.grid_spec.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    with pytest.raises(ShapeError):
        model.decode(np.zeros((1, 3, 2, 2, 2)))
    with pytest.raises(ShapeError):
        model.encode(np.zeros((1, 2, 4, 4, 4)))


def _zero_all(obj):
    if isinstance(obj, np.ndarray) and obj.flags.writeable:
        obj[...] = 0
    elif isinstance(obj, (list, tuple)):
        for o in obj:
            _zero_all(o)


def test_no_skip_connections():
    model = tiny()
    x = np.random.default_rng(3).random((2,) + model.grid_spec.shape)
    z_e, caches = model.encoder_.forward(x, train=False)
    z_q = quantize(z_e, model.codebook_, count=False).z_q
    before = model.decode(z_q)
    _zero_all(caches)
    x[...] = 0
    assert np.array_equal(model.decode(z_q), before)


def test_vq_loss_total():
    assert VqLoss(0.0, 0.0, 0.0).total == 0.0
    loss = VqLoss(1.0, 2.0, 2.0, 0.25)
    assert loss.total == 1.0 + 2.0 + 0.25 * 2.0


def _toy_model(beta=0.25):
    """2 codes, one latent position, 1-channel 2x2x2 grid."""
    rng = np.random.default_rng(7)
    model = VQVAE(n_codes=2, code_dim=2, beta=beta, micro_batch=0)
    model.encoder_ = Sequential(Conv3d(1, 2, 2, 2, 0, rng=rng))
    model.decoder_ = Sequential(ConvTranspose3d(2, 1, 2, 2, 0, rng=rng), Sigmoid())
    model.codebook_ = Codebook(np.array([[0.3, -0.2], [-0.4, 0.5]]))
    return model


def test_straight_through_gradient_matches_finite_differences():
    model = _toy_model()
    x = np.random.default_rng(8).random((3, 1, 2, 2, 2))
    loss, grads = vq_gradients(x, model)
    z_e0 = model.encoder_(x)
    code = quantize(z_e0, model.codebook_, count=False)
    offset = code.z_q - z_e0        # frozen: sg[z_q - z_e]
    e = code.z_q.copy()             # frozen: sg[e]

    def surrogate():
        z_e = model.encoder_(x)
        x_hat = model.decoder_(z_e + offset)
        b = len(x)
        return (((x_hat - x) ** 2).sum() + model.beta * ((z_e - e) ** 2).sum()) / b

    assert surrogate() == pytest.approx(loss.reconstruction + model.beta * loss.commitment)
    for name, p in model.encoder_.params.items():
        num = numeric_grad(surrogate, p)
        assert relative_error(grads[f"encoder.{name}"], num) <= 1e-3


def test_codebook_gradient_moves_only_selected_codes():
    model = _toy_model()
    x = np.random.default_rng(9).random((4, 1, 2, 2, 2))
    _, grads = vq_gradients(x, model)
    z_e = model.encoder_(x)
    code = quantize(z_e, model.codebook_, count=False)
    expect = np.zeros((2, 2))
    for n in range(4):
        j = code.indices[n, 0, 0, 0]
        expect[j] += 2 * (model.codebook_.embeddings[j] - z_e[n, :, 0, 0, 0]) / 4
    assert np.allclose(grads["codebook"], expect, atol=1e-14)


def test_reconstruction_descent_direction():
    model = tiny()
    x = model.voxelize([Molecule(("C", "O"), np.array([[0.0, 0, 0], [1.2, 0, 0]]))] * 2)
    model.init_codebook(x)
    z_e0 = model.encoder_(x)
    offset = quantize(z_e0, model.codebook_, count=False).z_q - z_e0
    ref = {k: v.copy() for k, v in model.encoder_.params.items()}

    def rec():
        return float(((model.decoder_(model.encoder_(x) + offset) - x) ** 2).sum()) / len(x)

    # reconstruction-only gradient through the straight-through copy
    x_hat, c_dec = model.decoder_.forward(z_e0 + offset)
    dz, _ = model.decoder_.backward(c_dec, 2 * (x_hat - x) / len(x))
    _, g = model.encoder_.backward(model.encoder_.forward(x)[1], dz)
    start = rec()
    for lr in (1e-2, 1e-3, 1e-4, 1e-5):
        for k in ref:
            model.encoder_.params[k][...] = ref[k] - lr * g[k]
        assert rec() < start
    for k in ref:
        model.encoder_.params[k][...] = ref[k]


def test_train_step_updates_and_is_finite():
    model = tiny()
    x = np.random.default_rng(4).random((4,) + model.grid_spec.shape) * 0.1
    model.init_codebook(x)
    before = {k: v.copy() for k, v in model.params.items()}
    loss = vq_train_step(x, model)
    assert all(np.isfinite(v) and v >= 0 for v in loss.as_dict().values())
    assert model.opt_.step_count == 1
    changed = [k for k in before if not np.array_equal(before[k], model.params[k])]
    assert "codebook" in changed and any(k.startswith("encoder") for k in changed)


def test_micro_batches_accumulate_to_full_batch():
    x = np.random.default_rng(5).random((4,) + tiny().grid_spec.shape)
    a, b = tiny(micro_batch=0), tiny(micro_batch=1)
    a.init_codebook(x)
    b.codebook_.embeddings[...] = a.codebook_.embeddings
    la, ga = vq_gradients(x, a)
    lb, gb = vq_gradients(x, b)
    assert la.total == pytest.approx(lb.total, rel=1e-12)
    for k in ga:
        assert np.allclose(ga[k], gb[k], atol=1e-12)


MOLS = [Molecule(("C", "O"), np.array([[0.0, 0, 0], [1.2, 0, 0]])),
        Molecule(("C", "C", "O"), np.array([[0.0, 0, 0], [1.5, 0, 0], [0, 1.3, 0]]))]


def test_fit_transform_and_checkpoint(tmp_path):
    model = tiny().fit(MOLS * 2)
    assert len(model.loss_curve_) == 2 and len(model.usage_curve_) == 2
    z = model.transform(MOLS)
    assert z.shape == (2,) + model.latent_shape
    # transform yields codebook rows only
    rows = {tuple(r) for r in model.codebook_.embeddings}
    assert all(tuple(v) in rows for v in np.moveaxis(z, 1, -1).reshape(-1, 4))
    model.save(tmp_path / "vq.tnnc")
    back = VQVAE.load(tmp_path / "vq.tnnc")
    assert back.get_params() == model.get_params()
    assert np.array_equal(back.transform(MOLS), z)
    assert np.array_equal(back.inverse_transform(z), model.inverse_transform(z))


def test_fit_is_deterministic():
    a = tiny().fit(MOLS * 2)
    b = tiny().fit(MOLS * 2)
    assert a.loss_curve_ == b.loss_curve_
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
