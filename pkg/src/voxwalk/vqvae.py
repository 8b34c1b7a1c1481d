"""Vector-quantised autoencoder for voxelised molecules.

Encoder and decoder are plain strided convolution stacks with attention at the
lowest resolution. The decoder only ever sees the quantised latent ``z_q``;
nothing from the encoder is carried across.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .molgraph import ELEMENTS, BondedMolecule, Molecule
from .tensornn import checkpoint
from .tensornn.layers import (Attention, Conv3d, ConvTranspose3d, GroupNorm, NonFiniteError,
                              ShapeError, Sigmoid, SiLU)
from .tensornn.model import Sequential, prefixed, unprefixed
from .tensornn.optim import AdamW, EmaShadow
from .tensornn.unet import norm_groups
from .voxelizer import GridSpec, random_rigid_transform, voxelize

logger = logging.getLogger(__name__)

COMMITMENT_COST = 0.25
OUTPUT_BIAS = -5.0  # decoder starts close to an empty grid


class Codebook:
    """``K`` embedding vectors of width ``d`` plus per-code usage counters."""

    def __init__(self, embeddings):
        emb = np.asarray(embeddings)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError(f"codebook needs a non-empty [K, d] array, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise NonFiniteError("codebook embeddings are not finite")
        self.embeddings = emb
        self.usage = np.zeros(emb.shape[0], dtype=np.int64)

    @classmethod
    def random(cls, n_codes=256, dim=256, rng=None, scale=1.0, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls((scale * rng.standard_normal((n_codes, dim))).astype(dtype))

    @property
    def n_codes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def usage_fraction(self) -> float:
        return float(np.count_nonzero(self.usage)) / self.n_codes

    def reset_usage(self):
        self.usage[:] = 0


@dataclass
class LatentCode:
    """``z_e``, ``z_q`` shaped ``[d, m, m, m]`` (or batched) and code indices."""

    z_e: np.ndarray
    z_q: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True)
class VqLoss:
    reconstruction: float
    codebook: float
    commitment: float
    beta: float = COMMITMENT_COST

    @property
    def total(self) -> float:
        return self.reconstruction + self.codebook + self.beta * self.commitment

    def as_dict(self) -> dict:
        return {"reconstruction": self.reconstruction, "codebook": self.codebook,
                "commitment": self.commitment, "total": self.total}


def nearest_codes(vectors: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Index of the closest embedding for each row of ``vectors``.

    Candidates come from the expanded squared distance; rows where more than
    one code lands within rounding distance of the minimum are settled with the
    direct sum of squares so ties go to the lowest index.
    """
    if embeddings.shape[0] == 0:
        raise ValueError("empty codebook")
    vectors = np.asarray(vectors)
    zz = np.einsum("ij,ij->i", vectors, vectors)
    ee = np.einsum("ij,ij->i", embeddings, embeddings)
    d2 = zz[:, None] - 2.0 * vectors @ embeddings.T + ee[None, :]
    best = d2.min(axis=1)
    tol = 1e-9 * (zz + ee.max() + 1.0)
    near = d2 <= (best + tol)[:, None]
    idx = near.argmax(axis=1)
    for row in np.flatnonzero(near.sum(axis=1) > 1):
        cands = np.flatnonzero(near[row])
        exact = [np.sum((vectors[row] - embeddings[j]) ** 2) for j in cands]
        idx[row] = cands[int(np.argmin(exact))]
    return idx


def quantize(z_e: np.ndarray, codebook: Codebook, count: bool = True) -> LatentCode:
    """Nearest-neighbour lookup at every spatial position.

    Accepts ``[d, m, m, m]`` or a batch ``[N, d, m, m, m]``.
    """
    z_e = np.asarray(z_e)
    single = z_e.ndim == 4
    batch = z_e[None] if single else z_e
    if batch.ndim != 5 or batch.shape[1] != codebook.dim:
        raise ShapeError(f"latent {z_e.shape} does not match codebook width {codebook.dim}")
    flat = np.moveaxis(batch, 1, -1).reshape(-1, codebook.dim)
    idx = nearest_codes(flat, codebook.embeddings)
    if count:
        codebook.usage += np.bincount(idx, minlength=codebook.n_codes)
    spatial = (batch.shape[0],) + batch.shape[2:]
    z_q = np.moveaxis(codebook.embeddings[idx].reshape(spatial + (codebook.dim,)), -1, 1)
    z_q = np.ascontiguousarray(z_q)
    idx = idx.reshape(spatial)
    if single:
        return LatentCode(z_e, z_q[0], idx[0])
    return LatentCode(z_e, z_q, idx)


def reconstruction_iou(x: np.ndarray, x_hat: np.ndarray, threshold: float = 0.5) -> float:
    """Mean per-channel IoU of the thresholded grids; empty channels are skipped."""
    a = np.asarray(x) > threshold
    b = np.asarray(x_hat) > threshold
    if a.ndim == 4:
        a, b = a[None], b[None]
    axes = (2, 3, 4)
    inter = (a & b).sum(axis=axes)
    union = (a | b).sum(axis=axes)
    mask = union > 0
    if not mask.any():
        return 1.0
    return float(np.mean(inter[mask] / union[mask]))


# -- networks ---------------------------------------------------------------

def build_encoder(in_channels, widths, code_dim, heads=1, rng=None, dtype=np.float64):
    """One stride-2 stage per width, attention at the bottom, 1x1 projection to ``code_dim``."""
    kw = dict(rng=rng, dtype=dtype)
    layers, c = [], in_channels
    for w in widths:
        layers += [Conv3d(c, w, 4, stride=2, padding=1, **kw),
                   GroupNorm(norm_groups(w), w, dtype=dtype), SiLU()]
        c = w
    layers += [Attention(c, heads, **kw), Conv3d(c, code_dim, 1, **kw)]
    return Sequential(*layers)


def build_decoder(out_channels, widths, code_dim, heads=1, rng=None, dtype=np.float64):
    """Mirror of :func:`build_encoder` ending in a sigmoid."""
    kw = dict(rng=rng, dtype=dtype)
    widths = tuple(widths)
    c = widths[-1]
    layers = [Conv3d(code_dim, c, 1, **kw), GroupNorm(norm_groups(c), c, dtype=dtype), SiLU(),
              Attention(c, heads, **kw)]
    for w in widths[-2::-1]:
        layers += [ConvTranspose3d(c, w, 4, 2, 1, **kw),
                   GroupNorm(norm_groups(w), w, dtype=dtype), SiLU()]
        c = w
    head = ConvTranspose3d(c, out_channels, 4, 2, 1, **kw)
    head.params["weight"] *= 0.1
    head.params["bias"][:] = OUTPUT_BIAS
    return Sequential(*layers, head, Sigmoid())


PRESETS = {
    # name: (edge_length, code_dim, widths)
    "desk": (32, 256, (32, 64)),
    "paper-shape": (64, 1024, (32, 64, 64)),
}


def latent_shape(edge_length: int, code_dim: int, levels: int = 2) -> tuple[int, int, int, int]:
    m = edge_length // 2 ** levels
    if m * 2 ** levels != edge_length:
        raise ShapeError(f"edge length {edge_length} is not divisible by {2 ** levels}")
    return (code_dim, m, m, m)


class VQVAE(TransformerMixin, BaseEstimator):
    """VQ-VAE over density grids.

    ``fit`` takes molecules (voxelised on the fly, with random rigid
    augmentation) or pre-voxelised grids ``[N, c, l, l, l]``. ``transform``
    returns quantised latents, ``inverse_transform`` decodes them.

    Parameters
    ----------
    edge_length, spacing, atom_radius, channels : grid geometry.
    n_codes, code_dim : codebook size ``K`` and width ``d``.
    widths : channel widths of the two resolution levels.
    beta : commitment weight.
    lr, weight_decay, ema_decay : optimiser settings.
    epochs, batch_size, micro_batch, subsample : training schedule; gradients
        of ``micro_batch``-sized chunks are accumulated into one step.
    augment, max_translation : random rotation + shift per sample per epoch.
    use_ema : decode and encode with the EMA weights after training.
    """

    def __init__(self, edge_length=32, spacing=0.25, atom_radius=0.25, channels=ELEMENTS,
                 n_codes=256, code_dim=256, widths=(32, 64), heads=1,
                 beta=COMMITMENT_COST, lr=1e-5, weight_decay=1e-2, ema_decay=0.999,
                 epochs=30, batch_size=32, micro_batch=8, subsample=0.1, augment=True,
                 max_translation=0.25, random_state=0, dtype=np.float64, use_ema=True):
        self.edge_length = edge_length
        self.spacing = spacing
        self.atom_radius = atom_radius
        self.channels = channels
        self.n_codes = n_codes
        self.code_dim = code_dim
        self.widths = widths
        self.heads = heads
        self.beta = beta
        self.lr = lr
        self.weight_decay = weight_decay
        self.ema_decay = ema_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.subsample = subsample
        self.augment = augment
        self.max_translation = max_translation
        self.random_state = random_state
        self.dtype = dtype
        self.use_ema = use_ema

    @classmethod
    def preset(cls, name: str, **overrides) -> "VQVAE":
        try:
            edge, dim, widths = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        kw = dict(edge_length=edge, code_dim=dim, widths=widths)
        kw.update(overrides)
        return cls(**kw)

    # -- geometry -----------------------------------------------------------

    @property
    def grid_spec(self) -> GridSpec:
        return GridSpec(self.edge_length, self.spacing, tuple(self.channels), self.atom_radius)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return latent_shape(self.edge_length, self.code_dim, len(self.widths))

    def compression_counts(self) -> dict:
        latent = int(np.prod(self.latent_shape))
        voxels = int(self.grid_spec.n_elements)
        return {"latent_elements": latent, "voxel_elements": voxels,
                "ratio": voxels / latent}

    # -- construction -------------------------------------------------------

    def build(self) -> "VQVAE":
        rng = np.random.default_rng(self.random_state)
        c = len(self.channels)
        widths = tuple(self.widths)
        self.encoder_ = build_encoder(c, widths, self.code_dim, self.heads, rng, self.dtype)
        self.decoder_ = build_decoder(c, widths, self.code_dim, self.heads, rng, self.dtype)
        self.codebook_ = Codebook.random(self.n_codes, self.code_dim, rng, dtype=self.dtype)
        self.codebook_initialized_ = False
        self.opt_ = AdamW(self.lr, weight_decay=self.weight_decay)
        self.ema_ = EmaShadow(self.params, self.ema_decay)
        self.rng_ = np.random.default_rng([self.random_state, 1])
        self.loss_curve_: list[dict] = []
        self.usage_curve_: list[float] = []
        return self

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(prefixed("encoder", self.encoder_.params))
        out.update(prefixed("decoder", self.decoder_.params))
        out["codebook"] = self.codebook_.embeddings
        return out

    def load_params(self, params: dict[str, np.ndarray]):
        self.encoder_.load_params(unprefixed("encoder", params))
        self.decoder_.load_params(unprefixed("decoder", params))
        if "codebook" in params:
            self.codebook_.embeddings = params["codebook"]

    def init_codebook(self, grids: np.ndarray):
        """Seed the codebook with encoder outputs at random positions."""
        z_e = self.encoder_.forward(np.asarray(grids, dtype=self.dtype), train=False)[0]
        flat = np.moveaxis(z_e, 1, -1).reshape(-1, self.code_dim)
        pick = self.rng_.choice(len(flat), self.n_codes, replace=len(flat) < self.n_codes)
        self.codebook_.embeddings[...] = flat[pick]
        self.codebook_initialized_ = True
        self.ema_ = EmaShadow(self.params, self.ema_decay)

    # -- inference ------------------------------------------------------------

    def _inference(self, fn):
        check_is_fitted(self, "encoder_")
        if not self.use_ema:
            return fn()
        live = self.params
        self.load_params(self.ema_.shadow)
        try:
            return fn()
        finally:
            self.load_params(live)

    def _check_grids(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=self.dtype)
        shape = self.grid_spec.shape
        if X.shape[1:] != shape:
            raise ShapeError(f"grids must be [N, {', '.join(map(str, shape))}], got {X.shape}")
        return X

    def _check_latents(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=self.dtype)
        if Z.shape[1:] != self.latent_shape:
            raise ShapeError(f"latents must be [N, {self.latent_shape}], got {Z.shape}")
        return Z

    def encode(self, X) -> np.ndarray:
        """Continuous latents ``z_e`` for grids ``[N, c, l, l, l]``."""
        X = self._check_grids(X)
        return self._inference(lambda: self.encoder_.forward(X, train=False)[0])

    def quantize(self, z_e, count: bool = False) -> LatentCode:
        return self._inference(lambda: quantize(z_e, self.codebook_, count=count))

    def decode(self, Z) -> np.ndarray:
        """Grids in ``[0, 1]`` from quantised latents ``[N, d, m, m, m]``."""
        Z = self._check_latents(Z)
        return self._inference(lambda: self.decoder_.forward(Z, train=False)[0])

    def reconstruct(self, X) -> np.ndarray:
        return self.decode(self.quantize(self.encode(X)).z_q)

    def voxelize(self, molecules, rng=None) -> np.ndarray:
        """Voxelise molecules, centred; with ``rng`` also randomly rotated and shifted."""
        spec = self.grid_spec
        out = np.empty((len(molecules),) + spec.shape, dtype=self.dtype)
        for n, mol in enumerate(molecules):
            mol = mol.with_positions(mol.positions - mol.centroid()) if len(mol) else mol
            if rng is not None:
                mol = random_rigid_transform(mol, rng, self.max_translation)
            out[n] = voxelize(mol, spec, center=False, dtype=self.dtype).data
        return out

    def _as_grids(self, X) -> np.ndarray:
        mols = _molecules(X)
        if mols is not None:
            return self.voxelize(mols)
        return self._check_grids(X)

    def transform(self, X) -> np.ndarray:
        """Quantised latents for molecules or grids."""
        return self.quantize(self.encode(self._as_grids(X))).z_q

    def inverse_transform(self, Z) -> np.ndarray:
        return self.decode(Z)

    def score_iou(self, X, threshold: float = 0.5) -> float:
        grids = self._as_grids(X)
        return reconstruction_iou(grids, self.reconstruct(grids), threshold)

    # -- training -------------------------------------------------------------

    def fit(self, X, y=None):
        """Train for ``epochs`` epochs, each over a fresh ``subsample`` draw."""
        mols = _molecules(X)
        molecules = mols is not None
        data = mols if molecules else self._check_grids(X)
        if not hasattr(self, "encoder_"):
            self.build()
        n = len(data)
        if n == 0:
            raise ValueError("VQVAE.fit got no training data")

        def batch_of(idx):
            if molecules:
                rng = self.rng_ if self.augment else None
                return self.voxelize([data[i] for i in idx], rng)
            return np.asarray(data[idx], dtype=self.dtype)

        if not self.codebook_initialized_:
            first = self.rng_.choice(n, min(n, self.batch_size), replace=False)
            self.init_codebook(batch_of(first))
        take = max(1, int(round(self.subsample * n)))
        for epoch in range(self.epochs):
            order = self.rng_.choice(n, take, replace=False)
            self.codebook_.reset_usage()
            terms = []
            for start in range(0, take, self.batch_size):
                grids = batch_of(order[start:start + self.batch_size])
                terms.append(vq_train_step(grids, self))
            row = {k: float(np.mean([t.as_dict()[k] for t in terms])) for k in terms[0].as_dict()}
            self.loss_curve_.append(row)
            self.usage_curve_.append(self.codebook_.usage_fraction())
            logger.info("vqvae epoch %d total %.6g codes used %.1f%%", epoch, row["total"],
                        100 * self.usage_curve_[-1])
        return self

    # -- persistence ----------------------------------------------------------

    def to_tensors(self) -> tuple[dict, dict]:
        check_is_fitted(self, "encoder_")
        tensors = prefixed("live", self.params)
        tensors.update(prefixed("ema", self.ema_.shadow))
        tensors["codebook_usage"] = self.codebook_.usage
        meta = {"kind": "vqvae", "estimator": checkpoint.estimator_meta(self.get_params()),
                "latent_shape": list(self.latent_shape),
                "loss_curve": self.loss_curve_, "usage_curve": self.usage_curve_}
        return tensors, meta

    def save(self, path):
        tensors, meta = self.to_tensors()
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "VQVAE":
        tensors, meta = checkpoint.load(path)
        return cls.from_tensors(tensors, meta)

    @classmethod
    def from_tensors(cls, tensors, meta) -> "VQVAE":
        if meta.get("kind") != "vqvae":
            raise checkpoint.CheckpointError("checkpoint does not hold a VQ-VAE")
        params = checkpoint.estimator_kwargs(meta["estimator"], ("channels", "widths"))
        model = cls(**params).build()
        dtype = model.dtype
        model.load_params({k: v.astype(dtype) for k, v in unprefixed("live", tensors).items()})
        model.ema_.shadow = {k: v.astype(dtype) for k, v in unprefixed("ema", tensors).items()}
        model.codebook_.usage = tensors["codebook_usage"].astype(np.int64)
        model.codebook_initialized_ = True
        model.loss_curve_ = list(meta.get("loss_curve", []))
        model.usage_curve_ = list(meta.get("usage_curve", []))
        return model


def _molecules(X) -> list[Molecule] | None:
    """``X`` as plain molecules, or ``None`` when it holds grids."""
    if isinstance(X, np.ndarray) or len(X) == 0:
        return None
    if not isinstance(X[0], (Molecule, BondedMolecule)):
        return None
    return [m.molecule if isinstance(m, BondedMolecule) else m for m in X]


def vq_gradients(batch, model: VQVAE) -> tuple[VqLoss, dict[str, np.ndarray]]:
    """Loss terms and parameter gradients for one batch.

    Each term is a squared norm per sample averaged over the batch. The
    reconstruction gradient reaches the encoder by the straight-through copy
    ``dL/dz_e := dL/dz_q``; the codebook term moves only the embeddings and the
    commitment term only the encoder. Gradients are accumulated over
    ``model.micro_batch``-sized chunks.
    """
    x_all = np.asarray(batch, dtype=model.dtype)
    b = len(x_all)
    if b == 0:
        raise ValueError("empty batch")
    chunk = model.micro_batch or b
    grads: dict[str, np.ndarray] = {}
    g_code = np.zeros_like(model.codebook_.embeddings)
    rec = cb = 0.0
    for start in range(0, b, chunk):
        x = x_all[start:start + chunk]
        z_e, c_enc = model.encoder_.forward(x, train=True)
        code = quantize(z_e, model.codebook_)
        x_hat, c_dec = model.decoder_.forward(code.z_q, train=True)
        diff = code.z_q - z_e
        rec += float(((x_hat - x) ** 2).sum()) / b
        cb += float((diff ** 2).sum()) / b
        dz_q, g_dec = model.decoder_.backward(c_dec, 2.0 * (x_hat - x) / b)
        dz_e = dz_q - model.beta * 2.0 * diff / b
        _, g_enc = model.encoder_.backward(c_enc, dz_e)
        flat = np.moveaxis(diff, 1, -1).reshape(-1, model.codebook_.dim)
        np.add.at(g_code, code.indices.ravel(), 2.0 * flat / b)
        for name, g in list(prefixed("encoder", g_enc).items()) + \
                list(prefixed("decoder", g_dec).items()):
            if name in grads:
                grads[name] += g
            else:
                grads[name] = g
    loss = VqLoss(rec, cb, cb, model.beta)
    for term, value in loss.as_dict().items():
        if not np.isfinite(value):
            raise NonFiniteError(f"vq loss term {term!r} is not finite; step aborted")
    grads["codebook"] = g_code
    return loss, grads


def vq_train_step(batch, model: VQVAE, opt: AdamW | None = None) -> VqLoss:
    """One AdamW step on reconstruction + codebook + beta * commitment, then
    an EMA update of the shadow weights."""
    opt = model.opt_ if opt is None else opt
    loss, grads = vq_gradients(batch, model)
    params = model.params
    opt.step(params, grads)
    model.ema_.update(params)
    return loss
