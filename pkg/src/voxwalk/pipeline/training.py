"""Two-stage training: the VQ-VAE first, then the latent denoiser on its
frozen latents."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from ..latentdae import LatentDenoiser, fit_normalizer
from ..tensornn import checkpoint
from ..vqvae import VQVAE
from .config import Config, ConfigError
from .toydata import ToyDatasetSpec, generate_toy_dataset, read_dataset, write_dataset

logger = logging.getLogger(__name__)

GRID_KEYS = ("edge_length", "spacing", "atom_radius", "channels")
IOU_SAMPLES = 64


def run_gen_data(config: Config, out=None) -> Path:
    spec = ToyDatasetSpec(count=config.dataset_count, min_heavy=config.dataset_min_heavy,
                          max_heavy=config.dataset_max_heavy,
                          max_radius=config.dataset_max_radius, seed=config.master_seed)
    path = Path(out) if out is not None else config.dataset_path
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, generate_toy_dataset(spec))
    return path


def load_training_set(config: Config):
    if not config.dataset_path.exists():
        raise ConfigError(f"dataset not found: {config.dataset_path}; run gen-data first")
    return read_dataset(config.dataset_path)


def build_vqvae(config: Config) -> VQVAE:
    return VQVAE(edge_length=config.edge_length, spacing=config.spacing,
                 atom_radius=config.atom_radius, channels=config.channels,
                 n_codes=config.n_codes, code_dim=config.code_dim,
                 widths=config.vq_widths, heads=config.vq_heads, beta=config.beta,
                 lr=config.vq_lr, weight_decay=config.weight_decay,
                 ema_decay=config.ema_decay, epochs=config.vq_epochs,
                 batch_size=config.vq_batch_size, micro_batch=config.vq_micro_batch,
                 subsample=config.vq_subsample, max_translation=config.max_translation,
                 random_state=config.master_seed, dtype=config.np_dtype,
                 use_ema=config.vq_use_ema)


def build_denoiser(config: Config) -> LatentDenoiser:
    return LatentDenoiser(sigma=config.sigma, widths=config.dae_widths, heads=config.dae_heads,
                          dropout=config.dae_dropout, lr=config.dae_lr,
                          weight_decay=config.weight_decay, ema_decay=config.ema_decay,
                          epochs=config.dae_epochs, batch_size=config.dae_batch_size,
                          subsample=config.dae_subsample, random_state=config.master_seed,
                          dtype=config.np_dtype, use_ema=config.dae_use_ema)


def load_vqvae(config: Config) -> VQVAE:
    model = VQVAE.load(config.vqvae_path)
    _, meta = checkpoint.load(config.vqvae_path)
    if meta.get("grid_hash") != config.config_hash(GRID_KEYS):
        raise ConfigError("vq-vae checkpoint was trained on a different grid spec")
    return model


def load_denoiser(config: Config):
    denoiser, normalizer = LatentDenoiser.load(config.dae_path)
    _, meta = checkpoint.load(config.dae_path)
    if not np.isclose(meta["sigma"], config.sigma, rtol=1e-12, atol=0):
        raise ConfigError(f"config sigma {config.sigma} does not match the denoiser "
                          f"checkpoint's sigma {meta['sigma']}")
    if normalizer is None:
        raise ConfigError("denoiser checkpoint carries no latent normalizer")
    return denoiser, normalizer


def write_loss_csv(path, rows) -> None:
    """``rows`` are ``(epoch, term, value)`` triples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "term", "value"])
        for epoch, term, value in rows:
            w.writerow([epoch, term, repr(float(value))])


def run_training(stage: str, config: Config) -> Path:
    """Train one stage and write its checkpoint plus a loss-curve CSV."""
    Path(config.work_dir).mkdir(parents=True, exist_ok=True)
    if stage == "vqvae":
        return _train_vqvae(config)
    if stage == "dae":
        return _train_dae(config)
    raise ConfigError(f"unknown training stage {stage!r}")


def _train_vqvae(config: Config) -> Path:
    data = load_training_set(config)
    t0 = time.perf_counter()
    model = build_vqvae(config).fit(data)
    seconds = time.perf_counter() - t0
    held = data[:IOU_SAMPLES]
    iou = model.score_iou(held)
    tensors, meta = model.to_tensors()
    meta.update(config_hash=config.config_hash(), grid_hash=config.config_hash(GRID_KEYS),
                iou=iou, codebook_usage=model.usage_curve_[-1] if model.usage_curve_ else 0.0)
    checkpoint.save(config.vqvae_path, tensors, meta)
    write_loss_csv(config.path("vqvae_loss.csv"),
                   [(e, term, v) for e, row in enumerate(model.loss_curve_)
                    for term, v in row.items()])
    write_stats(config.path("vqvae_stats.json"), train_seconds=seconds, iou=iou,
                iou_molecules=len(held), usage=model.usage_curve_)
    logger.info("vq-vae reconstruction IoU %.4f on %d molecules", iou, len(held))
    return config.vqvae_path


def encode_augmented(vqvae: VQVAE, molecules, rng, batch: int = 16) -> np.ndarray:
    """Quantised latents of randomly rotated and shifted copies."""
    out = []
    for start in range(0, len(molecules), batch):
        grids = vqvae.voxelize([m.molecule if hasattr(m, "molecule") else m
                                for m in molecules[start:start + batch]], rng)
        out.append(vqvae.quantize(vqvae.encode(grids)).z_q)
    return np.concatenate(out)


def _train_dae(config: Config) -> Path:
    if not config.vqvae_path.exists():
        raise ConfigError(f"vq-vae checkpoint not found: {config.vqvae_path}")
    data = load_training_set(config)
    vqvae = load_vqvae(config)
    rng = np.random.default_rng([config.master_seed, 2])
    normalizer = fit_normalizer(encode_augmented(vqvae, data, rng))
    # the subsample is drawn here so each epoch can be augmented afresh
    denoiser = build_denoiser(config).set_params(subsample=1.0)
    n = len(data)
    take = max(1, int(round(config.dae_subsample * n)))
    t0 = time.perf_counter()
    for epoch in range(config.dae_epochs):
        # fresh rigid augmentation of this epoch's subsample
        picked = rng.choice(n, take, replace=False)
        latents = normalizer.transform(encode_augmented(vqvae, [data[i] for i in picked], rng))
        denoiser.partial_fit(latents)
    seconds = time.perf_counter() - t0
    tensors, meta = denoiser.to_tensors(normalizer)
    meta.update(config_hash=config.config_hash(), vqvae_hash=_file_hash(config.vqvae_path))
    checkpoint.save(config.dae_path, tensors, meta)
    write_loss_csv(config.path("dae_loss.csv"),
                   [(e, "denoising", v) for e, v in enumerate(denoiser.loss_curve_)])
    write_stats(config.path("dae_stats.json"), train_seconds=seconds)
    return config.dae_path


def write_stats(path, **values) -> None:
    """Wall-clock and summary numbers, kept apart from the byte-stable checkpoint."""
    Path(path).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
