"""Latent-space versus voxel-space sampling cost.

Both sides run the same walk integrator with the same U-Net preset as score
network; only the tensor they walk on differs: the quantised latent
``[d, m, m, m]`` or the full density grid ``[c, l, l, l]``.
"""

from __future__ import annotations

import time

import numpy as np

from ..tensornn.unet import UNet3d
from ..vqvae import VQVAE
from ..wjs import SamplerParams, generate_library, init_chain, walk
from .config import Config
from .toydata import read_dataset
from .training import load_denoiser, load_vqvae


class _NetScore:
    def __init__(self, net, sigma):
        self.net, self.sigma = net, sigma

    def __call__(self, y):
        return (self.net.forward(y[None], train=False)[0][0] - y) / self.sigma ** 2


def shape_report(config: Config) -> dict:
    """Element counts of the configured preset and of the paper-shape preset."""
    out = {}
    for name in ("desk", "paper-shape"):
        if name == "desk":
            model = VQVAE(edge_length=config.edge_length, code_dim=config.code_dim,
                          widths=config.vq_widths, channels=config.channels)
        else:
            model = VQVAE.preset(name, channels=config.channels)
        counts = model.compression_counts()
        counts["latent_shape"] = list(model.latent_shape)
        counts["grid_shape"] = list(model.grid_spec.shape)
        out[name] = counts
    return out


def time_walk(shape, widths, params: SamplerParams, steps: int, rng, dtype=np.float64,
              repeats: int = 1) -> dict:
    """Setup time and best-of-``repeats`` seconds per walk step on a tensor of ``shape``."""
    t0 = time.perf_counter()
    net = UNet3d(shape[0], shape[0], tuple(widths), dropout=0.0,
                 rng=np.random.default_rng(0), dtype=dtype)
    score = _NetScore(net, params.sigma)
    state = init_chain(np.zeros(shape, dtype=dtype), params, rng)
    walk(state, 0, params, score)  # caches the first score evaluation
    setup = time.perf_counter() - t0
    per_step = None
    if steps > 0:
        best = float("inf")
        for _ in range(repeats):
            t = time.perf_counter()
            walk(state, steps, params, score)
            best = min(best, (time.perf_counter() - t) / steps)
        per_step = best
    return {"setup_seconds": setup, "seconds_per_step": per_step, "steps": steps}


def run_benchmark(config: Config, steps: int = 3, repeats: int = 2) -> dict:
    """Shape arithmetic plus measured per-step cost in both spaces."""
    rng = np.random.default_rng(config.master_seed)
    params = config.sampler
    latent_shape = VQVAE(edge_length=config.edge_length, code_dim=config.code_dim,
                         widths=config.vq_widths).latent_shape
    grid_shape = config.grid_spec.shape
    latent = time_walk(latent_shape, config.dae_widths, params, steps, rng,
                       config.np_dtype, repeats)
    voxel = time_walk(grid_shape, config.dae_widths, params, steps, rng,
                      config.np_dtype, repeats)
    speedup = None
    if latent["seconds_per_step"] and voxel["seconds_per_step"]:
        speedup = voxel["seconds_per_step"] / latent["seconds_per_step"]
    return {
        "shapes": shape_report(config),
        "latent_walk": dict(latent, shape=list(latent_shape)),
        "voxel_walk": dict(voxel, shape=list(grid_shape)),
        "speedup_per_step": speedup,
        "seconds_per_molecule": end_to_end(config, steps),
    }


def end_to_end(config: Config, steps: int) -> float | None:
    """Seconds per generated molecule with the trained models, if present."""
    if not (config.vqvae_path.exists() and config.dae_path.exists()
            and config.dataset_path.exists()):
        return None
    seed = read_dataset(config.dataset_path)[0].molecule
    vqvae = load_vqvae(config)
    denoiser, normalizer = load_denoiser(config)
    records = generate_library(seed, [steps], 2, vqvae, denoiser, normalizer, config.sampler,
                               config.master_seed, config.peak_threshold)
    return float(np.mean([r.seconds for r in records]))
