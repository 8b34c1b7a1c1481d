"""Walk-jump sampling in latent space.

The walk is underdamped Langevin dynamics on the noisy latent density,

    dv = -gamma * v dt + u * score(y) dt + sqrt(2 * gamma * u) dB
    dy = v dt

integrated with the symmetric splitting kick/drift/OU/drift/kick. The jump is
one denoiser pass from wherever the walk currently is.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .molgraph import (BondedMolecule, Molecule, add_hydrogens, infer_bonds,
                       largest_fragment, molecule_hash)
from .tensornn.layers import NonFiniteError
from .voxelizer import VoxelGrid, find_peaks


@dataclass(frozen=True)
class SamplerParams:
    gamma: float = 1.0
    inverse_mass: float = 1.0
    step_size: float = 0.25
    sigma: float = 1.8

    def __post_init__(self):
        # gamma = 0 is the deterministic Hamiltonian limit (no friction, no noise)
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        for name in ("inverse_mass", "step_size", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SamplerState:
    y: np.ndarray
    v: np.ndarray
    step: int
    rng: np.random.Generator
    grad: np.ndarray | None = field(default=None, repr=False)

    def copy(self) -> "SamplerState":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return SamplerState(self.y.copy(), self.v.copy(), self.step, rng,
                            None if self.grad is None else self.grad.copy())


class SigmaMismatchError(ValueError):
    pass


def _check_sigma(params: SamplerParams, sigma):
    if sigma is not None and not np.isclose(sigma, params.sigma, rtol=1e-12, atol=0):
        raise SigmaMismatchError(
            f"sampler sigma {params.sigma} does not match the denoiser's training sigma {sigma}")


def init_chain(seed_latent: np.ndarray, params: SamplerParams, rng: np.random.Generator,
               denoiser_sigma: float | None = None) -> SamplerState:
    """Start a chain at ``seed + sigma * eps`` with zero velocity."""
    _check_sigma(params, denoiser_sigma)
    seed_latent = np.asarray(seed_latent, dtype=np.float64)
    if not np.all(np.isfinite(seed_latent)):
        raise NonFiniteError("seed latent is not finite")
    y = seed_latent + params.sigma * rng.standard_normal(seed_latent.shape)
    return SamplerState(y, np.zeros_like(y), 0, rng)


def walk(state: SamplerState, k: int, params: SamplerParams,
         score_fn: Callable[[np.ndarray], np.ndarray]) -> SamplerState:
    """Advance ``k`` integrator steps in place and return the state."""
    if k < 0:
        raise ValueError("walk needs k >= 0")
    h = params.step_size
    u = params.inverse_mass
    friction = np.exp(-params.gamma * h)
    kick_noise = np.sqrt(u * (1.0 - np.exp(-2.0 * params.gamma * h)))
    y, v = state.y, state.v
    g = state.grad if state.grad is not None else score_fn(y)
    for i in range(k):
        v = v + 0.5 * h * u * g
        y = y + 0.5 * h * v
        v = friction * v + kick_noise * state.rng.standard_normal(v.shape)
        y = y + 0.5 * h * v
        g = score_fn(y)
        v = v + 0.5 * h * u * g
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(v))):
            raise NonFiniteError(f"walk diverged at step {state.step + i + 1}")
    state.y, state.v, state.grad = y, v, g
    state.step += k
    return state


def jump(state: SamplerState, denoiser) -> np.ndarray:
    """Denoised latent at the chain's current position; the chain is untouched."""
    out = denoiser.predict(state.y)
    if np.shape(out) != state.y.shape:
        raise ValueError(f"denoiser returned {np.shape(out)} for input {state.y.shape}")
    return out


def hamiltonian_gaussian(state: SamplerState, params: SamplerParams) -> float:
    """Energy for a unit-Gaussian target: ``|y|^2 / 2 + |v|^2 / (2u)``."""
    return float(0.5 * (state.y ** 2).sum() + 0.5 * (state.v ** 2).sum() / params.inverse_mass)


@dataclass
class LibraryRecord:
    k: int
    molecule: BondedMolecule
    chain: int
    rng_seed: int
    seconds: float
    empty: bool

    @property
    def provenance(self) -> dict:
        # wall-clock time is kept out so reruns give identical provenance
        return {"chain": self.chain, "k": self.k, "rng_seed": self.rng_seed,
                "empty": self.empty}


def latent_to_molecule(z_q: np.ndarray, vqvae, peak_threshold: float = 0.3) -> BondedMolecule:
    """Decode a quantized-space latent and turn it into a sanitized graph."""
    grid = vqvae.decode(z_q[None])[0]
    mol = find_peaks(VoxelGrid(vqvae.grid_spec, grid), threshold=peak_threshold)
    return sanitize(mol)


def sanitize(mol: Molecule) -> BondedMolecule:
    """Perceive bonds, complete hydrogens and keep the largest fragment."""
    if len(mol) == 0:
        return BondedMolecule(mol, (), {"empty": True})
    bm = add_hydrogens(infer_bonds(mol))
    return largest_fragment(bm)


def generate_library(seed: Molecule, steps: Sequence[int], chains: int, vqvae, denoiser,
                     normalizer, params: SamplerParams, master_seed: int = 0,
                     peak_threshold: float = 0.3) -> list[LibraryRecord]:
    """Seeded generation: one chain per ``chains``, emitting a molecule at
    every requested walk length (walks are extended, never restarted).

    ``vqvae`` maps molecules to quantised latents and back to grids,
    ``normalizer`` maps those latents to the denoiser's space.
    """
    _check_sigma(params, getattr(denoiser, "sigma", None))
    steps = sorted(int(k) for k in steps)
    if steps and steps[0] < 0:
        raise ValueError("step counts must be non-negative")
    seed_latent = normalizer.transform(vqvae.transform([seed]))[0]
    score_fn = _score_fn(denoiser, params.sigma)
    records = []
    for c in range(chains):
        rng = np.random.default_rng([master_seed, c])
        t0 = time.perf_counter()
        state = init_chain(seed_latent, params, rng, getattr(denoiser, "sigma", None))
        for k in steps:
            walk(state, k - state.step, params, score_fn)
            z_q = normalizer.inverse_transform(jump(state, denoiser))
            bm = latent_to_molecule(z_q, vqvae, peak_threshold)
            now = time.perf_counter()
            records.append(LibraryRecord(k, bm, c, master_seed, now - t0, len(bm) == 0))
            t0 = now
    return records


def _score_fn(denoiser, sigma):
    def fn(y):
        return (denoiser.predict(y) - y) / sigma ** 2
    return fn


def library_manifest(seed: Molecule, records: Sequence[LibraryRecord]) -> dict:
    return {
        "seed_hash": molecule_hash(seed),
        "samples": [dict(r.provenance, file=f"sample_{i:05d}.json",
                         n_atoms=len(r.molecule))
                    for i, r in enumerate(records)],
    }
