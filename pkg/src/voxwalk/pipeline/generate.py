"""Seeded library generation and library evaluation on disk."""

from __future__ import annotations

import json
from pathlib import Path

from ..metrics import MetricsReport, evaluate_library
from ..molgraph import (BondedMolecule, MoleculeError, dumps_json, infer_bonds, loads_json,
                        parse_xyz)
from ..wjs import generate_library, library_manifest
from .config import Config, ConfigError
from .toydata import read_dataset
from .training import load_denoiser, load_vqvae


def read_molecule(path) -> BondedMolecule:
    """Seed molecules come as ``.xyz`` (bonds perceived) or bonded-molecule JSON."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"seed file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix == ".xyz":
            return infer_bonds(parse_xyz(text))
        return loads_json(text)
    except (ValueError, KeyError) as exc:
        raise MoleculeError(f"cannot parse seed {path}: {exc}") from None


def run_generate(config: Config, seed_file, steps, chains: int, out_dir=None) -> Path:
    """Write one JSON per sample, ``manifest.json`` and ``timings.json``."""
    for p in (config.vqvae_path, config.dae_path):
        if not Path(p).exists():
            raise ConfigError(f"checkpoint not found: {p}")
    seed = read_molecule(seed_file)
    vqvae = load_vqvae(config)
    denoiser, normalizer = load_denoiser(config)
    records = generate_library(seed.molecule, steps, chains, vqvae, denoiser, normalizer,
                               config.sampler, config.master_seed, config.peak_threshold)
    out = Path(out_dir) if out_dir is not None else config.path("library")
    out.mkdir(parents=True, exist_ok=True)
    manifest = library_manifest(seed, records)
    for entry, rec in zip(manifest["samples"], records):
        (out / entry["file"]).write_text(dumps_json(rec.molecule) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    timings = {e["file"]: r.seconds for e, r in zip(manifest["samples"], records)}
    (out / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=2) + "\n")
    return out


def read_library(library_dir) -> tuple[list[BondedMolecule], list[float], dict]:
    library_dir = Path(library_dir)
    manifest_path = library_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json in {library_dir}")
    manifest = json.loads(manifest_path.read_text())
    mols = [loads_json((library_dir / e["file"]).read_text()) for e in manifest["samples"]]
    timing_path = library_dir / "timings.json"
    timings = []
    if timing_path.exists():
        t = json.loads(timing_path.read_text())
        timings = [t[e["file"]] for e in manifest["samples"] if e["file"] in t]
    return mols, timings, manifest


def run_evaluate(config: Config, library_dir, seed_file, reference=None,
                 out_dir=None) -> MetricsReport:
    """Score a library; ``metrics.json`` leaves out wall-clock time so reruns
    compare byte for byte, ``metrics.txt`` includes it."""
    mols, timings, _ = read_library(library_dir)
    seed = read_molecule(seed_file)
    ref_path = Path(reference) if reference is not None else config.dataset_path
    if not ref_path.exists():
        raise ConfigError(f"reference set not found: {ref_path}")
    report = evaluate_library(mols, seed, read_dataset(ref_path), timings,
                              rng_seed=config.master_seed)
    out = Path(out_dir) if out_dir is not None else Path(library_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.to_table())
    return report
