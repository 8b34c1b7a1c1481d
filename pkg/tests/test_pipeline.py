import csv
import hashlib
import json
import shutil

import numpy as np
import pytest

from voxwalk.molgraph import dumps_json, infer_bonds
from voxwalk.pipeline import cli
from voxwalk.pipeline.benchmark import run_benchmark, time_walk
from voxwalk.pipeline.config import Config, ConfigError, check_sigma
from voxwalk.pipeline.generate import read_library
from voxwalk.pipeline.toydata import ToyDatasetSpec, generate_toy_dataset, read_dataset
from voxwalk.metrics import validity
from voxwalk.wjs import SamplerParams

TINY = """\
dataset_count = 12
dataset_max_heavy = 6
n_codes = 16
code_dim = 16
vq_widths = 8,8
vq_epochs = 1
vq_batch_size = 4
dae_widths = 8,8
dae_epochs = 2
dae_batch_size = 4
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny models trained once through the command line."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    work = root / "run"
    for cmd in ("gen-data", "train-vqvae", "train-dae"):
        assert run_cli(cmd, "--config", cfg, "--work-dir", work) == 0
    seed = root / "seed.json"
    seed.write_text(dumps_json(read_dataset(work / "dataset.jsonl")[0]) + "\n")
    return cfg, work, seed


# -- config -------------------------------------------------------------------

def test_config_text_round_trip(tmp_path):
    c = Config(vq_widths=(4, 8), sigma=1.2, vq_use_ema=True)
    c.save(tmp_path / "c.cfg")
    back = Config.load(tmp_path / "c.cfg")
    assert back == c and back.config_hash() == c.config_hash()
    assert Config.loads("# comment only\n\nsigma = 2.0  # trailing\n").sigma == 2.0


@pytest.mark.parametrize("text", ["nonsense", "bogus = 1", "vq_epochs = ten", "sigma = 0",
                                  "dtype = float16", "vq_subsample = 1.5", "preset = huge",
                                  "vq_use_ema = maybe"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        Config.loads(text)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "absent.cfg")


def test_sigma_mismatch_is_rejected():
    check_sigma(Config(sigma=1.8), 1.8)
    with pytest.raises(ConfigError, match="sigma"):
        check_sigma(Config(sigma=1.8), 1.0)


def test_work_dir_not_in_hash():
    assert Config(work_dir="a").config_hash() == Config(work_dir="b").config_hash()
    assert Config(sigma=1.0).config_hash() != Config().config_hash()


# -- toy data -----------------------------------------------------------------

def test_toy_data_empty_and_deterministic():
    assert generate_toy_dataset(ToyDatasetSpec(count=0)) == []
    a = generate_toy_dataset(ToyDatasetSpec(count=5, seed=3, max_radius=3.0))
    b = generate_toy_dataset(ToyDatasetSpec(count=5, seed=3, max_radius=3.0))
    assert all(x.elements == y.elements and np.array_equal(x.positions, y.positions)
               for x, y in zip(a, b))


def test_toy_data_valid_and_boxed():
    mols = generate_toy_dataset(ToyDatasetSpec(count=100, seed=7))
    assert len(mols) == 100
    for m in mols:
        assert validity(infer_bonds(m))
        assert np.abs(m.positions).max() <= 8.0  # fits a 16 angstrom box about the origin


# -- command line -------------------------------------------------------------

def test_cli_error_line(tmp_path, capsys):
    code = run_cli("train-dae", "--work-dir", tmp_path / "empty")
    assert code != 0
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "train-dae" and err["error"] == "ConfigError"
    assert "vq-vae checkpoint" in err["message"]


def test_cli_missing_config(tmp_path, capsys):
    assert run_cli("gen-data", "--config", tmp_path / "nope.cfg") == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"


def test_cli_gen_data_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY)
    assert run_cli("gen-data", "--config", cfg, "--work-dir", tmp_path / "a") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] is True
    assert run_cli("gen-data", "--config", cfg, "--work-dir", tmp_path / "b") == 0
    assert sha(tmp_path / "a" / "dataset.jsonl") == sha(tmp_path / "b" / "dataset.jsonl")
    assert len(read_dataset(tmp_path / "a" / "dataset.jsonl")) == 12


def test_cli_voxelize(tmp_path, trained):
    cfg, work, seed = trained
    out = tmp_path / "g.vxg"
    assert run_cli("voxelize", seed, "--out", out, "--config", cfg, "--work-dir", work) == 0
    assert out.read_bytes()[:4] == b"VXG1"
    assert len(out.read_bytes()) == 16 + 4 * 8 * 32 ** 3


def test_sample_without_checkpoints_fails(tmp_path, trained, capsys):
    _, _, seed = trained
    assert run_cli("sample", "--seed-file", seed, "--work-dir", tmp_path) == 1
    assert "checkpoint not found" in json.loads(capsys.readouterr().err)["message"]


# -- training outputs ---------------------------------------------------------

def test_loss_csv_format(trained):
    _, work, _ = trained
    for name, terms in (("vqvae_loss.csv", {"reconstruction", "codebook", "commitment",
                                            "total"}),
                        ("dae_loss.csv", {"denoising"})):
        with open(work / name) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "term", "value"]
        assert {r[1] for r in rows[1:]} <= terms | {"usage"}
        assert all(np.isfinite(float(r[2])) for r in rows[1:])


def test_dae_retraining_leaves_vqvae_untouched(trained, tmp_path):
    cfg, shared, _ = trained
    work = tmp_path / "run"
    shutil.copytree(shared, work)
    before = sha(work / "vqvae.tnnc")
    # a differently seeded denoiser in the same work dir
    assert run_cli("train-dae", "--config", cfg, "--work-dir", work, "--seed", 5) == 0
    assert sha(work / "vqvae.tnnc") == before


def test_training_is_reproducible(trained, tmp_path):
    cfg, work, _ = trained
    other = tmp_path / "again"
    for cmd in ("gen-data", "train-vqvae"):
        assert run_cli(cmd, "--config", cfg, "--work-dir", other) == 0
    assert sha(other / "vqvae.tnnc") == sha(work / "vqvae.tnnc")
    assert (other / "vqvae_loss.csv").read_bytes() == (work / "vqvae_loss.csv").read_bytes()


# -- generation -----------------------------------------------------------------

def test_sample_two_chains(trained, tmp_path):
    cfg, work, seed = trained
    out = tmp_path / "lib"
    assert run_cli("sample", "--config", cfg, "--work-dir", work, "--seed-file", seed,
                   "--steps", "10", "--chains", 2, "--out", out) == 0
    mols, timings, manifest = read_library(out)
    assert len(mols) == 2 and len(manifest["samples"]) == 2 and len(timings) == 2


def test_sample_grid_cardinality_and_byte_identical_manifest(trained, tmp_path):
    cfg, work, seed = trained
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run_cli("sample", "--config", cfg, "--work-dir", work, "--seed-file", seed,
                       "--steps", "10,20,50", "--chains", 5, "--out", out) == 0
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert len(manifest["samples"]) == 15
    assert sorted({(e["k"], e["chain"]) for e in manifest["samples"]}) == \
        [(k, c) for k in (10, 20, 50) for c in range(5)]
    assert sha(outs[0] / "manifest.json") == sha(outs[1] / "manifest.json")
    for e in manifest["samples"]:
        assert sha(outs[0] / e["file"]) == sha(outs[1] / e["file"])


def test_sample_rejects_bad_chains(trained, capsys):
    cfg, work, seed = trained
    assert run_cli("sample", "--config", cfg, "--work-dir", work, "--seed-file", seed,
                   "--chains", 0) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ValueError"


def test_evaluate_writes_metrics(trained, tmp_path):
    cfg, work, seed = trained
    lib = tmp_path / "lib"
    assert run_cli("sample", "--config", cfg, "--work-dir", work, "--seed-file", seed,
                   "--steps", "5", "--chains", 2, "--out", lib) == 0
    assert run_cli("evaluate", "--config", cfg, "--work-dir", work, "--library", lib,
                   "--seed-file", seed) == 0
    metrics = json.loads((lib / "metrics.json").read_text())
    assert metrics["n_molecules"] == 2
    assert "avg_seconds_per_molecule" not in metrics
    assert "avg_seconds_per_molecule" in (lib / "metrics.txt").read_text()


# -- benchmark ------------------------------------------------------------------

def test_zero_step_benchmark_has_no_per_step_cost():
    t = time_walk((2, 4, 4, 4), (4, 8), SamplerParams(), 0, np.random.default_rng(0))
    assert t["seconds_per_step"] is None and t["setup_seconds"] >= 0


def test_benchmark_report(tmp_path):
    cfg = Config(work_dir=str(tmp_path), code_dim=8, dae_widths=(4, 8), edge_length=16)
    report = run_benchmark(cfg, steps=0, repeats=1)
    assert report["speedup_per_step"] is None and report["seconds_per_molecule"] is None
    shapes = report["shapes"]
    assert shapes["paper-shape"]["latent_elements"] * 4 == shapes["paper-shape"]["voxel_elements"]
