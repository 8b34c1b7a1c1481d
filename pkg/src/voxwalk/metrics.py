"""Library-level quality metrics: stability, validity, distribution distances,
uniqueness and seed similarity."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .molgraph import (ALLOWED_VALENCE_MAX, VALENCE, BondedMolecule, MoleculeError,
                       fingerprint, tanimoto)


@dataclass(frozen=True)
class CategoricalDist:
    support: tuple
    probabilities: tuple

    def __post_init__(self):
        if len(set(self.support)) != len(self.support):
            raise ValueError("support labels must be unique")
        if len(self.support) != len(self.probabilities):
            raise ValueError("support and probabilities differ in length")
        p = np.asarray(self.probabilities, dtype=float)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")

    @classmethod
    def from_counts(cls, counts: dict) -> "CategoricalDist":
        total = sum(counts.values())
        if total == 0:
            raise ValueError("cannot normalise an empty count table")
        keys = sorted(counts, key=str)
        return cls(tuple(keys), tuple(counts[k] / total for k in keys))

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probabilities))


def atomic_stability(bm: BondedMolecule) -> float:
    if len(bm) == 0:
        raise MoleculeError("atomic stability of an empty molecule")
    return float(np.mean(_stable_atoms(bm)))


def _stable_atoms(bm: BondedMolecule) -> np.ndarray:
    val = bm.valences()
    return np.array([val[a] == VALENCE[el] for a, el in enumerate(bm.elements)], dtype=bool)


def molecular_stability(bm: BondedMolecule) -> bool:
    return atomic_stability(bm) == 1.0


def validity(bm: BondedMolecule) -> bool:
    """Valence-table sanitization proxy: non-empty and no atom above its
    maximum allowed valence."""
    if len(bm) == 0:
        return False
    val = bm.valences()
    return all(val[a] <= ALLOWED_VALENCE_MAX[el] for a, el in enumerate(bm.elements))


def wasserstein1(a: Sequence[float], b: Sequence[float]) -> float:
    """W1 between two empirical distributions on the real line, integrating the
    absolute difference of their quantile functions."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein1 needs two non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # breakpoints of both piecewise-constant quantile functions
    qs = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mid = 0.5 * (qs[:-1] + qs[1:])
    ia = np.minimum((mid * a.size).astype(int), a.size - 1)
    ib = np.minimum((mid * b.size).astype(int), b.size - 1)
    return float(np.sum(np.diff(qs) * np.abs(a[ia] - b[ib])))


def total_variation(p: CategoricalDist, q: CategoricalDist) -> float:
    pd, qd = p.as_dict(), q.as_dict()
    labels = set(pd) | set(qd)
    return 0.5 * float(sum(abs(pd.get(k, 0.0) - qd.get(k, 0.0)) for k in labels))


# -- per-molecule features --------------------------------------------------

def bond_lengths(bm: BondedMolecule) -> list[float]:
    pos = bm.positions
    return [float(np.linalg.norm(pos[i] - pos[j])) for i, j, _ in bm.bonds]


def bond_angles(bm: BondedMolecule) -> list[float]:
    """Angles in degrees at every atom between each pair of its bonds."""
    pos = bm.positions
    out = []
    for j, nbrs in enumerate(bm.neighbors()):
        for x in range(len(nbrs)):
            for y in range(x + 1, len(nbrs)):
                u = pos[nbrs[x][0]] - pos[j]
                v = pos[nbrs[y][0]] - pos[j]
                cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
                out.append(float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))))
    return out


def canonical_graph_hash(bm: BondedMolecule, rounds: int = 3) -> str:
    """Weisfeiler-Leman colour refinement hashed over the bond graph."""
    adj = bm.neighbors()
    colors = list(bm.elements)
    for _ in range(rounds):
        colors = [
            hashlib.sha1((colors[a] + "(" + ",".join(
                sorted(f"{o}{colors[b]}" for b, o in adj[a])) + ")").encode()).hexdigest()[:16]
            for a in range(len(bm))
        ]
    return hashlib.sha1("|".join(sorted(colors)).encode()).hexdigest()


def _pooled(mols, fn):
    out = []
    for m in mols:
        out.extend(fn(m))
    return out


def _w1_or_nan(a, b):
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    return wasserstein1(a, b)


def _tv_or_nan(ca: Counter, cb: Counter):
    if not ca or not cb:
        return float("nan")
    return total_variation(CategoricalDist.from_counts(ca), CategoricalDist.from_counts(cb))


@dataclass
class MetricsReport:
    tanimoto_mean: float
    stable_sanitized: float
    stable_atom: float
    valid: float
    valency_W1: float
    atoms_TV: float
    bonds_TV: float
    bond_len_W1: float
    bond_ang_W1: float
    uniqueness: float
    avg_seconds_per_molecule: float
    n_molecules: int = 0
    n_empty: int = 0
    repeats: int = 1
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, include_timing: bool = False) -> str:
        """JSON with NaN written as null. Wall-clock time is left out unless
        asked for, so that reruns produce identical text."""
        d = self.to_dict()
        if not include_timing:
            d.pop("avg_seconds_per_molecule")
        d = {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in d.items()}
        return json.dumps(d, sort_keys=True, indent=2, allow_nan=False)

    def to_table(self) -> str:
        rows = [(k, v) for k, v in self.to_dict().items() if k != "extra"]
        rows += sorted(self.extra.items())
        width = max(len(k) for k, _ in rows)
        lines = []
        for k, v in rows:
            if isinstance(v, float):
                v = f"{v:.6g}"
            lines.append(f"{k.ljust(width)} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        floats = {f.name for f in fields(cls) if f.type == "float"}
        payload = {k: (float("nan") if v is None and k in floats else v)
                   for k, v in payload.items()}
        payload.setdefault("avg_seconds_per_molecule", float("nan"))
        return cls(**payload)


def evaluate_library(generated: Sequence[BondedMolecule], seed: BondedMolecule,
                     reference: Sequence[BondedMolecule],
                     timings: Sequence[float] = (), repeats: int = 1,
                     rng_seed: int | None = None) -> MetricsReport:
    """Score a generated library against its seed and a reference set.

    Empty generations count as unstable, invalid and 0 % similar; they add no
    atoms or bonds to the pooled distributions.
    """
    if len(generated) == 0:
        raise ValueError("evaluate_library needs at least one generated molecule")
    nonempty = [m for m in generated if len(m) > 0]
    ref = [m for m in reference if len(m) > 0]

    seed_fp = fingerprint(seed)
    sims = [tanimoto(seed_fp, fingerprint(m)) if len(m) else 0.0 for m in generated]
    stable = [len(m) > 0 and molecular_stability(m) for m in generated]
    atom_flags = np.concatenate([_stable_atoms(m) for m in nonempty]) if nonempty else np.array([])
    valid = [validity(m) for m in generated]

    def valences(ms):
        return _pooled(ms, lambda m: m.valences().tolist())

    def atoms(ms):
        return Counter(_pooled(ms, lambda m: list(m.elements)))

    def bonds(ms):
        return Counter(_pooled(ms, lambda m: [o for _, _, o in m.bonds]))

    hashes = [canonical_graph_hash(m) for m in generated]
    return MetricsReport(
        tanimoto_mean=100.0 * float(np.mean(sims)),
        stable_sanitized=100.0 * float(np.mean(stable)),
        stable_atom=100.0 * float(atom_flags.mean()) if atom_flags.size else 0.0,
        valid=100.0 * float(np.mean(valid)),
        valency_W1=_w1_or_nan(valences(nonempty), valences(ref)),
        atoms_TV=_tv_or_nan(atoms(nonempty), atoms(ref)),
        bonds_TV=_tv_or_nan(bonds(nonempty), bonds(ref)),
        bond_len_W1=_w1_or_nan(_pooled(nonempty, bond_lengths), _pooled(ref, bond_lengths)),
        bond_ang_W1=_w1_or_nan(_pooled(nonempty, bond_angles), _pooled(ref, bond_angles)),
        uniqueness=100.0 * len(set(hashes)) / len(hashes),
        avg_seconds_per_molecule=float(np.mean(timings)) if len(timings) else float("nan"),
        n_molecules=len(generated),
        n_empty=len(generated) - len(nonempty),
        repeats=repeats,
        seed=rng_seed,
    )


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise mean over repeated runs; ``repeats`` counts the inputs."""
    if not reports:
        raise ValueError("no reports to average")
    first = reports[0].to_dict()
    out = {}
    for k, v in first.items():
        if isinstance(v, float):
            out[k] = float(np.mean([getattr(r, k) for r in reports]))
        else:
            out[k] = v
    out["n_molecules"] = int(sum(r.n_molecules for r in reports))
    out["n_empty"] = int(sum(r.n_empty for r in reports))
    out["repeats"] = len(reports)
    return MetricsReport.from_dict(out)
