"""Random small organic-like molecules standing in for a real conformer set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..molgraph import (COVALENT_RADII, VALENCE, BOND_TOLERANCE, BondedMolecule,
                        Molecule, MoleculeError, add_hydrogens, dumps_json, infer_bonds,
                        loads_json)

DEFAULT_WEIGHTS = {"C": 0.68, "N": 0.11, "O": 0.12, "F": 0.03,
                   "S": 0.02, "Cl": 0.025, "Br": 0.015}
MIN_BOND_ANGLE = np.deg2rad(104.0)
CLASH_MARGIN = 0.5


@dataclass(frozen=True)
class ToyDatasetSpec:
    count: int = 500
    min_heavy: int = 3
    max_heavy: int = 12
    element_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    double_bond_prob: float = 0.15
    max_radius: float = 7.5
    seed: int = 0


def _bond_length(a: str, b: str, order: int) -> float:
    return COVALENT_RADII[a] + COVALENT_RADII[b] - (0.2 if order == 2 else 0.0)


def _grow(rng: np.random.Generator, n_heavy: int, spec: ToyDatasetSpec) -> BondedMolecule | None:
    labels = list(spec.element_weights)
    probs = np.array([spec.element_weights[k] for k in labels], dtype=float)
    probs /= probs.sum()
    poly = [e for e in labels if VALENCE[e] >= 2]
    poly_p = np.array([spec.element_weights[e] for e in poly]) / sum(
        spec.element_weights[e] for e in poly)

    elements = [str(rng.choice(poly, p=poly_p))]
    pos = [np.zeros(3)]
    free = [VALENCE[elements[0]]]
    bonds: list[tuple[int, int, int]] = []
    nbrs: list[list[int]] = [[]]
    while len(elements) < n_heavy:
        open_sites = [a for a in range(len(elements)) if free[a] > 0]
        if not open_sites:
            return None
        remaining = n_heavy - len(elements)
        el = str(rng.choice(labels, p=probs))
        # a terminal atom must not close the last open site early
        if VALENCE[el] == 1 and remaining > 1 and sum(free) <= 1:
            el = str(rng.choice(poly, p=poly_p))
        centroid = np.mean(pos, axis=0)
        dist_c = np.array([np.linalg.norm(pos[a] - centroid) for a in open_sites])
        weights = np.exp(-dist_c)
        parent = int(rng.choice(open_sites, p=weights / weights.sum()))
        order = 1
        if (VALENCE[el] >= 2 and free[parent] >= 2 and el != "S"
                and elements[parent] != "S" and rng.random() < spec.double_bond_prob):
            order = 2
        length = _bond_length(elements[parent], el, order)
        existing = [(pos[b] - pos[parent]) / np.linalg.norm(pos[b] - pos[parent])
                    for b in nbrs[parent]]
        cand = rng.standard_normal((96, 3))
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        ok = np.ones(len(cand), dtype=bool)
        if existing:
            ok &= (cand @ np.array(existing).T).max(axis=1) <= np.cos(MIN_BOND_ANGLE)
        pts = pos[parent] + length * cand
        others = [b for b in range(len(pos)) if b != parent]
        if others:
            limit = np.array([COVALENT_RADII[elements[b]] for b in others]) + (
                COVALENT_RADII[el] + BOND_TOLERANCE + CLASH_MARGIN)
            gap = np.linalg.norm(pts[:, None, :] - np.array([pos[b] for b in others])[None], axis=-1)
            ok &= (gap >= limit).all(axis=1)
        # hydrogens add roughly one bond length beyond the heavy skeleton
        ok &= np.linalg.norm(pts - centroid, axis=1) <= spec.max_radius - 1.0
        if not ok.any():
            return None
        score = -np.linalg.norm(pts - centroid, axis=1)
        best = pts[np.flatnonzero(ok)[np.argmax(score[ok])]]
        idx = len(elements)
        elements.append(el)
        pos.append(best)
        free.append(VALENCE[el] - order)
        free[parent] -= order
        nbrs.append([parent])
        nbrs[parent].append(idx)
        bonds.append((parent, idx, order))
    return BondedMolecule(Molecule(tuple(elements), np.array(pos)), tuple(bonds))


def make_toy_molecule(rng: np.random.Generator, spec: ToyDatasetSpec,
                      max_attempts: int = 200) -> Molecule:
    """Grow one molecule, retrying (and shrinking) until it is self-consistent:
    hydrogen-complete, within ``max_radius`` of its centroid, and with bonds
    that distance-based perception recovers exactly."""
    n_heavy = int(rng.integers(spec.min_heavy, spec.max_heavy + 1))
    for attempt in range(max_attempts):
        if attempt and attempt % 20 == 0 and n_heavy > spec.min_heavy:
            n_heavy -= 1
        heavy = _grow(rng, n_heavy, spec)
        if heavy is None:
            continue
        try:
            full = add_hydrogens(heavy)
        except MoleculeError:
            continue
        mol = full.molecule
        if np.linalg.norm(mol.positions - mol.centroid(), axis=1).max() > spec.max_radius:
            continue
        if infer_bonds(mol).bonds != full.bonds:
            continue
        return mol.with_positions(mol.positions - mol.centroid())
    raise RuntimeError("could not grow a consistent toy molecule; loosen max_radius")


def generate_toy_dataset(spec: ToyDatasetSpec) -> list[Molecule]:
    rng = np.random.default_rng(spec.seed)
    return [make_toy_molecule(rng, spec) for _ in range(spec.count)]


def write_dataset(path, molecules) -> None:
    """One bonded-molecule JSON object per line."""
    with open(path, "w") as fh:
        for mol in molecules:
            bm = mol if isinstance(mol, BondedMolecule) else infer_bonds(mol)
            fh.write(dumps_json(bm) + "\n")


def read_dataset(path) -> list[BondedMolecule]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(loads_json(line))
                except (ValueError, KeyError) as exc:
                    raise MoleculeError(f"{path}:{n}: {exc}") from None
    return out
