"""Molecule data model, XYZ/JSON I/O, bond perception and graph utilities.

Everything here is a pure function over immutable dataclasses.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

ELEMENTS: tuple[str, ...] = ("C", "H", "O", "N", "F", "S", "Cl", "Br")

COVALENT_RADII = {
    "H": 0.32, "C": 0.77, "N": 0.75, "O": 0.73,
    "F": 0.71, "S": 1.05, "Cl": 1.02, "Br": 1.20,
}
BOND_TOLERANCE = 0.4
DOUBLE_SHRINK = 0.15
TRIPLE_SHRINK = 0.25

VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2, "F": 1, "S": 2, "Cl": 1, "Br": 1}
ALLOWED_VALENCES = {
    "H": (1,), "C": (4,), "N": (3,), "O": (2,),
    "F": (1,), "S": (2, 4, 6), "Cl": (1,), "Br": (1,),
}
ALLOWED_VALENCE_MAX = {el: max(v) for el, v in ALLOWED_VALENCES.items()}
ATOMIC_MASS = {
    "H": 1.008, "C": 12.011, "N": 14.007, "O": 15.999,
    "F": 18.998, "S": 32.06, "Cl": 35.45, "Br": 79.904,
}

MIN_ATOM_SEPARATION = 0.1
FINGERPRINT_WIDTH = 2048
FINGERPRINT_DEPTH = 7


class MoleculeError(ValueError):
    """Raised for invalid molecules or unparseable chemistry files."""


@dataclass(frozen=True)
class Molecule:
    """Atoms as element symbols plus Cartesian coordinates in Angstrom."""

    elements: tuple[str, ...]
    positions: np.ndarray

    def __post_init__(self):
        elements = tuple(self.elements)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(elements) != len(pos):
            raise MoleculeError(
                f"{len(elements)} elements but {len(pos)} coordinate rows")
        for i, el in enumerate(elements):
            if el not in COVALENT_RADII:
                raise MoleculeError(f"atom {i}: unknown element {el!r}")
        if not np.all(np.isfinite(pos)):
            raise MoleculeError("non-finite coordinate")
        if len(pos) > 1:
            d = _pairwise(pos)
            np.fill_diagonal(d, np.inf)
            i, j = np.unravel_index(np.argmin(d), d.shape)
            if d[i, j] <= MIN_ATOM_SEPARATION:
                raise MoleculeError(
                    f"atoms {min(i, j)} and {max(i, j)} are {d[i, j]:.3f} A apart")
        pos.setflags(write=False)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.elements)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return (self.elements == other.elements
                and np.array_equal(self.positions, other.positions))

    __hash__ = None

    @classmethod
    def empty(cls) -> "Molecule":
        return cls((), np.zeros((0, 3)))

    def with_positions(self, positions) -> "Molecule":
        return Molecule(self.elements, positions)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(3)
        return self.positions.mean(axis=0)

    def distance_matrix(self) -> np.ndarray:
        return _pairwise(self.positions)


@dataclass(frozen=True)
class BondedMolecule:
    """A molecule with an explicit bond list of ``(i, j, order)``, ``i < j``."""

    molecule: Molecule
    bonds: tuple[tuple[int, int, int], ...] = ()
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.molecule)
        seen = set()
        clean = []
        for bond in self.bonds:
            i, j, order = (int(v) for v in bond)
            if i == j:
                raise MoleculeError(f"self-loop on atom {i}")
            if i > j:
                i, j = j, i
            if i < 0 or j >= n:
                raise MoleculeError(f"bond ({i}, {j}) out of range for {n} atoms")
            if order not in (1, 2, 3):
                raise MoleculeError(f"bond ({i}, {j}) has order {order}")
            if (i, j) in seen:
                raise MoleculeError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
            clean.append((i, j, order))
        object.__setattr__(self, "bonds", tuple(sorted(clean)))

    def __len__(self):
        return len(self.molecule)

    @property
    def elements(self):
        return self.molecule.elements

    @property
    def positions(self):
        return self.molecule.positions

    def valences(self) -> np.ndarray:
        """Bond-order sum per atom."""
        out = np.zeros(len(self), dtype=np.int64)
        for i, j, order in self.bonds:
            out[i] += order
            out[j] += order
        return out

    def neighbors(self) -> list[list[tuple[int, int]]]:
        adj: list[list[tuple[int, int]]] = [[] for _ in range(len(self))]
        for i, j, order in self.bonds:
            adj[i].append((j, order))
            adj[j].append((i, order))
        return adj


def _pairwise(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


# -- file formats ---------------------------------------------------------

def parse_xyz(text: str) -> Molecule:
    lines = text.splitlines()
    if not lines:
        raise MoleculeError("line 1: empty XYZ input")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise MoleculeError(f"line 1: malformed atom count {lines[0]!r}") from None
    if count < 0:
        raise MoleculeError(f"line 1: negative atom count {count}")
    rows = lines[2:2 + count]
    if len(rows) < count:
        raise MoleculeError(
            f"line {len(lines) + 1}: expected {count} atom rows, found {len(rows)}")
    elements, coords = [], []
    for k, row in enumerate(rows):
        lineno = k + 3
        parts = row.split()
        if len(parts) < 4:
            raise MoleculeError(f"line {lineno}: expected 'element x y z'")
        el = parts[0]
        if el not in COVALENT_RADII:
            raise MoleculeError(f"line {lineno}: unknown element {el!r}")
        try:
            xyz = [float(v) for v in parts[1:4]]
        except ValueError:
            raise MoleculeError(f"line {lineno}: non-numeric coordinate") from None
        elements.append(el)
        coords.append(xyz)
    return Molecule(tuple(elements), np.array(coords).reshape(-1, 3))


def write_xyz(mol: Molecule, comment: str = "") -> str:
    out = [str(len(mol)), comment]
    for el, (x, y, z) in zip(mol.elements, mol.positions):
        out.append(f"{el} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(out) + "\n"


def to_json_dict(bm: BondedMolecule) -> dict:
    return {
        "atoms": [{"el": el, "x": float(x), "y": float(y), "z": float(z)}
                  for el, (x, y, z) in zip(bm.elements, bm.positions)],
        "bonds": [[i, j, order] for i, j, order in bm.bonds],
    }


def from_json_dict(payload: dict) -> BondedMolecule:
    atoms = payload.get("atoms", [])
    mol = Molecule(tuple(a["el"] for a in atoms),
                   np.array([[a["x"], a["y"], a["z"]] for a in atoms]).reshape(-1, 3))
    return BondedMolecule(mol, tuple(tuple(b) for b in payload.get("bonds", [])))


def dumps_json(bm: BondedMolecule) -> str:
    return json.dumps(to_json_dict(bm), sort_keys=True)


def loads_json(text: str) -> BondedMolecule:
    return from_json_dict(json.loads(text))


# -- bond perception ------------------------------------------------------

def infer_bonds(mol: Molecule) -> BondedMolecule:
    """Distance-based bonds from the covalent-radius table.

    A pair bonds when its distance is within ``r_i + r_j + 0.4``; shorter
    contacts are promoted to double (``sum - 0.15``) and triple
    (``sum - 0.25``) bonds.
    """
    n = len(mol)
    if n < 2:
        return BondedMolecule(mol, ())
    radii = np.array([COVALENT_RADII[e] for e in mol.elements])
    ref = radii[:, None] + radii[None, :]
    d = mol.distance_matrix()
    iu, ju = np.triu_indices(n, k=1)
    dist, rsum = d[iu, ju], ref[iu, ju]
    bonded = dist <= rsum + BOND_TOLERANCE
    order = np.where(dist <= rsum - TRIPLE_SHRINK, 3,
                     np.where(dist <= rsum - DOUBLE_SHRINK, 2, 1))
    bonds = tuple((int(i), int(j), int(o))
                  for i, j, o in zip(iu[bonded], ju[bonded], order[bonded]))
    return BondedMolecule(mol, bonds)


def _sphere_points(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5 ** 0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi),
                     np.sin(theta) * np.sin(phi),
                     np.cos(phi)], axis=1)


_CANDIDATES = _sphere_points(400)


def _place_directions(fixed: np.ndarray, count: int, iters: int = 100) -> np.ndarray:
    """Unit vectors for ``count`` new bonds spread away from ``fixed`` ones.

    Greedy max-min-angle seeding over a Fibonacci sphere, then a short
    repulsion relaxation of the new directions only.
    """
    dirs = [np.asarray(v, dtype=np.float64) for v in fixed]
    new = []
    for _ in range(count):
        if dirs:
            cos = _CANDIDATES @ np.array(dirs).T
            best = np.argmin(cos.max(axis=1))
        else:
            best = 0
        new.append(_CANDIDATES[best])
        dirs.append(_CANDIDATES[best])
    new = np.array(new)
    if count == 1 and len(fixed) <= 1:
        return new
    fixed = np.asarray(fixed, dtype=np.float64).reshape(-1, 3)
    for _ in range(iters):
        everyone = np.vstack([fixed, new])
        diff = new[:, None, :] - everyone[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        dist[np.arange(len(new)), len(fixed) + np.arange(len(new))] = np.inf
        force = (diff / np.maximum(dist, 1e-6)[..., None] ** 3).sum(axis=1)
        new = new + 0.05 * force
        new /= np.linalg.norm(new, axis=1, keepdims=True)
    return new


def add_hydrogens(bm: BondedMolecule) -> BondedMolecule:
    """Fill each heavy atom's valence deficit with explicit hydrogens.

    Hydrogens sit at the covalent-radius bond length along directions spread
    away from the atom's existing bonds. Over-valent atoms are left alone and
    reported in ``metadata["over_valence"]``.
    """
    mol = bm.molecule
    valence = bm.valences()
    adj = bm.neighbors()
    elements = list(mol.elements)
    positions = [p for p in mol.positions]
    bonds = list(bm.bonds)
    over = []
    for a, el in enumerate(mol.elements):
        if el == "H":
            continue
        deficit = VALENCE[el] - int(valence[a])
        if deficit < 0:
            over.append(a)
            continue
        if deficit == 0:
            continue
        center = mol.positions[a]
        fixed = []
        for nb, _ in adj[a]:
            v = mol.positions[nb] - center
            fixed.append(v / np.linalg.norm(v))
        length = COVALENT_RADII[el] + COVALENT_RADII["H"]
        for direction in _place_directions(np.array(fixed).reshape(-1, 3), deficit):
            elements.append("H")
            positions.append(center + length * direction)
            bonds.append((a, len(elements) - 1, 1))
    meta = dict(bm.metadata)
    meta["over_valence"] = tuple(over)
    meta["added_hydrogens"] = len(elements) - len(mol)
    new_mol = Molecule(tuple(elements), np.array(positions).reshape(-1, 3))
    return BondedMolecule(new_mol, tuple(bonds), meta)


# -- fragments ------------------------------------------------------------

def connected_fragments(bm: BondedMolecule) -> list[np.ndarray]:
    n = len(bm)
    if n == 0:
        return []
    rows = [i for i, _, _ in bm.bonds]
    cols = [j for _, j, _ in bm.bonds]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(idx)
    return [np.array(g) for g in groups.values()]


def subgraph(bm: BondedMolecule, atoms: Sequence[int]) -> BondedMolecule:
    atoms = sorted(int(a) for a in atoms)
    remap = {old: new for new, old in enumerate(atoms)}
    mol = Molecule(tuple(bm.elements[a] for a in atoms),
                   bm.positions[atoms].reshape(-1, 3))
    bonds = tuple((remap[i], remap[j], o) for i, j, o in bm.bonds
                  if i in remap and j in remap)
    return BondedMolecule(mol, bonds, dict(bm.metadata))


def largest_fragment(bm: BondedMolecule) -> BondedMolecule:
    """Keep the biggest connected component.

    Ties go to the heavier fragment, then to the one holding the lowest
    atom index.
    """
    frags = connected_fragments(bm)
    if not frags:
        raise MoleculeError("cannot take the largest fragment of an empty molecule")

    def key(frag):
        mass = sum(ATOMIC_MASS[bm.elements[a]] for a in frag)
        return (-len(frag), -mass, int(frag.min()))

    best = min(frags, key=key)
    if len(best) == len(bm):
        return bm
    return subgraph(bm, best)


# -- fingerprints ---------------------------------------------------------

@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool).copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return int(self.bits.size)

    @classmethod
    def from_indices(cls, indices: Iterable[int], width: int = FINGERPRINT_WIDTH):
        bits = np.zeros(width, dtype=bool)
        bits[list(indices)] = True
        return cls(bits)

    def on_bits(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")


def _canonical_path(seq: list[str]) -> str:
    fwd = "|".join(seq)
    rev = "|".join(reversed(seq))
    return min(fwd, rev)


def enumerate_paths(bm: BondedMolecule, max_length: int = FINGERPRINT_DEPTH) -> set[str]:
    """Canonical strings of every simple path with up to ``max_length`` bonds."""
    adj = bm.neighbors()
    elements = bm.elements
    found: set[str] = set()
    for start in range(len(bm)):
        stack = [(start, [elements[start]], (start,))]
        while stack:
            atom, seq, visited = stack.pop()
            found.add(_canonical_path(seq))
            if len(visited) > max_length:
                continue
            for nb, order in adj[atom]:
                if nb in visited:
                    continue
                stack.append((nb, seq + [str(order), elements[nb]], visited + (nb,)))
    return found


def fingerprint(bm: BondedMolecule, width: int = FINGERPRINT_WIDTH,
                max_length: int = FINGERPRINT_DEPTH) -> Fingerprint:
    paths = enumerate_paths(bm, max_length)
    return Fingerprint.from_indices((_hash64(p) % width for p in paths), width)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.width != b.width:
        raise ValueError(f"fingerprint widths differ: {a.width} vs {b.width}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union


def molecule_hash(bm: BondedMolecule | Molecule) -> str:
    """Stable content hash of elements, rounded coordinates and bonds."""
    if isinstance(bm, Molecule):
        bm = BondedMolecule(bm, ())
    h = hashlib.sha256()
    h.update("|".join(bm.elements).encode())
    h.update(np.round(bm.positions, 6).astype("<f8").tobytes())
    h.update(repr(bm.bonds).encode())
    return h.hexdigest()[:16]
