"""Gaussian-density voxel grids and peak-finding recovery of atoms."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from sklearn.base import BaseEstimator, TransformerMixin

from .molgraph import ELEMENTS, MIN_ATOM_SEPARATION, Molecule

TRUNCATION = 4.0
GRID_MAGIC = b"VXG1"


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    edge_length: int = 32
    spacing: float = 0.25
    channels: tuple[str, ...] = ELEMENTS
    atom_radius: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.edge_length < 8:
            raise GridError(f"edge_length must be >= 8, got {self.edge_length}")
        if self.spacing <= 0:
            raise GridError("spacing must be positive")
        if self.atom_radius <= 0:
            raise GridError("atom_radius must be positive")
        if not self.channels or len(set(self.channels)) != len(self.channels):
            raise GridError("channels must be non-empty and unique")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        l = self.edge_length
        return (len(self.channels), l, l, l)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape))

    def axis_coords(self) -> np.ndarray:
        """Coordinate (A) of each grid index; index ``l // 2`` sits at the origin."""
        return (np.arange(self.edge_length) - self.edge_length // 2) * self.spacing

    @property
    def bounds(self) -> tuple[float, float]:
        c = self.axis_coords()
        return float(c[0]), float(c[-1])

    def to_index(self, xyz) -> np.ndarray:
        return np.asarray(xyz) / self.spacing + self.edge_length // 2


@dataclass(frozen=True)
class VoxelGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.spec.shape:
            raise GridError(f"grid data shape {data.shape} != spec shape {self.spec.shape}")
        object.__setattr__(self, "data", data)

    def channel(self, element: str) -> np.ndarray:
        return self.data[self.spec.channels.index(element)]


def voxelize(mol: Molecule, spec: GridSpec = GridSpec(), center: bool = True,
             dtype=np.float64) -> VoxelGrid:
    """Render atoms as truncated Gaussians, one channel per element.

    Overlapping same-element densities combine by maximum, so values stay in
    [0, 1]. With ``center=True`` the centroid is moved to the grid origin;
    otherwise coordinates are taken as already expressed in the grid frame.
    """
    data = np.zeros(spec.shape, dtype=dtype)
    if len(mol) == 0:
        return VoxelGrid(spec, data)
    pos = mol.positions - mol.centroid() if center else mol.positions
    lo, hi = spec.bounds
    margin = 2 * spec.atom_radius
    for a, (el, p) in enumerate(zip(mol.elements, pos)):
        if el not in spec.channels:
            raise GridError(f"atom {a} ({el}) has no channel in this grid")
        if np.any(p < lo + margin) or np.any(p > hi - margin):
            raise GridError(
                f"atom {a} ({el}) at {np.round(p, 3).tolist()} lies outside the grid margin")
    r = spec.atom_radius
    cutoff = TRUNCATION * r
    reach = int(np.ceil(cutoff / spec.spacing))
    coords = spec.axis_coords()
    l = spec.edge_length
    for el, p in zip(mol.elements, pos):
        ch = spec.channels.index(el)
        idx = np.rint(spec.to_index(p)).astype(int)
        sl = []
        axes = []
        for k in range(3):
            start, stop = max(idx[k] - reach, 0), min(idx[k] + reach + 1, l)
            sl.append(slice(start, stop))
            axes.append(coords[start:stop] - p[k])
        d2 = (axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2
              + axes[2][None, None, :] ** 2)
        bump = np.exp(-d2 / (2 * r * r))
        bump[d2 > cutoff * cutoff] = 0.0
        view = data[(ch, *sl)]
        np.maximum(view, bump, out=view)
    return VoxelGrid(spec, data)


def _parabola_offset(lm: float, l0: float, lp: float) -> float:
    curvature = lm - 2 * l0 + lp
    if curvature >= 0:
        return 0.0
    return 0.5 * (lm - lp) / curvature


def _refine(vol: np.ndarray, start: np.ndarray, max_iters: int) -> np.ndarray:
    """Sub-voxel maximum from per-axis quadratic fits of the log density."""
    shape = np.array(vol.shape)
    center = start.copy()
    offset = np.zeros(3)
    for _ in range(max(max_iters, 1)):
        if np.any(center < 1) or np.any(center > shape - 2):
            break
        i, j, k = center
        logv = np.log(np.maximum(vol[i - 1:i + 2, j - 1:j + 2, k - 1:k + 2], 1e-300))
        offset = np.array([
            _parabola_offset(logv[0, 1, 1], logv[1, 1, 1], logv[2, 1, 1]),
            _parabola_offset(logv[1, 0, 1], logv[1, 1, 1], logv[1, 2, 1]),
            _parabola_offset(logv[1, 1, 0], logv[1, 1, 1], logv[1, 1, 2]),
        ])
        step = np.rint(offset).astype(int)
        if not step.any():
            break
        center = np.clip(center + step, 0, shape - 1)
        offset = np.zeros(3)
    offset = np.clip(offset, -1.0, 1.0)
    return center + offset


def find_peaks(grid: VoxelGrid, threshold: float = 0.3, max_refine_iters: int = 5) -> Molecule:
    """Locate atoms as refined local maxima of each density channel."""
    if not 0 < threshold < 1:
        raise GridError("threshold must lie in (0, 1)")
    spec = grid.spec
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    elements, positions, heights = [], [], []
    for ch, el in enumerate(spec.channels):
        vol = np.asarray(grid.data[ch], dtype=np.float64)
        if vol.max(initial=0.0) < threshold:
            continue
        neigh = maximum_filter(vol, footprint=footprint, mode="constant", cval=-np.inf)
        # ties (an atom exactly between two voxels) give a two-voxel plateau;
        # both refine to the same point and are merged below
        peaks = np.argwhere((vol >= threshold) & (vol >= neigh))
        found = []
        for idx in peaks:
            refined = _refine(vol, idx, max_refine_iters)
            xyz = (refined - spec.edge_length // 2) * spec.spacing
            found.append((float(vol[tuple(idx)]), xyz))
        found.sort(key=lambda t: -t[0])
        kept: list[tuple[float, np.ndarray]] = []
        for h, xyz in found:
            if all(np.linalg.norm(xyz - q) >= 0.5 * spec.spacing for _, q in kept):
                kept.append((h, xyz))
        for h, xyz in kept:
            elements.append(el)
            positions.append(xyz)
            heights.append(h)
    # cross-channel collisions: keep the denser peak
    order = np.argsort(-np.array(heights), kind="stable")
    keep = []
    for a in order:
        if all(np.linalg.norm(positions[a] - positions[b]) > MIN_ATOM_SEPARATION for b in keep):
            keep.append(a)
    keep.sort()
    return Molecule(tuple(elements[a] for a in keep),
                    np.array([positions[a] for a in keep]).reshape(-1, 3))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalised Gaussian quaternion."""
    q = np.asarray(rng.standard_normal(4), dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rigid_transform(mol: Molecule, rng: np.random.Generator,
                           max_translation: float = 0.5) -> Molecule:
    """Rotate about the centroid uniformly at random, then shift each axis
    by ``U(-max_translation, max_translation)``."""
    if len(mol) == 0:
        return mol
    rot = random_rotation(rng)
    shift = rng.uniform(-max_translation, max_translation, size=3)
    c = mol.centroid()
    return mol.with_positions((mol.positions - c) @ rot.T + c + shift)


# -- serialization --------------------------------------------------------

def grid_to_bytes(grid: VoxelGrid) -> bytes:
    spec = grid.spec
    micro = int(round(spec.spacing * 1e6))
    header = GRID_MAGIC + struct.pack("<III", len(spec.channels), spec.edge_length, micro)
    return header + np.ascontiguousarray(grid.data, dtype="<f4").tobytes()


def grid_from_bytes(blob: bytes, channels=None, atom_radius: float = 0.25) -> VoxelGrid:
    if len(blob) < 16 or blob[:4] != GRID_MAGIC:
        raise GridError("not a voxel grid blob")
    c, l, micro = struct.unpack("<III", blob[4:16])
    channels = tuple(channels) if channels is not None else ELEMENTS[:c]
    if len(channels) != c:
        raise GridError(f"header declares {c} channels, got {len(channels)} names")
    spec = GridSpec(l, micro / 1e6, channels, atom_radius)
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != spec.n_elements:
        raise GridError(f"payload has {data.size} values, expected {spec.n_elements}")
    return VoxelGrid(spec, data.reshape(spec.shape).astype(np.float64))


class Voxelizer(TransformerMixin, BaseEstimator):
    """Molecules -> stacked density grids, and back through peak finding.

    Parameters
    ----------
    edge_length, spacing, atom_radius : grid geometry (voxels, A, A).
    channels : element order of the channel axis.
    center : move each molecule's centroid to the grid origin first.
    threshold, max_refine_iters : peak-finding settings for ``inverse_transform``.
    """

    def __init__(self, edge_length=32, spacing=0.25, channels=ELEMENTS,
                 atom_radius=0.25, center=True, threshold=0.3, max_refine_iters=5,
                 dtype=np.float64):
        self.edge_length = edge_length
        self.spacing = spacing
        self.channels = channels
        self.atom_radius = atom_radius
        self.center = center
        self.threshold = threshold
        self.max_refine_iters = max_refine_iters
        self.dtype = dtype

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.edge_length, self.spacing, tuple(self.channels), self.atom_radius)

    def fit(self, X=None, y=None):
        self.spec_ = self.spec
        return self

    def transform(self, X) -> np.ndarray:
        spec = self.spec
        out = np.empty((len(X), *spec.shape), dtype=self.dtype)
        for n, mol in enumerate(X):
            out[n] = voxelize(mol, spec, center=self.center, dtype=self.dtype).data
        return out

    def inverse_transform(self, X) -> list[Molecule]:
        spec = self.spec
        return [find_peaks(VoxelGrid(spec, g), self.threshold, self.max_refine_iters)
                for g in np.asarray(X)]
