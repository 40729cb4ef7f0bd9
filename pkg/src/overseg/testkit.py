"""Deterministic synthetic label volumes and error injection.

Voronoi tessellations stand in for densely packed tissue (convex, wall-to-wall
cells; ``shrink < 1`` opens intercellular spaces). Ellipsoid columns stand in
for loosely packed tissue with natural gaps between stacked cells.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volume import DEFAULT_ANISOTROPY, LabelVolume, Mask2D


@dataclass
class SynthSpec:
    dims: tuple[int, int, int] = (24, 64, 64)
    n_cells: int = 40
    seed: int = 0
    anisotropy: tuple[float, float, float] = DEFAULT_ANISOTROPY
    min_height: int = 4
    shrink: float = 1.0

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if not 0 < self.shrink <= 1:
            raise ValueError("shrink must lie in (0, 1]")


@dataclass
class GapRecord:
    cell: int
    fresh_label: int
    layer: int
    pixels: np.ndarray

    @property
    def mask(self) -> Mask2D:
        return Mask2D(self.layer, self.pixels, self.cell)

    def to_json(self) -> dict:
        return {"cell": self.cell, "fresh_label": self.fresh_label, "layer": self.layer,
                "pixels": self.pixels.tolist()}

    @classmethod
    def from_json(cls, d) -> "GapRecord":
        return cls(int(d["cell"]), int(d["fresh_label"]), int(d["layer"]),
                   np.asarray(d["pixels"], dtype=np.int64).reshape(-1, 2))


def write_gap_records(records, path) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], sort_keys=True))


def voxel_centers(dims, anisotropy) -> np.ndarray:
    """Physical coordinates of every voxel center, shape (Z*Y*X, 3)."""
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) * a for d, a in zip(dims, anisotropy)],
                        indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def generate_voronoi_volume(spec: SynthSpec, seeds: np.ndarray | None = None) -> LabelVolume:
    """Label every voxel by its nearest seed (anisotropy-scaled distance); labels 1..n."""
    rng = np.random.default_rng(spec.seed)
    extent = np.array(spec.dims) * np.array(spec.anisotropy)
    if seeds is None:
        seeds = rng.uniform(0.0, 1.0, size=(spec.n_cells, 3)) * extent
    seeds = np.asarray(seeds, dtype=np.float64)
    pts = voxel_centers(spec.dims, spec.anisotropy)
    tree = cKDTree(seeds)
    _, owner = tree.query(pts)
    if spec.shrink < 1.0:
        # keep p if its preimage under the homothety about its own seed stays in the cell
        pre = seeds[owner] + (pts - seeds[owner]) / spec.shrink
        _, owner2 = tree.query(pre)
        labels = np.where(owner2 == owner, owner + 1, 0)
    else:
        labels = owner + 1
    return LabelVolume(labels.reshape(spec.dims).astype(np.uint32), spec.anisotropy)


def inject_axis_gap(volume: LabelVolume, cell: int, layer: int,
                    fresh_label: int) -> tuple[LabelVolume, GapRecord]:
    """Blank ``cell`` on ``layer`` and relabel everything of it below to ``fresh_label``."""
    zs = np.flatnonzero((volume.data == cell).any(axis=(1, 2)))
    if zs.size == 0:
        raise ValueError(f"label {cell} absent from volume")
    if not zs[0] < layer < zs[-1]:
        raise ValueError(f"layer {layer} is not strictly inside z-range [{zs[0]}, {zs[-1]}] of {cell}")
    if fresh_label == 0 or (volume.data == fresh_label).any():
        raise ValueError(f"fresh label {fresh_label} is not free")
    out = volume.copy()
    sl = out.data[layer]
    pixels = np.argwhere(sl == cell)
    sl[sl == cell] = 0
    below = out.data[layer + 1:]
    below[below == cell] = fresh_label
    return out, GapRecord(cell, fresh_label, layer, pixels)


def inject_gaps(volume: LabelVolume, n_gaps: int, rng: np.random.Generator,
                min_height: int = 4) -> tuple[LabelVolume, list[GapRecord]]:
    """Inject gaps into ``n_gaps`` distinct cells picked uniformly among tall enough ones."""
    from .volume import build_cell_index

    index = build_cell_index(volume)
    eligible = sorted(l for l, r in index.items()
                      if r.height >= max(min_height, 3) and not r.holes)
    if not eligible:
        raise ValueError("no eligible cells for gap injection")
    picks = rng.choice(eligible, size=min(n_gaps, len(eligible)), replace=False)
    out = volume
    fresh = int(volume.data.max()) + 1
    records = []
    for cell in sorted(int(c) for c in picks):
        rec = index[cell]
        layer = int(rng.integers(rec.top_layer + 1, rec.bottom_layer))
        out, gr = inject_axis_gap(out, cell, layer, fresh)
        records.append(gr)
        fresh += 1
    return out, records


def inject_tilted_split(volume: LabelVolume, cell: int, plane_point, plane_normal,
                        fresh_label: int) -> LabelVolume:
    """Relabel the part of ``cell`` on the positive side of a physical-space plane."""
    idx = np.argwhere(volume.data == cell)
    if idx.size == 0:
        raise ValueError(f"label {cell} absent from volume")
    phys = idx * np.array(volume.anisotropy)
    side = (phys - np.asarray(plane_point, float)) @ np.asarray(plane_normal, float)
    pos = side > 0
    if pos.all() or not pos.any():
        raise ValueError("plane does not cut the cell")
    out = volume.copy()
    sel = idx[pos]
    out.data[sel[:, 0], sel[:, 1], sel[:, 2]] = fresh_label
    return out


# ---------------------------------------------------------------------------
# phantoms


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def ellipsoid_mask(dims, anisotropy, center, radii, rotation=None) -> np.ndarray:
    """Voxels whose physical centers fall inside the ellipsoid; ``rotation`` columns are its axes."""
    pts = voxel_centers(dims, anisotropy) - np.asarray(center, float)
    if rotation is not None:
        pts = pts @ np.asarray(rotation, float)
    inside = ((pts / np.asarray(radii, float)) ** 2).sum(1) <= 1.0
    return inside.reshape(dims)


def split_ellipsoid_phantom(seed: int, dims=(24, 64, 64), anisotropy=DEFAULT_ANISOTROPY,
                            max_tilt_deg: float = 45.0):
    """One elongated ellipsoid cut through its center by a tilted plane.

    Returns (volume with labels 1 and 2, plane point, plane normal).
    """
    rng = np.random.default_rng(seed)
    extent = np.array(dims) * np.array(anisotropy)
    center = extent / 2 + rng.uniform(-2, 2, 3)
    tilt = np.deg2rad(rng.uniform(10.0, max_tilt_deg))
    az = rng.uniform(0, 2 * np.pi)
    normal = np.array([np.cos(tilt), np.sin(tilt) * np.sin(az), np.sin(tilt) * np.cos(az)])
    # long axis along the normal so both halves are tall
    radii = np.array([rng.uniform(30, 38), rng.uniform(12, 15), rng.uniform(12, 15)])
    helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(normal, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    rot = np.stack([normal, e1, e2], axis=1)
    body = ellipsoid_mask(dims, anisotropy, center, radii, rot)
    vol = LabelVolume(body.astype(np.uint32), anisotropy)
    return inject_tilted_split(vol, 1, center, normal, 2), center, normal


def tangent_spheres_phantom(seed: int, dims=(24, 64, 64), anisotropy=DEFAULT_ANISOTROPY,
                            max_tilt_deg: float = 45.0):
    """Two spheres touching across a small flat patch, labels 1 and 2.

    Returns (volume, contact point, unit vector from sphere 1 to sphere 2).
    """
    rng = np.random.default_rng(seed)
    extent = np.array(dims) * np.array(anisotropy)
    mid = extent / 2 + rng.uniform(-2, 2, 3)
    tilt = np.deg2rad(rng.uniform(10.0, max_tilt_deg))
    az = rng.uniform(0, 2 * np.pi)
    axis = np.array([np.cos(tilt), np.sin(tilt) * np.sin(az), np.sin(tilt) * np.cos(az)])
    r1, r2 = rng.uniform(17, 20, 2)
    overlap = rng.uniform(1.0, 1.8)
    c1 = mid - axis * (r1 - overlap / 2)
    c2 = mid + axis * (r2 - overlap / 2)
    s1 = ellipsoid_mask(dims, anisotropy, c1, [r1] * 3)
    s2 = ellipsoid_mask(dims, anisotropy, c2, [r2] * 3)
    pts = voxel_centers(dims, anisotropy)
    # power-diagram split of the overlap lens gives a flat contact disc
    d1 = ((pts - c1) ** 2).sum(1) - r1 ** 2
    d2 = ((pts - c2) ** 2).sum(1) - r2 ** 2
    near1 = (d1 <= d2).reshape(dims)
    labels = np.zeros(dims, dtype=np.uint32)
    labels[s2] = 2
    labels[s1 & (near1 | ~s2)] = 1
    return LabelVolume(labels, anisotropy), mid, axis


def generate_column_volume(spec: SynthSpec) -> LabelVolume:
    """Columns of stacked ellipsoidal cells separated by thin background gaps.

    Gives natural stacked pairs (two rounded cells meeting across a gap) as a
    counterpart to the wall-to-wall Voronoi tissue.
    """
    rng = np.random.default_rng(spec.seed)
    Z, Y, X = spec.dims
    az, ay, ax = spec.anisotropy
    pitch = rng.uniform(14, 18)
    ys = np.arange(pitch / 2, Y * ay - pitch / 4, pitch)
    xs = np.arange(pitch / 2, X * ax - pitch / 4, pitch)
    labels = np.zeros(spec.dims, dtype=np.uint32)
    pts = voxel_centers(spec.dims, spec.anisotropy).reshape(Z, Y, X, 3)
    nxt = 1
    for cy in ys:
        for cx in xs:
            z = rng.uniform(-10, 4)
            while z < Z * az and nxt <= spec.n_cells:
                h = rng.uniform(16, 30)
                r = rng.uniform(0.32, 0.48) * pitch
                center = np.array([z + h / 2, cy + rng.uniform(-1.5, 1.5), cx + rng.uniform(-1.5, 1.5)])
                radii = np.array([h / 2, r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15)])
                d = (((pts - center) / radii) ** 2).sum(-1) <= 1.0
                d &= labels == 0
                if d.any():
                    labels[d] = nxt
                    nxt += 1
                z += h + rng.uniform(1.0, 7.0)
    return LabelVolume(labels, spec.anisotropy)


def spec_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["dims"] = list(spec.dims)
    d["anisotropy"] = list(spec.anisotropy)
    return d
