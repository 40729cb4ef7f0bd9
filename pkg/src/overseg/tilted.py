"""Oversegmentations cut at arbitrary angles.

The contact surface between two touching cells is fitted with a PCA plane,
both cells are resliced parallel to it, the reference slice is blanked and the
two resulting stacks go through the ordinary feature and classifier path.
A positive verdict merges the two 3D bodies directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .classifier import MlpModel, predict
from .features import CandidatePair, FeatureConfig, build_feature_vector
from .interpolate import KEEP, MERGE, CorrectionDecision
from .volume import CellIndex, CellRecord, LabelVolume, Mask2D, build_adjacency, write_volume

_CROSS = ndimage.generate_binary_structure(2, 1)


class TiltedError(ValueError):
    pass


class NotAdjacentError(TiltedError):
    pass


class DegeneratePlaneError(TiltedError):
    pass


@dataclass
class CuttingSurface:
    points: np.ndarray  # (k, 3) physical
    labels: tuple[int, int] = (0, 0)
    centroid_a: np.ndarray | None = None
    centroid_b: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


@dataclass
class ReferencePlane:
    centroid: np.ndarray
    u: np.ndarray
    v: np.ndarray
    normal: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def residual(self) -> float:
        """Smallest covariance eigenvalue, i.e. the mean squared distance to the plane."""
        return float(self.eigenvalues[0])

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("centroid", "u", "v", "normal", "eigenvalues")}


@dataclass
class TiltedConfig:
    min_contact: int = 10
    spacing: float | None = None  # None: the volume's z pitch
    max_slices: int = 64
    features: FeatureConfig = field(default_factory=FeatureConfig)


@dataclass
class ReslicedStack:
    plane: ReferencePlane
    offsets: np.ndarray  # slice offsets k, slice k sits at k * spacing along n
    spacing: float
    pitch: float
    origin: np.ndarray
    grid_shape: tuple[int, int]
    masks: dict[int, dict[int, Mask2D]]  # label -> {k: mask}
    grid_offset: tuple[int, int] = (0, 0)  # (i, j) of local pixel (0, 0)

    @property
    def reference(self) -> int:
        return 0

    def to_volume(self, anisotropy=(1.0, 1.0, 1.0)) -> LabelVolume:
        k0 = int(self.offsets[0])
        data = np.zeros((len(self.offsets), *self.grid_shape), dtype=np.uint32)
        for lab, per in self.masks.items():
            for k, m in per.items():
                data[k - k0, m.pixels[:, 0], m.pixels[:, 1]] = lab
        return LabelVolume(data, anisotropy)


def _physical(idx: np.ndarray, anisotropy) -> np.ndarray:
    return idx.astype(np.float64) * np.asarray(anisotropy, dtype=np.float64)


def extract_cutting_surface(volume: LabelVolume, a: int, b: int) -> CuttingSurface:
    """Midpoint of every face-adjacent voxel pair (one voxel in A, one in B), in physical units."""
    data = volume.data
    pts = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        x, y = data[tuple(lo)], data[tuple(hi)]
        sel = ((x == a) & (y == b)) | ((x == b) & (y == a))
        idx = np.argwhere(sel).astype(np.float64)
        idx[:, axis] += 0.5
        pts.append(idx)
    pts = np.concatenate(pts)
    if len(pts) == 0:
        raise NotAdjacentError(f"labels {a} and {b} share no voxel face")
    ca = _physical(np.argwhere(data == a), volume.anisotropy).mean(0)
    cb = _physical(np.argwhere(data == b), volume.anisotropy).mean(0)
    return CuttingSurface(_physical(pts, volume.anisotropy), (a, b), ca, cb)


def _in_plane_basis(n: np.ndarray):
    # y axis projected into the plane, or x if the plane is nearly perpendicular to y
    for ax in (np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])):
        u = ax - (ax @ n) * n
        if np.linalg.norm(u) > 1e-6:
            u /= np.linalg.norm(u)
            return u, np.cross(n, u)
    raise DegeneratePlaneError("cannot build an in-plane basis")


def fit_plane_pca(surface) -> ReferencePlane:
    """Best-fit plane: normal along the least-variance principal axis.

    The normal points from A's centroid towards B's when the surface carries
    them; otherwise its largest-magnitude component is made positive.
    """
    pts = surface.points if isinstance(surface, CuttingSurface) else np.asarray(surface, float)
    if len(pts) < 3:
        raise DegeneratePlaneError("need at least three points")
    c = pts.mean(0)
    cov = (pts - c).T @ (pts - c) / len(pts)
    w, V = np.linalg.eigh(cov)
    if w[1] <= 1e-12 * max(w[2], 1e-300):
        raise DegeneratePlaneError("points are collinear")
    n = V[:, 0] / np.linalg.norm(V[:, 0])
    if isinstance(surface, CuttingSurface) and surface.centroid_a is not None:
        d = surface.centroid_b - surface.centroid_a
        if n @ d < 0:
            n = -n
    elif n[np.argmax(np.abs(n))] < 0:
        n = -n
    u, v = _in_plane_basis(n)
    return ReferencePlane(c, u, v, n, w)


def reslice(volume: LabelVolume, labels, plane: ReferencePlane, spacing: float = 1.0,
            max_slices: int = 64, close: bool = True) -> ReslicedStack:
    """Sample both cells on planes parallel to ``plane`` by nearest-voxel lookup.

    The slicing origin is the voxel centre nearest the plane centroid, so an
    axis-aligned plane with anisotropy-consistent spacing reproduces the voxel
    layers exactly. Slices run until both cells vanish (at most ``max_slices``
    each way). Each mask is closed once with a radius-1 cross to repair strip
    artefacts; closing never claims a pixel sampled as another cell and the
    masks of one slice stay disjoint.
    """
    labels = [int(l) for l in labels]
    aniso = np.asarray(volume.anisotropy, dtype=np.float64)
    pitch = float(min(aniso[1], aniso[2]))
    origin = np.round(plane.centroid / aniso) * aniso
    vox = np.argwhere(np.isin(volume.data, labels))
    if len(vox) == 0:
        raise TiltedError("labels absent from volume")
    rel = _physical(vox, aniso) - origin
    pu, pv, pn = rel @ plane.u, rel @ plane.v, rel @ plane.normal
    i0, i1 = int(np.floor(pu.min() / pitch)) - 1, int(np.ceil(pu.max() / pitch)) + 1
    j0, j1 = int(np.floor(pv.min() / pitch)) - 1, int(np.ceil(pv.max() / pitch)) + 1
    k0 = max(int(np.floor(pn.min() / spacing)) - 1, -max_slices)
    k1 = min(int(np.ceil(pn.max() / spacing)) + 1, max_slices)
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    shape = ii.shape
    inplane = (ii[..., None] * pitch * plane.u + jj[..., None] * pitch * plane.v).reshape(-1, 3)
    masks: dict[int, dict[int, Mask2D]] = {l: {} for l in labels}
    offsets = np.arange(k0, k1 + 1)
    dims = np.array(volume.dims)
    for k in offsets:
        p = origin + k * spacing * plane.normal + inplane
        idx = np.floor(p / aniso + 0.5).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < dims), axis=1)
        sampled = np.zeros(len(p), dtype=volume.data.dtype)
        sampled[ok] = volume.data[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
        sampled = sampled.reshape(shape)
        imgs = {l: sampled == l for l in labels}
        if close:
            imgs = _close_disjoint(imgs, sampled)
        for l, img in imgs.items():
            if img.any():
                masks[l][int(k)] = Mask2D(int(k), np.argwhere(img), l)
    if not any(masks.values()):
        raise TiltedError("plane misses both cells")
    return ReslicedStack(plane, offsets, float(spacing), pitch, origin, shape, masks, (i0, j0))


def _close_disjoint(imgs: dict, sampled: np.ndarray) -> dict:
    out = {}
    for l, img in imgs.items():
        if not img.any():
            out[l] = img
            continue
        padded = np.pad(img, 2)
        closed = ndimage.binary_closing(padded, structure=_CROSS)[2:-2, 2:-2]
        out[l] = closed & ((sampled == 0) | (sampled == l))
    # a pixel won by several closings goes back to background unless sampled
    stack = np.array(list(out.values()))
    clash = stack.sum(0) > 1
    for l in out:
        out[l] = np.where(clash, sampled == l, out[l])
    return out


def _fragment_record(label: int, masks: dict[int, Mask2D]) -> CellRecord:
    layers = sorted(masks)
    count = sum(len(m) for m in masks.values())
    return CellRecord(label, layers[0], layers[-1], dict(masks), count)


def resliced_pair(stack: ReslicedStack, a: int, b: int):
    """Blank the reference slice; A keeps slices below it, B those above."""
    ref = stack.reference
    ma = {k: m for k, m in stack.masks[a].items() if k < ref}
    mb = {k: m for k, m in stack.masks[b].items() if k > ref}
    if not ma or not mb:
        raise TiltedError(f"resliced fragments of ({a}, {b}) are empty on one side")
    # keep the runs adjacent to the reference slice
    ma = _run_towards(ma, ref, -1)
    mb = _run_towards(mb, ref, +1)
    ra, rb = _fragment_record(a, ma), _fragment_record(b, mb)
    index = CellIndex([(a, ra), (b, rb)], shape=(len(stack.offsets), *stack.grid_shape))
    gap = tuple(range(ra.bottom_layer + 1, rb.top_layer))
    return CandidatePair(a, b, gap, (ra.bottom_mask, rb.top_mask)), index


def _run_towards(masks: dict, ref: int, step: int) -> dict:
    ks = sorted(masks, reverse=step < 0)
    run = [ks[0]]
    for k in ks[1:]:
        if k != run[-1] + step:
            break
        run.append(k)
    return {k: masks[k] for k in run}


def evaluate_tilted_pair(volume: LabelVolume, a: int, b: int, model: MlpModel,
                         cfg: TiltedConfig | None = None) -> CorrectionDecision:
    """Classify a touching pair after reslicing along its fitted contact plane.

    Slice spacing defaults to the volume's z pitch so resliced stacks have the
    same layer pitch as the stacks the model was trained on.
    """
    cfg = cfg or TiltedConfig()
    surface = extract_cutting_surface(volume, a, b)
    plane = fit_plane_pca(surface)
    spacing = cfg.spacing if cfg.spacing is not None else float(volume.anisotropy[0])
    stack = reslice(volume, (a, b), plane, spacing, cfg.max_slices)
    pair, index = resliced_pair(stack, a, b)
    fcfg = FeatureConfig(max_gap=cfg.features.max_gap, variant=model.variant, ot=cfg.features.ot)
    vec = build_feature_vector(pair, index, fcfg)
    p, merge = predict(model, vec)
    return CorrectionDecision(a, b, MERGE if merge else KEEP, float(p), ())


def tilted_candidates(volume: LabelVolume, cfg: TiltedConfig | None = None) -> list[tuple[int, int]]:
    cfg = cfg or TiltedConfig()
    return build_adjacency(volume).edge_list(cfg.min_contact)


def apply_tilted_merges(volume: LabelVolume, decisions) -> tuple[LabelVolume, list[dict]]:
    """Relabel B to A for every Merge, in order; no voxel is added."""
    out = volume.copy()
    alias: dict[int, int] = {}

    def resolve(l):
        while l in alias:
            l = alias[l]
        return l

    log = []
    for d in decisions:
        entry = {"label_a": d.label_a, "label_b": d.label_b, "verdict": d.verdict,
                 "probability": float(d.probability), "merged_into": None}
        if d.verdict == MERGE:
            a, b = resolve(d.label_a), resolve(d.label_b)
            if a != b:
                out.data[out.data == b] = a
                alias[b] = a
            entry["merged_into"] = a
        log.append(entry)
    return out, log


def write_resliced(stack: ReslicedStack, path) -> None:
    """Resliced labels in the raw volume format plus the plane in a side file."""
    write_volume(stack.to_volume((stack.spacing, stack.pitch, stack.pitch)), path)
    meta = {"plane": stack.plane.to_json(), "origin": stack.origin.tolist(),
            "spacing": stack.spacing, "pitch": stack.pitch,
            "first_offset": int(stack.offsets[0])}
    Path(str(path) + ".plane.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
