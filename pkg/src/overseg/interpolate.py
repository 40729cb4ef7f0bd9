"""Gap-layer recovery by optimal-transport boundary interpolation, and label merging.

The boundaries of the masks on either side of a gap are matched with an exact
transport plan; every matched pair emits its displacement-interpolated point,
neighbouring emitted points are bridged into a closed contour and the contour
is filled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linprog

from .ot import pairwise_distances, solve_transport
from .volume import LabelVolume, Mask2D

log = logging.getLogger(__name__)

MERGE = "merge"
KEEP = "keep"

_EIGHT = np.ones((3, 3), dtype=bool)


class CorrectionError(ValueError):
    pass


class StaleLabelError(CorrectionError):
    pass


class ConflictingDecisionError(CorrectionError):
    pass


@dataclass
class BoundaryCloud:
    points: np.ndarray  # (k, 2) int64, (y, x)

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("boundary cloud must not be empty")

    def __len__(self):
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self.points), 1.0 / len(self.points))


@dataclass
class CorrectionDecision:
    label_a: int
    label_b: int
    verdict: str
    probability: float = 1.0
    gap_layers: tuple[int, ...] = ()
    masks: list | None = None
    fallback: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if self.verdict not in (MERGE, KEEP):
            raise ValueError(f"verdict must be {MERGE!r} or {KEEP!r}")
        self.gap_layers = tuple(int(z) for z in self.gap_layers)

    @property
    def key(self) -> tuple[int, int]:
        return (self.label_a, self.label_b)


def _canvas(*pixel_sets, pad=2):
    allpx = np.concatenate(pixel_sets)
    lo = allpx.min(0) - pad
    hi = allpx.max(0) + pad + 1
    return lo, tuple(int(v) for v in hi - lo)


def extract_boundary(mask: Mask2D) -> BoundaryCloud:
    """Mask pixels with at least one 8-neighbour outside the mask."""
    if len(mask) == 0:
        raise ValueError("empty mask")
    lo, shape = _canvas(mask.pixels)
    img = np.zeros(shape, dtype=bool)
    loc = mask.pixels - lo
    img[loc[:, 0], loc[:, 1]] = True
    inner = ndimage.binary_erosion(img, structure=_EIGHT, border_value=0)
    edge = img & ~inner
    return BoundaryCloud(np.argwhere(edge) + lo)


def boundary_plan(src: BoundaryCloud, dst: BoundaryCloud) -> np.ndarray:
    """Exact plan between uniform boundary clouds under squared Euclidean cost."""
    cost = pairwise_distances(src.points.astype(np.float64), dst.points.astype(np.float64), power=2)
    return solve_transport(cost, src.weights, dst.weights).plan


def _line(p, q) -> np.ndarray:
    """8-connected digital segment from p to q, inclusive."""
    n = int(np.abs(q - p).max())
    if n == 0:
        return p[None, :]
    s = np.arange(n + 1)[:, None] / n
    return np.floor(p + (q - p) * s + 0.5).astype(np.int64)


def _neighbor_links(points: np.ndarray, owner: np.ndarray):
    """Entry pairs whose owning boundary points coincide or are 8-adjacent."""
    by_point: dict[tuple[int, int], list[int]] = {}
    for k, i in enumerate(owner):
        by_point.setdefault(tuple(points[i]), []).append(k)
    links = []
    for (y, x), ks in by_point.items():
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                other = by_point.get((y + dy, x + dx))
                if other is None:
                    continue
                for k0 in ks:
                    for k1 in other:
                        if k0 < k1:
                            links.append((k0, k1))
    return links


def _n_components(img: np.ndarray) -> int:
    return int(ndimage.label(img, structure=_EIGHT)[1])


def _fallback(src: Mask2D, dst: Mask2D, lo, shape) -> np.ndarray:
    a = src.to_image_local(lo, shape)
    b = dst.to_image_local(lo, shape)
    core = a & b
    if not core.any():
        return a | b
    return ndimage.binary_dilation(core, structure=_EIGHT) & (a | b)


def interpolate_mask(src: Mask2D, dst: Mask2D, t: float, layer: int | None = None,
                     label: int | None = None, return_flag: bool = False):
    """Displacement interpolation of two masks at fraction ``t`` from src to dst.

    Returns the mask (and, with ``return_flag``, whether the fill fell back to
    the dilated intersection of the two masks).
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("empty mask")
    layer = src.layer if layer is None else layer
    label = src.label if label is None else label
    bs, bd = extract_boundary(src), extract_boundary(dst)
    plan = boundary_plan(bs, bd)
    ii, jj = np.nonzero(plan > 1e-15)
    emitted = np.floor((1 - t) * bs.points[ii] + t * bd.points[jj] + 0.5).astype(np.int64)

    # bridge entries whose source (early t) or target (late t) points are neighbours
    links = []
    if t <= 0.5:
        links += _neighbor_links(bs.points, ii)
    if t >= 0.5:
        links += _neighbor_links(bd.points, jj)
    pieces = [emitted] + [_line(emitted[k0], emitted[k1]) for k0, k1 in links]
    contour = np.concatenate(pieces)

    lo, shape = _canvas(contour, src.pixels, dst.pixels)
    img = np.zeros(shape, dtype=bool)
    loc = contour - lo
    img[loc[:, 0], loc[:, 1]] = True
    filled = ndimage.binary_fill_holes(img)
    limit = max(_n_components(src.to_image_local(lo, shape)), _n_components(dst.to_image_local(lo, shape)))
    flag = _n_components(filled) > limit
    if flag:
        filled = _fallback(src, dst, lo, shape)
    out = Mask2D(layer, np.argwhere(filled) + lo, label)
    return (out, flag) if return_flag else out


# ---------------------------------------------------------------------------
# merging


def _check_decisions(decisions):
    seen: dict[frozenset, str] = {}
    for d in decisions:
        k = frozenset(d.key)
        if len(k) != 2:
            raise ConflictingDecisionError(f"decision pairs label {d.label_a} with itself")
        if k in seen:
            raise ConflictingDecisionError(f"more than one decision for pair {sorted(k)}")
        seen[k] = d.verdict


def _gap_z(d: CorrectionDecision) -> int:
    return d.gap_layers[0] if d.gap_layers else -1


def _layer_mask(data: np.ndarray, label: int, z: int) -> Mask2D | None:
    if not 0 <= z < data.shape[0]:
        return None
    px = np.argwhere(data[z] == label)
    return Mask2D(z, px, label) if len(px) else None


def apply_corrections(volume: LabelVolume, decisions, fill_enclosed: bool = True):
    """Merge confirmed pairs top to bottom; returns (corrected volume, change log).

    Each merge writes the interpolated gap masks under A (background pixels
    only) and relabels B to A. A label already merged away resolves to the
    label that absorbed it, so chains of fragments collapse into one cell.
    With ``fill_enclosed``, each gap layer is settled jointly afterwards (see
    ``_settle_layer``): overlapping recoveries are split and small background
    pockets touching them are shared out. Pixels labelled in the input are
    never touched.
    """
    decisions = list(decisions)
    _check_decisions(decisions)
    out = volume.copy()
    data = out.data
    present = set(int(v) for v in np.unique(data)) - {0}
    alias: dict[int, int] = {}

    def resolve(lab):
        while lab in alias:
            lab = alias[lab]
        return lab

    changes = []
    recovered: dict[int, list] = {}  # z -> [(label, mask pixels, change index, gap index)]
    order = sorted(decisions, key=lambda d: (_gap_z(d), d.label_a, d.label_b))
    for d in order:
        entry = {"label_a": d.label_a, "label_b": d.label_b, "verdict": d.verdict,
                 "probability": float(d.probability), "gap_layers": list(d.gap_layers),
                 "pixels_written": [], "pixels_filled": [], "fallback": [], "merged_into": None}
        if d.verdict == KEEP:
            changes.append(entry)
            continue
        for lab in d.key:
            if lab not in present:
                raise StaleLabelError(f"label {lab} does not exist in the volume")
        a, b = resolve(d.label_a), resolve(d.label_b)
        if a == b:
            entry["merged_into"] = a
            entry["note"] = "already merged"
            changes.append(entry)
            continue
        gap = list(d.gap_layers)
        if gap:
            src = _layer_mask(data, a, gap[0] - 1)
            dst = _layer_mask(data, b, gap[-1] + 1)
            if src is None or dst is None:
                raise StaleLabelError(f"pair ({d.label_a}, {d.label_b}) has no masks facing gap {gap}")
            n = len(gap)
            for k, z in enumerate(gap):
                if d.masks is not None:
                    m, flag = d.masks[k], bool(d.fallback[k]) if d.fallback else False
                else:
                    m, flag = interpolate_mask(src, dst, (k + 1) / (n + 1), layer=z, label=a,
                                               return_flag=True)
                px = _write_background(data[z], m.pixels, a)
                recovered.setdefault(z, []).append((a, _inside(m.pixels, data.shape[1:]), len(changes), k))
                entry["pixels_written"].append(int(len(px)))
                entry["pixels_filled"].append(0)
                entry["fallback"].append(bool(flag))
        data[data == b] = a
        alias[b] = a
        entry["merged_into"] = a
        changes.append(entry)
    if fill_enclosed:
        for z in sorted(recovered):
            seeds = [(resolve(a), px, ci, k) for a, px, ci, k in recovered[z]]
            for ci, k, n_own, n_fill in _settle_layer(data, z, seeds, volume.data[z] == 0,
                                                         aniso=volume.anisotropy):
                changes[ci]["pixels_written"][k] = n_own
                changes[ci]["pixels_filled"][k] = n_fill
    return out, changes


def _inside(pixels: np.ndarray, shape) -> np.ndarray:
    ok = ((pixels[:, 0] >= 0) & (pixels[:, 0] < shape[0])
          & (pixels[:, 1] >= 0) & (pixels[:, 1] < shape[1]))
    return pixels[ok]


def _write_background(sl: np.ndarray, pixels: np.ndarray, label: int) -> np.ndarray:
    px = _inside(pixels, sl.shape)
    px = px[sl[px[:, 0], px[:, 1]] == 0]
    sl[px[:, 0], px[:, 1]] = label
    return px


def _settle_layer(data: np.ndarray, z: int, seeds, free: np.ndarray, max_ratio: float = 1.0,
                  aniso=(1.0, 1.0, 1.0)):
    """Re-assign one gap layer jointly among all masks recovered on it.

    Only pixels that were background in the input are touched. Candidates are
    the recovered masks plus background pockets bordering them that are at
    most ``max_ratio`` of their area. A candidate pixel whose neighbours
    directly above and below carry the same recovered label takes that label.
    A pixel claimed by one mask with no conflicting label above or below keeps
    it. Where several recovered labels compete, the one with the smallest
    signed distance averaged over the two facing layers wins, and pixels
    disputed by two cells that are linearly separable on the nearby layers go
    by the side of their separating plane. Remaining pocket pixels go to the
    nearest recovered mask. Returns
    (change index, gap index, pixels inside own mask, pixels filled outside).
    """
    sl = data[z]
    labels = np.array([s[0] for s in seeds], dtype=sl.dtype)
    sl[free & np.isin(sl, labels)] = 0
    count = np.zeros(sl.shape, dtype=np.int64)
    owner = np.full(sl.shape, -1, dtype=np.int64)
    for s, (_, px, _, _) in enumerate(seeds):
        px = px[free[px[:, 0], px[:, 1]]]
        count[px[:, 0], px[:, 1]] += 1
        first = owner[px[:, 0], px[:, 1]] < 0
        owner[px[first, 0], px[first, 1]] = s
    region = count > 0
    if not region.any():
        return []
    area = np.bincount(owner[region], minlength=len(seeds))

    bg, n = ndimage.label(free & ~region & (sl == 0))
    pocket = np.zeros(sl.shape, dtype=bool)
    if n:
        grown = ndimage.grey_dilation(owner + 1, footprint=_EIGHT) - 1
        touch = (bg > 0) & (grown >= 0)
        pairs = np.unique(np.stack([bg[touch], grown[touch]], 1), axis=0)
        sizes = np.bincount(bg.ravel(), minlength=n + 1)
        for c in np.unique(pairs[:, 0]):
            if sizes[c] <= max_ratio * area[pairs[pairs[:, 0] == c, 1]].sum():
                pocket |= bg == c

    cand = region | pocket
    up = data[z - 1] if z > 0 else np.zeros_like(sl)
    down = data[z + 1] if z + 1 < len(data) else np.zeros_like(sl)
    lab_to_seed = {}
    for s, lab in enumerate(labels.tolist()):
        lab_to_seed.setdefault(lab, s)
    to_seed = np.vectorize(lambda v: lab_to_seed.get(v, -1), otypes=[np.int64])
    s_up = np.where(cand, to_seed(np.where(cand, up, 0)), -1)
    s_down = np.where(cand, to_seed(np.where(cand, down, 0)), -1)

    assign = np.full(sl.shape, -1, dtype=np.int64)
    agree = (s_up >= 0) & (s_up == s_down)
    assign[agree] = s_up[agree]
    # several recovered masks compete: midway wall from averaged signed distances
    vertical = np.where(s_up >= 0, s_up, s_down)
    single = ((count == 1) & ~agree & ((s_up < 0) | (s_up == owner))
              & ((s_down < 0) | (s_down == owner)))
    assign[single] = owner[single]
    contest = cand & ~agree & ~single & ((count > 1) | (vertical >= 0) | pocket)
    vote = contest & ((count > 1) | (vertical >= 0))
    if vote.any():
        best = np.full(sl.shape, np.inf)
        second = np.full(sl.shape, np.inf)
        runner = np.full(sl.shape, -1, dtype=np.int64)
        for s in range(len(seeds)):
            phi = _mean_signed_distance(up, down, labels[s], seeds[s][1], vote)
            better = vote & (phi < best)
            demoted = better & (assign >= 0)
            second[demoted], runner[demoted] = best[demoted], assign[demoted]
            closer = vote & ~better & (phi < second)
            second[closer], runner[closer] = phi[closer], s
            best[better] = phi[better]
            assign[better] = s
        _split_by_separating_plane(data, z, labels, vote, assign, runner, aniso=aniso)
    rest = contest & (assign < 0)
    if rest.any():
        _, idx = ndimage.distance_transform_edt(~region, return_indices=True)
        nearest = owner[idx[0], idx[1]]
        assign[rest] = nearest[rest]
    put = assign >= 0
    sl[put] = labels[assign[put]]
    out = []
    for s, (_, _, ci, k) in enumerate(seeds):
        mine = assign == s
        own = int((mine & region & (owner == s)).sum() + (mine & (count > 1) & (owner != s)).sum())
        out.append((ci, k, own, int(mine.sum()) - own))
    return out


def _split_by_separating_plane(data, z, labels, vote, assign, runner, reach: int = 3,
                               margin: int = 8, aniso=(1.0, 1.0, 1.0)) -> None:
    """Split pixels disputed by two recovered cells by the max-margin plane
    separating the two cells on the layers around ``z`` (physical units).

    The plane comes from a small LP over voxels within ``reach`` layers and
    ``margin`` pixels of the disputed pixels. Two-layer signed distances miss
    walls that run nearly parallel to the layers; the wider window catches
    them. Pairs that are not separable there keep the distance-based choice.
    """
    both = vote & (runner >= 0)
    if not both.any():
        return
    pairs = np.unique(np.sort(np.stack([assign[both], runner[both]], 1), axis=1), axis=0)
    z0, z1 = max(z - reach, 0), min(z + reach + 1, data.shape[0])
    scale = np.asarray(aniso, dtype=np.float64)
    disputed = [(s, t, np.argwhere(both & (((assign == s) & (runner == t))
                                          | ((assign == t) & (runner == s)))))
                for s, t in pairs.tolist() if labels[s] != labels[t]]
    for s, t, yx in disputed:
        la, lb = int(labels[s]), int(labels[t])
        lo = np.maximum(yx.min(0) - margin, 0)
        hi = yx.max(0) + margin + 1
        box = data[z0:z1, lo[0]:hi[0], lo[1]:hi[1]]
        pa = np.argwhere(box == la)
        pb = np.argwhere(box == lb)
        if len(pa) == 0 or len(pb) == 0:
            continue
        off = np.array([z0, lo[0], lo[1]])
        w = _separating_plane((pa + off) * scale, (pb + off) * scale)
        if w is None:
            continue
        q = np.c_[np.full(len(yx), z, dtype=np.float64), yx] * scale
        side = q @ w[:3] + w[3]
        assign[yx[:, 0], yx[:, 1]] = np.where(side >= 0, s, t)


def _separating_plane(pa: np.ndarray, pb: np.ndarray):
    """(w, b) maximizing d with w.a + b >= d on pa and <= -d on pb, |w|_inf <= 1;
    None unless the sets are strictly separable."""
    # variables: w (3), b, d; maximize d
    A = np.vstack([np.c_[-pa, -np.ones(len(pa)), np.ones(len(pa))],
                   np.c_[pb, np.ones(len(pb)), np.ones(len(pb))]])
    bounds = [(-1, 1)] * 3 + [(None, None), (None, None)]
    res = linprog(np.r_[0, 0, 0, 0, -1.0], A_ub=A, b_ub=np.zeros(len(A)), bounds=bounds,
                  method="highs")
    if res.status != 0 or res.x[4] <= 1e-9:
        return None
    return res.x[:4]


def _mean_signed_distance(up, down, label, pixels, where, margin: int = 4) -> np.ndarray:
    """Average over the two facing layers of the signed distance to ``label``
    (negative inside), evaluated on a box around the label; +inf elsewhere."""
    out = np.full(up.shape, np.inf)
    boxes = [pixels] + [np.argwhere(l == label) for l in (up, down)]
    pts = np.concatenate([b for b in boxes if len(b)] + [np.argwhere(where)])
    lo = np.maximum(pts.min(0) - margin, 0)
    hi = np.minimum(pts.max(0) + margin + 1, up.shape)
    box = (slice(lo[0], hi[0]), slice(lo[1], hi[1]))
    acc = np.zeros(up[box].shape)
    for l in (up, down):
        m = l[box] == label
        if not m.any():
            return out
        acc += ndimage.distance_transform_edt(~m) - ndimage.distance_transform_edt(m)
    out[box] = acc / 2
    return out


def write_change_log(changes, path) -> None:
    with open(path, "w") as fh:
        json.dump(changes, fh, sort_keys=True, indent=1)
        fh.write("\n")
