"""Candidate screening and per-pair feature extraction.

A candidate is an (upper, lower) pair of cells whose facing masks overlap in
projection across a short z-gap. Each pair is described by the layer-to-layer
Geo-Wasserstein trajectories of both fragments, the divergence across the gap
and the goodness of fit of the overlap-area profile of the two fragments taken
as one cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ot import OTConfig, geo_wasserstein
from .volume import CellIndex, CellRecord, Mask2D, mask_overlap

VARIANTS = ("default", "incomplete", "extra", "perturbed")

_VARIANT_QUANTILES = {
    "default": (0.0, 0.25, 0.5, 0.75, 1.0),
    "incomplete": (0.25, 0.5, 0.75),
    "extra": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
    "perturbed": (0.1, 0.3, 0.5, 0.7, 0.9),
}

LINEAR = "linear"
QUADRATIC = "quadratic"
SHAPE_CLASSES = (LINEAR, QUADRATIC)


@dataclass
class FeatureConfig:
    max_gap: int = 1
    variant: str = "default"
    ot: OTConfig = field(default_factory=OTConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown feature variant {self.variant!r}; choose from {VARIANTS}")
        if self.max_gap < 0:
            raise ValueError("max_gap must be >= 0")


@dataclass(frozen=True)
class CandidatePair:
    label_a: int
    label_b: int
    gap_layers: tuple[int, ...]
    contact: tuple[Mask2D, Mask2D] = field(compare=False, repr=False)

    @property
    def gap(self) -> int:
        return len(self.gap_layers)

    @property
    def key(self) -> tuple[int, int]:
        return (self.label_a, self.label_b)


@dataclass
class EmdTrajectory:
    label: int
    values: np.ndarray
    holes: int = 0

    def __len__(self):
        return len(self.values)


@dataclass
class ShapeResult:
    cls: str
    shape_index: float
    r2_linear: float = 1.0
    r2_quadratic: float = 1.0
    monotone: bool = False
    degenerate: bool = False


def block_size(variant: str) -> int:
    return len(_VARIANT_QUANTILES[variant])


def feature_length(variant: str) -> int:
    return 2 * block_size(variant) + 4


def feature_names(variant: str) -> list[str]:
    qs = _VARIANT_QUANTILES[variant]
    stat = [f"q{q:.2f}" for q in qs]
    return ([f"a_{s}" for s in stat] + [f"b_{s}" for s in stat]
            + ["emd_gap", "shape_index", "class_linear", "class_quadratic"])


def shape_columns(variant: str) -> tuple[int, int, int]:
    """Column of the shape index and of the two class indicators."""
    k = 2 * block_size(variant) + 1
    return k, k + 1, k + 2


# ---------------------------------------------------------------------------
# screening


def _contact_keys(a: CellRecord, b: CellRecord) -> np.ndarray:
    return np.intersect1d(a.bottom_mask.keys, b.top_mask.keys, assume_unique=True)


def screen_candidates(index: CellIndex, cfg: FeatureConfig | None = None) -> list[CandidatePair]:
    """All (upper, lower) pairs separated by a gap of at most ``cfg.max_gap`` layers.

    The facing masks must overlap, and no third cell may lie entirely inside the
    gap while covering part of the contact footprint. Partial masks in the gap
    do not block a pair.
    """
    cfg = cfg or FeatureConfig()
    by_top: dict[int, list[CellRecord]] = {}
    for rec in index.values():
        by_top.setdefault(rec.top_layer, []).append(rec)
    out = []
    for a in sorted(index.values(), key=lambda r: r.label):
        for g in range(cfg.max_gap + 1):
            for b in by_top.get(a.bottom_layer + 1 + g, ()):
                if b.label == a.label:
                    continue
                footprint = _contact_keys(a, b)
                if footprint.size == 0:
                    continue
                if g and _gap_blocked(index, a, b, footprint):
                    continue
                gap = tuple(range(a.bottom_layer + 1, b.top_layer))
                out.append(CandidatePair(a.label, b.label, gap, (a.bottom_mask, b.top_mask)))
    out.sort(key=lambda p: (p.gap_layers[0] if p.gap_layers else p.contact[1].layer,
                            p.label_a, p.label_b))
    return out


def _gap_blocked(index: CellIndex, a: CellRecord, b: CellRecord, footprint: np.ndarray) -> bool:
    lo, hi = a.bottom_layer, b.top_layer
    for c in index.values():
        if c.label in (a.label, b.label) or not (lo < c.top_layer and c.bottom_layer < hi):
            continue
        for m in c.masks.values():
            if np.intersect1d(m.keys, footprint, assume_unique=True).size:
                return True
    return False


# ---------------------------------------------------------------------------
# trajectories and summaries


def cell_trajectory(rec: CellRecord, cfg: FeatureConfig | None = None) -> EmdTrajectory:
    """Divergences between masks on consecutive layers; adjacencies touching an empty layer are skipped."""
    cfg = cfg or FeatureConfig()
    layers = rec.layers
    vals = []
    holes = 0
    for z0, z1 in zip(layers[:-1], layers[1:]):
        if z1 != z0 + 1:
            holes += 1
            continue
        vals.append(geo_wasserstein(rec.masks[z0], rec.masks[z1], cfg.ot))
    return EmdTrajectory(rec.label, np.asarray(vals, dtype=np.float64), holes)


def extract_emd_trajectories(pair: CandidatePair, index: CellIndex,
                             cfg: FeatureConfig | None = None,
                             cache: dict | None = None):
    """Return (trajectory of A, gap divergence, trajectory of B).

    ``cache`` maps labels to already computed trajectories; pass the same dict
    for many pairs drawn from one index.
    """
    cfg = cfg or FeatureConfig()

    def traj(label):
        if cache is not None and label in cache:
            return cache[label]
        t = cell_trajectory(index[label], cfg)
        if cache is not None:
            cache[label] = t
        return t

    a_bottom, b_top = pair.contact
    return traj(pair.label_a), geo_wasserstein(a_bottom, b_top, cfg.ot), traj(pair.label_b)


def summarize(traj, variant: str = "default") -> np.ndarray:
    """Quantile block of a trajectory; empty trajectories give zeros."""
    qs = _VARIANT_QUANTILES[variant]
    values = traj.values if isinstance(traj, EmdTrajectory) else np.asarray(traj, dtype=np.float64)
    if values.size == 0:
        return np.zeros(len(qs))
    return np.quantile(values, qs, method="linear")


# ---------------------------------------------------------------------------
# topological shape


def overlap_profile(pair: CandidatePair, index: CellIndex) -> np.ndarray:
    """Overlap areas between consecutive occupied layers of A followed by B."""
    a, b = index[pair.label_a], index[pair.label_b]
    masks = [a.masks[z] for z in a.layers] + [b.masks[z] for z in b.layers]
    return np.array([mask_overlap(m0, m1) for m0, m1 in zip(masks[:-1], masks[1:])],
                    dtype=np.float64)


def poly_r2(y: np.ndarray, degree: int) -> float:
    """R^2 of a least-squares polynomial fit against the sample ordinal."""
    y = np.asarray(y, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-12 * max(1.0, float((y ** 2).sum())):
        return 1.0
    V = np.vander(x - x.mean(), degree + 1)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    ss_res = float(((y - V @ coef) ** 2).sum())
    return float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))


def is_strict_unimodal(y: np.ndarray) -> bool:
    """Strictly increasing, strictly decreasing, or strictly up then strictly down."""
    d = np.diff(np.asarray(y, dtype=np.float64))
    if d.size == 0 or np.any(d == 0):
        return False
    if np.all(d > 0) or np.all(d < 0):
        return True
    k = int(np.argmax(d < 0))
    return bool(np.all(d[:k] > 0) and np.all(d[k:] < 0))


def classify_profile(overlaps) -> ShapeResult:
    y = np.asarray(overlaps, dtype=np.float64)
    if y.size < 3:
        return ShapeResult(LINEAR, 1.0, degenerate=True)
    r_lin = poly_r2(y, 1)
    r_quad = poly_r2(y, 2)
    cls = QUADRATIC if r_quad > r_lin else LINEAR
    r2 = max(r_lin, r_quad)
    mono = is_strict_unimodal(y)
    if mono:
        r2 = 1.0
    return ShapeResult(cls, r2, r_lin, r_quad, mono)


def shape_classify(pair: CandidatePair, index: CellIndex) -> ShapeResult:
    """Fit the concatenated overlap profile; ``shape_index`` is the raw R^2 here.

    Per-class min-max normalisation is fitted at training time and applied by the
    model (see ``normalize_shape_index``).
    """
    return classify_profile(overlap_profile(pair, index))


def normalize_shape_index(r2: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    if hi - lo <= 1e-12:
        return 1.0 if r2 >= lo else 0.0
    return float(np.clip((r2 - lo) / (hi - lo), 0.0, 1.0))


# ---------------------------------------------------------------------------
# assembly


def build_feature_vector(pair: CandidatePair, index: CellIndex,
                         cfg: FeatureConfig | None = None,
                         cache: dict | None = None) -> np.ndarray:
    """[stats A, stats B, gap divergence, shape index, linear?, quadratic?]."""
    cfg = cfg or FeatureConfig()
    ta, gap, tb = extract_emd_trajectories(pair, index, cfg, cache)
    shape = shape_classify(pair, index)
    onehot = [1.0, 0.0] if shape.cls == LINEAR else [0.0, 1.0]
    vec = np.concatenate([summarize(ta, cfg.variant), summarize(tb, cfg.variant),
                          [gap, shape.shape_index], onehot])
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"non-finite features for pair {pair.key}")
    return vec


def feature_matrix(pairs, index: CellIndex, cfg: FeatureConfig | None = None) -> np.ndarray:
    cfg = cfg or FeatureConfig()
    cache: dict = {}
    rows = [build_feature_vector(p, index, cfg, cache) for p in pairs]
    return np.array(rows).reshape(len(rows), feature_length(cfg.variant))


def write_candidates_csv(path, pairs, features: np.ndarray | None, variant: str,
                         source: str = "") -> None:
    """One row per pair: labels, gap, features, provenance."""
    names = feature_names(variant) if features is not None else []
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_a", "label_b", "gap", "gap_layers", "contact_pixels", *names, "source"])
        for k, p in enumerate(pairs):
            row = [p.label_a, p.label_b, p.gap, " ".join(map(str, p.gap_layers)),
                   mask_overlap(*p.contact)]
            if features is not None:
                row += [repr(float(v)) for v in features[k]]
            w.writerow(row + [source])
