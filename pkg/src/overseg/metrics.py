"""Segmentation quality (AP, mAP, Jaccard) and merge-decision scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .volume import LabelVolume

MAP_THRESHOLDS = (0.25, 0.5, 0.75)


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]
    false_positives: list[int]
    false_negatives: list[int]
    threshold: float

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


@dataclass
class OverlapTable:
    pred_labels: np.ndarray
    gt_labels: np.ndarray
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def _check_dims(pred: LabelVolume, gt: LabelVolume):
    if pred.dims != gt.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs gt {gt.dims}")


def overlap_table(pred: LabelVolume, gt: LabelVolume) -> OverlapTable:
    """IoU of every (pred, gt) label pair sharing at least one voxel."""
    _check_dims(pred, gt)
    p = pred.data.ravel().astype(np.int64)
    g = gt.data.ravel().astype(np.int64)
    p_lab, p_cnt = np.unique(p[p != 0], return_counts=True)
    g_lab, g_cnt = np.unique(g[g != 0], return_counts=True)
    both = (p != 0) & (g != 0)
    pairs, inter = np.unique(np.stack([p[both], g[both]], 1), axis=0, return_counts=True) \
        if both.any() else (np.zeros((0, 2), np.int64), np.zeros(0, np.int64))
    psize = dict(zip(p_lab.tolist(), p_cnt.tolist()))
    gsize = dict(zip(g_lab.tolist(), g_cnt.tolist()))
    out = []
    for (a, b), n in zip(pairs.tolist(), inter.tolist()):
        out.append((a, b, n / (psize[a] + gsize[b] - n)))
    return OverlapTable(p_lab, g_lab, out)


def match_cells(pred: LabelVolume, gt: LabelVolume, t: float,
                table: OverlapTable | None = None, objective: str = "count") -> MatchResult:
    """Optimal one-to-one matching over pairs with IoU >= t (and IoU > 0).

    ``objective="count"`` maximizes the number of matches, ties broken by total
    IoU; ``"iou"`` maximizes total IoU. For t >= 0.5 every pred and gt cell has
    at most one eligible partner, so both agree with greedy matching.
    """
    table = table or overlap_table(pred, gt)
    pairs = [(a, b, iou) for a, b, iou in table.pairs if iou >= t and iou > 0]
    matches = []
    if pairs:
        rows = sorted({a for a, _, _ in pairs})
        cols = sorted({b for _, b, _ in pairs})
        ri = {a: i for i, a in enumerate(rows)}
        ci = {b: j for j, b in enumerate(cols)}
        W = np.zeros((len(rows), len(cols)))
        big = min(len(rows), len(cols)) + 1.0 if objective == "count" else 0.0
        for a, b, iou in pairs:
            W[ri[a], ci[b]] = big + iou
        r, c = linear_sum_assignment(W, maximize=True)
        matches = sorted(((rows[i], cols[j], float(W[i, j] - big)) for i, j in zip(r, c) if W[i, j] > 0),
                         key=lambda m: (-m[2], m[0], m[1]))
    used_p = {a for a, _, _ in matches}
    used_g = {b for _, b, _ in matches}
    fp = [int(x) for x in table.pred_labels if x not in used_p]
    fn = [int(x) for x in table.gt_labels if x not in used_g]
    return MatchResult(matches, fp, fn, t)


def ap_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return tp / (tp + fp + fn)


def average_precision(pred: LabelVolume, gt: LabelVolume, t: float,
                      table: OverlapTable | None = None) -> float:
    """TP / (TP + FN + FP) at IoU threshold t."""
    m = match_cells(pred, gt, t, table)
    return ap_from_counts(m.tp, m.fp, m.fn)


def mean_ap(pred: LabelVolume, gt: LabelVolume, thresholds=MAP_THRESHOLDS) -> float:
    table = overlap_table(pred, gt)
    return float(np.mean([average_precision(pred, gt, t, table) for t in thresholds]))


def jaccard_scores(pred: LabelVolume, gt: LabelVolume, table: OverlapTable | None = None) -> dict:
    """Mean IoU of best-overlap matches; ``penalized`` also counts unmatched gt cells as 0."""
    table = table or overlap_table(pred, gt)
    if len(table.gt_labels) == 0:
        raise ValueError("Jaccard index undefined for an empty ground truth")
    m = match_cells(pred, gt, 0.0, table, objective="iou")
    ious = [iou for _, _, iou in m.matches]
    matched = float(np.mean(ious)) if ious else 0.0
    penalized = float(np.sum(ious) / len(table.gt_labels))
    return {"jaccard_matched": matched, "jaccard_penalized": penalized}


def jaccard(pred: LabelVolume, gt: LabelVolume) -> float:
    return jaccard_scores(pred, gt)["jaccard_penalized"]


def classification_report(decisions, truth) -> tuple[float, float, float]:
    """Recall, precision, F1 with Merge as the positive class.

    ``decisions`` and ``truth`` map a pair key to a bool (True = Merge /
    oversegmented). A truth key absent from ``decisions`` counts as Keep.
    """
    decisions = _as_verdicts(decisions)
    truth = _as_verdicts(truth)
    keys = set(decisions) | set(truth)
    tp = sum(1 for k in keys if decisions.get(k, False) and truth.get(k, False))
    fp = sum(1 for k in keys if decisions.get(k, False) and not truth.get(k, False))
    fn = sum(1 for k in keys if not decisions.get(k, False) and truth.get(k, False))
    return scores_from_counts(tp, fp, fn)


def scores_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return recall, precision, f1


def _as_verdicts(obj) -> dict:
    if isinstance(obj, dict):
        return {k: bool(v) for k, v in obj.items()}
    out = {}
    for d in obj:
        out[d.key] = d.verdict == "merge"
    return out


def stack_metrics(pred: LabelVolume, gt: LabelVolume) -> dict:
    table = overlap_table(pred, gt)
    aps = {f"ap@{t}": average_precision(pred, gt, t, table) for t in MAP_THRESHOLDS}
    out = {"mAP": float(np.mean(list(aps.values()))), **aps}
    out.update(jaccard_scores(pred, gt, table))
    out["n_pred"] = int(len(table.pred_labels))
    out["n_gt"] = int(len(table.gt_labels))
    return out


def bounding_box(volume: LabelVolume, labels) -> list[int]:
    sel = np.isin(volume.data, list(labels))
    if not sel.any():
        return []
    idx = np.argwhere(sel)
    return idx.min(0).tolist() + idx.max(0).tolist()


def write_review_csv(path, decisions, before: LabelVolume, after: LabelVolume | None) -> None:
    """One row per merge with before/after crop boxes; verdict columns are left for the reviewer."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_a", "label_b", "verdict", "probability", "gap_layers",
                    "bbox_before", "bbox_after", "expert_verdict", "notes"])
        for d in decisions:
            if d.verdict != "merge":
                continue
            box_b = bounding_box(before, [d.label_a, d.label_b])
            box_a = bounding_box(after, [d.label_a]) if after is not None else []
            w.writerow([d.label_a, d.label_b, d.verdict, f"{d.probability:.6f}",
                        " ".join(map(str, d.gap_layers)), " ".join(map(str, box_b)),
                        " ".join(map(str, box_a)), "", ""])
