"""Sequence-level evaluation: classification score (instance-agnostic mIoU),
association score (class-agnostic tube overlap quality), their geometric mean
LSTQ, and single-scan panoptic quality (PQ = SQ x RQ at IoU > 0.5).

Instance tubes span the entire sequence: a ground-truth tube is one instance's
point set over all frames (things only), a predicted tube likewise for each
predicted instance id. The association score averages, over ground-truth
tubes, the size-normalized sum of |overlap| * IoU against every predicted tube
that touches it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .sequence import IGNORE_LABEL, ClassMap, ScanSequence

_EXPECTED_COLUMNS = ["LSTQ", "S_assoc", "S_cls", "IoU_St", "IoU_Th", "PQ", "SQ", "RQ"]


@dataclass
class SequenceLabels:
    """Per-frame (semantic, instance) label arrays for one sequence."""

    frames: list[int]
    semantic: dict[int, np.ndarray]
    instance: dict[int, np.ndarray]

    @staticmethod
    def from_scans(seq: ScanSequence) -> "SequenceLabels":
        if not seq.has_labels():
            raise ContractError("sequence has no ground-truth labels")
        return SequenceLabels(
            frames=[s.frame_index for s in seq.scans],
            semantic={s.frame_index: s.semantic for s in seq.scans},
            instance={s.frame_index: s.instance for s in seq.scans},
        )

    def check_coverage(self, other: "SequenceLabels") -> None:
        if self.frames != other.frames:
            raise ContractError(
                f"frame sets differ: {self.frames} vs {other.frames}"
            )
        for f in self.frames:
            if self.semantic[f].shape != other.semantic[f].shape:
                raise ContractError(f"frame {f}: point counts differ")


@dataclass
class MetricReport:
    s_cls: float
    s_assoc: float
    lstq: float
    per_class_iou: dict[int, float]
    iou_stuff: float
    iou_things: float
    pq: float
    sq: float
    rq: float
    per_class_pq: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {
            "LSTQ": self.lstq,
            "S_assoc": self.s_assoc,
            "S_cls": self.s_cls,
            "IoU_St": self.iou_stuff,
            "IoU_Th": self.iou_things,
            "PQ": self.pq,
            "SQ": self.sq,
            "RQ": self.rq,
        }

    def table(self) -> str:
        row = self.as_row()
        header = " | ".join(f"{c:>8}" for c in _EXPECTED_COLUMNS)
        values = " | ".join(f"{row[c]:8.4f}" for c in _EXPECTED_COLUMNS)
        return f"{header}\n{values}"


def _valid(pred_sem: np.ndarray, gt_sem: np.ndarray) -> np.ndarray:
    return gt_sem != IGNORE_LABEL


def confusion_matrix(
    pred: SequenceLabels, gt: SequenceLabels, class_ids: list[int]
) -> np.ndarray:
    """(C, C) counts of (gt class, pred class), ignore-labeled points excluded."""
    index = {cid: i for i, cid in enumerate(class_ids)}
    c = len(class_ids)
    mat = np.zeros((c, c), dtype=np.int64)
    for f in gt.frames:
        g = gt.semantic[f]
        p = pred.semantic[f]
        keep = _valid(p, g)
        for gi, pi in zip(g[keep], p[keep]):
            gi, pi = int(gi), int(pi)
            if gi in index and pi in index:
                mat[index[gi], index[pi]] += 1
    return mat


def s_cls(
    pred: SequenceLabels, gt: SequenceLabels, class_map: ClassMap
) -> tuple[float, dict[int, float], float, float]:
    """Instance-agnostic mIoU; returns (miou, per-class IoU, stuff IoU, thing IoU).

    Classes absent from both prediction and ground truth are left out of every
    average.
    """
    gt.check_coverage(pred)
    class_ids = list(class_map.all_ids)
    mat = confusion_matrix(pred, gt, class_ids)
    tp = np.diag(mat).astype(np.float64)
    fn = mat.sum(axis=1) - tp
    fp = mat.sum(axis=0) - tp
    union = tp + fp + fn
    per_class: dict[int, float] = {}
    for i, cid in enumerate(class_ids):
        if union[i] > 0:
            per_class[cid] = float(tp[i] / union[i])
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    stuff = [per_class[c] for c in class_map.stuff_ids if c in per_class]
    things = [per_class[c] for c in class_map.thing_ids if c in per_class]
    iou_st = float(np.mean(stuff)) if stuff else 0.0
    iou_th = float(np.mean(things)) if things else 0.0
    return miou, per_class, iou_st, iou_th


def _tubes(labels: SequenceLabels, select: dict[int, np.ndarray]) -> dict[int, int]:
    """Tube sizes: instance id -> point count over selected points per frame."""
    sizes: dict[int, int] = {}
    for f in labels.frames:
        inst = labels.instance[f][select[f]]
        for i, c in zip(*np.unique(inst[inst > 0], return_counts=True)):
            sizes[int(i)] = sizes.get(int(i), 0) + int(c)
    return sizes


def s_assoc(pred: SequenceLabels, gt: SequenceLabels, class_map: ClassMap) -> float:
    """Class-agnostic association quality over whole-sequence tubes.

    For every ground-truth thing tube t:  (1/|t|) * sum over predicted tubes p
    with |p n t| > 0 of |p n t| * IoU(p, t); the final score averages over
    tubes uniformly. Predicted tube sizes count all points carrying that
    predicted instance id. 1.0 (with a warning) when there are no gt tubes.
    """
    gt.check_coverage(pred)
    thing_set = set(class_map.thing_ids)
    gt_select = {}
    pred_select = {}
    for f in gt.frames:
        g_sem = gt.semantic[f]
        valid = g_sem != IGNORE_LABEL
        gt_select[f] = valid & np.isin(g_sem, list(thing_set)) & (gt.instance[f] > 0)
        pred_select[f] = valid & (pred.instance[f] > 0)
    gt_sizes = _tubes(gt, gt_select)
    pred_sizes = _tubes(pred, pred_select)

    overlap: dict[tuple[int, int], int] = {}
    for f in gt.frames:
        both = gt_select[f] & pred_select[f]
        g = gt.instance[f][both]
        p = pred.instance[f][both]
        for gi, pi in zip(g, p):
            key = (int(gi), int(pi))
            overlap[key] = overlap.get(key, 0) + 1

    if not gt_sizes:
        warnings.warn("no ground-truth thing tubes; association score defined as 1.0")
        return 1.0
    total = 0.0
    for t, t_size in gt_sizes.items():
        inner = 0.0
        for (gi, pi), ov in overlap.items():
            if gi != t:
                continue
            union = t_size + pred_sizes[pi] - ov
            inner += ov * (ov / union)
        total += inner / t_size
    return total / len(gt_sizes)


def lstq(s_cls_value: float, s_assoc_value: float) -> float:
    """Geometric mean of the classification and association scores."""
    for name, v in (("s_cls", s_cls_value), ("s_assoc", s_assoc_value)):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"{name} must lie in [0, 1], got {v}")
    return float(np.sqrt(s_cls_value * s_assoc_value))


# ---------------------------------------------------------------------------
# panoptic quality (single scans)


def _scan_segments(
    sem: np.ndarray, inst: np.ndarray, class_map: ClassMap, valid: np.ndarray
) -> dict[tuple[int, int], np.ndarray]:
    """Segments of one scan: thing instances plus one segment per stuff class.

    Keys are (class id, instance id or 0); values are point index arrays.
    """
    segments: dict[tuple[int, int], np.ndarray] = {}
    for cid in class_map.all_ids:
        sel = (sem == cid) & valid
        if not sel.any():
            continue
        if class_map.is_thing(cid):
            sub = inst[sel]
            idx = np.flatnonzero(sel)
            for i in np.unique(sub):
                if i <= 0:
                    continue
                segments[(cid, int(i))] = idx[sub == i]
        else:
            segments[(cid, 0)] = np.flatnonzero(sel)
    return segments


def pq_single_scan(
    pred_sem: np.ndarray,
    pred_inst: np.ndarray,
    gt_sem: np.ndarray,
    gt_inst: np.ndarray,
    class_map: ClassMap,
) -> dict[int, tuple[float, int, int, int]]:
    """Per-class panoptic statistics of one scan.

    Returns class id -> (sum of matched IoU, TP, FP, FN). Matches require the
    same class and IoU strictly greater than 0.5, which makes them unique.
    """
    valid = gt_sem != IGNORE_LABEL
    gt_segments = _scan_segments(gt_sem, gt_inst, class_map, valid)
    pred_segments = _scan_segments(pred_sem, pred_inst, class_map, valid)
    stats: dict[int, tuple[float, int, int, int]] = {}
    for cid in class_map.all_ids:
        g_keys = [k for k in gt_segments if k[0] == cid]
        p_keys = [k for k in pred_segments if k[0] == cid]
        iou_sum, tp = 0.0, 0
        matched_p = set()
        for gk in g_keys:
            g_set = gt_segments[gk]
            for pk in p_keys:
                p_set = pred_segments[pk]
                inter = np.intersect1d(g_set, p_set, assume_unique=True).size
                if inter == 0:
                    continue
                iou = inter / (g_set.size + p_set.size - inter)
                if iou > 0.5:
                    iou_sum += iou
                    tp += 1
                    matched_p.add(pk)
                    break  # > 0.5 matches are unique per gt segment
        fp = len(p_keys) - len(matched_p)
        fn = len(g_keys) - tp
        if g_keys or p_keys:
            stats[cid] = (iou_sum, tp, fp, fn)
    return stats


def _pq_from_stats(stats: dict[int, tuple[float, int, int, int]]) -> tuple[float, float, float]:
    """Class-averaged (PQ, SQ, RQ) over the classes present in the stats."""
    pqs, sqs, rqs = [], [], []
    for iou_sum, tp, fp, fn in stats.values():
        sq = iou_sum / tp if tp else 0.0
        denom = tp + 0.5 * fp + 0.5 * fn
        rq = tp / denom if denom else 0.0
        pqs.append(sq * rq)
        sqs.append(sq)
        rqs.append(rq)
    if not pqs:
        return 0.0, 0.0, 0.0
    return float(np.mean(pqs)), float(np.mean(sqs)), float(np.mean(rqs))


def pq_sequence(
    pred: SequenceLabels, gt: SequenceLabels, class_map: ClassMap
) -> tuple[float, float, float, dict[int, tuple[float, float, float]]]:
    """Scan-wise panoptic quality, averaged over scans.

    Per-class values aggregate the per-scan statistics over the whole
    sequence; the scalar PQ/SQ/RQ average the per-scan class means.
    """
    gt.check_coverage(pred)
    per_scan = []
    accum: dict[int, list[float]] = {}
    for f in gt.frames:
        stats = pq_single_scan(
            pred.semantic[f], pred.instance[f], gt.semantic[f], gt.instance[f], class_map
        )
        per_scan.append(_pq_from_stats(stats))
        for cid, (iou_sum, tp, fp, fn) in stats.items():
            acc = accum.setdefault(cid, [0.0, 0, 0, 0])
            acc[0] += iou_sum
            acc[1] += tp
            acc[2] += fp
            acc[3] += fn
    per_class: dict[int, tuple[float, float, float]] = {}
    for cid, (iou_sum, tp, fp, fn) in accum.items():
        sq = iou_sum / tp if tp else 0.0
        denom = tp + 0.5 * fp + 0.5 * fn
        rq = tp / denom if denom else 0.0
        per_class[cid] = (sq * rq, sq, rq)
    if per_scan:
        pq = float(np.mean([x[0] for x in per_scan]))
        sq = float(np.mean([x[1] for x in per_scan]))
        rq = float(np.mean([x[2] for x in per_scan]))
    else:
        pq = sq = rq = 0.0
    return pq, sq, rq, per_class


def evaluate(pred: SequenceLabels, gt: SequenceLabels, class_map: ClassMap) -> MetricReport:
    """Full metric report for one sequence."""
    miou, per_class, iou_st, iou_th = s_cls(pred, gt, class_map)
    assoc = s_assoc(pred, gt, class_map)
    pq, sq, rq, per_class_pq = pq_sequence(pred, gt, class_map)
    return MetricReport(
        s_cls=miou,
        s_assoc=assoc,
        lstq=lstq(miou, assoc),
        per_class_iou=per_class,
        iou_stuff=iou_st,
        iou_things=iou_th,
        pq=pq,
        sq=sq,
        rq=rq,
        per_class_pq=per_class_pq,
    )


def report_csv(reports: dict[str, MetricReport]) -> str:
    """CSV with one row per named sequence plus a mean row."""
    lines = ["name," + ",".join(_EXPECTED_COLUMNS)]
    rows = []
    for name, rep in reports.items():
        row = rep.as_row()
        rows.append(row)
        lines.append(name + "," + ",".join("%.12g" % row[c] for c in _EXPECTED_COLUMNS))
    if rows:
        mean = {c: float(np.mean([r[c] for r in rows])) for c in _EXPECTED_COLUMNS}
        lines.append("mean," + ",".join("%.12g" % mean[c] for c in _EXPECTED_COLUMNS))
    return "\n".join(lines) + "\n"
