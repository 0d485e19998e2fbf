"""Frame-wise and event-wise scores.  All scores are percentages in [0, 100]."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EventSegment:
    start: int
    end: int
    label: int

    def __post_init__(self):
        if self.start > self.end:
            raise MetricError(f"segment start {self.start} > end {self.end}")
        if self.label == 0:
            raise MetricError("background cannot form an event segment")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def _check_probs(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise MetricError(f"probs {probs.shape} and labels {labels.shape} are incompatible")
    if probs.shape[0] < 1:
        raise MetricError("need at least one frame")
    return probs, labels


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean precision@k over the ranks of the positives (ties: earlier frame first)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    ranks = np.flatnonzero(hits) + 1
    if ranks.size == 0:
        raise MetricError("no positive frames")
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def per_class_ap(probs, labels) -> dict[int, float]:
    probs, labels = _check_probs(probs, labels)
    present = [c for c in range(1, probs.shape[1]) if np.any(labels == c)]
    return {c: 100.0 * average_precision(probs[:, c], labels == c) for c in present}


def per_frame_map(probs, labels) -> float:
    """Mean per-class AP over non-background classes that occur in ``labels``."""
    aps = per_class_ap(probs, labels)
    if not aps:
        raise MetricError("no non-background class occurs in the labels")
    return float(np.mean(list(aps.values())))


def per_class_topk_recall(probs, labels, k: int = 5) -> dict[int, float]:
    probs, labels = _check_probs(probs, labels)
    if probs.shape[1] < k:
        raise MetricError(f"top-{k} recall needs at least {k} classes, got {probs.shape[1]}")
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hit = np.any(order == labels[:, None], axis=1)
    present = [c for c in range(1, probs.shape[1]) if np.any(labels == c)]
    return {c: 100.0 * float(hit[labels == c].mean()) for c in present}


def topk_recall(probs, labels, k: int = 5) -> float:
    rec = per_class_topk_recall(probs, labels, k)
    if not rec:
        raise MetricError("no non-background class occurs in the labels")
    return float(np.mean(list(rec.values())))


def top5_recall(probs, labels) -> float:
    return topk_recall(probs, labels, 5)


def extract_segments(labels) -> list[EventSegment]:
    """Maximal runs of one non-background label, in temporal order."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts - 1, [labels.size - 1]])
    return [EventSegment(int(s), int(e), int(labels[s]))
            for s, e in zip(starts, ends) if labels[s] != 0]


def _f1(tp: int, n_pred: int, n_gt: int) -> float:
    if n_pred == 0 and n_gt == 0:
        return 100.0
    return 100.0 * 2.0 * tp / (n_pred + n_gt)


def point_matches(pred: list[EventSegment], gt: list[EventSegment], radius: float) -> int:
    """Greedy start-order matching; each prediction takes the earliest free GT in range.

    With one shared radius this is an interval-scheduling greedy and
    attains the maximum matching.
    """
    used = [False] * len(gt)
    tp = 0
    for p in sorted(pred, key=lambda s: (s.start, s.label)):
        for j, g in sorted(enumerate(gt), key=lambda jg: jg[1].start):
            if not used[j] and g.label == p.label and abs(p.start - g.start) <= radius:
                used[j] = True
                tp += 1
                break
    return tp


def point_f1(pred: list[EventSegment], gt: list[EventSegment], threshold_s: float,
             fps: float) -> float:
    if threshold_s <= 0:
        raise MetricError("threshold_s must be positive")
    return _f1(point_matches(pred, gt, threshold_s * fps), len(pred), len(gt))


def segment_iou(a: EventSegment, b: EventSegment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def segment_matches(pred: list[EventSegment], gt: list[EventSegment], iou_threshold: float) -> int:
    """Size of a maximum one-to-one matching over same-label pairs with IoU >= threshold.

    Greedy matching by descending IoU reaches the same count on almost every
    instance but can fall one short when a high-IoU pair blocks two
    lower-IoU ones.
    """
    if not pred or not gt:
        return 0
    ok = np.array([[p.label == g.label and segment_iou(p, g) >= iou_threshold for g in gt]
                   for p in pred])
    if not ok.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(ok.astype(np.int8)), perm_type="column")
    return int(np.sum(match >= 0))


def segment_f1(pred: list[EventSegment], gt: list[EventSegment], iou_threshold: float) -> float:
    if not 0 < iou_threshold <= 1:
        raise MetricError("iou_threshold must lie in (0, 1]")
    return _f1(segment_matches(pred, gt, iou_threshold), len(pred), len(gt))


def levenshtein(a, b) -> int:
    a, b = np.asarray(a), np.asarray(b)
    row = np.arange(b.size + 1)
    for i in range(1, a.size + 1):
        sub = row[:-1] + (b != a[i - 1])
        new = np.empty_like(row)
        new[0] = i
        for j in range(1, b.size + 1):
            new[j] = min(row[j] + 1, new[j - 1] + 1, sub[j - 1])
        row = new
    return int(row[-1])


def edit_score(pred: list[EventSegment], gt: list[EventSegment]) -> float:
    """Levenshtein similarity of segment label sequences, normalised by the longer one."""
    n = max(len(pred), len(gt))
    if n == 0:
        return 100.0
    d = levenshtein([s.label for s in pred], [s.label for s in gt])
    return 100.0 * (1.0 - d / n)


@dataclass
class MetricReport:
    per_frame_map: float
    mean_top5_recall: float | None
    pf1: float
    sf1: float
    edit: float
    pf1_threshold_s: float = 1.0
    sf1_iou: float = 0.25
    per_class_ap: dict[int, float] = field(default_factory=dict)
    per_class_top5: dict[int, float] = field(default_factory=dict)
    n_frames: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["per_class_top5"] = {str(k): v for k, v in self.per_class_top5.items()}
        return d


def evaluate(probs, labels, fps: float, pf1_threshold_s: float = 1.0,
             sf1_iou: float = 0.25) -> MetricReport:
    """Frame metrics from ``probs``; event metrics from its argmax segmentation."""
    probs, labels = _check_probs(probs, labels)
    aps = per_class_ap(probs, labels)
    if not aps:
        raise MetricError("no non-background class occurs in the labels")
    top5 = per_class_topk_recall(probs, labels) if probs.shape[1] >= 5 else {}
    pred = extract_segments(probs.argmax(axis=1))
    gt = extract_segments(labels)
    return MetricReport(
        per_frame_map=float(np.mean(list(aps.values()))),
        mean_top5_recall=float(np.mean(list(top5.values()))) if top5 else None,
        pf1=point_f1(pred, gt, pf1_threshold_s, fps),
        sf1=segment_f1(pred, gt, sf1_iou),
        edit=edit_score(pred, gt),
        pf1_threshold_s=pf1_threshold_s,
        sf1_iou=sf1_iou,
        per_class_ap=aps,
        per_class_top5=top5,
        n_frames=int(labels.size),
    )
