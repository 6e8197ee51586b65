"""AP/AR scoring of detections: UAVDT single-threshold and COCO-style sweeps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, Detection, corners_array, iou_matrix

logger = logging.getLogger(__name__)

COCO_IOUS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
MAX_DETS = (1, 10, 100, 500)


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = COCO_IOUS
    interpolation: str = "101_point"
    max_dets: Tuple[int, ...] = MAX_DETS
    score_floor: float = 0.05
    num_classes: Optional[int] = None
    ignore_overlap: float = 0.5

    def __post_init__(self):
        if self.interpolation not in ("all_point", "101_point"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        object.__setattr__(self, "max_dets", tuple(sorted(int(m) for m in self.max_dets)))

    @classmethod
    def uavdt(cls, **kw) -> "EvalConfig":
        return cls(iou_thresholds=(0.7,), interpolation="all_point", **kw)

    @classmethod
    def coco(cls, **kw) -> "EvalConfig":
        return cls(**kw)

    @classmethod
    def for_protocol(cls, protocol: str, **kw) -> "EvalConfig":
        if protocol == "uavdt":
            return cls.uavdt(**kw)
        if protocol == "coco":
            return cls.coco(**kw)
        raise ValueError(f"unknown protocol {protocol!r}")


@dataclass
class EvalReport:
    """Aggregate and per-class metrics.

    ``ap[t]`` averages per-class AP over classes that have ground truth.
    Counts are taken over detections scoring at least ``score_floor``.
    """

    config: EvalConfig
    ap: Dict[float, float] = field(default_factory=dict)
    ap_per_class: Dict[Tuple[int, float], float] = field(default_factory=dict)
    ar: Dict[int, float] = field(default_factory=dict)
    ar_per_class: Dict[Tuple[int, int], float] = field(default_factory=dict)
    tp: Dict[float, int] = field(default_factory=dict)
    fp: Dict[float, int] = field(default_factory=dict)
    fn: Dict[float, int] = field(default_factory=dict)
    counts_per_class: Dict[Tuple[int, float], Tuple[int, int, int]] = field(default_factory=dict)
    num_gt: Dict[int, int] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    @property
    def ap_mean(self) -> float:
        """Mean AP over all configured IoU thresholds."""
        return float(np.mean([self.ap[t] for t in self.config.iou_thresholds]))

    def to_text(self) -> str:
        cfg = self.config
        lines = [f"interpolation,{cfg.interpolation}", f"score_floor,{cfg.score_floor:.2f}"]
        if len(cfg.iou_thresholds) > 1:
            lo, hi = cfg.iou_thresholds[0], cfg.iou_thresholds[-1]
            lines.append(f"AP@{lo:.2f}:{hi:.2f},{self.ap_mean:.6f}")
        for t in cfg.iou_thresholds:
            lines.append(f"AP@{t:.2f},{self.ap[t]:.6f}")
        for m in cfg.max_dets:
            lines.append(f"AR@{m},{self.ar[m]:.6f}")
        for t in cfg.iou_thresholds:
            lines.append(f"TP@{t:.2f},{self.tp[t]}")
            lines.append(f"FP@{t:.2f},{self.fp[t]}")
            lines.append(f"FN@{t:.2f},{self.fn[t]}")
        for c in sorted(self.num_gt):
            per = ",".join(f"{self.ap_per_class[(c, t)]:.6f}" for t in cfg.iou_thresholds)
            lines.append(f"class{c},gt={self.num_gt[c]},ap={per}")
        for f in self.flags:
            lines.append(f"flag,{f}")
        return "\n".join(lines) + "\n"


def match(dets: Sequence[Detection], gts: Sequence[BBox], iou_thresh: float,
          ignore_regions: Sequence[BBox] = (), ignore_overlap: float = 0.5):
    """Greedy matching for one image and one class.

    Returns ``(order, labels, n_unmatched)``: ``order`` are detection indices
    by descending score, ``labels`` is +1 for TP, 0 for FP and -1 for
    detections absorbed by an ignore region (neither TP nor FP).
    """
    scores = np.array([d.score for d in dets], dtype=float)
    order = np.argsort(-scores, kind="stable")
    det_c = corners_array([dets[k].box for k in order])
    gt_c = corners_array(gts)
    labels = _match_arrays(det_c, gt_c, iou_thresh)
    if len(ignore_regions) and len(det_c):
        fp = labels == 0
        absorbed = _inside_ignore(det_c, corners_array(ignore_regions), ignore_overlap)
        labels[fp & absorbed] = -1
    n_unmatched = len(gts) - int(np.count_nonzero(labels == 1))
    return order, labels, n_unmatched


def _match_arrays(det_c: np.ndarray, gt_c: np.ndarray, iou_thresh: float, ious=None) -> np.ndarray:
    labels = np.zeros(len(det_c), dtype=np.int64)
    if len(det_c) == 0 or len(gt_c) == 0:
        return labels
    ious = iou_matrix(det_c, gt_c) if ious is None else ious
    taken = np.zeros(len(gt_c), dtype=bool)
    for d in range(len(det_c)):
        row = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(row))  # first index wins ties
        if row[g] >= iou_thresh:
            taken[g] = True
            labels[d] = 1
    return labels


def _inside_ignore(det_c, ign_c, overlap):
    iw = np.minimum(det_c[:, None, 2], ign_c[None, :, 2]) - np.maximum(det_c[:, None, 0], ign_c[None, :, 0])
    ih = np.minimum(det_c[:, None, 3], ign_c[None, :, 3]) - np.maximum(det_c[:, None, 1], ign_c[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (det_c[:, 2] - det_c[:, 0]) * (det_c[:, 3] - det_c[:, 1])
    return (inter / area[:, None] >= overlap).any(axis=1)


def precision_recall(scores, labels, total_gt):
    """Precision and recall after each detection, ranked by descending score."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    keep = labels >= 0
    scores, labels = scores[keep], labels[keep]
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(labels[order] == 1)
    fp = np.cumsum(labels[order] == 0)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / total_gt if total_gt > 0 else np.zeros_like(precision, dtype=float)
    return precision, recall


def average_precision(scores, labels, total_gt: int, interpolation: str = "all_point") -> float:
    """Area under the precision-recall curve.

    ``labels`` are 1 (TP), 0 (FP) or -1 (ignored). ``all_point`` integrates
    the monotone precision envelope over every recall step; ``101_point``
    averages the envelope sampled at recall 0, 0.01, ..., 1.
    With no ground truth the AP is 0 and a warning is logged.
    """
    if total_gt <= 0:
        logger.warning("average precision requested with no ground truth; returning 0")
        return 0.0
    precision, recall = precision_recall(scores, labels, total_gt)
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all_point":
        # recall rises by exactly 1/total_gt at each TP; summing first avoids step round-off
        rises = np.diff(np.concatenate([[0.0], recall])) > 0
        return float(np.sum(envelope[rises]) / total_gt)
    if interpolation == "101_point":
        grid = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, grid, side="left")
        sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        return float(sampled.mean())
    raise ValueError(f"unknown interpolation {interpolation!r}")


def _split_by_class(items, key):
    out: Dict[int, list] = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def evaluate(dets_by_image: Mapping[Hashable, Sequence[Detection]],
             gts_by_image: Mapping[Hashable, Sequence[BBox]],
             config: EvalConfig = EvalConfig(),
             ignore_by_image: Optional[Mapping[Hashable, Sequence[BBox]]] = None) -> EvalReport:
    """Score detections against ground truth.

    Per-image, per-class detection caps are applied before matching: AP uses
    the largest cap in ``config.max_dets`` and AR is reported for every cap.
    ``ignore_by_image`` holds don't-care regions; detections lying mostly
    inside them are neither rewarded nor penalised.
    """
    ignore_by_image = ignore_by_image or {}
    images = sorted(set(dets_by_image) | set(gts_by_image), key=str)
    classes = set()
    for im in images:
        classes.update(b.class_id for b in gts_by_image.get(im, ()))
        classes.update(d.class_id for d in dets_by_image.get(im, ()))
    if config.num_classes is not None:
        bad = [c for c in classes if c >= config.num_classes]
        if bad:
            raise ValueError(f"unknown class ids {sorted(bad)} for {config.num_classes} classes")
        classes = set(range(config.num_classes))
    classes = sorted(classes)
    thresholds = config.iou_thresholds
    cap = max(config.max_dets)

    report = EvalReport(config=config)
    # per (class, threshold): list of (scores, labels, rank) across images
    pooled = {(c, t): ([], [], []) for c in classes for t in thresholds}
    for c in classes:
        report.num_gt[c] = 0
    for im in images:
        gts = _split_by_class(gts_by_image.get(im, ()), lambda b: b.class_id)
        dets = _split_by_class(dets_by_image.get(im, ()), lambda d: d.class_id)
        ign = corners_array(list(ignore_by_image.get(im, ())))
        for c in classes:
            g = gts.get(c, [])
            d = dets.get(c, [])
            report.num_gt[c] += len(g)
            if not d:
                continue
            scores = np.array([x.score for x in d])
            order = np.argsort(-scores, kind="stable")[:cap]
            det_c = corners_array([d[k].box for k in order])
            gt_c = corners_array(g)
            ious = iou_matrix(det_c, gt_c) if len(gt_c) else None
            absorbed = _inside_ignore(det_c, ign, config.ignore_overlap) if len(ign) else None
            for t in thresholds:
                labels = _match_arrays(det_c, gt_c, t, ious)
                if absorbed is not None:
                    labels[(labels == 0) & absorbed] = -1
                s, l, r = pooled[(c, t)]
                s.append(scores[order])
                l.append(labels)
                r.append(np.arange(len(order)))

    for t in thresholds:
        report.tp[t] = report.fp[t] = report.fn[t] = 0
    with_gt = [c for c in classes if report.num_gt[c] > 0]
    for c in classes:
        if report.num_gt[c] == 0:
            report.flags.append(f"class {c} has no ground truth; AP set to 0 and excluded from means")
        for t in thresholds:
            s, l, r = pooled[(c, t)]
            scores = np.concatenate(s) if s else np.zeros(0)
            labels = np.concatenate(l) if l else np.zeros(0, dtype=np.int64)
            ranks = np.concatenate(r) if r else np.zeros(0, dtype=np.int64)
            n_gt = report.num_gt[c]
            report.ap_per_class[(c, t)] = (average_precision(scores, labels, n_gt, config.interpolation)
                                           if n_gt else 0.0)
            floor = scores >= config.score_floor
            tp = int(np.count_nonzero(floor & (labels == 1)))
            fp = int(np.count_nonzero(floor & (labels == 0)))
            report.counts_per_class[(c, t)] = (tp, fp, n_gt - tp)
            report.tp[t] += tp
            report.fp[t] += fp
            report.fn[t] += n_gt - tp
            for m in config.max_dets:
                if n_gt:
                    hits = int(np.count_nonzero((labels == 1) & (ranks < m)))
                    report.ar_per_class.setdefault((c, m), []).append(hits / n_gt)
    for t in thresholds:
        vals = [report.ap_per_class[(c, t)] for c in with_gt]
        report.ap[t] = float(np.mean(vals)) if vals else 0.0
    for m in config.max_dets:
        per = []
        for c in with_gt:
            recalls = report.ar_per_class[(c, m)]
            report.ar_per_class[(c, m)] = float(np.mean(recalls))
            per.append(report.ar_per_class[(c, m)])
        report.ar[m] = float(np.mean(per)) if per else 0.0
    if not with_gt:
        report.flags.append("no ground truth at all")
    return report


def evaluate_groups(dets_by_image, gts_by_image, groups: Mapping[Hashable, Hashable],
                    config: EvalConfig = EvalConfig(), ignore_by_image=None) -> Dict[Hashable, EvalReport]:
    """Run :func:`evaluate` separately on each group of images (e.g. altitude bins)."""
    members: Dict[Hashable, list] = {}
    for im, key in groups.items():
        members.setdefault(key, []).append(im)
    out = {}
    for key in sorted(members, key=str):
        ims = members[key]
        out[key] = evaluate({i: dets_by_image.get(i, []) for i in ims},
                            {i: gts_by_image.get(i, []) for i in ims}, config,
                            {i: (ignore_by_image or {}).get(i, []) for i in ims})
    return out
