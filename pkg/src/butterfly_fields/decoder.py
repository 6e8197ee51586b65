"""Voting decoder: field grid -> scored detections.

Pipeline: collect votes from confident cells, splat one Gaussian per vote
into a per-class confidence map at pixel resolution, pick local maxima,
refine their location from the votes that landed in the peak pixel, take a
confidence-weighted size consensus and finish with Gaussian soft-NMS.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._kernels import local_maxima, splat_gaussians
from ._validation import check_grid
from .core import BBox, DecoderConfig, Detection, FieldGrid, corners_array, iou_matrix

logger = logging.getLogger(__name__)

# membership slack for "target inside pixel", absorbs cell_center + v round-off
_PIXEL_SLACK = 1e-6


class Vote(NamedTuple):
    class_id: int
    cell: Tuple[int, int]
    tx: float
    ty: float
    p: float
    w_px: float
    h_px: float
    sx: float
    sy: float
    chi: float


@dataclass(frozen=True, eq=False)
class Votes:
    """Columnar set of votes; one entry per confident cell."""

    class_id: np.ndarray
    i: np.ndarray
    j: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    p: np.ndarray
    w_px: np.ndarray
    h_px: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    chi: np.ndarray
    n_nonfinite: int = 0

    @classmethod
    def empty(cls) -> "Votes":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi, zi, z, z, z, z, z, z, z, z)

    @classmethod
    def from_list(cls, votes: Sequence[Vote]) -> "Votes":
        if not votes:
            return cls.empty()
        cols = list(zip(*votes))
        cells = np.array(cols[1], dtype=np.int64).reshape(-1, 2)
        return cls(np.array(cols[0], dtype=np.int64), cells[:, 0], cells[:, 1],
                   *(np.array(c, dtype=float) for c in cols[2:]))

    def __len__(self) -> int:
        return len(self.p)

    def __iter__(self) -> Iterator[Vote]:
        for n in range(len(self)):
            yield self[n]

    def __getitem__(self, n) -> Vote:
        return Vote(int(self.class_id[n]), (int(self.i[n]), int(self.j[n])),
                    float(self.tx[n]), float(self.ty[n]), float(self.p[n]),
                    float(self.w_px[n]), float(self.h_px[n]),
                    float(self.sx[n]), float(self.sy[n]), float(self.chi[n]))

    def subset(self, mask) -> "Votes":
        return Votes(*(getattr(self, f.name)[mask] for f in fields(self) if f.name != "n_nonfinite"),
                     n_nonfinite=self.n_nonfinite)

    def for_class(self, c: int) -> "Votes":
        return self.subset(self.class_id == c)


class Peak(NamedTuple):
    class_id: int
    px: int
    py: int
    score: float


def sigma(w_px, h_px, rho, sigma_min=2.0):
    """Gaussian spread per axis: the tolerated center error, relative to size."""
    return np.maximum(sigma_min, np.divide(w_px, rho)), np.maximum(sigma_min, np.divide(h_px, rho))


def chi(mode, w_px, h_px, stride):
    """Vote normaliser: a fixed count, or the predicted box area in cells (>= 1)."""
    if isinstance(mode, str):
        if mode != "box_area":
            raise ValueError(f"unknown chi mode {mode!r}")
        return np.maximum(np.multiply(np.divide(w_px, stride), np.divide(h_px, stride)), 1.0)
    return np.broadcast_to(np.float64(mode), np.broadcast(w_px, h_px).shape)[()]


def collect_votes(grid: FieldGrid, cfg: DecoderConfig = DecoderConfig(), threshold=None) -> Votes:
    """One vote per cell with ``p > threshold`` (default ``cfg.accum_threshold``).

    Cells carrying non-finite values are skipped and counted in
    ``Votes.n_nonfinite``. Targets are clamped to the padded image.
    """
    grid = check_grid(grid)
    thr = cfg.accum_threshold if threshold is None else threshold
    S = grid.stride
    with np.errstate(invalid="ignore"):
        active = grid.p > thr
    finite = (np.isfinite(grid.p) & np.isfinite(grid.vx) & np.isfinite(grid.vy)
              & np.isfinite(grid.w_log) & np.isfinite(grid.h_log))
    n_bad = int(np.count_nonzero(~finite & (active | ~np.isfinite(grid.p))))
    if n_bad:
        logger.debug("skipped %d cells with non-finite field values", n_bad)
    c, i, j = np.nonzero(active & finite)
    if len(c) == 0:
        return Votes(*_empty_columns(), n_nonfinite=n_bad)
    W, H = grid.image_size
    tx = np.clip((j + 0.5) * S + grid.vx[c, i, j], 0.0, W)
    ty = np.clip((i + 0.5) * S + grid.vy[c, i, j], 0.0, H)
    with np.errstate(over="ignore"):
        w_px = np.exp(grid.w_log[c, i, j]) * S
        h_px = np.exp(grid.h_log[c, i, j]) * S
    ok = np.isfinite(w_px) & np.isfinite(h_px) & (w_px > 0) & (h_px > 0)
    if not ok.all():
        n_bad += int(np.count_nonzero(~ok))
        c, i, j, tx, ty, w_px, h_px = (a[ok] for a in (c, i, j, tx, ty, w_px, h_px))
    rho = cfg.rho_array(grid.num_classes)[c]
    sx, sy = sigma(w_px, h_px, rho, cfg.sigma_min)
    norm = np.broadcast_to(chi(cfg.chi, w_px, h_px, S), w_px.shape).astype(float)
    return Votes(c.astype(np.int64), i.astype(np.int64), j.astype(np.int64), tx, ty,
                 grid.p[c, i, j].copy(), w_px, h_px, sx, sy, norm, n_nonfinite=n_bad)


def _empty_columns():
    e = Votes.empty()
    return [getattr(e, f.name) for f in fields(e) if f.name != "n_nonfinite"]


def truncation_radius(amp, s, tail_tolerance):
    """Half-width beyond which a Gaussian of peak ``amp`` stays below the tolerance."""
    amp = np.asarray(amp, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.sqrt(2.0 * np.log(np.maximum(amp, 1e-300) / tail_tolerance))
    return np.where(amp > tail_tolerance, k * s, -1.0)


def accumulate(votes: Votes, cfg: DecoderConfig, image_w: int, image_h: int,
               num_classes: Optional[int] = None) -> np.ndarray:
    """High-resolution confidence map of shape ``(C, image_h, image_w)``.

    ``f(x, y) = sum p/chi * exp(-((x-tx)/sx)^2/2 - ((y-ty)/sy)^2/2)`` evaluated
    at pixel centers. Each Gaussian is dropped where its value is below
    ``cfg.tail_tolerance``.
    """
    if num_classes is None:
        num_classes = int(votes.class_id.max()) + 1 if len(votes) else 1
    out = np.zeros((num_classes, int(image_h), int(image_w)))
    if len(votes) == 0:
        return out
    amp = votes.p / votes.chi
    rx = truncation_radius(amp, votes.sx, cfg.tail_tolerance)
    ry = truncation_radius(amp, votes.sy, cfg.tail_tolerance)
    splat_gaussians(out, votes.class_id, votes.tx, votes.ty, amp, votes.sx, votes.sy, rx, ry)
    return out


def extract_peaks(hmap: np.ndarray, cfg: DecoderConfig = DecoderConfig()) -> List[Peak]:
    """Strict local maxima over a ``peak_window`` square with value >= select_threshold.

    Plateaus resolve to the pixel with the smallest ``(y, x)``.
    """
    hmap = np.asarray(hmap, dtype=float)
    if hmap.ndim == 2:
        hmap = hmap[None]
    r = cfg.peak_window // 2
    peaks: List[Peak] = []
    for c in range(hmap.shape[0]):
        plane = np.ascontiguousarray(hmap[c])
        ys, xs = local_maxima(plane, float(cfg.select_threshold), r)
        for y, x in zip(ys.tolist(), xs.tolist()):
            peaks.append(Peak(c, x, y, float(min(max(plane[y, x], 0.0), 1.0))))
    return peaks


def subpixel_refine(peak, votes: Votes, cfg: DecoderConfig = DecoderConfig()) -> Tuple[float, float]:
    """Exact center from the votes whose targets fall inside the peak pixel.

    ``mean`` mode returns the p-weighted mean target, ``best`` the target of
    the most confident vote. Falls back to the pixel center when disabled or
    when no vote lands inside the pixel.
    """
    px, py = (peak.px, peak.py) if isinstance(peak, Peak) else peak
    center = (px + 0.5, py + 0.5)
    if not cfg.subpixel or len(votes) == 0:
        return center
    inside = ((votes.tx >= px - _PIXEL_SLACK) & (votes.tx <= px + 1 + _PIXEL_SLACK)
              & (votes.ty >= py - _PIXEL_SLACK) & (votes.ty <= py + 1 + _PIXEL_SLACK))
    if not inside.any():
        return center
    p = votes.p[inside]
    if cfg.subpixel_mode == "best":
        n = int(np.argmax(p))
        return float(votes.tx[inside][n]), float(votes.ty[inside][n])
    wsum = p.sum()
    return float(p @ votes.tx[inside] / wsum), float(p @ votes.ty[inside] / wsum)


def aggregate_size(center, votes: Votes) -> Optional[Tuple[float, float]]:
    """p-weighted mean size of the votes whose target lies within their own
    ``max(sx, sy)`` of ``center``; ``None`` when no vote qualifies."""
    if len(votes) == 0:
        return None
    x, y = center
    near = np.hypot(votes.tx - x, votes.ty - y) <= np.maximum(votes.sx, votes.sy)
    if not near.any():
        return None
    p = votes.p[near]
    wsum = p.sum()
    if not wsum > 0:
        return None
    return float(p @ votes.w_px[near] / wsum), float(p @ votes.h_px[near] / wsum)


def soft_nms(dets: Sequence[Detection], softnms_sigma: float = 0.5,
             softnms_min_score: float = 0.001) -> List[Detection]:
    """Gaussian soft-NMS: ``score *= exp(-iou^2 / sigma)`` against each kept box.

    Boxes falling below ``softnms_min_score`` are dropped. The result is
    ordered by final score; equal scores keep input order.
    """
    n = len(dets)
    if n == 0:
        return []
    boxes = corners_array([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=float)
    order, kept_scores = _soft_nms_arrays(boxes, scores, softnms_sigma, softnms_min_score)
    return [Detection(dets[k].box, float(s)) for k, s in zip(order, kept_scores)]


def _soft_nms_arrays(boxes, scores, sigma_, min_score):
    scores = scores.copy()
    alive = np.flatnonzero(scores >= min_score)
    kept, kept_scores = [], []
    while len(alive):
        m = int(np.argmax(scores[alive]))  # first max keeps input order on ties
        top = alive[m]
        kept.append(top)
        kept_scores.append(scores[top])
        alive = np.delete(alive, m)
        if not len(alive):
            break
        ov = iou_matrix(boxes[top:top + 1], boxes[alive])[0]
        scores[alive] *= np.exp(-(ov * ov) / sigma_)
        alive = alive[scores[alive] >= min_score]
    kept = np.array(kept, dtype=np.int64)
    kept_scores = np.array(kept_scores)
    # stable sort by final score
    idx = np.argsort(-kept_scores, kind="stable")
    return kept[idx], kept_scores[idx]


def clamp_box(box: BBox, image_w: float, image_h: float) -> Optional[BBox]:
    x0, y0 = box.cx - box.w / 2.0, box.cy - box.h / 2.0
    x1, y1 = box.cx + box.w / 2.0, box.cy + box.h / 2.0
    x0, x1 = max(x0, 0.0), min(x1, float(image_w))
    y0, y1 = max(y0, 0.0), min(y1, float(image_h))
    if x1 <= x0 or y1 <= y0:
        return None
    if (x0, y0, x1, y1) == (box.cx - box.w / 2.0, box.cy - box.h / 2.0,
                            box.cx + box.w / 2.0, box.cy + box.h / 2.0):
        return box
    return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, box.class_id)


def _finish(per_class: List[List[Detection]], cfg: DecoderConfig, image_w, image_h) -> List[Detection]:
    out: List[Detection] = []
    for dets in per_class:
        for d in soft_nms(dets, cfg.softnms_sigma, cfg.softnms_min_score):
            box = clamp_box(d.box, image_w, image_h)
            if box is not None:
                out.append(Detection(box, d.score))
    order = sorted(range(len(out)), key=lambda k: -out[k].score)
    return [out[k] for k in order]


def _image_bounds(grid: FieldGrid, image_size):
    if image_size is None:
        return grid.image_size
    return image_size


def decode(grid: FieldGrid, cfg: DecoderConfig = DecoderConfig(),
           image_size: Optional[Tuple[int, int]] = None,
           return_map: bool = False):
    """Decode a field grid into detections with the voting mechanism.

    ``image_size`` (width, height) clamps output boxes to the unpadded image;
    by default the padded grid extent is used. With ``return_map`` the
    accumulated confidence map is returned as well.
    """
    grid = check_grid(grid)
    W, H = grid.image_size
    votes = collect_votes(grid, cfg)
    hmap = accumulate(votes, cfg, W, H, grid.num_classes)
    peaks = extract_peaks(hmap, cfg)
    per_class: List[List[Detection]] = [[] for _ in range(grid.num_classes)]
    by_class = {}
    for pk in peaks:
        cv = by_class.get(pk.class_id)
        if cv is None:
            cv = by_class[pk.class_id] = votes.for_class(pk.class_id)
        # restrict to votes around this peak before the exact tests
        local = cv.subset(_window_mask(cv, pk))
        center = subpixel_refine(pk, local, cfg)
        size = aggregate_size(center, local)
        if size is None:
            continue
        per_class[pk.class_id].append(Detection(BBox(center[0], center[1], size[0], size[1], pk.class_id), pk.score))
    dets = _finish(per_class, cfg, *_image_bounds(grid, image_size))
    return (dets, hmap) if return_map else dets


def _window_mask(votes: Votes, pk: Peak):
    # any vote that can pass the pixel test or the size radius test
    reach = np.maximum(votes.sx, votes.sy) + 2.0
    return (np.abs(votes.tx - (pk.px + 0.5)) <= reach) & (np.abs(votes.ty - (pk.py + 0.5)) <= reach)


def decode_no_voting(grid: FieldGrid, cfg: DecoderConfig = DecoderConfig(),
                     image_size: Optional[Tuple[int, int]] = None) -> List[Detection]:
    """Ablation baseline: every cell above ``select_threshold`` emits its own box."""
    grid = check_grid(grid)
    votes = collect_votes(grid, cfg, threshold=cfg.select_threshold)
    per_class: List[List[Detection]] = [[] for _ in range(grid.num_classes)]
    for c, tx, ty, w, h, p in zip(votes.class_id, votes.tx, votes.ty, votes.w_px, votes.h_px, votes.p):
        per_class[int(c)].append(Detection(BBox(float(tx), float(ty), float(w), float(h), int(c)),
                                           float(min(max(p, 0.0), 1.0))))
    return _finish(per_class, cfg, *_image_bounds(grid, image_size))


class ButterflyDecoder(BaseEstimator):
    """Estimator wrapper: ``predict`` maps field grids to detection lists.

    All constructor arguments mirror :class:`DecoderConfig`; ``voting=False``
    switches to the per-cell baseline decoder.
    """

    def __init__(self, rho=10.0, accum_threshold=0.1, select_threshold=0.05, sigma_min=2.0,
                 chi=16.0, peak_window=3, subpixel=True, subpixel_mode="mean",
                 softnms_sigma=0.5, softnms_min_score=0.001, tail_tolerance=1e-10,
                 voting=True, image_size=None):
        self.rho = rho
        self.accum_threshold = accum_threshold
        self.select_threshold = select_threshold
        self.sigma_min = sigma_min
        self.chi = chi
        self.peak_window = peak_window
        self.subpixel = subpixel
        self.subpixel_mode = subpixel_mode
        self.softnms_sigma = softnms_sigma
        self.softnms_min_score = softnms_min_score
        self.tail_tolerance = tail_tolerance
        self.voting = voting
        self.image_size = image_size

    def _make_config(self) -> DecoderConfig:
        names = [f.name for f in fields(DecoderConfig)]
        return DecoderConfig(**{n: getattr(self, n) for n in names})

    def fit(self, X=None, y=None):
        self.config_ = self._make_config()
        return self

    def predict(self, X) -> List[List[Detection]]:
        check_is_fitted(self, "config_")
        if isinstance(X, FieldGrid):
            X = [X]
        fn = decode if self.voting else decode_no_voting
        return [fn(g, self.config_, image_size=self.image_size) for g in X]

    def score(self, X, y) -> float:
        """AP at IoU 0.7 (all-point) of the predictions against box lists ``y``."""
        from .evaluation import EvalConfig, evaluate
        preds = self.predict(X)
        report = evaluate(dict(enumerate(preds)), dict(enumerate(y)), EvalConfig.uavdt())
        return report.ap[0.7]
