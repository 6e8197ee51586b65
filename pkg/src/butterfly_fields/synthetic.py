"""Random annotated scenes and field perturbations for desk-scale experiments.

Scenes stand in for aerial datasets; perturbations stand in for an imperfect
network by corrupting encoder-perfect fields.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, DecoderConfig, FieldGrid, iou_matrix
from .decoder import decode, decode_no_voting
from .encoder import EncodeMode, encode
from .evaluation import EvalConfig, evaluate

RETRIES_PER_OBJECT = 1000


class InfeasibleSceneError(RuntimeError):
    """The requested object density cannot satisfy the overlap constraint."""


@dataclass(frozen=True)
class SceneSpec:
    """Scene sampling parameters.

    ``size_bounds`` holds one ``((w_min, w_max), (h_min, h_max))`` pair per
    class; sizes are log-uniform within the bounds.
    """

    seed: int = 0
    image_w: int = 512
    image_h: int = 512
    count_range: Tuple[int, int] = (10, 50)
    size_bounds: Tuple = (((8.0, 64.0), (8.0, 64.0)),)
    max_iou: float = 0.0
    class_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid count range {self.count_range}")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ValueError("image dimensions must be positive")
        for (wlo, whi), (hlo, hhi) in self.size_bounds:
            if not (0 < wlo <= whi and 0 < hlo <= hhi):
                raise ValueError(f"invalid size bounds {self.size_bounds}")
            if whi > self.image_w or hhi > self.image_h:
                raise ValueError("object sizes exceed the image")
        if not 0.0 <= self.max_iou <= 1.0:
            raise ValueError("max_iou must lie in [0, 1]")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if len(w) != len(self.size_bounds) or (w < 0).any() or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("class_weights must be one non-negative weight per class summing to 1")

    @property
    def num_classes(self) -> int:
        return len(self.size_bounds)


@dataclass(frozen=True)
class NoiseSpec:
    """Field corruption: cell dropout, additive noise per channel and occlusion.

    ``occlusion`` zeroes a contiguous fraction of each object's cells on one
    side of a random line through the object.
    """

    dropout: float = 0.0
    vector_sigma: float = 0.0
    size_sigma: float = 0.0
    conf_sigma: float = 0.0
    occlusion: float = 0.0

    def __post_init__(self):
        for name in ("dropout", "occlusion"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("vector_sigma", "size_sigma", "conf_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def is_zero(self) -> bool:
        return not any((self.dropout, self.vector_sigma, self.size_sigma, self.conf_sigma, self.occlusion))

    def label(self) -> str:
        return (f"drop={self.dropout:g};vec={self.vector_sigma:g};size={self.size_sigma:g};"
                f"conf={self.conf_sigma:g};occ={self.occlusion:g}")


class Scene(NamedTuple):
    boxes: List[BBox]
    width: int
    height: int


def generate_scene(spec: SceneSpec) -> List[BBox]:
    """Rejection-sample non-conflicting boxes; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.count_range
    n = int(rng.integers(lo, hi + 1))
    weights = spec.class_weights
    if weights is None:
        weights = np.full(spec.num_classes, 1.0 / spec.num_classes)
    bounds = np.log(np.asarray(spec.size_bounds, dtype=float))
    boxes: List[BBox] = []
    placed = np.zeros((0, 4))
    for k in range(n):
        for _ in range(RETRIES_PER_OBJECT):
            c = int(rng.choice(spec.num_classes, p=weights))
            w = float(np.exp(rng.uniform(*bounds[c, 0])))
            h = float(np.exp(rng.uniform(*bounds[c, 1])))
            cx = float(rng.uniform(w / 2, spec.image_w - w / 2))
            cy = float(rng.uniform(h / 2, spec.image_h - h / 2))
            cand = np.array([[cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]])
            if len(placed) == 0 or iou_matrix(cand, placed).max() <= spec.max_iou:
                boxes.append(BBox(cx, cy, w, h, c))
                placed = np.vstack([placed, cand])
                break
        else:
            raise InfeasibleSceneError(
                f"could not place object {k + 1} of {n} after {RETRIES_PER_OBJECT} tries "
                f"(max_iou={spec.max_iou}); lower the density")
    return boxes


def make_scenes(spec: SceneSpec, n: int) -> List[Scene]:
    """``n`` scenes; scene ``k`` uses seed ``spec.seed + k``."""
    return [Scene(generate_scene(replace(spec, seed=spec.seed + k)), spec.image_w, spec.image_h)
            for k in range(n)]


def _object_groups(grid: FieldGrid):
    """Cells of each encoded object: same class, same target point."""
    S = grid.stride
    c, i, j = np.nonzero(grid.p > 0)
    tx = (j + 0.5) * S + grid.vx[c, i, j]
    ty = (i + 0.5) * S + grid.vy[c, i, j]
    key = np.stack([c, np.round(tx, 6), np.round(ty, 6)], axis=1)
    _, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for g in range(inverse.max() + 1 if len(inverse) else 0):
        members = np.flatnonzero(inverse == g)
        yield c[members], i[members], j[members]


def perturb(grid: FieldGrid, noise: NoiseSpec, seed: int = 0) -> FieldGrid:
    """Corrupt a field grid; the ignore mask and dimensions are preserved.

    Order: occlusion, dropout, then additive noise on vectors (pixels),
    log-sizes and confidence (clamped to [0, 1]).
    """
    if noise.is_zero:
        return grid
    rng = np.random.default_rng(seed)
    planes = grid.planes()
    p = planes["p"]
    if noise.occlusion > 0:
        for c, i, j in _object_groups(grid):
            n_drop = int(math.floor(noise.occlusion * len(i) + 0.5))
            theta = rng.uniform(0, 2 * np.pi)
            proj = (j + 0.5) * math.cos(theta) + (i + 0.5) * math.sin(theta)
            drop = np.argsort(proj, kind="stable")[:n_drop]
            p[c[drop], i[drop], j[drop]] = 0.0
    if noise.dropout > 0:
        p[rng.random(p.shape) < noise.dropout] = 0.0
    if noise.vector_sigma > 0:
        planes["vx"] += rng.normal(0.0, noise.vector_sigma, p.shape)
        planes["vy"] += rng.normal(0.0, noise.vector_sigma, p.shape)
    if noise.size_sigma > 0:
        planes["w_log"] += rng.normal(0.0, noise.size_sigma, p.shape)
        planes["h_log"] += rng.normal(0.0, noise.size_sigma, p.shape)
    if noise.conf_sigma > 0:
        p += rng.normal(0.0, noise.conf_sigma, p.shape)
    np.clip(p, 0.0, 1.0, out=p)
    return FieldGrid(p, planes["vx"], planes["vy"], planes["w_log"], planes["h_log"],
                     stride=grid.stride, ignore=planes["ignore"], b=planes["b"])


ABLATION_HEADER = ("mode", "decoder", "noise", "scenes", "gt", "tp", "fp", "fn",
                   "precision", "recall", "f1", "ap50", "ap70")


@dataclass
class AblationRow:
    mode: str
    decoder: str
    noise: str
    scenes: int
    gt: int
    tp: int
    fp: int
    fn: int
    ap50: float
    ap70: float

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.gt if self.gt else 0.0

    @property
    def f1(self) -> float:
        pr, rc = self.precision, self.recall
        return 2 * pr * rc / (pr + rc) if pr + rc else 0.0

    def as_tuple(self):
        return (self.mode, self.decoder, self.noise, self.scenes, self.gt, self.tp, self.fp,
                self.fn, f"{self.precision:.6f}", f"{self.recall:.6f}", f"{self.f1:.6f}",
                f"{self.ap50:.6f}", f"{self.ap70:.6f}")


def decode_scene(scene: Scene, mode: EncodeMode, noise: NoiseSpec, seed: int,
                 voting: bool = True, stride: int = 4, cfg: Optional[DecoderConfig] = None,
                 num_classes: Optional[int] = None):
    """Encode, perturb and decode one scene; returns the detections."""
    grid = encode(scene.boxes, scene.width, scene.height, stride, mode, num_classes)
    grid = perturb(grid, noise, seed)
    if cfg is None:
        cfg = DecoderConfig(chi=mode.default_chi())
    fn = decode if voting else decode_no_voting
    return fn(grid, cfg, image_size=(scene.width, scene.height))


def run_ablation(scenes: Sequence[Scene], modes: Sequence[EncodeMode],
                 decoders: Sequence[str] = ("voting", "no_voting"),
                 noise_grid: Sequence[NoiseSpec] = (NoiseSpec(),),
                 stride: int = 4, base_config: Optional[DecoderConfig] = None,
                 seed: int = 0, num_classes: Optional[int] = None) -> List[AblationRow]:
    """Evaluate the full ``modes x decoders x noise_grid`` cross product.

    Scene ``k`` is perturbed with seed ``seed + k``; chi follows the mode
    unless ``base_config`` fixes it.
    """
    if num_classes is None:
        num_classes = max((b.class_id for s in scenes for b in s.boxes), default=0) + 1
    gts = {k: s.boxes for k, s in enumerate(scenes)}
    rows = []
    for mode in modes:
        mode = EncodeMode.parse(mode)
        cfg = DecoderConfig(chi=mode.default_chi()) if base_config is None else base_config
        for noise in noise_grid:
            for dec in decoders:
                if dec not in ("voting", "no_voting"):
                    raise ValueError(f"unknown decoder {dec!r}")
                dets = {k: decode_scene(s, mode, noise, seed + k, dec == "voting", stride, cfg, num_classes)
                        for k, s in enumerate(scenes)}
                rep = evaluate(dets, gts, EvalConfig(iou_thresholds=(0.5, 0.7), interpolation="all_point"))
                gt = sum(rep.num_gt.values())
                rows.append(AblationRow(str(mode), dec, noise.label(), len(scenes), gt,
                                        rep.tp[0.7], rep.fp[0.7], rep.fn[0.7], rep.ap[0.5], rep.ap[0.7]))
    return rows


def format_table(rows: Iterable[AblationRow], delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(ABLATION_HEADER)
    for r in rows:
        writer.writerow(r.as_tuple())
    return buf.getvalue()
