"""Ground-truth encoding of box annotations into composite field targets."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_boxes, check_image_size, check_stride
from .core import BBox, FieldGrid, to_corners

logger = logging.getLogger(__name__)

IGNORE_FRACTION = 0.2


@dataclass(frozen=True)
class EncodeMode:
    """Cell assignment rule: ``center1``, ``window`` (k x k) or ``full``."""

    kind: str = "window"
    k: int = 4

    def __post_init__(self):
        if self.kind not in ("center1", "window", "full"):
            raise ValueError(f"unknown encode mode {self.kind!r}")
        if self.k < 1:
            raise ValueError("window size k must be >= 1")

    @classmethod
    def center1(cls) -> "EncodeMode":
        return cls("center1", 1)

    @classmethod
    def window(cls, k: int = 4) -> "EncodeMode":
        return cls("window", k)

    @classmethod
    def full_box(cls) -> "EncodeMode":
        return cls("full", 1)

    @classmethod
    def parse(cls, value: Union[str, "EncodeMode"], k: int = 4) -> "EncodeMode":
        if isinstance(value, EncodeMode):
            return value
        name = value.lower()
        if name in ("center1", "center", "bd1"):
            return cls.center1()
        if name in ("full", "fullbox", "full_box", "bd_full"):
            return cls.full_box()
        if name == "bd16":
            return cls.window(4)
        if name.startswith("window"):
            suffix = name[len("window"):]
            return cls.window(int(suffix) if suffix else k)
        raise ValueError(f"unknown encode mode {value!r}")

    @property
    def uses_ignore(self) -> bool:
        return self.kind != "full"

    def default_chi(self):
        """Normaliser matching the expected number of votes per object."""
        if self.kind == "full":
            return "box_area"
        if self.kind == "center1":
            return 1.0
        return float(self.k * self.k)

    def __str__(self):
        return f"window{self.k}" if self.kind == "window" else self.kind


def grid_shape(image_w: int, image_h: int, stride: int) -> Tuple[int, int]:
    """``(grid_h, grid_w)`` after padding the image right/bottom to a stride multiple."""
    return (-(-int(image_h) // stride), -(-int(image_w) // stride))


def _window_start(center: float, stride: int, k: int) -> int:
    # block midpoint (start + k/2)*S nearest to center; exact ties go to the smaller index
    return int(math.ceil(center / stride - k / 2.0 - 0.5))


def assign_cells(box: BBox, stride: int, mode: EncodeMode,
                 grid_h: Optional[int] = None, grid_w: Optional[int] = None) -> List[Tuple[int, int]]:
    """Grid cells ``(i, j)`` responsible for ``box`` under ``mode``.

    Cells outside ``[0, grid_h) x [0, grid_w)`` are dropped when grid
    dimensions are given. An empty list means the box misses the grid.
    """
    stride = check_stride(stride)
    rows, cols = _assigned_ranges(box, stride, mode, grid_h, grid_w)
    return [(i, j) for i in rows for j in cols]


def _assigned_ranges(box, stride, mode, grid_h, grid_w):
    gh = grid_h if grid_h is not None else 1 << 30
    gw = grid_w if grid_w is not None else 1 << 30
    x0, y0, x1, y1 = to_corners(box)
    if x1 <= 0 or y1 <= 0 or x0 >= gw * stride or y0 >= gh * stride:
        return range(0), range(0)
    if mode.kind == "center1":
        i = min(max(int(math.floor(box.cy / stride)), 0), gh - 1)
        j = min(max(int(math.floor(box.cx / stride)), 0), gw - 1)
        return range(i, i + 1), range(j, j + 1)
    if mode.kind == "window":
        i0 = _window_start(box.cy, stride, mode.k)
        j0 = _window_start(box.cx, stride, mode.k)
        return (range(max(i0, 0), min(i0 + mode.k, gh)),
                range(max(j0, 0), min(j0 + mode.k, gw)))
    # full box: cells whose centers fall in [x0, x1) x [y0, y1)
    i_lo = max(int(math.ceil(y0 / stride - 0.5)), 0)
    i_hi = min(int(math.ceil(y1 / stride - 0.5)), gh)
    j_lo = max(int(math.ceil(x0 / stride - 0.5)), 0)
    j_hi = min(int(math.ceil(x1 / stride - 0.5)), gw)
    if i_lo >= i_hi or j_lo >= j_hi:
        # box too small to contain any cell center: fall back to its center cell
        return _assigned_ranges(box, stride, EncodeMode.center1(), grid_h, grid_w)
    return range(i_lo, i_hi), range(j_lo, j_hi)


def _ignore_ring(box, stride, rows, cols, grid_h, grid_w):
    """Rows/cols whose centers lie in the 20% border around the block, inside the box."""
    x0, y0, x1, y1 = to_corners(box)
    bx0 = max(cols.start * stride - IGNORE_FRACTION * box.w, x0)
    bx1 = min(cols.stop * stride + IGNORE_FRACTION * box.w, x1)
    by0 = max(rows.start * stride - IGNORE_FRACTION * box.h, y0)
    by1 = min(rows.stop * stride + IGNORE_FRACTION * box.h, y1)
    i_lo = max(int(math.ceil(by0 / stride - 0.5)), 0)
    i_hi = min(int(math.ceil(by1 / stride - 0.5)), grid_h)
    j_lo = max(int(math.ceil(bx0 / stride - 0.5)), 0)
    j_hi = min(int(math.ceil(bx1 / stride - 0.5)), grid_w)
    return slice(i_lo, max(i_lo, i_hi)), slice(j_lo, max(j_lo, j_hi))


def encode(annotations: Sequence[BBox], image_w: int, image_h: int, stride: int,
           mode: EncodeMode = EncodeMode.window(4), num_classes: Optional[int] = None) -> FieldGrid:
    """Build the target field grid for one image.

    Same-class cells claimed by several boxes point to the nearest object
    center (ties keep the earlier annotation). In ``center1``/``window``
    modes a 20% border around each assigned block, clipped to the box, is
    marked ignore unless another box claims those cells.
    """
    stride = check_stride(stride)
    image_w, image_h = check_image_size(image_w, image_h)
    mode = EncodeMode.parse(mode)
    boxes = check_boxes(annotations, num_classes)
    if num_classes is None:
        num_classes = max((b.class_id for b in boxes), default=0) + 1
    gh, gw = grid_shape(image_w, image_h, stride)
    shape = (num_classes, gh, gw)

    p = np.zeros(shape)
    vx = np.zeros(shape)
    vy = np.zeros(shape)
    w_log = np.zeros(shape)
    h_log = np.zeros(shape)
    ignore = np.zeros(shape, dtype=bool)
    best = np.full(shape, np.inf)

    ys = (np.arange(gh) + 0.5) * stride
    xs = (np.arange(gw) + 0.5) * stride

    rings = []
    for n, box in enumerate(boxes):
        rows, cols = _assigned_ranges(box, stride, mode, gh, gw)
        if len(rows) == 0 or len(cols) == 0:
            logger.warning("annotation %d lies outside the %dx%d grid, skipped", n, gh, gw)
            continue
        c = box.class_id
        sl = (c, slice(rows.start, rows.stop), slice(cols.start, cols.stop))
        dx = box.cx - xs[cols.start:cols.stop][None, :]
        dy = box.cy - ys[rows.start:rows.stop][:, None]
        dist = np.hypot(dx, dy)
        win = dist < best[sl]
        best[sl] = np.where(win, dist, best[sl])
        p[sl] = np.where(win, 1.0, p[sl])
        vx[sl] = np.where(win, dx, vx[sl])
        vy[sl] = np.where(win, dy, vy[sl])
        w_log[sl] = np.where(win, math.log(box.w / stride), w_log[sl])
        h_log[sl] = np.where(win, math.log(box.h / stride), h_log[sl])
        if mode.uses_ignore:
            rings.append((c, _ignore_ring(box, stride, rows, cols, gh, gw)))

    for c, (ri, rj) in rings:
        ignore[c, ri, rj] = True
    ignore &= p == 0
    return FieldGrid(p, vx, vy, w_log, h_log, stride=stride, ignore=ignore)


class FieldEncoder(TransformerMixin, BaseEstimator):
    """Transformer turning per-image annotation lists into field grids.

    Parameters
    ----------
    stride : int
        Input pixels per output cell.
    mode : str or EncodeMode
        ``"window"``, ``"center1"`` or ``"full"``.
    window : int
        Block side for ``"window"`` mode.
    num_classes : int, optional
        Inferred from the annotations seen in ``fit`` when omitted.
    image_size : (int, int)
        Image ``(width, height)`` shared by all samples.
    """

    def __init__(self, stride=4, mode="window", window=4, num_classes=None, image_size=(512, 512)):
        self.stride = stride
        self.mode = mode
        self.window = window
        self.num_classes = num_classes
        self.image_size = image_size

    def fit(self, X, y=None):
        check_stride(self.stride)
        check_image_size(*self.image_size)
        self.mode_ = EncodeMode.parse(self.mode, self.window)
        if self.num_classes is not None:
            self.n_classes_ = int(self.num_classes)
        else:
            self.n_classes_ = max((b.class_id for boxes in X for b in boxes), default=0) + 1
        return self

    def transform(self, X) -> List[FieldGrid]:
        check_is_fitted(self, "n_classes_")
        w, h = self.image_size
        return [encode(boxes, w, h, self.stride, self.mode_, self.n_classes_) for boxes in X]
