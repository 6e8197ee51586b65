"""Geometry primitives, the field tensor container and decoder configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center form, image pixel units."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> Tuple[float, float, float, float]:
        return to_corners(self)

    @classmethod
    def from_corners(cls, x_min, y_min, x_max, y_max, class_id: int = 0) -> "BBox":
        return from_corners(x_min, y_min, x_max, y_max, class_id)

    @classmethod
    def from_ltwh(cls, left, top, w, h, class_id: int = 0) -> "BBox":
        return cls(left + w / 2.0, top + h / 2.0, w, h, class_id)

    def scaled(self, s: float) -> "BBox":
        return BBox(self.cx * s, self.cy * s, self.w * s, self.h * s, self.class_id)


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def class_id(self) -> int:
        return self.box.class_id


def to_corners(b: BBox) -> Tuple[float, float, float, float]:
    hw, hh = b.w / 2.0, b.h / 2.0
    return (b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)


def from_corners(x_min, y_min, x_max, y_max, class_id: int = 0) -> BBox:
    return BBox((x_min + x_max) / 2.0, (y_min + y_max) / 2.0,
                x_max - x_min, y_max - y_min, class_id)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = to_corners(a)
    bx0, by0, bx1, by1 = to_corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from corners so identical boxes give exactly inter == union
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return min(inter / union, 1.0)


def corners_array(boxes: Sequence[BBox]) -> np.ndarray:
    """(N, 4) array of ``x_min, y_min, x_max, y_max``."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([to_corners(b) for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner arrays of shape (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)


def cell_center(i: int, j: int, stride: int) -> Tuple[float, float]:
    """Image-pixel center ``(x, y)`` of grid cell at row ``i``, column ``j``.

    Cell (i, j) covers ``[j*S, (j+1)*S) x [i*S, (i+1)*S)``.
    """
    return ((j + 0.5) * stride, (i + 0.5) * stride)


class FieldCell(NamedTuple):
    p: float
    vx: float
    vy: float
    w_log: float
    h_log: float
    b: Optional[float] = None


_PLANES = ("p", "vx", "vy", "w_log", "h_log")


@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Per-class composite field over the output grid.

    Every plane has shape ``(C, grid_h, grid_w)``. ``vx, vy`` are image-pixel
    offsets from the cell center to the object center, ``w_log, h_log`` are
    ``ln(size / stride)``. ``b`` is the optional Laplace spread plane.
    Arrays are frozen (non-writeable) after construction.
    """

    p: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    w_log: np.ndarray
    h_log: np.ndarray
    stride: int
    ignore: np.ndarray = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride <= 0:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")
        object.__setattr__(self, "stride", int(self.stride))
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 3:
            raise ValueError(f"field planes must be 3-D (C, H, W), got shape {p.shape}")
        object.__setattr__(self, "p", p)
        for name in _PLANES[1:]:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"plane {name!r} has shape {arr.shape}, expected {p.shape}")
            object.__setattr__(self, name, arr)
        ignore = np.zeros(p.shape, dtype=bool) if self.ignore is None else np.asarray(self.ignore, dtype=bool)
        if ignore.shape != p.shape:
            raise ValueError(f"ignore mask has shape {ignore.shape}, expected {p.shape}")
        object.__setattr__(self, "ignore", ignore)
        if self.b is not None:
            b = np.asarray(self.b, dtype=np.float64)
            if b.shape != p.shape:
                raise ValueError(f"plane 'b' has shape {b.shape}, expected {p.shape}")
            object.__setattr__(self, "b", b)
        for name in _PLANES + ("ignore", "b"):
            arr = getattr(self, name)
            if arr is not None and arr.flags.writeable:
                # copy so the caller's buffer is never frozen behind their back
                arr = arr.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, num_classes: int, grid_h: int, grid_w: int, stride: int) -> "FieldGrid":
        shape = (num_classes, grid_h, grid_w)
        return cls(*(np.zeros(shape) for _ in _PLANES), stride=stride)

    @property
    def num_classes(self) -> int:
        return self.p.shape[0]

    @property
    def grid_h(self) -> int:
        return self.p.shape[1]

    @property
    def grid_w(self) -> int:
        return self.p.shape[2]

    @property
    def image_size(self) -> Tuple[int, int]:
        """Padded image ``(width, height)`` in pixels."""
        return (self.grid_w * self.stride, self.grid_h * self.stride)

    def cell(self, c: int, i: int, j: int) -> FieldCell:
        b = None if self.b is None else float(self.b[c, i, j])
        return FieldCell(float(self.p[c, i, j]), float(self.vx[c, i, j]), float(self.vy[c, i, j]),
                         float(self.w_log[c, i, j]), float(self.h_log[c, i, j]), b)

    def planes(self) -> dict:
        """Writeable copies of every plane, for building a modified grid."""
        out = {name: getattr(self, name).copy() for name in _PLANES}
        out["ignore"] = self.ignore.copy()
        out["b"] = None if self.b is None else self.b.copy()
        return out

    def replace(self, **changes) -> "FieldGrid":
        return replace(self, **changes)

    def equals(self, other: "FieldGrid") -> bool:
        """Bit-level equality of all planes and metadata."""
        if not isinstance(other, FieldGrid) or self.stride != other.stride:
            return False
        if (self.b is None) != (other.b is None):
            return False
        names = _PLANES + (("b",) if self.b is not None else ())
        same = all(getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in names)
        return same and np.array_equal(self.ignore, other.ignore) and self.p.shape == other.p.shape


ChiMode = Union[float, str]


@dataclass(frozen=True)
class DecoderConfig:
    """Parameters of the voting decoder.

    ``chi`` is either a positive number (fixed normaliser) or ``"box_area"``.
    ``rho`` is a scalar or one value per class. ``tail_tolerance`` bounds the
    value at which each vote's Gaussian is truncated.
    """

    rho: Union[float, Tuple[float, ...]] = 10.0
    accum_threshold: float = 0.1
    select_threshold: float = 0.05
    sigma_min: float = 2.0
    chi: ChiMode = 16.0
    peak_window: int = 3
    subpixel: bool = True
    subpixel_mode: str = "mean"
    softnms_sigma: float = 0.5
    softnms_min_score: float = 0.001
    tail_tolerance: float = 1e-10

    def __post_init__(self):
        rho = self.rho
        if isinstance(rho, (list, tuple, np.ndarray)):
            rho = tuple(float(r) for r in rho)
            if not rho or min(rho) <= 0:
                raise ValueError("rho values must be positive")
            object.__setattr__(self, "rho", rho)
        elif not rho > 0:
            raise ValueError(f"rho must be positive, got {rho}")
        for name in ("accum_threshold", "select_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if isinstance(self.chi, str):
            if self.chi != "box_area":
                raise ValueError(f"chi must be a positive number or 'box_area', got {self.chi!r}")
        elif not self.chi > 0:
            raise ValueError(f"chi must be positive, got {self.chi}")
        if self.peak_window < 1 or self.peak_window % 2 == 0:
            raise ValueError("peak_window must be a positive odd integer")
        if self.subpixel_mode not in ("mean", "best"):
            raise ValueError("subpixel_mode must be 'mean' or 'best'")
        if not self.softnms_sigma > 0:
            raise ValueError("softnms_sigma must be positive")
        if self.softnms_min_score < 0:
            raise ValueError("softnms_min_score must be >= 0")
        if not self.tail_tolerance > 0:
            raise ValueError("tail_tolerance must be positive")

    def rho_for(self, class_id: int) -> float:
        if isinstance(self.rho, tuple):
            if len(self.rho) == 1:
                return self.rho[0]
            return self.rho[class_id]
        return float(self.rho)

    def rho_array(self, num_classes: int) -> np.ndarray:
        if isinstance(self.rho, tuple) and len(self.rho) not in (1, num_classes):
            raise ValueError(f"got {len(self.rho)} rho values for {num_classes} classes")
        return np.array([self.rho_for(c) for c in range(num_classes)], dtype=float)
