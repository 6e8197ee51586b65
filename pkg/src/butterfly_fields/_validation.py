"""Input validation helpers shared by the estimators and module functions."""
from __future__ import annotations

import numbers
from typing import Iterable, List, Sequence

import numpy as np

from .core import BBox, FieldGrid


def check_stride(stride) -> int:
    if isinstance(stride, bool) or not isinstance(stride, numbers.Integral) or stride <= 0:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    return int(stride)


def check_image_size(image_w, image_h):
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dimensions must be positive, got {image_w}x{image_h}")
    return int(image_w), int(image_h)


def check_boxes(boxes: Iterable, num_classes=None) -> List[BBox]:
    out = []
    for b in boxes:
        if not isinstance(b, BBox):
            raise TypeError(f"expected BBox, got {type(b).__name__}")
        if num_classes is not None and b.class_id >= num_classes:
            raise ValueError(f"class_id {b.class_id} out of range for {num_classes} classes")
        out.append(b)
    return out


def check_grid(grid) -> FieldGrid:
    if not isinstance(grid, FieldGrid):
        raise TypeError(f"expected FieldGrid, got {type(grid).__name__}")
    return grid


def check_same_shape(*arrays: np.ndarray) -> Sequence[np.ndarray]:
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {shape}")
    return arrays


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_non_negative(value, name: str) -> float:
    value = float(value)
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value
