"""Training losses for composite fields, with analytic gradients.

Every term is a masked mean so magnitudes do not depend on resolution. An
empty mask gives 0 and the term drops out of the uncertainty-weighted total.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ._validation import check_same_shape
from .core import FieldGrid

EPS = 1e-7
B_MIN = 1e-3


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def bce_confidence(pred, target, ignore=None) -> float:
    """Mean binary cross-entropy over non-ignored cells; preds clamped to [eps, 1-eps]."""
    pred, target = check_same_shape(pred, target)
    keep = ~_mask(ignore, pred.shape) if ignore is not None else np.ones(pred.shape, dtype=bool)
    n = np.count_nonzero(keep)
    if n == 0:
        return 0.0
    p = np.clip(pred[keep], EPS, 1 - EPS)
    t = target[keep]
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


def bce_confidence_grad(pred, target, ignore=None) -> np.ndarray:
    pred, target = check_same_shape(pred, target)
    keep = ~_mask(ignore, pred.shape) if ignore is not None else np.ones(pred.shape, dtype=bool)
    grad = np.zeros(pred.shape)
    n = np.count_nonzero(keep)
    if n == 0:
        return grad
    p = np.clip(pred, EPS, 1 - EPS)
    g = (-target / p + (1 - target) / (1 - p)) / n
    # clamped entries are flat
    g[(pred < EPS) | (pred > 1 - EPS)] = 0.0
    grad[keep] = g[keep]
    return grad


def laplace_loss(pred, mu, b):
    """Elementwise ``|pred - mu| / b + ln(2b)`` with ``b`` clamped to >= 1e-3."""
    b = np.maximum(np.asarray(b, dtype=float), B_MIN)
    out = np.abs(np.subtract(pred, mu)) / b + np.log(2 * b)
    return out if np.ndim(out) else float(out)


def laplace_loss_grad(pred, mu, b) -> Tuple[np.ndarray, np.ndarray]:
    """Derivatives of :func:`laplace_loss` w.r.t. ``pred`` and ``b``."""
    b_raw = np.asarray(b, dtype=float)
    bc = np.maximum(b_raw, B_MIN)
    r = np.subtract(pred, mu)
    d_pred = np.sign(r) / bc
    d_b = np.where(b_raw >= B_MIN, -np.abs(r) / bc ** 2 + 1.0 / bc, 0.0)
    return d_pred, d_b


def laplace_vector_loss(pred_vx, pred_vy, target_vx, target_vy, b, mask) -> float:
    """Laplace loss of both vector components, summed per cell, meaned over ``mask``.

    One spread ``b`` per cell serves both components.
    """
    pred_vx, pred_vy, target_vx, target_vy, b = check_same_shape(pred_vx, pred_vy, target_vx, target_vy, b)
    m = _mask(mask, pred_vx.shape)
    n = np.count_nonzero(m)
    if n == 0:
        return 0.0
    per_cell = laplace_loss(pred_vx[m], target_vx[m], b[m]) + laplace_loss(pred_vy[m], target_vy[m], b[m])
    return float(np.sum(per_cell) / n)


def laplace_vector_loss_grad(pred_vx, pred_vy, target_vx, target_vy, b, mask):
    """Gradients w.r.t. ``(pred_vx, pred_vy, b)``."""
    pred_vx, pred_vy, target_vx, target_vy, b = check_same_shape(pred_vx, pred_vy, target_vx, target_vy, b)
    m = _mask(mask, pred_vx.shape)
    n = np.count_nonzero(m)
    gx, gy, gb = np.zeros(pred_vx.shape), np.zeros(pred_vx.shape), np.zeros(pred_vx.shape)
    if n == 0:
        return gx, gy, gb
    dx, dbx = laplace_loss_grad(pred_vx, target_vx, b)
    dy, dby = laplace_loss_grad(pred_vy, target_vy, b)
    gx[m] = dx[m] / n
    gy[m] = dy[m] / n
    gb[m] = (dbx + dby)[m] / n
    return gx, gy, gb


def l1_size(pred_w, pred_h, target_w, target_h, mask) -> float:
    """Mean absolute error over masked cells and both size channels."""
    pred_w, pred_h, target_w, target_h = check_same_shape(pred_w, pred_h, target_w, target_h)
    m = _mask(mask, pred_w.shape)
    n = np.count_nonzero(m)
    if n == 0:
        return 0.0
    return float((np.abs(pred_w - target_w)[m].sum() + np.abs(pred_h - target_h)[m].sum()) / (2 * n))


def l1_size_grad(pred_w, pred_h, target_w, target_h, mask):
    pred_w, pred_h, target_w, target_h = check_same_shape(pred_w, pred_h, target_w, target_h)
    m = _mask(mask, pred_w.shape)
    n = np.count_nonzero(m)
    gw, gh = np.zeros(pred_w.shape), np.zeros(pred_w.shape)
    if n:
        gw[m] = np.sign(pred_w - target_w)[m] / (2 * n)
        gh[m] = np.sign(pred_h - target_h)[m] / (2 * n)
    return gw, gh


def combine_homoscedastic(terms: Sequence[float], log_vars: Sequence[float]) -> float:
    """``sum exp(-s_k) * L_k + s_k`` with caller-owned log-variances ``s_k``."""
    if len(terms) != len(log_vars):
        raise ValueError(f"{len(terms)} terms but {len(log_vars)} log-variances")
    terms = np.asarray(terms, dtype=float)
    s = np.asarray(log_vars, dtype=float)
    return float(np.sum(np.exp(-s) * terms + s))


def combine_homoscedastic_grad(terms, log_vars) -> np.ndarray:
    """Gradient w.r.t. the log-variances."""
    return 1.0 - np.exp(-np.asarray(log_vars, dtype=float)) * np.asarray(terms, dtype=float)


@dataclass
class LossBreakdown:
    conf_loss: float
    vec_loss: float
    size_loss: float
    total: float
    counts: Dict[str, int] = field(default_factory=dict)


def field_losses(pred: FieldGrid, target: FieldGrid,
                 log_vars: Optional[Sequence[float]] = None) -> LossBreakdown:
    """All three losses between a predicted and a target grid.

    Confidence uses every non-ignored cell; vector and size terms use the
    target's ``p == 1`` cells. A prediction without a ``b`` plane is scored
    with ``b = 1``. ``log_vars`` default to zeros (plain sum).
    """
    if pred.p.shape != target.p.shape:
        raise ValueError(f"grid shapes differ: {pred.p.shape} vs {target.p.shape}")
    pos = target.p == 1
    b = pred.b if pred.b is not None else np.ones(pred.p.shape)
    conf = bce_confidence(pred.p, target.p, target.ignore)
    vec = laplace_vector_loss(pred.vx, pred.vy, target.vx, target.vy, b, pos)
    size = l1_size(pred.w_log, pred.h_log, target.w_log, target.h_log, pos)
    counts = {"conf": int(np.count_nonzero(~target.ignore)), "vec": int(np.count_nonzero(pos)),
              "size": int(np.count_nonzero(pos))}
    if log_vars is None:
        log_vars = (0.0, 0.0, 0.0)
    values = {"conf": conf, "vec": vec, "size": size}
    used = [(values[k], s) for k, s in zip(("conf", "vec", "size"), log_vars) if counts[k] > 0]
    total = combine_homoscedastic([u[0] for u in used], [u[1] for u in used]) if used else 0.0
    return LossBreakdown(conf, vec, size, total, counts)
