"""Box and mask arithmetic shared by the losses and the evaluator.

Boxes are arrays with a trailing axis of 4, ordered (cx, cy, h, w): normalized
center, then height BEFORE width. Corners derived from a box are clamped to
the unit square before any area computation. Masks live on the scene's cell
grid; ground truth is binary, predictions are per-cell logits.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# shared with the tensor path so the two implementations agree exactly
EPS = 1e-12

CX, CY, BH, BW = 0, 1, 2, 3


def box_corners(boxes: np.ndarray):
    """(x0, y0, x1, y1), clamped to the unit square."""
    b = np.asarray(boxes, dtype=np.float64)
    x0 = np.clip(b[..., CX] - b[..., BW] / 2, 0.0, 1.0)
    x1 = np.clip(b[..., CX] + b[..., BW] / 2, 0.0, 1.0)
    y0 = np.clip(b[..., CY] - b[..., BH] / 2, 0.0, 1.0)
    y1 = np.clip(b[..., CY] + b[..., BH] / 2, 0.0, 1.0)
    return x0, y0, x1, y1


def _pair_iou(a, b):
    ax0, ay0, ax1, ay1 = box_corners(a)
    bx0, by0, bx1, by1 = box_corners(b)
    iw = np.maximum(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0)
    ih = np.maximum(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * \
           (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    iou = inter / (union + EPS)
    return iou, union, hull


def box_iou(a, b) -> float:
    """IoU of two boxes; 0 when both are degenerate."""
    iou, _, _ = _pair_iou(np.asarray(a), np.asarray(b))
    return float(iou)


def giou_loss(a, b) -> float:
    """1 - (IoU - |hull minus union| / |hull|), in [0, 2]."""
    iou, union, hull = _pair_iou(np.asarray(a), np.asarray(b))
    return float(1.0 - (iou - (hull - union) / (hull + EPS)))


def box_iou_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise IoU, rows from A, columns from B."""
    iou, _, _ = _pair_iou(np.asarray(A)[:, None, :], np.asarray(B)[None, :, :])
    return iou


def giou_loss_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    iou, union, hull = _pair_iou(np.asarray(A)[:, None, :],
                                 np.asarray(B)[None, :, :])
    return 1.0 - (iou - (hull - union) / (hull + EPS))


def giou_loss_pairs(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Row-wise GIoU loss of predicted boxes (k,4) against fixed targets,
    differentiable w.r.t. the predictions. Mirrors the numpy formula exactly
    (same EPS, same clamping)."""
    if pred.ndim != 2 or pred.shape[1] != 4:
        raise ad.ShapeError(f"giou_loss_pairs: pred shape {pred.shape}")
    tape = pred.tape
    g = np.asarray(gt, dtype=tape.dtype)
    if g.shape != pred.shape:
        raise ad.ShapeError(f"giou_loss_pairs: {pred.shape} vs {g.shape}")

    px0 = ad.clamp(pred[:, CX] - pred[:, BW] * 0.5, 0.0, 1.0)
    px1 = ad.clamp(pred[:, CX] + pred[:, BW] * 0.5, 0.0, 1.0)
    py0 = ad.clamp(pred[:, CY] - pred[:, BH] * 0.5, 0.0, 1.0)
    py1 = ad.clamp(pred[:, CY] + pred[:, BH] * 0.5, 0.0, 1.0)

    gx0, gy0, gx1, gy1 = box_corners(g)
    gx0, gy0, gx1, gy1 = (tape.constant(v) for v in (gx0, gy0, gx1, gy1))

    iw = ad.relu(ad.minimum(px1, gx1) - ad.maximum(px0, gx0))
    ih = ad.relu(ad.minimum(py1, gy1) - ad.maximum(py0, gy0))
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (ad.maximum(px1, gx1) - ad.minimum(px0, gx0)) * \
           (ad.maximum(py1, gy1) - ad.minimum(py0, gy0))
    iou = inter / (union + EPS)
    return 1.0 - (iou - (hull - union) / (hull + EPS))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two binary masks; 0 when both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: grids differ, {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def mask_iou_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise mask IoU; A is (n, H, W), B is (m, H, W)."""
    A = np.asarray(A).astype(bool).reshape(len(A), -1)
    B = np.asarray(B).astype(bool).reshape(len(B), -1)
    if A.shape[1] != B.shape[1]:
        raise ValueError("mask_iou_matrix: grids differ")
    inter = (A[:, None, :] & B[None, :, :]).sum(axis=2)
    union = (A[:, None, :] | B[None, :, :]).sum(axis=2)
    out = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out
