"""Evaluation metrics: total variation divergence, IoU, pseudo-label accuracy."""

from __future__ import annotations

import numpy as np

from .errors import InputError


def _check_prob(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-9) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-4):
        raise InputError(f"{name} is not a valid probability tensor")
    return p


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Mean per-pixel total variation distance ``0.5 * sum_k |p_k - q_k|``."""
    p = _check_prob(p, "p")
    q = _check_prob(q, "q")
    if p.shape != q.shape:
        raise InputError(f"shape mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum(axis=-1).mean())


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """K x K counts indexed ``[gt, pred]``."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise InputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= k or gt.max(initial=0) >= k:
        raise InputError(f"label values out of range for K={k}")
    return np.bincount(k * gt + pred, minlength=k * k).reshape(k, k)


def segmentation_scores(pred: np.ndarray, gt: np.ndarray, k: int):
    """Confusion, per-class IoU, mIoU and pixel accuracy.

    Classes absent from both prediction and ground truth get IoU ``nan``
    and are excluded from the mean.
    """
    conf = confusion_matrix(pred, gt, k)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), np.nan)
    miou = float(np.nanmean(iou)) if np.any(denom > 0) else float("nan")
    pixel_acc = float(tp.sum() / conf.sum()) if conf.sum() else float("nan")
    return conf, iou, miou, pixel_acc


def pseudo_accuracy(pseudo, gt: np.ndarray, valid: np.ndarray | None = None):
    """Fraction of valid pixels whose pseudo class matches the ground truth.

    ``pseudo`` is either an integer label map or a one-hot ``(...,K)``
    tensor. Returns ``None`` when every pixel is gated out.
    """
    pseudo = np.asarray(pseudo)
    gt = np.asarray(gt)
    labels = pseudo.argmax(axis=-1) if pseudo.ndim == gt.ndim + 1 else pseudo
    if labels.shape != gt.shape:
        raise InputError(f"shape mismatch: {labels.shape} vs {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape)
    valid = np.asarray(valid, dtype=bool)
    n = valid.sum()
    if n == 0:
        return None
    return float((labels[valid] == gt[valid]).mean())
