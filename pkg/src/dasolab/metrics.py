"""Pseudo-label quality diagnostics and balanced test-set evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .nn_core import ema_forward, forward


@dataclass
class PLQualityReport:
    recall: np.ndarray
    # NaN marks a class that received no predictions (precision undefined)
    precision: np.ndarray
    rel_size: np.ndarray
    coverage: float


@dataclass
class EvalReport:
    per_class_acc: np.ndarray
    overall_acc: float
    balanced_acc: float
    confusion: np.ndarray
    minority_acc: float


def minority_classes(K: int) -> np.ndarray:
    """Indices of the last ceil(0.2 K) classes (smallest labeled counts)."""
    n = math.ceil(0.2 * K)
    return np.arange(K - n, K)


def pl_quality(masked_preds, hidden_labels, K: int) -> PLQualityReport:
    """Per-class recall / precision of pseudo-labels over the masked samples.

    ``masked_preds`` is a sequence of ``(pred, weight)`` pairs, weight in {0, 1}.
    """
    arr = np.asarray(masked_preds, dtype=np.int64).reshape(-1, 2)
    return pl_quality_arrays(arr[:, 0], arr[:, 1], hidden_labels, K)


def pl_quality_arrays(preds, weights, hidden_labels, K: int) -> PLQualityReport:
    preds = np.asarray(preds, dtype=int)
    keep = np.asarray(weights).astype(bool)
    truth = np.asarray(hidden_labels, dtype=int)
    if len(preds) != len(truth) or len(keep) != len(truth):
        raise InputError("predictions and hidden labels are misaligned")
    p, t = preds[keep], truth[keep]
    true_n = np.bincount(t, minlength=K).astype(float)
    pred_n = np.bincount(p, minlength=K).astype(float)
    hit = np.bincount(t[p == t], minlength=K).astype(float)
    recall = np.where(true_n > 0, hit / np.maximum(true_n, 1), 0.0)
    precision = np.where(pred_n > 0, hit / np.maximum(pred_n, 1), np.nan)
    rel_size = np.where(true_n > 0, pred_n / np.maximum(true_n, 1), np.nan)
    coverage = float(keep.mean()) if len(keep) else 0.0
    return PLQualityReport(recall, precision, rel_size, coverage)


def confusion_matrix(y_true, y_pred, K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def report_from_predictions(y_true, y_pred, K: int) -> EvalReport:
    cm = confusion_matrix(y_true, y_pred, K)
    rows = cm.sum(axis=1)
    per_class = np.diag(cm) / np.maximum(rows, 1)
    mino = minority_classes(K)
    return EvalReport(
        per_class_acc=per_class,
        overall_acc=float(np.trace(cm) / cm.sum()),
        balanced_acc=float(per_class.mean()),
        confusion=cm,
        minority_acc=float(per_class[mino].mean()),
    )


def evaluate(model, test_x, test_y, use_ema: bool = True) -> EvalReport:
    """Top-1 report of the linear classifier; ``use_ema`` evaluates the EMA network."""
    if use_ema:
        _, logits = ema_forward(model, test_x)
    else:
        _, logits = forward(model, test_x)
    return report_from_predictions(test_y, np.argmax(logits, axis=1), model.num_classes)


def median_last_k(history, k: int = 20) -> float:
    if len(history) == 0:
        raise InputError("empty history")
    return float(np.median(np.asarray(history[-k:], dtype=np.float64)))
