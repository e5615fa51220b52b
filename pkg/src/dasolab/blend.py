"""Pseudo-label distribution tracking and distribution-aware blending."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, InputError


@dataclass
class PseudoLabelTracker:
    """Running class histogram of final pseudo-labels.

    ``mode="segment"``: counts accumulate over non-overlapping blocks of
    ``segment_len`` steps and the normalised block becomes ``m_hat``.
    ``mode="window"``: ``m_hat`` is refreshed every step from the last
    ``segment_len`` steps. Empty accumulations leave ``m_hat`` untouched.
    """

    K: int
    segment_len: int = 100
    T_dist: float = 1.5
    mode: str = "segment"
    current_counts: np.ndarray = None
    m_hat: np.ndarray = None
    steps_in_segment: int = 0
    _window: deque = field(default_factory=deque, repr=False)

    def __post_init__(self):
        if self.segment_len < 1:
            raise ConfigError("segment_len must be positive", "tracker.segment_len")
        if self.T_dist <= 0:
            raise ConfigError("T_dist must be positive", "tracker.T_dist")
        if self.mode not in ("segment", "window"):
            raise ConfigError(f"unknown tracker mode {self.mode!r}", "tracker.mode")
        if self.current_counts is None:
            self.current_counts = np.zeros(self.K, dtype=np.int64)
        if self.m_hat is None:
            self.m_hat = np.full(self.K, 1.0 / self.K)

    @property
    def upsilon(self) -> np.ndarray:
        return blend_weights(self.m_hat, self.T_dist)


def record_predictions(tracker: PseudoLabelTracker, hard_preds) -> PseudoLabelTracker:
    """Add one training step's worth of predicted classes."""
    preds = np.asarray(hard_preds, dtype=int).reshape(-1)
    if len(preds) and (preds.min() < 0 or preds.max() >= tracker.K):
        raise InputError(f"predicted classes must lie in [0, {tracker.K})")
    step_counts = np.bincount(preds, minlength=tracker.K)
    if tracker.mode == "window":
        tracker._window.append(step_counts)
        if len(tracker._window) > tracker.segment_len:
            tracker._window.popleft()
        total = np.sum(tracker._window, axis=0)
        tracker.current_counts = total
        if total.sum() > 0:
            tracker.m_hat = total / total.sum()
        return tracker
    tracker.current_counts = tracker.current_counts + step_counts
    tracker.steps_in_segment += 1
    if tracker.steps_in_segment >= tracker.segment_len:
        total = tracker.current_counts.sum()
        if total > 0:
            tracker.m_hat = tracker.current_counts / total
        tracker.current_counts = np.zeros(tracker.K, dtype=np.int64)
        tracker.steps_in_segment = 0
    return tracker


def blend_weights(m_hat, T_dist: float) -> np.ndarray:
    """upsilon_k = m_k^(1/T) / max_j m_j^(1/T), with 0^(1/T) taken as 0."""
    m = np.asarray(m_hat, dtype=np.float64)
    if T_dist <= 0:
        raise ConfigError("T_dist must be positive", "tracker.T_dist")
    if np.any(m < 0) or not np.any(m > 0):
        raise ContractError("m_hat needs non-negative entries and positive mass")
    # scale by the max first so large 1/T does not underflow every entry
    scaled = m / m.max()
    out = np.zeros_like(scaled)
    pos = scaled > 0
    out[pos] = scaled[pos] ** (1.0 / T_dist)
    return out


def blend(p_hat, q_hat, upsilon) -> np.ndarray:
    """(1 - v_k') p_hat + v_k' q_hat, k' = argmax p_hat (lowest index on ties).

    Accepts single vectors or row batches.
    """
    p = np.asarray(p_hat, dtype=np.float64)
    q = np.asarray(q_hat, dtype=np.float64)
    v = np.asarray(upsilon, dtype=np.float64)[np.argmax(p, axis=-1)]
    v = v[..., None] if p.ndim == 2 else v
    return (1.0 - v) * p + v * q
