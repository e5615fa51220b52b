"""Synthetic long-tailed Gaussian mixtures and feature-space augmentations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleSpecError


@dataclass
class DatasetSpec:
    K: int = 10
    d: int = 10
    N1: int = 500
    M1: int = 4000
    gamma_l: float = 100.0
    # gamma_u < 1 means a reversed long tail; None means "unknown": the data
    # are still generated with ``gamma_u_generating`` but the value is hidden.
    gamma_u: float | None = 100.0
    gamma_u_generating: float = 1.0
    separation: float = 3.0
    noise_sigma: float = 1.0
    test_per_class: int = 200
    seed: int = 0

    def validate(self):
        if self.K < 2:
            raise ConfigError("K must be at least 2", "dataset.K")
        if self.d < 1:
            raise ConfigError("d must be positive", "dataset.d")
        if self.gamma_l < 1:
            raise ConfigError("gamma_l must be >= 1", "dataset.gamma_l")
        if self.gamma_u is not None and self.gamma_u <= 0:
            raise ConfigError("gamma_u must be positive", "dataset.gamma_u")
        if self.separation <= 0:
            raise ConfigError("separation must be positive", "dataset.separation")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative", "dataset.noise_sigma")
        if self.N1 < 1 or self.M1 < 0 or self.test_per_class < 1:
            raise ConfigError("sample counts must be positive", "dataset.N1")
        longtail_counts(self.N1, self.gamma_l, self.K)
        return self


@dataclass
class AugmentSpec:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.4
    strong_drop_prob: float = 0.2

    def validate(self):
        if not 0.0 <= self.strong_drop_prob < 1.0:
            raise ConfigError("strong_drop_prob must lie in [0, 1)", "augment.strong_drop_prob")
        if self.weak_sigma < 0 or self.weak_sigma > self.strong_sigma:
            raise ConfigError("need 0 <= weak_sigma <= strong_sigma", "augment.weak_sigma")
        return self


@dataclass
class DatasetBundle:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    # Only metrics.pl_quality reads this; learners receive ``unlabeled_x`` alone.
    unlabeled_hidden_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    N_counts: list[int]
    M_counts: list[int]
    class_means: np.ndarray


def _truncate(v: float) -> int:
    # tolerance keeps exact endpoints such as 1500/100 from flooring to 14
    return int(math.floor(v + 1e-9))


def longtail_counts(head: int, gamma: float, K: int) -> list[int]:
    """Per-class counts ``floor(head * gamma ** (-(k-1)/(K-1)))`` for k = 1..K."""
    if K < 2:
        raise ConfigError("K must be at least 2", "dataset.K")
    if gamma <= 0:
        raise ConfigError("imbalance ratio must be positive", "dataset.gamma")
    counts = [_truncate(head * gamma ** (-k / (K - 1))) for k in range(K)]
    if min(counts) < 1:
        raise InfeasibleSpecError(f"head={head}, gamma={gamma} leaves an empty class: {counts}")
    return counts


def unlabeled_counts(M1: int, gamma_u: float, K: int) -> list[int]:
    """Unlabeled counts; ``gamma_u < 1`` flips the tail so the last class is largest."""
    if gamma_u >= 1:
        return longtail_counts(M1, gamma_u, K)
    return longtail_counts(M1, 1.0 / gamma_u, K)[::-1]


def class_means(K: int, d: int, separation: float, seed: int) -> np.ndarray:
    if d >= K:
        # scaled basis vectors under a seeded rotation
        q, _ = np.linalg.qr(np.random.default_rng([seed, 17]).normal(size=(d, d)))
        return separation * q[:, :K].T
    if d == 2:
        angles = 2 * np.pi * np.arange(K) / K
        return separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # d < K, d > 2: seeded directions, spread by a few repulsion sweeps
    rng = np.random.default_rng([seed, 17])
    v = rng.normal(size=(K, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(200):
        diff = v[:, None, :] - v[None, :, :]
        dist2 = np.sum(diff**2, axis=-1) + np.eye(K)
        v += 0.01 * np.sum(diff / dist2[..., None] ** 1.5, axis=1)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return separation * v


def _sample(rng, means, counts, sigma):
    ys = np.repeat(np.arange(len(counts)), counts)
    xs = means[ys] + sigma * rng.normal(size=(len(ys), means.shape[1]))
    return xs, ys


def generate_dataset(spec: DatasetSpec, seed: int | None = None) -> DatasetBundle:
    spec.validate()
    seed = spec.seed if seed is None else seed
    gamma_u = spec.gamma_u if spec.gamma_u is not None else spec.gamma_u_generating
    N = longtail_counts(spec.N1, spec.gamma_l, spec.K)
    M = unlabeled_counts(spec.M1, gamma_u, spec.K) if spec.M1 > 0 else [0] * spec.K
    means = class_means(spec.K, spec.d, spec.separation, seed)
    rng = np.random.default_rng([seed, 1])
    lx, ly = _sample(rng, means, N, spec.noise_sigma)
    ux, uy = _sample(rng, means, M, spec.noise_sigma)
    tx, ty = _sample(rng, means, [spec.test_per_class] * spec.K, spec.noise_sigma)
    perm = rng.permutation(len(uy))
    return DatasetBundle(lx, ly, ux[perm], uy[perm], tx, ty, N, M, means)


def augment(x, spec: AugmentSpec, mode: str, seed=None, rng: np.random.Generator | None = None):
    """Weak view: additive Gaussian noise. Strong view: larger noise, then
    per-coordinate dropout. Works on a single vector or a batch of rows."""
    if mode not in ("weak", "strong"):
        raise ConfigError(f"unknown augmentation mode {mode!r}", "augment.mode")
    if rng is None:
        rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if mode == "weak":
        return x + spec.weak_sigma * rng.normal(size=x.shape)
    out = x + spec.strong_sigma * rng.normal(size=x.shape)
    keep = rng.random(size=x.shape) >= spec.strong_drop_prob
    return out * keep


def dump_csv(bundle: DatasetBundle, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for split, xs, ys in (
            ("labeled", bundle.labeled_x, bundle.labeled_y),
            ("unlabeled", bundle.unlabeled_x, bundle.unlabeled_hidden_y),
            ("test", bundle.test_x, bundle.test_y),
        ):
            for x, y in zip(xs, ys):
                w.writerow([split, int(y), *(repr(float(v)) for v in x)])


def load_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            xs, ys = rows.setdefault(rec[0], ([], []))
            ys.append(int(rec[1]))
            xs.append([float(v) for v in rec[2:]])
    return {k: (np.array(xs), np.array(ys, dtype=int)) for k, (xs, ys) in rows.items()}
