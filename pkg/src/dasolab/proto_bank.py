"""Per-class feature queues and the cosine-similarity classifier built on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateFeatureError, InputError, ShapeError, WarmupIncomplete
from .nn_core import log_softmax


@dataclass(frozen=True)
class FeatureBatch:
    """Features tagged with the encoder that produced them."""

    features: np.ndarray
    from_ema: bool


class PrototypeBank:
    """K ring-buffer FIFO queues of feature vectors.

    With ``capacities=None`` every queue holds ``L`` entries (balanced bank).
    Passing explicit per-class capacities gives the frequency-proportional
    variant used as an ablation arm.
    """

    def __init__(self, K: int, D: int, L: int = 256, T_proto: float = 0.05,
                 capacities=None, require_ema: bool = True):
        if L < 1:
            raise ContractError("queue capacity must be positive")
        if T_proto <= 0:
            raise ContractError("T_proto must be positive")
        self.K, self.D, self.L, self.T_proto = K, D, L, T_proto
        self.capacities = np.full(K, L, dtype=int) if capacities is None else np.asarray(capacities, dtype=int)
        if self.capacities.shape != (K,) or self.capacities.min() < 1:
            raise ContractError("need one positive capacity per class")
        self.require_ema = require_ema
        self._buf = np.zeros((K, int(self.capacities.max()), D))
        self._count = np.zeros(K, dtype=int)  # entries held
        self._head = np.zeros(K, dtype=int)  # slot of the oldest entry
        self._protos = None

    def copy(self) -> "PrototypeBank":
        other = PrototypeBank.__new__(PrototypeBank)
        other.__dict__.update(self.__dict__)
        other.capacities = self.capacities.copy()
        other._buf = self._buf.copy()
        other._count = self._count.copy()
        other._head = self._head.copy()
        other._protos = None
        return other

    def queue(self, k: int) -> np.ndarray:
        """Contents of queue ``k``, oldest first."""
        cap = self.capacities[k]
        idx = (self._head[k] + np.arange(self._count[k])) % cap
        return self._buf[k, idx].copy()

    def lengths(self) -> np.ndarray:
        return self._count.copy()

    @property
    def warm(self) -> bool:
        return bool(np.all(self._count > 0))

    def _push(self, k: int, z: np.ndarray):
        cap = self.capacities[k]
        if self._count[k] < cap:
            self._buf[k, (self._head[k] + self._count[k]) % cap] = z
            self._count[k] += 1
        else:
            self._buf[k, self._head[k]] = z
            self._head[k] = (self._head[k] + 1) % cap


def enqueue_labeled(bank: PrototypeBank, features: FeatureBatch, labels) -> PrototypeBank:
    if not isinstance(features, FeatureBatch):
        raise ContractError("features must be wrapped in a FeatureBatch")
    if bank.require_ema and not features.from_ema:
        raise ContractError("prototype features must come from the EMA encoder")
    feats = np.asarray(features.features, dtype=np.float64)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if len(labels) == 0:
        return bank
    if feats.ndim != 2 or feats.shape != (len(labels), bank.D):
        raise ShapeError(f"features {feats.shape} do not match {len(labels)} labels of dim {bank.D}")
    if labels.min() < 0 or labels.max() >= bank.K:
        raise InputError(f"labels must lie in [0, {bank.K})")
    for z, k in zip(feats, labels):
        bank._push(int(k), z)
    bank._protos = None
    return bank


def prototypes(bank: PrototypeBank) -> list[np.ndarray | None]:
    """Mean of every queue; ``None`` marks a class whose queue is empty."""
    if bank._protos is None:
        sums = bank._buf.sum(axis=1)
        out = []
        for k in range(bank.K):
            n = bank._count[k]
            if n == 0:
                out.append(None)
            elif n == bank.capacities[k]:
                out.append(sums[k] / n)
            else:
                out.append(bank.queue(k).mean(axis=0))
        bank._protos = out
    return list(bank._protos)


def prototype_matrix(bank: PrototypeBank) -> np.ndarray:
    """Prototypes stacked into a (K, D) array; raises until every queue is warm."""
    protos = prototypes(bank)
    if any(p is None for p in protos):
        raise WarmupIncomplete("some class queues are still empty")
    return np.stack(protos)


def semantic_probs(z, bank: PrototypeBank) -> np.ndarray:
    """softmax_k(cos(z, c_k) / T_proto) for one feature vector or a batch."""
    C = prototype_matrix(bank)
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.linalg.norm(C, axis=1) == 0):
        raise DegenerateFeatureError("a prototype has zero norm")
    if np.any(np.linalg.norm(z, axis=-1) == 0):
        raise DegenerateFeatureError("query feature has zero norm")
    return np.exp(log_softmax(cosine_logits(z, C, bank.T_proto)))


def cosine_logits(z: np.ndarray, C: np.ndarray, T_proto: float) -> np.ndarray:
    zn = z / np.linalg.norm(z, axis=-1, keepdims=True)
    cn = C / np.linalg.norm(C, axis=-1, keepdims=True)
    return (zn @ cn.T) / T_proto


def semantic_probs_batch(z: np.ndarray, C: np.ndarray, T_proto: float):
    """Batched semantic pseudo-labels that tolerate dead (all-zero) features.

    Returns ``(q, valid)``; rows with a zero-norm feature get a uniform ``q``
    and ``valid = False``.
    """
    norms = np.linalg.norm(z, axis=1)
    valid = norms > 0
    q = np.full((len(z), C.shape[0]), 1.0 / C.shape[0])
    if valid.any():
        q[valid] = np.exp(log_softmax(cosine_logits(z[valid], C, T_proto)))
    return q, valid
