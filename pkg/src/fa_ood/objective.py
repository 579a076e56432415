"""Classification probability, FCE / FCE-K losses and the plain CE baseline.

The FCE-K loss for one image with label ``y`` is::

    -log  exp(s_f[y]/tau) / (sum_j exp(s_f[j]/tau) + K * sum_j exp(s_o[j]/tau))

where ``s_f`` / ``s_o`` are cosines against the forced / original text
features. All log-sum-exp evaluations subtract the max over the concatenated
logits; ``K`` enters as ``log K`` added to the original logits, and the
original logits are dropped entirely when ``K == 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau!r}")


def _check_k(K: float) -> None:
    if not K >= 0:
        raise ConfigError(f"forced coefficient K must be >= 0, got {K!r}")


@dataclass(frozen=True)
class SimilarityPair:
    s_f: np.ndarray
    s_o: np.ndarray
    label: int

    def __post_init__(self):
        s_f = np.asarray(self.s_f, dtype=np.float64)
        s_o = np.asarray(self.s_o, dtype=np.float64)
        if s_f.ndim != 1 or s_f.shape != s_o.shape:
            raise DimensionError(f"s_f {s_f.shape} and s_o {s_o.shape} must be equal-length vectors")
        object.__setattr__(self, "s_f", s_f)
        object.__setattr__(self, "s_o", s_o)

    @property
    def num_classes(self) -> int:
        return self.s_f.shape[0]


def class_probabilities(sims, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``sims / tau`` along the last axis (max-subtracted)."""
    _check_tau(tau)
    x = np.asarray(sims, dtype=np.float64) / tau
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _dual_logits(s_f: np.ndarray, s_o: np.ndarray, tau: float, K: float) -> np.ndarray:
    forced = s_f / tau
    if K == 0:
        return forced
    return np.concatenate([forced, s_o / tau + np.log(K)], axis=-1)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _check_label(label: int, n_cls: int) -> None:
    if not 0 <= label < n_cls:
        raise IndexError(f"label {label} out of range [0, {n_cls})")


def fce_k_loss(pair: SimilarityPair, tau: float = 1.0, K: float = 3) -> float:
    _check_tau(tau)
    _check_k(K)
    _check_label(pair.label, pair.num_classes)
    logits = _dual_logits(pair.s_f, pair.s_o, tau, K)
    return float(_logsumexp(logits) - pair.s_f[pair.label] / tau)


def fce_loss(pair: SimilarityPair, tau: float = 1.0) -> float:
    return fce_k_loss(pair, tau, 1)


def ce_loss(pair: SimilarityPair, tau: float = 1.0) -> float:
    """Standard cross-entropy over the forced similarities only."""
    _check_label(pair.label, pair.num_classes)
    return float(-np.log(class_probabilities(pair.s_f, tau)[pair.label]))


def batch_loss(pairs, tau: float = 1.0, K: float = 3) -> float:
    """Mean FCE-K loss over a non-empty batch."""
    if len(pairs) == 0:
        raise ConfigError("batch_loss needs at least one sample")
    return float(np.mean([fce_k_loss(p, tau, K) for p in pairs]))


# ---------------------------------------------------------------------------
# batched forms with gradients, used by the optimiser
# ---------------------------------------------------------------------------

def _check_batch(S_f, S_o, labels):
    S_f = np.asarray(S_f, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if S_f.ndim != 2 or labels.shape != (S_f.shape[0],):
        raise DimensionError(f"S_f {S_f.shape} / labels {labels.shape} mismatch")
    if S_f.shape[0] == 0:
        raise ConfigError("empty batch")
    if labels.min() < 0 or labels.max() >= S_f.shape[1]:
        raise IndexError(f"labels out of range [0, {S_f.shape[1]})")
    if S_o is not None:
        S_o = np.asarray(S_o, dtype=np.float64)
        if S_o.shape != S_f.shape:
            raise DimensionError(f"S_o {S_o.shape} != S_f {S_f.shape}")
    return S_f, S_o, labels


def fce_k_batch(S_f, S_o, labels, tau: float = 1.0, K: float = 3):
    """Per-sample FCE-K losses and d(mean loss)/dS_f.

    ``S_o`` is treated as a constant (the original prompt is frozen).
    """
    _check_tau(tau)
    _check_k(K)
    S_f, S_o, labels = _check_batch(S_f, S_o, labels)
    B, C = S_f.shape
    rows = np.arange(B)
    x = _dual_logits(S_f, S_o, tau, K)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    losses = (m[:, 0] + np.log(z[:, 0])) - S_f[rows, labels] / tau
    p = e[:, :C] / z
    p[rows, labels] -= 1.0
    return losses, p / tau / B


def ce_batch(S_f, labels, tau: float = 1.0):
    """Per-sample CE losses and d(mean loss)/dS_f, computed from the class probabilities."""
    S_f, _, labels = _check_batch(S_f, None, labels)
    B = S_f.shape[0]
    rows = np.arange(B)
    p = class_probabilities(S_f, tau)
    losses = -np.log(p[rows, labels])
    g = p.copy()
    g[rows, labels] -= 1.0
    return losses, g / tau / B
