"""MCM, L-MCM and GL-MCM scores over the dual prompt bank.

For one feature ``z`` the candidate set is the ``C`` forced text features
followed by the ``C`` original ones. The shared denominator is::

    sum_j exp(cos(z, t_f[j]) / tau0) + K * sum_j exp(cos(z, t_o[j]) / tau0)

and the score is the largest single-candidate mass ``exp(cos / tau0) / den``
over all ``2C`` candidates. ``K`` weights the original family in the
denominator only; ``numerator_k_weighting=True`` also applies it in the
numerator. ``K == 0`` removes the original family from both the max and the
denominator, i.e. plain single-prompt MCM. Higher scores mean "more
in-distribution".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import ImageFeatures
from .errors import ConfigError, DimensionError

OOD = -1
SCORE_KINDS = ("MCM", "GL_MCM")


@dataclass(frozen=True)
class ScoreConfig:
    tau0: float = 1.0
    K: float = 3
    score_kind: str = "MCM"
    # weight original-family candidates by K in the numerator as well
    numerator_k_weighting: bool = False
    # take the max over the forced family only (denominator unchanged)
    forced_only_max: bool = False

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ConfigError(f"tau0 must be > 0, got {self.tau0!r}")
        if not self.K >= 0:
            raise ConfigError(f"K must be >= 0, got {self.K!r}")
        kind = self.score_kind.upper().replace("-", "_")
        if kind == "GLMCM":
            kind = "GL_MCM"
        if kind not in SCORE_KINDS:
            raise ConfigError(f"score_kind must be one of {SCORE_KINDS}, got {self.score_kind!r}")
        object.__setattr__(self, "score_kind", kind)


@dataclass(frozen=True)
class ScoredSample:
    score: float
    predicted_class: int
    truth: int  # class index, or OOD (-1)


def _check_text(T_f: np.ndarray, T_o: np.ndarray, d: int) -> None:
    if T_f.ndim != 2 or T_f.shape != T_o.shape:
        raise DimensionError(f"text feature sets {T_f.shape} and {T_o.shape} must both be (C, d)")
    if T_f.shape[1] != d:
        raise DimensionError(f"image features have dim {d}, text features {T_f.shape[1]}")


def max_concept_mass(S_f: np.ndarray, S_o: np.ndarray, cfg: ScoreConfig) -> np.ndarray:
    """Largest candidate softmax mass along the last axis of the cosine arrays."""
    C = S_f.shape[-1]
    xf = S_f / cfg.tau0
    if cfg.K == 0:
        x = xf
    else:
        x = np.concatenate([xf, S_o / cfg.tau0 + np.log(cfg.K)], axis=-1)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    den = e.sum(axis=-1)
    if cfg.K == 0 or cfg.forced_only_max:
        num = e[..., :C].max(axis=-1)
    elif cfg.numerator_k_weighting:
        num = e.max(axis=-1)
    else:
        num = np.maximum(e[..., :C].max(axis=-1), e[..., C:].max(axis=-1) / cfg.K)
    return num / den


def mcm_score(z_g, T_f, T_o, cfg: ScoreConfig = ScoreConfig()):
    """MCM score of one global feature (d,) or a batch (B, d)."""
    z = np.asarray(z_g, dtype=np.float64)
    T_f = np.asarray(T_f, dtype=np.float64)
    T_o = np.asarray(T_o, dtype=np.float64)
    _check_text(T_f, T_o, z.shape[-1])
    out = max_concept_mass(z @ T_f.T, z @ T_o.T, cfg)
    return float(out) if out.ndim == 0 else out


def lmcm_score(locals_, T_f, T_o, cfg: ScoreConfig = ScoreConfig()):
    """L-MCM score: max over local features of the per-local MCM.

    ``locals_`` is (N, d) for one image or (B, N, d) for a batch.
    """
    loc = np.asarray(locals_, dtype=np.float64)
    if loc.ndim < 2 or loc.shape[-2] == 0:
        raise ConfigError("L-MCM needs at least one local feature; use MCM-only scoring (--score mcm)")
    T_f = np.asarray(T_f, dtype=np.float64)
    T_o = np.asarray(T_o, dtype=np.float64)
    _check_text(T_f, T_o, loc.shape[-1])
    out = max_concept_mass(loc @ T_f.T, loc @ T_o.T, cfg).max(axis=-1)
    return float(out) if out.ndim == 0 else out


def glmcm_score(img: ImageFeatures, T_f, T_o, cfg: ScoreConfig = ScoreConfig()) -> float:
    if img.num_locals == 0:
        raise ConfigError("GL-MCM needs local features; use MCM-only scoring (--score mcm)")
    return mcm_score(img.global_, T_f, T_o, cfg) + lmcm_score(img.locals_, T_f, T_o, cfg)


def predict_class(z_g, T_f):
    """Index of the most similar forced text feature; ties go to the lowest index."""
    z = np.asarray(z_g, dtype=np.float64)
    out = np.argmax(z @ np.asarray(T_f, dtype=np.float64).T, axis=-1)
    return int(out) if out.ndim == 0 else out


def score_batch(globals_, locals_, T_f, T_o, cfg: ScoreConfig) -> np.ndarray:
    """Scores (B,) of the kind selected by ``cfg.score_kind``."""
    s = mcm_score(globals_, T_f, T_o, cfg)
    if cfg.score_kind == "GL_MCM":
        s = s + lmcm_score(locals_, T_f, T_o, cfg)
    return np.atleast_1d(s)
