"""Identity rewards: single-reference cosine reward and the matching reward.

The matching reward scores every reference/generation pair, weighting pairs
in the optimal assignment by ``lambda1 > 0`` and every other pair by
``lambda2 < 0``, normalized by ``M * N``. Gradients treat the assignment as
a constant.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .assignment import Assignment, hungarian_match
from .embedding import DomainError, SimilarityMatrix, as_matrix, build_similarity_matrix, cosine_similarity

__all__ = [
    "NoFaceError",
    "RewardConfig",
    "mimr",
    "mimr_and_gradient",
    "mimr_gradient",
    "mimr_weights",
    "reward_to_loss",
    "similarity_backward",
    "sir",
]

logger = logging.getLogger(__name__)

FALLBACKS = ("diffusion_only", "fixed_penalty")


class NoFaceError(DomainError):
    """The generated sample contains no detected face."""


@dataclass(frozen=True)
class RewardConfig:
    """Reward weights and the policy for samples without faces.

    ``pretrain_weight`` scales the diffusion loss in the combined objective.
    With ``no_face_fallback="fixed_penalty"`` a faceless sample receives the
    constant reward ``-no_face_penalty`` (no gradient).
    """

    lambda1: float = 1.0
    lambda2: float = -1.0
    pretrain_weight: float = 1.0
    no_face_fallback: str = "diffusion_only"
    no_face_penalty: float = 1.0

    def __post_init__(self):
        if not self.lambda1 > 0:
            raise DomainError(f"lambda1 must be > 0, got {self.lambda1}")
        if not self.lambda2 < 0:
            raise DomainError(f"lambda2 must be < 0, got {self.lambda2}")
        if self.pretrain_weight < 0:
            raise DomainError(f"pretrain_weight must be >= 0, got {self.pretrain_weight}")
        if self.no_face_fallback not in FALLBACKS:
            raise DomainError(f"no_face_fallback must be one of {FALLBACKS}, got {self.no_face_fallback!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        return cls(**d)


def sir(gen, ref) -> float:
    """Cosine similarity between one generated face and one reference."""
    return cosine_similarity(gen, ref)


def reward_to_loss(r: float) -> float:
    return -r


def mimr_weights(a: Assignment, m: int, n: int, cfg: RewardConfig) -> np.ndarray:
    """Partial derivatives of the matching reward w.r.t. each similarity."""
    w = np.full((m, n), cfg.lambda2, dtype=np.float64)
    for k, j in a.pairs:
        w[k, j] = cfg.lambda1
    return w / (m * n)


def mimr(s, a: Assignment, cfg: RewardConfig) -> float:
    """Matching reward for similarity matrix ``s`` under assignment ``a``."""
    e = s.entries if isinstance(s, SimilarityMatrix) else SimilarityMatrix(s).entries
    m, n = e.shape
    if n == 0:
        raise NoFaceError("no generated face: matching reward undefined")
    if m == 0:
        raise DomainError("matching reward needs at least one reference")
    for k, j in a.pairs:
        if not (0 <= k < m and 0 <= j < n):
            raise DomainError(f"assignment pair {(k, j)} out of range for {m}x{n} matrix")
    return float(np.sum(mimr_weights(a, m, n, cfg) * e))


def similarity_backward(refs, gens_raw: np.ndarray, d_e: np.ndarray) -> np.ndarray:
    """Push upstream sensitivities through cosine similarity.

    Returns the gradient of ``sum(d_e * cos(refs[k], gens_raw[j]))`` with
    respect to the unnormalized generated vectors, shape ``(N, d)``.
    """
    r = as_matrix(refs)
    g = np.asarray(gens_raw, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("zero-norm generated embedding")
    g_hat = g / norms
    cos = r @ g_hat.T
    # d cos(r, g) / d g = (r - cos * g_hat) / |g|
    pulled = d_e.T @ r
    radial = np.sum(d_e * cos, axis=0)[:, None] * g_hat
    return (pulled - radial) / norms


def mimr_and_gradient(refs, gens_raw: np.ndarray, cfg: RewardConfig, a: Assignment | None = None):
    """Matching reward and its gradient w.r.t. raw generated vectors.

    The assignment is computed from the current similarities unless given,
    and is held fixed for the gradient.

    Returns:
        ``(reward, grad, assignment, similarity_matrix)``.
    """
    g = np.asarray(gens_raw, dtype=np.float64)
    if g.shape[0] == 0:
        raise NoFaceError("no generated face: matching reward undefined")
    s = build_similarity_matrix(refs, g)
    if a is None:
        a = hungarian_match(s)
    r = mimr(s, a, cfg)
    grad = similarity_backward(refs, g, mimr_weights(a, s.m_refs, s.n_gens, cfg))
    return r, grad, a, s


def mimr_gradient(refs, gens_raw: np.ndarray, a: Assignment, cfg: RewardConfig) -> np.ndarray:
    """Gradient of the matching reward w.r.t. raw generated vectors, ``a`` frozen."""
    return mimr_and_gradient(refs, gens_raw, cfg, a)[1]
