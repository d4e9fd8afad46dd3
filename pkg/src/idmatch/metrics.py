"""Evaluation metrics: best-match identity similarity and confusion margin."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .embedding import DomainError, as_matrix
from .rewards import NoFaceError

__all__ = ["ConfusionReport", "ReferenceDiagnostic", "confusion_report", "id_conf", "id_sim"]

logger = logging.getLogger(__name__)

EPS = 1e-6
ID_SIM_FLOOR = -1.0


@dataclass(frozen=True)
class ReferenceDiagnostic:
    ref_index: int
    best_gen_index: int
    best_sim: float
    second_gen_index: int | None
    second_sim: float | None
    margin_term: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ConfusionReport:
    """Per-reference diagnostics plus the two aggregate metrics.

    When no face was generated ``missing_faces`` is set, ``per_reference`` is
    empty, ``id_sim`` holds the floor value -1 and ``id_conf`` is 0.
    """

    per_reference: tuple[ReferenceDiagnostic, ...]
    id_conf: float
    id_sim: float
    missing_faces: bool = False

    def to_dict(self) -> dict:
        return {
            "per_reference": [d.to_dict() for d in self.per_reference],
            "id_conf": self.id_conf,
            "id_sim": self.id_sim,
            "missing_faces": self.missing_faces,
        }


def _sims(refs, gens) -> np.ndarray:
    r = as_matrix(refs)
    if r.shape[0] == 0:
        raise DomainError("at least one reference is required")
    g = as_matrix(gens, dim=r.shape[1])
    if g.shape[0] and g.shape[1] != r.shape[1]:
        raise DomainError(f"dimension mismatch: refs d={r.shape[1]}, gens d={g.shape[1]}")
    return r @ g.T


def _margin_terms(sims: np.ndarray) -> list[ReferenceDiagnostic]:
    out = []
    m = sims.shape[1]
    for i, row in enumerate(sims):
        j1 = int(np.argmax(row))
        best = float(row[j1])
        if m == 1:
            out.append(ReferenceDiagnostic(i, j1, best, None, None, 1.0))
            continue
        rest = row.copy()
        rest[j1] = -np.inf
        j2 = int(np.argmax(rest))
        second = float(row[j2])
        term = float(np.clip(1.0 - second / max(best, EPS), 0.0, 1.0))
        out.append(ReferenceDiagnostic(i, j1, best, j2, second, term))
    return out


def id_conf(refs, gens) -> float:
    """Mean clipped relative margin between each reference's top two candidates.

    For reference ``i`` with best candidate similarity ``s1`` and runner-up
    ``s2`` the term is ``clip(1 - s2 / max(s1, 1e-6), 0, 1)``. A single
    candidate scores 1. Larger means less confusion.

    Raises:
        DomainError: no references.
        NoFaceError: no generated faces.
    """
    sims = _sims(refs, gens)
    if sims.shape[1] == 0:
        raise NoFaceError("id_conf needs at least one generated face")
    return float(np.mean([d.margin_term for d in _margin_terms(sims)]))


def id_sim(refs, gens) -> float:
    """Mean over references of the best similarity to any generated face.

    Returns the floor value -1 when nothing was generated.
    """
    sims = _sims(refs, gens)
    if sims.shape[1] == 0:
        logger.debug("id_sim: no generated face, returning floor %s", ID_SIM_FLOOR)
        return ID_SIM_FLOOR
    return float(np.mean(sims.max(axis=1)))


def confusion_report(refs, gens) -> ConfusionReport:
    sims = _sims(refs, gens)
    if sims.shape[1] == 0:
        return ConfusionReport((), 0.0, ID_SIM_FLOOR, missing_faces=True)
    diags = tuple(_margin_terms(sims))
    return ConfusionReport(
        per_reference=diags,
        id_conf=float(np.mean([d.margin_term for d in diags])),
        id_sim=float(np.mean(sims.max(axis=1))),
    )
