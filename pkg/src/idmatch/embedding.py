"""Identity embeddings and the reference/generation similarity graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "DomainError",
    "FaceEmbedding",
    "SimilarityMatrix",
    "as_matrix",
    "build_similarity_matrix",
    "cosine_similarity",
    "normalize",
    "normalize_rows",
]

UNIT_TOL = 1e-9


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


def _as_vector(v) -> np.ndarray:
    if isinstance(v, FaceEmbedding):
        return v.vector
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DomainError(f"expected a 1-d vector, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise DomainError(f"vector dimension must be >= 2, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("vector has non-finite components")
    return arr


@dataclass(frozen=True)
class FaceEmbedding:
    """Unit-norm identity vector.

    ``source`` is a free-form tag such as ``"ref:0"`` or ``"gen:2"``.
    """

    vector: np.ndarray
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] < 2:
            raise DomainError(f"embedding must be a 1-d vector of dim >= 2, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("embedding has non-finite components")
        norm = np.linalg.norm(v)
        if abs(norm - 1.0) > UNIT_TOL:
            raise DomainError(f"embedding is not unit norm (|v| = {norm!r})")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FaceEmbedding):
            return NotImplemented
        return np.array_equal(self.vector, other.vector)

    def __hash__(self):
        return hash(self.vector.tobytes())


EmbeddingList = Union[Sequence[FaceEmbedding], np.ndarray]


def normalize(v, source: str | None = None) -> FaceEmbedding:
    """Scale ``v`` to unit length."""
    arr = _as_vector(v)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return FaceEmbedding(arr / norm, source)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise unit normalization of a 2-d array; zero rows raise."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero vector")
    return x / norms


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``, clipped to [-1, 1]."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DomainError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def as_matrix(embs: EmbeddingList, dim: int | None = None) -> np.ndarray:
    """Stack embeddings into a ``(k, d)`` array of unit rows.

    Accepts a sequence of :class:`FaceEmbedding` or a 2-d array whose rows
    are normalized here. An empty sequence needs ``dim`` to get a shape.
    """
    if isinstance(embs, np.ndarray):
        arr = np.asarray(embs, dtype=np.float64)
        if arr.ndim != 2:
            raise DomainError(f"expected a (k, d) array, got shape {arr.shape}")
        if arr.shape[0] == 0:
            return arr.reshape(0, arr.shape[1] if dim is None else dim)
        if not np.all(np.isfinite(arr)):
            raise DomainError("embedding array has non-finite entries")
        return normalize_rows(arr)
    embs = list(embs)
    if not embs:
        return np.zeros((0, dim or 0))
    rows = [e.vector if isinstance(e, FaceEmbedding) else normalize(e).vector for e in embs]
    dims = {r.shape[0] for r in rows}
    if len(dims) != 1:
        raise DomainError(f"embeddings have mixed dimensions {sorted(dims)}")
    return np.vstack(rows)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise cosine similarities, rows = references, columns = generations."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise DomainError(f"similarity matrix must be 2-d, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise DomainError("similarity matrix has non-finite entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def m_refs(self) -> int:
        return self.entries.shape[0]

    @property
    def n_gens(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def T(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.entries.T)

    def scaled(self, c: float) -> "SimilarityMatrix":
        return SimilarityMatrix(self.entries * c)


def build_similarity_matrix(refs: EmbeddingList, gens: EmbeddingList) -> SimilarityMatrix:
    """Cosine similarity of every reference against every generated face.

    Entry ``(k, j)`` is ``cos(refs[k], gens[j])``. An empty ``gens`` gives an
    ``M x 0`` matrix.
    """
    r = as_matrix(refs)
    if r.shape[0] < 1:
        raise DomainError("at least one reference embedding is required")
    g = as_matrix(gens, dim=r.shape[1])
    if g.shape[0] and g.shape[1] != r.shape[1]:
        raise DomainError(f"dimension mismatch: refs d={r.shape[1]}, gens d={g.shape[1]}")
    if g.shape[0] == 0:
        return SimilarityMatrix(np.zeros((r.shape[0], 0)))
    return SimilarityMatrix(np.clip(r @ g.T, -1.0, 1.0))
