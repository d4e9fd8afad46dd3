"""Maximum-weight bipartite matching between references and generated faces.

:func:`hungarian_match` solves the assignment with the O(n^3) shortest
augmenting path form of the Hungarian method. :func:`brute_force_match`
enumerates every injective map and exists to check it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .embedding import DomainError, SimilarityMatrix

__all__ = ["Assignment", "BRUTE_FORCE_LIMIT", "brute_force_match", "hungarian_match", "pair_weight"]

BRUTE_FORCE_LIMIT = 8


def _entries(s) -> np.ndarray:
    if isinstance(s, SimilarityMatrix):
        return s.entries
    return SimilarityMatrix(s).entries


def pair_weight(entries: np.ndarray, pairs) -> float:
    """Sum of ``entries`` over ``pairs``, accumulated in ascending pair order.

    Both solvers report weights through this function so optimal answers
    compare equal bit for bit.
    """
    total = 0.0
    for k, j in sorted(pairs):
        total += float(entries[k, j])
    return total


@dataclass(frozen=True)
class Assignment:
    """Injective partial map from reference index to generated index."""

    pairs: tuple[tuple[int, int], ...]
    total_weight: float

    def __post_init__(self):
        pairs = tuple(sorted((int(k), int(j)) for k, j in self.pairs))
        refs = [k for k, _ in pairs]
        gens = [j for _, j in pairs]
        if len(set(refs)) != len(refs) or len(set(gens)) != len(gens):
            raise DomainError(f"assignment is not injective: {pairs}")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "total_weight", float(self.total_weight))

    def __len__(self):
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in set(self.pairs)

    def ref_to_gen(self) -> dict[int, int]:
        return dict(self.pairs)

    def gen_to_ref(self) -> dict[int, int]:
        return {j: k for k, j in self.pairs}

    def mask(self, m: int, n: int) -> np.ndarray:
        """Boolean ``(m, n)`` matrix that is True on matched pairs."""
        out = np.zeros((m, n), dtype=bool)
        for k, j in self.pairs:
            out[k, j] = True
        return out

    def to_dict(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs], "total_weight": self.total_weight}


def _as_exact_integers(x: np.ndarray) -> list[list[int]]:
    """Scale a float matrix to Python integers without any rounding.

    Every finite double is ``num / 2**k``; multiplying by the largest
    denominator makes all entries integral, so the solver below runs in
    exact arithmetic and ulp-level near-ties cannot flip its answer.
    """
    ratios = [[float(v).as_integer_ratio() for v in row] for row in x]
    den = max(d for row in ratios for _, d in row)
    return [[num * (den // d) for num, d in row] for row in ratios]


def _hungarian_min(cost: np.ndarray) -> list[int]:
    """Row-to-column assignment minimizing ``cost`` for a square matrix."""
    n = cost.shape[0]
    c = _as_exact_integers(cost)
    # exceeds any reduced cost the potentials can produce
    inf = 8 * (n + 2) ** 2 * max(abs(v) for row in c for v in row) + 1
    # 1-based potentials; column 0 is a virtual sink.
    u = [0] * (n + 1)
    v = [0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = [0] * n
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian_match(s) -> Assignment:
    """Maximum-weight matching of size ``min(M, N)``.

    Rectangular inputs are padded to square with a constant strictly below
    ``min(entries) - 2``; padded pairs are dropped from the result.
    Maximization runs as minimization of the negated weights.

    Args:
        s: :class:`SimilarityMatrix` or anything convertible to a 2-d array.

    Returns:
        The optimal :class:`Assignment`. An ``M x 0`` matrix gives the empty
        assignment with weight 0.
    """
    e = _entries(s)
    m, n = e.shape
    if m == 0 or n == 0:
        return Assignment((), 0.0)
    size = max(m, n)
    weights = np.full((size, size), float(e.min()) - 3.0)
    weights[:m, :n] = e
    cols = _hungarian_min(-weights)
    pairs = [(k, cols[k]) for k in range(m) if cols[k] < n]
    return Assignment(tuple(pairs), pair_weight(e, pairs))


def brute_force_match(s) -> Assignment:
    """Exhaustive maximum-weight matching, for ``max(M, N) <= 8``.

    Enumerates injective maps of the smaller side into the larger in
    lexicographic order and keeps the first one of maximum weight.
    """
    e = _entries(s)
    m, n = e.shape
    if max(m, n) > BRUTE_FORCE_LIMIT:
        raise DomainError(
            f"brute_force_match is limited to max(M, N) <= {BRUTE_FORCE_LIMIT}, got {m}x{n}"
        )
    if m == 0 or n == 0:
        return Assignment((), 0.0)
    if m <= n:
        perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.intp)
        scores = e[np.arange(m), perms].sum(axis=1)
        best = perms[int(np.argmax(scores))]
        pairs = [(k, int(best[k])) for k in range(m)]
    else:
        perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp)
        scores = e[perms, np.arange(n)].sum(axis=1)
        best = perms[int(np.argmax(scores))]
        pairs = [(int(best[j]), j) for j in range(n)]
    return Assignment(tuple(pairs), pair_weight(e, pairs))
