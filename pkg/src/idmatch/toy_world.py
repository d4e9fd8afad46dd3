"""Synthetic identity universe, customization samples and toy face embedders.

Identities are unit vectors ("centers") on a hypersphere. An instance of an
identity is its center rotated by a small random angle, so ``sigma_intra``
controls intra-identity variability and ``min_sep`` the distinction between
identities.

A generated image is a composite vector of ``n_slots`` face slots laid out
as ``[presence, v_1 .. v_d]`` per slot. A slot whose presence exceeds the
detection threshold counts as a detected face.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import DomainError, FaceEmbedding, normalize, normalize_rows
from .seeding import derive_rng

__all__ = [
    "CustomizationSample",
    "InfeasibleUniverseError",
    "IdentityUniverse",
    "ToyEmbedder",
    "ToyWorld",
    "detect_faces",
    "embed",
    "load_dataset",
    "make_dataset",
    "make_embedder",
    "sample_identity_instance",
    "sample_universe",
    "save_dataset",
    "slot_presence",
    "slot_vectors",
]

DATASET_FORMAT = "idmatch-dataset/1"


class InfeasibleUniverseError(DomainError):
    pass


@dataclass(frozen=True)
class IdentityUniverse:
    centers: np.ndarray
    sigma_intra: float
    min_sep: float
    seed: int

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)
        if not self.sigma_intra < self.min_sep / 2 and c.shape[0] > 1:
            raise DomainError(
                f"sigma_intra={self.sigma_intra} must be < min_sep/2={self.min_sep / 2}"
            )

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    def pairwise_angles(self) -> np.ndarray:
        cos = np.clip(self.centers @ self.centers.T, -1.0, 1.0)
        return np.arccos(cos)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d": self.d,
            "min_sep": self.min_sep,
            "sigma_intra": self.sigma_intra,
            "seed": self.seed,
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityUniverse":
        return cls(np.asarray(d["centers"], dtype=np.float64), d["sigma_intra"], d["min_sep"], d["seed"])


def sample_universe(
    K: int, d: int, min_sep: float, sigma_intra: float, seed: int, max_attempts: int = 200_000
) -> IdentityUniverse:
    """Draw ``K`` centers with pairwise angle at least ``min_sep`` by rejection."""
    if K < 1 or d < 2:
        raise DomainError(f"need K >= 1 and d >= 2, got K={K}, d={d}")
    if sigma_intra < 0:
        raise DomainError(f"sigma_intra must be >= 0, got {sigma_intra}")
    rng = derive_rng(seed, "universe")
    max_cos = math.cos(min_sep)
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < K:
        if attempts >= max_attempts:
            raise InfeasibleUniverseError(
                f"could not place K={K} centers in d={d} with min_sep={min_sep} "
                f"after {max_attempts} attempts"
            )
        attempts += 1
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(float(v @ c) <= max_cos for c in centers):
            centers.append(v)
    return IdentityUniverse(np.vstack(centers), sigma_intra, min_sep, seed)


def rotate_toward(center: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by ``angle`` in a uniformly random tangent direction."""
    if angle == 0.0:
        return center.copy()
    u = rng.standard_normal(center.shape[0])
    u -= (u @ center) * center
    u /= np.linalg.norm(u)
    out = math.cos(angle) * center + math.sin(angle) * u
    return out / np.linalg.norm(out)


def sample_identity_instance(universe: IdentityUniverse, identity_index: int, rng: np.random.Generator) -> np.ndarray:
    """One appearance of an identity: the center jittered by a half-normal angle."""
    if not 0 <= identity_index < universe.K:
        raise DomainError(f"identity index {identity_index} out of range [0, {universe.K})")
    center = universe.centers[identity_index]
    if universe.sigma_intra == 0.0:
        return center.copy()
    angle = abs(rng.normal(0.0, universe.sigma_intra))
    return rotate_toward(center, angle, rng)


@dataclass(frozen=True)
class ToyEmbedder:
    """Frozen "recognition network": projection, optional ReLU head, normalization.

    With ``activation="relu"`` the raw embedding is ``max(P v - threshold, 0)``,
    so embeddings live in the non-negative orthant and two faces can at worst
    be unrelated (cosine 0), never opposite. With ``unit_input`` the slot
    vector is scaled to unit length first, so only its direction matters.
    """

    projection: np.ndarray
    role: str
    activation: str = "relu"
    threshold: float = 0.0
    unit_input: bool = False

    def __post_init__(self):
        p = np.array(self.projection, dtype=np.float64)
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)
        if self.activation not in ("linear", "relu"):
            raise DomainError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.projection.shape[1]

    @property
    def d_out(self) -> int:
        return self.projection.shape[0]

    def _unit(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise DomainError(f"embedder expects dim {self.d_in}, got {x.shape[-1]}")
        if not self.unit_input:
            return x, np.ones(x.shape[:-1] + (1,))
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norm < 1e-12):
            raise DomainError("cannot embed a zero slot vector")
        return x / norm, norm

    def _pre(self, x: np.ndarray) -> np.ndarray:
        return self._unit(x)[0] @ self.projection.T

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Unnormalized embeddings for rows of ``x``."""
        z = self._pre(x)
        if self.activation == "relu":
            return np.maximum(z - self.threshold, 0.0)
        return z

    def embed_many(self, x: np.ndarray) -> np.ndarray:
        return normalize_rows(self.raw(np.atleast_2d(x)))

    def pullback(self, x: np.ndarray, d_raw: np.ndarray) -> np.ndarray:
        """Map gradients w.r.t. raw embeddings of rows ``x`` back to ``x``."""
        u, norm = self._unit(x)
        if self.activation == "relu":
            d_raw = d_raw * (u @ self.projection.T > self.threshold)
        d_u = d_raw @ self.projection
        if not self.unit_input:
            return d_u
        # derivative of x / |x| is (I - u u^T) / |x|
        return (d_u - np.sum(d_u * u, axis=-1, keepdims=True) * u) / norm

    def to_dict(self) -> dict:
        return {"projection": self.projection.tolist(), "role": self.role,
                "activation": self.activation, "threshold": self.threshold,
                "unit_input": self.unit_input}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyEmbedder":
        return cls(np.asarray(d["projection"], dtype=np.float64), d["role"], d["activation"], d["threshold"],
                   bool(d.get("unit_input", False)))


def make_embedder(role: str, d_in: int, d_out: int, seed: int, distortion: float = 0.3,
                  activation: str = "relu", threshold: float = 0.0, unit_input: bool = False) -> ToyEmbedder:
    """Random projection with near-orthonormal columns, seeded per role.

    The columns of a random orthonormal ``(d_out, d_in)`` frame are perturbed
    by ``distortion`` and rescaled by ``sqrt(d_out / d_in)`` so that
    projected unit vectors have components of order ``1 / sqrt(d_in)``.
    """
    rng = derive_rng(seed, "embedder", role)
    n = max(d_in, d_out)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    base = q[:d_out, :d_in]
    noise = rng.standard_normal((d_out, d_in)) / math.sqrt(max(d_in, d_out))
    proj = (base + distortion * noise) * math.sqrt(d_out / d_in)
    return ToyEmbedder(proj, role, activation, threshold, unit_input)


def embed(slot_vector: np.ndarray, embedder: ToyEmbedder, source: str | None = None) -> FaceEmbedding:
    return normalize(embedder.raw(np.asarray(slot_vector, dtype=np.float64)), source)


def slot_presence(composite: np.ndarray, n_slots: int) -> np.ndarray:
    return np.asarray(composite).reshape(*np.shape(composite)[:-1], n_slots, -1)[..., 0]


def slot_vectors(composite: np.ndarray, n_slots: int) -> np.ndarray:
    return np.asarray(composite).reshape(*np.shape(composite)[:-1], n_slots, -1)[..., 1:]


def detect_faces(composite: np.ndarray, tau: float, n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Slots whose presence exceeds ``tau``.

    Returns:
        ``(slot_indices, vectors)``; ``vectors`` has shape ``(k, d)`` and may
        be empty.
    """
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    x = np.asarray(composite, dtype=np.float64)
    idx = np.flatnonzero(slot_presence(x, n_slots) > tau)
    return idx, slot_vectors(x, n_slots)[idx]


@dataclass(frozen=True)
class CustomizationSample:
    """One training example.

    ``identities[k]`` is the identity shown by reference ``k``;
    ``labels[s]`` is the identity placed in target slot ``s`` (-1 if empty).
    """

    prompt_code: int
    references: np.ndarray
    target: np.ndarray
    labels: tuple[int, ...]
    identities: tuple[int, ...]

    @property
    def M(self) -> int:
        return self.references.shape[0]

    def to_json(self) -> dict:
        return {
            "prompt_code": int(self.prompt_code),
            "references": self.references.tolist(),
            "target": self.target.tolist(),
            "labels": list(self.labels),
            "identities": list(self.identities),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CustomizationSample":
        return cls(
            int(d["prompt_code"]),
            np.asarray(d["references"], dtype=np.float64),
            np.asarray(d["target"], dtype=np.float64),
            tuple(int(x) for x in d["labels"]),
            tuple(int(x) for x in d.get("identities", ())),
        )


@dataclass(frozen=True)
class ToyWorld:
    """A universe together with its slot layout and the two embedders."""

    universe: IdentityUniverse
    n_slots: int
    psi: ToyEmbedder
    Psi: ToyEmbedder
    tau: float = 0.5

    @property
    def d(self) -> int:
        return self.universe.d

    @property
    def slot_width(self) -> int:
        return self.universe.d + 1

    @property
    def composite_dim(self) -> int:
        return self.n_slots * self.slot_width

    @classmethod
    def build(cls, universe: IdentityUniverse, n_slots: int, d_embed: int = 128, distortion: float = 0.3,
              activation: str = "relu", threshold: float = 0.25, tau: float = 0.5,
              unit_input: bool = True) -> "ToyWorld":
        args = (universe.d, d_embed, universe.seed, distortion, activation, threshold, unit_input)
        psi = make_embedder("reward_psi", *args)
        Psi = make_embedder("eval_Psi", *args)
        return cls(universe, n_slots, psi, Psi, tau)

    def header(self) -> dict:
        return {
            "universe": self.universe.to_dict(),
            "n_slots": self.n_slots,
            "tau": self.tau,
            "psi": self.psi.to_dict(),
            "Psi": self.Psi.to_dict(),
        }

    @classmethod
    def from_header(cls, h: dict) -> "ToyWorld":
        return cls(
            IdentityUniverse.from_dict(h["universe"]),
            int(h["n_slots"]),
            ToyEmbedder.from_dict(h["psi"]),
            ToyEmbedder.from_dict(h["Psi"]),
            float(h["tau"]),
        )


def make_dataset(
    universe: IdentityUniverse,
    n_samples: int,
    m_range: tuple[int, int],
    rng: np.random.Generator,
    n_slots: int | None = None,
) -> list[CustomizationSample]:
    """Draw customization samples.

    Each sample picks ``M`` distinct identities, one fresh instance per
    identity for the references and another for the target. The prompt code
    fixes which consecutive slots (cyclically) are occupied; the order of
    identities within them is random.
    """
    lo, hi = m_range
    if lo < 1 or hi < lo:
        raise DomainError(f"invalid M range {m_range}")
    if hi > universe.K:
        raise DomainError(f"M={hi} exceeds the number of identities K={universe.K}")
    n_slots = n_slots or hi
    if n_slots < hi:
        raise DomainError(f"n_slots={n_slots} cannot hold M={hi} identities")
    d = universe.d
    out = []
    for _ in range(n_samples):
        m = int(rng.integers(lo, hi + 1))
        ids = rng.choice(universe.K, size=m, replace=False)
        refs = np.vstack([sample_identity_instance(universe, int(i), rng) for i in ids])
        code = int(rng.integers(n_slots))
        order = rng.permutation(m)
        target = np.zeros((n_slots, d + 1))
        labels = [-1] * n_slots
        for pos, k in enumerate(order):
            s = (code + pos) % n_slots
            target[s, 0] = 1.0
            target[s, 1:] = sample_identity_instance(universe, int(ids[k]), rng)
            labels[s] = int(ids[k])
        out.append(CustomizationSample(code, refs, target.ravel(), tuple(labels), tuple(int(i) for i in ids)))
    return out


def save_dataset(path: Path, world: ToyWorld, samples: list[CustomizationSample], meta: dict | None = None) -> Path:
    """Write ``path`` (JSON lines) and ``path.header.json``."""
    path = Path(path)
    header = {"format": DATASET_FORMAT, "n_samples": len(samples), **(meta or {}), "world": world.header()}
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")
    header_path = path.with_name(path.name + ".header.json")
    header_path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return header_path


def load_dataset(path: Path) -> tuple[ToyWorld, list[CustomizationSample], dict]:
    path = Path(path)
    header = json.loads(path.with_name(path.name + ".header.json").read_text())
    if header.get("format") != DATASET_FORMAT:
        raise DomainError(f"unsupported dataset format {header.get('format')!r}")
    with open(path) as f:
        samples = [CustomizationSample.from_json(json.loads(line)) for line in f if line.strip()]
    return ToyWorld.from_header(header["world"]), samples, header
