"""Code diversity: whitespace-token n-grams, cosine similarity, agglomerative clustering."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, leaves_list, linkage
from scipy.spatial.distance import squareform

from .wasm import ordered_bodies

LINKAGES = ("average", "single", "complete")


@dataclass(frozen=True)
class NGramVector:
    counts: dict[tuple[str, ...], int]
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.counts.values()))

    def __bool__(self) -> bool:
        return bool(self.counts)


def vectorize(code: str, n: int = 3) -> NGramVector:
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = code.split()
    grams = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return NGramVector(dict(grams), n)


def wasm_tokens(bodies: Iterable[bytes]) -> str:
    """Render function bodies (in SHA-1 order) as one hex token per byte."""
    return " ".join(f"{b:02x}" for body in ordered_bodies(bodies) for b in body)


def cosine(u: NGramVector, v: NGramVector) -> float:
    if u.n != v.n:
        raise ValueError(f"n-gram sizes differ: {u.n} != {v.n}")
    if not u or not v:
        return 0.0
    small, large = (u.counts, v.counts) if len(u.counts) <= len(v.counts) else (v.counts, u.counts)
    dot = sum(c * large.get(g, 0) for g, c in small.items())
    return min(1.0, dot / (u.norm * v.norm))


def _similarities(samples: Sequence[NGramVector]) -> np.ndarray:
    k = len(samples)
    sim = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            sim[i, j] = sim[j, i] = cosine(samples[i], samples[j])
    return sim


def _linkage(sim: np.ndarray, method: str) -> np.ndarray:
    dist = 1.0 - sim
    np.fill_diagonal(dist, 0.0)
    return linkage(squareform(np.clip(dist, 0.0, 1.0), checks=False), method=method)


@dataclass(frozen=True)
class ClusterResult:
    assignments: tuple[int, ...]
    order: tuple[int, ...]
    linkage: str
    cut_similarity: float

    @property
    def n_clusters(self) -> int:
        return len(set(self.assignments))

    def sizes(self) -> list[int]:
        return sorted(Counter(self.assignments).values(), reverse=True)


def cluster(samples: Sequence[NGramVector], cut_similarity: float = 0.7, method: str = "average") -> ClusterResult:
    """Merge clusters while their linkage similarity is at least ``cut_similarity``.

    Cluster ids are dense from 0, numbered by first appearance in input order.
    """
    if not 0.0 <= cut_similarity <= 1.0:
        raise ValueError("cut_similarity must be within [0, 1]")
    if method not in LINKAGES:
        raise ValueError(f"unknown linkage {method!r}")
    if not samples:
        raise ValueError("at least one sample is required")
    if len(samples) == 1:
        return ClusterResult((0,), (0,), method, cut_similarity)
    z = _linkage(_similarities(samples), method)
    # fcluster keeps merges with distance <= t; nudge so similarity == cut still merges
    raw = fcluster(z, t=1.0 - cut_similarity + 1e-12, criterion="distance")
    relabel: dict[int, int] = {}
    assignments = tuple(relabel.setdefault(c, len(relabel)) for c in raw)
    return ClusterResult(assignments, tuple(int(i) for i in leaves_list(z)), method, cut_similarity)


def similarity_matrix(samples: Sequence[NGramVector], method: str = "average") -> tuple[np.ndarray, list[int]]:
    """Pairwise cosine matrix with rows and columns in dendrogram leaf order."""
    if not samples:
        raise ValueError("at least one sample is required")
    sim = _similarities(samples)
    if len(samples) == 1:
        return sim, [0]
    order = [int(i) for i in leaves_list(_linkage(sim, method))]
    return sim[np.ix_(order, order)], order
