"""Embedding containers, distance metrics, and task preprocessing.

All vectors are float64 internally regardless of on-disk precision. The
containers are immutable after construction (arrays are marked read-only)
so tasks can be shared across workers without copying.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-12


class DegenerateVectorWarning(UserWarning):
    """A vector with (near-)zero norm was normalized or clamped."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    """A batch of same-dimension embedding vectors with optional labels.

    vectors: (n, dim) float64. labels: (n,) int64 class ids in
    [0, class_count), or None for unlabeled sets.
    """

    vectors: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = 0

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 1:
            raise ValueError(f"vectors must be (n, dim) with dim >= 1, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("embedding vectors must be finite (no NaN/Inf)")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64)
            if lab.shape != (v.shape[0],):
                raise ValueError("labels length must equal vector count")
            if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
                raise ValueError("labels must lie in [0, class_count)")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class FewShotTask:
    """One episode: labeled support set and unlabeled query set.

    True query labels are retained in a separate field so that only the
    scoring harness can read them; classifiers and adaptation see the
    query set strictly unlabeled.
    """

    support: EmbeddingSet
    query: EmbeddingSet
    query_labels: np.ndarray
    n_way: int
    k_shot: int
    query_counts: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.support.labels is None:
            raise ValueError("support set must be labeled")
        if self.query.labels is not None:
            raise ValueError("query set must not carry labels (kept in query_labels)")
        if self.support.dim != self.query.dim:
            raise ValueError("support/query dim mismatch")
        if len(self.support) != self.n_way * self.k_shot:
            raise ValueError("support must hold exactly n_way*k_shot vectors")
        counts = np.bincount(self.support.labels, minlength=self.n_way)
        if counts.size != self.n_way or (counts != self.k_shot).any():
            raise ValueError("support must hold exactly k_shot vectors per class")
        qc = tuple(int(c) for c in self.query_counts)
        if any(c < 0 for c in qc):
            raise ValueError("query counts must be >= 0")
        if sum(qc) != len(self.query):
            raise ValueError("query_counts must sum to query vector count")
        object.__setattr__(self, "query_counts", qc)
        ql = np.array(self.query_labels, dtype=np.int64)
        if ql.shape != (len(self.query),):
            raise ValueError("query_labels length must equal query count")
        if ql.size and (ql.min() < 0 or ql.max() >= self.n_way):
            raise ValueError("query_labels must lie in [0, n_way)")
        ql.setflags(write=False)
        object.__setattr__(self, "query_labels", ql)

    @property
    def dim(self) -> int:
        return self.support.dim


@dataclass(frozen=True)
class ShiftTerm:
    """Support-mean minus query-mean correction added to query vectors."""

    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", _freeze(self.delta))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine distance 1 - a.b/(|a||b|) with norms clamped at EPS_NORM."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = max(float(np.linalg.norm(a)), EPS_NORM)
    nb = max(float(np.linalg.norm(b)), EPS_NORM)
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale v to unit norm; zero vectors map to zero with a degeneracy warning."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < EPS_NORM:
        warnings.warn("normalizing a (near-)zero vector", DegenerateVectorWarning, stacklevel=2)
        n = EPS_NORM
    return v / n


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise l2 normalization with the same clamp/warning as l2_normalize."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if (norms < EPS_NORM).any():
        warnings.warn(
            f"normalizing {int((norms < EPS_NORM).sum())} (near-)zero vector(s)",
            DegenerateVectorWarning,
            stacklevel=2,
        )
    return m / np.maximum(norms, EPS_NORM)[:, None]


def compute_shift(support: EmbeddingSet, query: EmbeddingSet) -> ShiftTerm:
    """Mean(support) - mean(query), computed on raw (pre-centering) embeddings."""
    if len(support) == 0 or len(query) == 0:
        raise ValueError("compute_shift requires non-empty support and query sets")
    if support.dim != query.dim:
        raise ValueError("support/query dim mismatch")
    return ShiftTerm(support.vectors.mean(axis=0) - query.vectors.mean(axis=0))


def preprocess_task(task: FewShotTask, use_shift: bool = False) -> FewShotTask:
    """Apply the shift -> center -> l2-normalize chain to one task.

    With use_shift, the support-minus-query mean difference is added to
    every query vector first. Then the mean over the (shifted) union of
    support and query is subtracted from all vectors, and every vector is
    l2-normalized. Degenerate vectors are flagged via warnings.
    """
    sup = task.support.vectors
    qry = task.query.vectors
    if use_shift:
        qry = qry + compute_shift(task.support, task.query).delta
    center = np.vstack([sup, qry]).mean(axis=0)
    sup = l2_normalize_rows(sup - center)
    qry = l2_normalize_rows(qry - center)
    return FewShotTask(
        support=EmbeddingSet(sup, task.support.labels, task.n_way),
        query=EmbeddingSet(qry, None, task.n_way),
        query_labels=task.query_labels,
        n_way=task.n_way,
        k_shot=task.k_shot,
        query_counts=task.query_counts,
    )
