"""Downstream few-shot classifiers over (possibly adapted) embedding tasks.

All classifiers are pure functions of the task (plus explicit config) and
break ties toward the lower class id. The transductive BD-CSPN variant is
the only one that looks at query vectors before prediction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import EPS_NORM, DegenerateVectorWarning, EmbeddingSet, FewShotTask, preprocess_task


class MissingClassError(ValueError):
    """A class id has no support samples."""


@dataclass(frozen=True)
class Prototypes:
    """One prototype vector per class, in class-id order."""

    vectors: np.ndarray  # (n_way, dim)
    class_ids: np.ndarray  # (n_way,)


@dataclass(frozen=True)
class Prediction:
    """Predicted class id per query, with optional per-class scores."""

    labels: np.ndarray  # (n_query,)
    scores: np.ndarray | None = None  # (n_query, n_way)


def class_prototypes(support: EmbeddingSet, n_way: int) -> Prototypes:
    """Per-class centroids of the support set."""
    protos = np.empty((n_way, support.dim))
    for c in range(n_way):
        rows = support.vectors[support.labels == c]
        if rows.shape[0] == 0:
            raise MissingClassError(f"class {c} has no support samples")
        protos[c] = rows.mean(axis=0)
    return Prototypes(protos, np.arange(n_way))


def _unit_rows(m: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    if (norms < EPS_NORM).any():
        warnings.warn(f"degenerate {what} norm clamped", DegenerateVectorWarning, stacklevel=3)
    return m / np.maximum(norms, EPS_NORM)[:, None]


def nn_classify(task: FewShotTask) -> Prediction:
    """Assign each query to the Euclidean-nearest class centroid."""
    protos = class_prototypes(task.support, task.n_way).vectors
    d2 = ((task.query.vectors[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return Prediction(np.argmin(d2, axis=1), -d2)


def linear_classify(task: FewShotTask, epochs: int = 1000, lr: float = 1.0, reg: float = 1e-4) -> Prediction:
    """Multinomial logistic regression trained on the support set only.

    Full-batch gradient descent from zero init with a small l2 penalty on
    both weights and bias, which makes the optimum unique. Queries are
    classified by argmax logit.
    """
    x = task.support.vectors
    y = task.support.labels
    n, dim = x.shape
    w = np.zeros((task.n_way, dim))
    b = np.zeros(task.n_way)
    onehot = np.zeros((n, task.n_way))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        logits = x @ w.T + b
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        r = (p - onehot) / n
        gw = r.T @ x + reg * w
        gb = r.sum(axis=0) + reg * b
        w -= lr * gw
        b -= lr * gb
        if max(np.abs(gw).max(), np.abs(gb).max()) < 1e-10:
            break
    scores = task.query.vectors @ w.T + b
    return Prediction(np.argmax(scores, axis=1), scores)


def cspn_classify(task: FewShotTask) -> Prediction:
    """Assign each query to the class centroid with maximal cosine similarity."""
    protos = _unit_rows(class_prototypes(task.support, task.n_way).vectors, "prototype")
    sims = _unit_rows(task.query.vectors, "query") @ protos.T
    return Prediction(np.argmax(sims, axis=1), sims)


def bdcspn_classify(
    task: FewShotTask,
    temperature: float = 10.0,
    rounds: int = 1,
    use_shift: bool = True,
) -> Prediction:
    """CSPN with shift preprocessing and prototype rectification.

    The task is shift+center+normalize preprocessed, queries are
    pseudo-labeled by cosine similarity to the current prototypes, and each
    class prototype is replaced by the similarity-softmax-weighted mean of
    its support samples plus the queries pseudo-labeled to it. With
    rounds=0 this reduces exactly to cspn_classify on the preprocessed task.
    """
    pre = preprocess_task(task, use_shift=use_shift)
    sup = pre.support.vectors
    sup_labels = pre.support.labels
    qry = pre.query.vectors
    qry_unit = _unit_rows(qry, "query")
    protos = class_prototypes(pre.support, pre.n_way).vectors
    for _ in range(rounds):
        protos_unit = _unit_rows(protos, "prototype")
        pseudo = np.argmax(qry_unit @ protos_unit.T, axis=1)
        new_protos = np.empty_like(protos)
        for c in range(pre.n_way):
            members = np.vstack([sup[sup_labels == c], qry[pseudo == c]])
            sims = _unit_rows(members, "member") @ protos_unit[c]
            wts = np.exp(temperature * (sims - sims.max()))
            wts /= wts.sum()
            new_protos[c] = wts @ members
        protos = new_protos
    sims = qry_unit @ _unit_rows(protos, "prototype").T
    return Prediction(np.argmax(sims, axis=1), sims)
