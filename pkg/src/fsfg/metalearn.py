"""Contrastive meta-learning and the prototype baseline.

Both losses use temperature-scaled cosine similarity. The contrastive loss
treats every support and query representation as an anchor against all other
samples in the episode; the prototype loss classifies queries against per-class
mean support representations.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .tensor import (EPS_NORM, DegenerateVectorError, Tensor, cosine_matrix, cosine_similarity,
                     getitem, log_sum_exp, stack, tsum)

DEFAULT_TEMPERATURE = 0.1


class MetaContractError(ValueError):
    pass


@dataclass
class LabeledRep:
    rep: Tensor
    local_label: int
    origin: str = "support"   # "support" or "query"


@dataclass(frozen=True)
class PairCounts:
    n_pos: int
    n_neg: int

    @property
    def n_all(self) -> int:
        return self.n_pos + self.n_neg

    def as_tuple(self) -> tuple:
        return (self.n_pos, self.n_neg, self.n_all)


def _check_tau(tau: float):
    if not tau > 0:
        raise MetaContractError(f"temperature must be positive, got {tau}")


def _stack_reps(items: Sequence[LabeledRep]) -> tuple[Tensor, np.ndarray]:
    reps = stack([it.rep for it in items], axis=0)
    labels = np.array([it.local_label for it in items], dtype=np.int64)
    return reps, labels


# ----------------------------------------------------------------- losses


def cml_loss(items: Sequence[LabeledRep], tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Supervised contrastive loss over all samples of an episode.

    For anchor i with positives P(i) in A \\ {i}:
    -1/|P(i)| * sum_j log softmax_{k != i}(cos(R_i, R_k)/tau)[j], summed over anchors.
    The softmax denominator runs over every other sample, positives included.
    """
    if len(items) < 2:
        raise MetaContractError("contrastive loss needs at least two samples")
    reps, labels = _stack_reps(items)
    return cml_loss_matrix(reps, labels, tau)


def cml_loss_matrix(reps: Tensor, labels, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """:func:`cml_loss` on a stacked ``(n, d)`` representation matrix."""
    _check_tau(tau)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n < 2:
        raise MetaContractError("contrastive loss needs at least two samples")
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(n, dtype=bool)
    pos = same & off
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        raise MetaContractError(f"anchor {int(np.argmin(npos))} has no positive in the episode")
    sim = cosine_matrix(reps, reps) / tau
    # drop the diagonal: (n, n-1) logits for each anchor
    rows = np.repeat(np.arange(n), n - 1)
    cols = np.nonzero(off)[1]
    logits = getitem(sim, (rows, cols)).reshape(n, n - 1)
    log_prob = logits - log_sum_exp(logits, axis=1).reshape(n, 1)
    weights = pos[off].reshape(n, n - 1) / npos[:, None]
    return -tsum(log_prob * Tensor(weights))


def protonet_prototypes(support: Sequence[LabeledRep], n_way: int | None = None) -> list:
    """Per-class mean of support representations (unnormalised)."""
    labels = [it.local_label for it in support]
    n_way = n_way if n_way is not None else (max(labels) + 1 if labels else 0)
    protos = []
    for c in range(n_way):
        members = [it.rep for it in support if it.local_label == c]
        if not members:
            raise MetaContractError(f"class {c} has no support samples")
        protos.append(tsum(stack(members, axis=0), axis=0) / float(len(members)))
    return protos


def _check_prototypes(protos: Sequence[Tensor]):
    for j, p in enumerate(protos):
        if np.linalg.norm(p.data) <= EPS_NORM:
            raise DegenerateVectorError(f"prototype {j} is degenerate (norm below 1e-12)")


def protonet_loss(queries: Sequence[LabeledRep], prototypes: Sequence[Tensor],
                  tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Cross-entropy of queries against cosine-to-prototype logits, summed over queries."""
    _check_tau(tau)
    _check_prototypes(prototypes)
    q, labels = _stack_reps(queries)
    return _protonet_ce(q, labels, stack(list(prototypes), axis=0), tau)


def _protonet_ce(q: Tensor, labels: np.ndarray, protos: Tensor, tau: float) -> Tensor:
    logits = cosine_matrix(q, protos) / tau
    picked = getitem(logits, (np.arange(len(labels)), labels))
    return tsum(log_sum_exp(logits, axis=1) - picked)


def protonet_loss_matrix(reps: Tensor, labels, n_support: int, tau: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Prototype loss when rows ``[:n_support]`` are supports and the rest queries."""
    _check_tau(tau)
    labels = np.asarray(labels, dtype=np.int64)
    s_lab, q_lab = labels[:n_support], labels[n_support:]
    n_way = int(s_lab.max()) + 1
    protos = []
    for c in range(n_way):
        members = np.nonzero(s_lab == c)[0]
        if len(members) == 0:
            raise MetaContractError(f"class {c} has no support samples")
        protos.append(tsum(getitem(reps, members), axis=0) / float(len(members)))
    _check_prototypes(protos)
    queries = getitem(reps, np.arange(n_support, len(labels)))
    return _protonet_ce(queries, q_lab, stack(protos, axis=0), tau)


# ------------------------------------------------------------- prediction


def cml_scores(query, support: Sequence[LabeledRep], n_way: int | None = None) -> np.ndarray:
    """Per-class sum of cosine similarities between the query and each support."""
    labels = [it.local_label for it in support]
    if not labels:
        raise MetaContractError("empty support set")
    n_way = n_way if n_way is not None else max(labels) + 1
    if set(labels) != set(range(n_way)):
        raise MetaContractError("every class needs at least one support sample")
    q = query.rep if isinstance(query, LabeledRep) else query
    scores = np.zeros(n_way)
    for it in support:
        scores[it.local_label] += cosine_similarity(q, it.rep).item()
    return scores


def cml_predict(query, support: Sequence[LabeledRep], n_way: int | None = None) -> tuple[int, np.ndarray]:
    scores = cml_scores(query, support, n_way)
    return int(np.argmax(scores)), scores


def protonet_predict(query, prototypes: Sequence[Tensor]) -> tuple[int, np.ndarray]:
    _check_prototypes(prototypes)
    q = query.rep if isinstance(query, LabeledRep) else query
    scores = np.array([cosine_similarity(q, p).item() for p in prototypes])
    return int(np.argmax(scores)), scores


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n <= EPS_NORM):
        raise DegenerateVectorError(f"row {int(np.argmax(n.ravel() <= EPS_NORM))} is degenerate")
    return x / n


def _pairwise_cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # elementwise product + reduction, so each entry is independent of matrix layout
    return (_unit_rows(a)[:, None, :] * _unit_rows(b)[None, :, :]).sum(axis=-1)


def batch_cml_predict(queries: np.ndarray, support: np.ndarray, support_labels: np.ndarray,
                      n_way: int) -> np.ndarray:
    """Vectorised summed-cosine prediction for many queries at once."""
    sims = _pairwise_cos(queries, support)
    scores = np.stack([sims[:, support_labels == c].sum(axis=1) for c in range(n_way)], axis=1)
    return np.argmax(scores, axis=1)


def batch_protonet_predict(queries: np.ndarray, support: np.ndarray, support_labels: np.ndarray,
                           n_way: int) -> np.ndarray:
    protos = np.stack([support[support_labels == c].sum(axis=0) / np.count_nonzero(support_labels == c)
                       for c in range(n_way)])
    for j, p in enumerate(protos):
        if np.linalg.norm(p) <= EPS_NORM:
            raise DegenerateVectorError(f"prototype {j} is degenerate (norm below 1e-12)")
    sims = _pairwise_cos(queries, protos)
    return np.argmax(sims, axis=1)


# ------------------------------------------------------------- pair counts


def pair_counts_ce(n: int, k: int, q: int) -> PairCounts:
    return PairCounts(n_pos=n * q, n_neg=n * q * (n - 1))


def pair_counts_cml(n: int, k: int, q: int) -> PairCounts:
    m = k + q
    return PairCounts(n_pos=n * m * (m - 1), n_neg=n * (n - 1) * m * m)


def pair_counts_bruteforce(n: int, k: int, q: int, mode: str) -> PairCounts:
    """Count (anchor, target) pairs by literally enumerating an episode."""
    support = [(c, "s") for c in range(n) for _ in range(k)]
    query = [(c, "q") for c in range(n) for _ in range(q)]
    pos = neg = 0
    if mode == "ce":
        for (cq, _), proto in product(query, range(n)):
            pos += cq == proto
            neg += cq != proto
    elif mode == "cml":
        episode = support + query
        for i, j in product(range(len(episode)), repeat=2):
            if i == j:
                continue
            same = episode[i][0] == episode[j][0]
            pos += same
            neg += not same
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return PairCounts(n_pos=int(pos), n_neg=int(neg))


def pair_count_rows(grid: Sequence[tuple]) -> list:
    """JSON-ready rows comparing closed form and enumeration for each (N, K, Q)."""
    rows = []
    for n, k, q in grid:
        for method, closed in (("ce", pair_counts_ce), ("cml", pair_counts_cml)):
            a = closed(n, k, q)
            b = pair_counts_bruteforce(n, k, q, method)
            rows.append({"N": n, "K": k, "Q": q, "method": method, "n_pos": a.n_pos,
                         "n_neg": a.n_neg, "n_all": a.n_all, "brute_force": list(b.as_tuple()),
                         "match": a == b})
    return rows
