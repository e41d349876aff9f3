"""Disjoint class splits and N-way K-shot Q-query episode sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset


class SplitError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def episode_rng(seed: int, index: int, purpose: int = 0) -> np.random.Generator:
    """Independent counter-based stream for episode ``index``.

    Philox keyed from (seed, purpose, index): any episode can be drawn without
    drawing the ones before it, so parallel and serial loops agree.
    """
    ss = np.random.SeedSequence([int(seed), int(purpose), int(index)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Split:
    train_classes: list
    test_classes: list
    seed: int = 0

    def __post_init__(self):
        self.train_classes = sorted(int(c) for c in self.train_classes)
        self.test_classes = sorted(int(c) for c in self.test_classes)
        if set(self.train_classes) & set(self.test_classes):
            raise SplitError("train and test classes overlap")

    def to_dict(self) -> dict:
        return {"train_classes": self.train_classes, "test_classes": self.test_classes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(d["train_classes"], d["test_classes"], int(d.get("seed", 0)))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "Split":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_split(dataset: Dataset, test_fraction: float, seed: int = 0, min_test_classes: int = 1) -> Split:
    """Shuffle the class indices and give the first ceil(fraction * C) to test."""
    n = dataset.num_classes
    if not 0.0 < test_fraction < 1.0:
        raise SplitError("test_fraction must lie strictly between 0 and 1")
    # guard against 0.1 * 30 = 3.0000000000000004
    n_test = math.ceil(round(test_fraction * n, 9))
    if n_test < max(1, min_test_classes) or n - n_test < 1:
        raise SplitError(f"{n} classes cannot give a {test_fraction} test split with "
                         f">= {max(1, min_test_classes)} test and >= 1 train classes")
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 101])).permutation(n)
    return Split(train_classes=order[n_test:].tolist(), test_classes=order[:n_test].tolist(), seed=int(seed))


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    q_query: int

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_query < 1:
            raise SamplingError(f"invalid episode spec {self}")

    @property
    def per_class(self) -> int:
        return self.k_shot + self.q_query

    def to_dict(self) -> dict:
        return {"n_way": self.n_way, "k_shot": self.k_shot, "q_query": self.q_query}


@dataclass
class Episode:
    support: list          # (clip index, local label)
    query: list            # (clip index, local label)
    class_map: dict = field(default_factory=dict)   # local label -> global class

    @property
    def support_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.support], dtype=np.int64)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.query], dtype=np.int64)

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.support], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([c for _, c in self.query], dtype=np.int64)

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.support_indices, self.query_indices])

    def all_labels(self) -> np.ndarray:
        return np.concatenate([self.support_labels, self.query_labels])


def sample_episode(dataset: Dataset, classes, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw N classes, then K support and Q query clips from each, all without replacement."""
    pool = sorted(int(c) for c in classes)
    if len(pool) < spec.n_way:
        raise SamplingError(f"need {spec.n_way} classes, only {len(pool)} available")
    by = dataset.indices_by_class()
    for c in pool:
        if len(by.get(c, ())) < spec.per_class:
            raise SamplingError(f"class {c} has {len(by.get(c, ()))} samples, "
                                f"needs {spec.per_class} for K={spec.k_shot}, Q={spec.q_query}")
    chosen = rng.choice(len(pool), size=spec.n_way, replace=False)
    support, query, class_map = [], [], {}
    for local, ci in enumerate(chosen):
        g = pool[int(ci)]
        class_map[local] = g
        picks = rng.choice(by[g], size=spec.per_class, replace=False)
        support.extend((int(i), local) for i in picks[:spec.k_shot])
        query.extend((int(i), local) for i in picks[spec.k_shot:])
    return Episode(support=support, query=query, class_map=class_map)


def episode_stream(dataset: Dataset, classes, spec: EpisodeSpec, seed: int, count: int, purpose: int = 0):
    """Yield ``count`` episodes, each from its own derived stream."""
    for i in range(count):
        yield sample_episode(dataset, classes, spec, episode_rng(seed, i, purpose))


def check_episode(episode: Episode, dataset: Dataset, spec: EpisodeSpec, allowed_classes) -> list:
    """Return a list of invariant violations (empty when the episode is well formed)."""
    problems = []
    s, q = episode.support_indices, episode.query_indices
    if len(s) != spec.n_way * spec.k_shot:
        problems.append(f"support size {len(s)} != {spec.n_way * spec.k_shot}")
    if len(q) != spec.n_way * spec.q_query:
        problems.append(f"query size {len(q)} != {spec.n_way * spec.q_query}")
    if set(s.tolist()) & set(q.tolist()):
        problems.append("support and query share clips")
    if len(set(s.tolist())) != len(s) or len(set(q.tolist())) != len(q):
        problems.append("duplicate clips inside a set")
    for lab in range(spec.n_way):
        if np.count_nonzero(episode.support_labels == lab) != spec.k_shot:
            problems.append(f"label {lab} appears wrong number of times in support")
        if np.count_nonzero(episode.query_labels == lab) != spec.q_query:
            problems.append(f"label {lab} appears wrong number of times in query")
    allowed = set(int(c) for c in allowed_classes)
    for idx, lab in episode.support + episode.query:
        g = dataset.clips[idx].label
        if g not in allowed:
            problems.append(f"clip {idx} of class {g} leaked from outside the class pool")
        if episode.class_map[lab] != g:
            problems.append(f"clip {idx} local label {lab} disagrees with class map")
    return problems
