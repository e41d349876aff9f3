"""Many-episode few-shot evaluation and CML-vs-ProtoNet comparison sweeps."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import Dataset, saliency_mass_inside
from .episodes import EpisodeSpec, Split, episode_rng, sample_episode
from .metalearn import batch_cml_predict, batch_protonet_predict
from .network import ModelParams, embed, model_forward
from .tensor import DegenerateVectorError, no_tape
from .trainer import TrainConfig, train

EVAL_STREAM = 3
CI_Z = 1.96


def confidence_interval(accs: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width, 1.96 * s / sqrt(n)."""
    a = np.asarray(accs, dtype=np.float64)
    if a.size < 2:
        raise ValueError("confidence interval needs at least two values")
    if np.all(a == a[0]):
        return float(a[0]), 0.0     # the mean's rounding would otherwise leave a ~1e-17 spread
    return float(a.mean()), float(CI_Z * a.std(ddof=1) / math.sqrt(a.size))


@dataclass
class EvalReport:
    method: str
    spec: EpisodeSpec
    num_episodes: int
    per_episode_accuracy: list
    mean_accuracy: float
    ci95_halfwidth: float
    seed: int
    degenerate_episodes: int = 0
    ci_basis: str = "per-episode accuracies, normal approximation"
    confusion: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self, per_episode: bool = True) -> dict:
        d = {
            "method": self.method, "spec": self.spec.to_dict(), "num_episodes": self.num_episodes,
            "mean_accuracy": self.mean_accuracy, "ci95_halfwidth": self.ci95_halfwidth,
            "seed": self.seed, "degenerate_episodes": self.degenerate_episodes,
            "ci_basis": self.ci_basis, "confusion": self.confusion, "provenance": self.provenance,
        }
        if per_episode:
            d["per_episode_accuracy"] = list(self.per_episode_accuracy)
        return d

    def write_json(self, path, per_episode: bool = True) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(per_episode), indent=2))
        return path

    def write_episodes_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "accuracy"])
            w.writerows(enumerate(self.per_episode_accuracy))
        return path

    def write_confusion_csv(self, path) -> Path:
        path = Path(path)
        classes = sorted(int(c) for c in self.confusion)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred"] + classes)
            for c in classes:
                w.writerow([c] + [self.confusion[str(c)].get(str(p), 0) for p in classes])
        return path


Embedder = Callable[[np.ndarray], np.ndarray]


def params_embedder(params: ModelParams, dataset: Dataset, classes) -> Embedder:
    """Embed every clip of ``classes`` once in eval mode and serve rows by clip index.

    Eval-mode forwards are deterministic and per-sample, so caching is identical
    to re-running the network inside every episode.
    """
    by = dataset.indices_by_class()
    idx = np.concatenate([by[int(c)] for c in sorted(classes)])
    reps = embed(dataset.videos(idx), params)
    lookup = {int(i): row for i, row in zip(idx, reps)}
    return lambda indices: np.stack([lookup[int(i)] for i in indices])


def _predict(method: str, q: np.ndarray, s: np.ndarray, s_lab: np.ndarray, n_way: int) -> np.ndarray:
    if method == "cml":
        return batch_cml_predict(q, s, s_lab, n_way)
    if method == "protonet":
        return batch_protonet_predict(q, s, s_lab, n_way)
    raise ValueError(f"unknown method {method!r}")


def _run_episode(i, dataset, classes, spec, method, seed, embedder):
    ep = sample_episode(dataset, classes, spec, episode_rng(seed, i, EVAL_STREAM))
    s, q = embedder(ep.support_indices), embedder(ep.query_indices)
    q_lab = ep.query_labels
    degenerate = False
    try:
        pred = _predict(method, q, s, ep.support_labels, spec.n_way)
    except DegenerateVectorError:
        degenerate = True
        pred = np.full(len(q_lab), -1)
        for j in range(len(q_lab)):
            try:
                pred[j] = _predict(method, q[j:j + 1], s, ep.support_labels, spec.n_way)[0]
            except DegenerateVectorError:
                pass
    acc = float(np.mean(pred == q_lab))
    pairs = [(ep.class_map[int(t)], ep.class_map[int(p)] if p >= 0 else None) for t, p in zip(q_lab, pred)]
    return acc, degenerate, pairs


def evaluate(model, dataset: Dataset, split: Split, spec: EpisodeSpec, num_episodes: int = 1000,
             method: str = "cml", seed: int = 0, threads: int = 1) -> EvalReport:
    """Mean query accuracy over ``num_episodes`` test episodes with a 95% interval.

    ``model`` is a :class:`ModelParams` or a callable mapping clip indices to an
    ``(n, d)`` array of representations.
    """
    classes = split.test_classes
    embedder = params_embedder(model, dataset, classes) if isinstance(model, ModelParams) else model
    run = lambda i: _run_episode(i, dataset, classes, spec, method, seed, embedder)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(num_episodes)))
    else:
        results = [run(i) for i in range(num_episodes)]
    accs = [r[0] for r in results]
    confusion: dict = {str(c): {} for c in classes}
    for _, _, pairs in results:
        for t, p in pairs:
            key = str(p) if p is not None else "degenerate"
            row = confusion[str(t)]
            row[key] = row.get(key, 0) + 1
    mean_acc, half = confidence_interval(accs) if len(accs) >= 2 else (float(np.mean(accs)) if accs else 0.0, 0.0)
    return EvalReport(method=method, spec=spec, num_episodes=num_episodes, per_episode_accuracy=accs,
                      mean_accuracy=mean_acc, ci95_halfwidth=half, seed=seed,
                      degenerate_episodes=sum(r[1] for r in results), confusion=confusion)


# ------------------------------------------------------------ saliency maps


def bottom_up_mass(params: ModelParams, dataset: Dataset, indices, scale: int = 1) -> np.ndarray:
    """Share of each clip's sigma(a_b) mass that lands inside its foreground boxes.

    The map of ``scale`` is nearest-neighbour upsampled to clip resolution first.
    """
    idx = np.asarray(indices, dtype=np.int64)
    with no_tape():
        out = model_forward(dataset.videos(idx), None, params)
    maps = out.bottom_up_attention[scale - 1][:, 0]
    t, h, w = dataset.clips[int(idx[0])].video.shape[1:]
    ft, fh, fw = t // maps.shape[1], h // maps.shape[2], w // maps.shape[3]
    up = maps.repeat(ft, axis=1).repeat(fh, axis=2).repeat(fw, axis=3)
    return np.array([saliency_mass_inside(m, dataset.clips[int(i)].box_mask()) for m, i in zip(up, idx)])


# -------------------------------------------------------------------- compare


@dataclass
class ComparisonRow:
    method: str
    train_spec: EpisodeSpec
    test_spec: EpisodeSpec
    seeds: list
    seed_means: list
    mean_accuracy: float | None
    ci95_halfwidth: float | None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "method": self.method, "train_n": self.train_spec.n_way, "train_k": self.train_spec.k_shot,
            "train_q": self.train_spec.q_query, "test_n": self.test_spec.n_way,
            "test_k": self.test_spec.k_shot, "test_q": self.test_spec.q_query,
            "seeds": list(self.seeds), "seed_means": list(self.seed_means),
            "mean_accuracy": self.mean_accuracy, "ci95_halfwidth": self.ci95_halfwidth,
            "status": self.status,
        }


CSV_FIELDS = ("method", "train_n", "train_k", "train_q", "test_n", "test_k", "test_q",
              "mean_accuracy", "ci95_halfwidth", "status")


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "provenance": self.provenance}

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r.to_dict())
        return path

    def cell(self, method: str, train_spec: EpisodeSpec) -> ComparisonRow:
        for r in self.rows:
            if r.method == method and r.train_spec == train_spec:
                return r
        raise KeyError((method, train_spec))


def compare(dataset: Dataset, split: Split, train_specs: Sequence[EpisodeSpec], test_spec: EpisodeSpec,
            methods: Sequence[str] = ("cml", "protonet"), seeds: Sequence[int] = (0,),
            base_config: TrainConfig | None = None, num_episodes: int = 1000, eval_seed: int = 0,
            threads: int = 1, progress=None) -> ComparisonTable:
    """Train one model per (method, train spec, seed) and evaluate all on ``test_spec``.

    Each cell pools the per-episode accuracies of its seeds; a cell whose
    training or evaluation raises is marked failed and the sweep continues.
    """
    base = base_config or TrainConfig()
    table = ComparisonTable()
    for method in methods:
        for tspec in train_specs:
            pooled, means, status = [], [], "ok"
            for seed in seeds:
                cfg = replace(base, method=method, spec=tspec, seed=int(seed))
                try:
                    params, _ = train(dataset, split, cfg)
                    rep = evaluate(params, dataset, split, test_spec, num_episodes, method, eval_seed, threads)
                except Exception as exc:  # noqa: BLE001 - a failed cell must not end the sweep
                    status = f"failed: {type(exc).__name__}: {exc}"
                    break
                pooled.extend(rep.per_episode_accuracy)
                means.append(rep.mean_accuracy)
                if progress is not None:
                    progress(method, tspec, seed, rep)
            if status == "ok" and len(pooled) >= 2:
                m, h = confidence_interval(pooled)
            else:
                m = h = None
            table.rows.append(ComparisonRow(method, tspec, test_spec, list(seeds), means, m, h, status))
    return table
