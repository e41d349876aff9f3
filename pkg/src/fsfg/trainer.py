"""Episodic training: weighted saliency + meta loss, SGD with momentum and step decay."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .episodes import Episode, EpisodeSpec, Split, episode_rng, sample_episode
from .metalearn import DEFAULT_TEMPERATURE, cml_loss_matrix, protonet_loss_matrix
from .network import ModelParams, bam_forward, init_params, model_forward, saliency_targets
from .tensor import Tape, Tensor, TensorError, backward

TRAIN_STREAM = 1
DROPOUT_STREAM = 2
METHODS = ("cml", "protonet")
LOG_COLUMNS = ("episode", "loss_total", "loss_meta", "loss_ss1", "loss_ss2", "loss_ss3", "lr", "grad_norm")


class TrainingError(RuntimeError):
    def __init__(self, message: str, episode: int, record: dict | None = None):
        super().__init__(f"episode {episode}: {message}")
        self.episode = episode
        self.record = record or {}


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 1.0
    lr: float = 0.005
    milestones: tuple = (0.5, 0.83)
    decay: float = 0.1
    momentum: float = 0.9
    total_episodes: int = 500
    spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 1, 5))
    method: str = "cml"
    tau: float = DEFAULT_TEMPERATURE
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if isinstance(self.spec, dict):
            self.spec = EpisodeSpec(**self.spec)

    def validate(self) -> "TrainConfig":
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing inside (0, 1)")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.total_episodes < 0:
            raise ValueError("total_episodes must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["spec"] = self.spec.to_dict()
        return d


def learning_rate(config: TrainConfig, episode: int) -> float:
    passed = sum(episode >= m * config.total_episodes for m in config.milestones)
    return config.lr * config.decay ** passed


@dataclass
class EpisodeLosses:
    total: Tensor
    meta: Tensor
    saliency: list
    reps: Tensor


def total_loss(meta: Tensor, saliency: list, config: TrainConfig) -> Tensor:
    """alpha * sum of per-scale saliency losses + beta * meta loss."""
    for name, t in [("meta", meta)] + [(f"ss{i + 1}", s) for i, s in enumerate(saliency)]:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite {name} loss")
    ss = saliency[0]
    for s in saliency[1:]:
        ss = ss + s
    return config.alpha * ss + config.beta * meta


def meta_loss(reps: Tensor, labels: np.ndarray, n_support: int, method: str, tau: float) -> Tensor:
    if method == "cml":
        return cml_loss_matrix(reps, labels, tau)
    if method == "protonet":
        return protonet_loss_matrix(reps, labels, n_support, tau)
    raise ValueError(f"unknown method {method!r}")


def episode_losses(params: ModelParams, dataset: Dataset, episode: Episode, config: TrainConfig,
                   training: bool = True, rng: np.random.Generator | None = None) -> EpisodeLosses:
    """Forward every support and query clip of ``episode`` and build the objective."""
    idx = episode.all_indices()
    clips = dataset.videos(idx)
    targets = saliency_targets(dataset.saliencies(idx), params.config)
    out = model_forward(clips, targets, params, training=training, rng=rng)
    meta = meta_loss(out.reps, episode.all_labels(), len(episode.support), config.method, config.tau)
    return EpisodeLosses(total_loss(meta, out.saliency_losses, config), meta, out.saliency_losses, out.reps)


def sgd_step(params: list, lr: float, momentum: float, velocity: list) -> None:
    """v <- momentum * v + g; p <- p - lr * v. Missing grads count as zero."""
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        velocity[i] = momentum * velocity[i] + g
        p.data = p.data - lr * velocity[i]


def fit_saliency(params: ModelParams, features: Tensor, saliency: np.ndarray, scale: int, steps: int = 200,
                 lr: float = 0.1, momentum: float = 0.9) -> list:
    """Fit one scale's bottom-up branch to ``saliency`` using the saliency loss only.

    ``features`` stay fixed; returns the loss before each step.
    """
    group = [t for n, t in params.tensors.items() if n.startswith(f"bam{scale}.bottom_up")]
    velocity = [np.zeros_like(t.data) for t in group]
    losses = []
    for _ in range(steps):
        params.zero_grad()
        with Tape() as tape:
            loss = bam_forward(features, saliency, params, scale).saliency_loss
        backward(loss, tape)
        losses.append(loss.item())
        sgd_step(group, lr, momentum, velocity)
    params.zero_grad()
    return losses


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r[k] for k in LOG_COLUMNS})
        return path

    @staticmethod
    def read_csv(path) -> list:
        with Path(path).open() as fh:
            return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(dataset: Dataset, split: Split, config: TrainConfig,
          params: ModelParams | None = None, progress=None) -> tuple[ModelParams, TrainLog]:
    """Run ``config.total_episodes`` sample/forward/backward/step iterations."""
    config.validate()
    params = params if params is not None else init_params(config.seed)
    plist = params.parameters()
    velocity = [np.zeros_like(p.data) for p in plist]
    log = TrainLog(config=config.to_dict())
    start = time.perf_counter()
    for e in range(config.total_episodes):
        lr = learning_rate(config, e)
        episode = sample_episode(dataset, split.train_classes, config.spec,
                                 episode_rng(config.seed, e, TRAIN_STREAM))
        params.zero_grad()
        try:
            with Tape() as tape:
                losses = episode_losses(params, dataset, episode, config, training=True,
                                        rng=episode_rng(config.seed, e, DROPOUT_STREAM))
            backward(losses.total, tape)
        except (TensorError, FloatingPointError) as exc:
            raise TrainingError(str(exc), e, {"episode": e, "lr": lr,
                                              "clips": episode.all_indices().tolist()}) from exc
        gnorm = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in plist if p.grad is not None)))
        record = {
            "episode": e,
            "loss_total": losses.total.item(),
            "loss_meta": losses.meta.item(),
            "loss_ss1": losses.saliency[0].item(),
            "loss_ss2": losses.saliency[1].item(),
            "loss_ss3": losses.saliency[2].item(),
            "lr": lr,
            "grad_norm": gnorm,
        }
        if not all(np.isfinite(v) for v in record.values()):
            raise TrainingError("non-finite log record", e, record)
        log.records.append(record)
        sgd_step(plist, lr, config.momentum, velocity)
        if progress is not None:
            progress(record)
    params.zero_grad()
    log.seconds = time.perf_counter() - start
    return params, log
