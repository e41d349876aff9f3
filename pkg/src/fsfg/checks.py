"""Finite-difference checks for every differentiable op and the end-to-end losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .datagen import GeneratorConfig, generate
from .episodes import EpisodeSpec, make_split, sample_episode, episode_rng
from .metalearn import cml_loss_matrix, protonet_loss_matrix
from .network import bam_forward, init_params, instance_norm, saliency_bce, ScaleConfig
from .tensor import GradCheckReport, Tensor, freeze_detached, grad_check
from .trainer import TrainConfig, episode_losses


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _simple(build: Callable, *shapes, positive=False, gapped=False):
    """Check ``sum(weights * build(*inputs))`` over random inputs of ``shapes``."""
    def check(rng, **kw) -> GradCheckReport:
        if positive:
            xs = [_param(rng.uniform(0.5, 2.0, size=s)) for s in shapes]
        elif gapped:
            xs = [_param(_away_from_zero(rng, s)) for s in shapes]
        else:
            xs = [_param(rng.normal(size=s)) for s in shapes]
        out_shape = build(*xs).shape
        w = Tensor(rng.normal(size=out_shape))
        return grad_check(lambda: T.tsum(build(*xs) * w), xs, num_coords=None, rng=rng, **kw)
    return check


def _faulty_square(x: Tensor) -> Tensor:
    # deliberately wrong backward (x instead of 2x) to prove the checker catches errors
    xd = x.data
    return T._make(xd * xd, (x,), lambda g: (g * xd,), "faulty_square")


def _check_conv(rng, **kw):
    x = _param(rng.normal(size=(2, 2, 3, 4, 3)))
    k = _param(rng.normal(size=(3, 2, 3, 3, 3)))
    b = _param(rng.normal(size=(3,)))
    w = Tensor(rng.normal(size=(2, 3, 3, 4, 3)))
    return grad_check(lambda: T.tsum(T.conv3d(x, k, b) * w), [x, k, b], num_coords=None, rng=rng, **kw)


def _check_conv_strided(rng, **kw):
    x = _param(rng.normal(size=(1, 2, 4, 4, 4)))
    k = _param(rng.normal(size=(2, 2, 3, 3, 3)))
    b = _param(rng.normal(size=(2,)))
    w = Tensor(rng.normal(size=(1, 2, 2, 2, 2)))
    return grad_check(lambda: T.tsum(T.conv3d(x, k, b, stride=2) * w), [x, k, b],
                      num_coords=None, rng=rng, **kw)


def _check_instance_norm(rng, **kw):
    x = _param(rng.normal(size=(2, 3, 2, 2, 2)))
    g = _param(rng.normal(size=(3,)))
    s = _param(rng.normal(size=(3,)))
    w = Tensor(rng.normal(size=x.shape))
    return grad_check(lambda: T.tsum(instance_norm(x, g, s) * w), [x, g, s], num_coords=None, rng=rng, **kw)


def _check_dropout(rng, **kw):
    x = _param(rng.normal(size=(4, 6)))
    seed = int(rng.integers(2**31))
    w = Tensor(rng.normal(size=x.shape))
    # same mask on every evaluation
    f = lambda: T.tsum(T.dropout(x, 0.5, np.random.default_rng(seed), True) * w)  # noqa: E731
    return grad_check(f, [x], num_coords=None, rng=rng, **kw)


def _check_cml(rng, **kw):
    reps = _param(rng.normal(size=(6, 5)))
    labels = np.array([0, 1, 2, 0, 1, 2])
    return grad_check(lambda: cml_loss_matrix(reps, labels, 0.5), [reps], num_coords=None, rng=rng, **kw)


def _check_protonet(rng, **kw):
    reps = _param(rng.normal(size=(7, 4)))
    labels = np.array([0, 0, 1, 1, 0, 1, 1])
    return grad_check(lambda: protonet_loss_matrix(reps, labels, 4, 0.5), [reps],
                      num_coords=None, rng=rng, **kw)


def _check_saliency(rng, **kw):
    logits = _param(rng.normal(size=(2, 1, 2, 3, 3)))
    target = Tensor(rng.uniform(size=logits.shape))
    return grad_check(lambda: saliency_bce(logits, target), [logits], num_coords=None, rng=rng, **kw)


def _check_bam(rng, **kw):
    cfg = ScaleConfig()
    params = init_params(int(rng.integers(2**31)), cfg)
    f = _param(np.abs(rng.normal(size=(2, 16, 2, 2, 2))) + 0.1)
    s = Tensor(rng.uniform(size=(2, 1, 2, 2, 2)))
    w = Tensor(rng.normal(size=f.shape))
    group = params.group("bam1.")

    def loss():
        out = bam_forward(f, s, params, 1)
        return T.tsum(out.attended * w) + out.saliency_loss

    return grad_check(freeze_detached(loss), [f] + group, num_coords=40, rng=rng, **kw)


_E2E_CACHE: dict = {}


def _e2e_setup(seed: int):
    if seed not in _E2E_CACHE:
        data = generate(GeneratorConfig(num_classes=4, samples_per_class=3, inter_class_gap=1.0, seed=seed))
        split = make_split(data, 0.5, seed)
        ep = sample_episode(data, split.train_classes, EpisodeSpec(2, 1, 1), episode_rng(seed, 0, 9))
        _E2E_CACHE[seed] = (data, ep)
    return _E2E_CACHE[seed]


E2E_STEPS = (1e-4, 1e-5, 1e-6)
# central differences on an O(10) loss resolve about 1e-12 absolutely, so
# coordinates with |grad| below ~1e-7 cannot be checked to 1e-4 relative
E2E_FLOOR = 1e-7


def end_to_end_check(method: str, seed: int = 0, num_coords: int = 50, step=E2E_STEPS,
                     tolerance: float = 1e-4, training: bool = True) -> GradCheckReport:
    """Total objective through backbone, attention and fusion on a 2-way 1-shot 1-query episode.

    Detached tensors are held at their unperturbed values during differencing,
    so the check targets the gradient the training step actually follows.
    """
    data, ep = _e2e_setup(seed)
    params = init_params(seed)
    cfg = TrainConfig(method=method, spec=EpisodeSpec(2, 1, 1), seed=seed)
    dseed = seed + 12345

    def loss():
        rng = np.random.default_rng(dseed) if training else None
        return episode_losses(params, data, ep, cfg, training=training, rng=rng).total

    return grad_check(freeze_detached(loss), params.parameters(), step=step, tolerance=tolerance,
                      num_coords=num_coords, rng=np.random.default_rng(seed), floor=E2E_FLOOR)


CHECKS: dict = {
    "add": _simple(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _simple(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _simple(lambda a, b: a * b, (3, 4), (3, 4)),
    "div": _simple(lambda a, b: a / b, (3, 4), (4,), positive=True),
    "exp": _simple(T.exp, (5,)),
    "log": _simple(T.log, (5,), positive=True),
    "sqrt": _simple(T.sqrt, (5,), positive=True),
    "sigmoid": _simple(T.sigmoid, (6,)),
    "softplus": _simple(T.softplus, (6,)),
    "relu": _simple(T.relu, (8,), gapped=True),
    "matmul": _simple(T.matmul, (3, 4), (4, 2)),
    "sum": _simple(lambda a: T.tsum(a, axis=1), (3, 4)),
    "mean": _simple(lambda a: T.mean(a, axis=(0, 2)), (2, 3, 4)),
    "max": _simple(lambda a: T.tmax(a, axis=1), (3, 5)),
    "log_sum_exp": _simple(lambda a: T.log_sum_exp(a, axis=1), (3, 5)),
    "cosine_similarity": _simple(T.cosine_similarity, (6,), (6,)),
    "getitem": _simple(lambda a: a[np.array([0, 2, 2]), 1:], (3, 4)),
    "concat": _simple(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2)),
    "stack": _simple(lambda a, b: T.stack([a, b], axis=0), (2, 3), (2, 3)),
    "conv3d": _check_conv,
    "conv3d_strided": _check_conv_strided,
    "channel_avg_max_pool": _simple(T.channel_avg_max_pool, (3, 2, 2, 3)),
    "pool_to_shape": _simple(lambda a: T.pool_to_shape(a, (1, 2, 1)), (2, 2, 4, 2)),
    "instance_norm": _check_instance_norm,
    "dropout": _check_dropout,
    "cml_loss": _check_cml,
    "protonet_loss": _check_protonet,
    "saliency_loss": _check_saliency,
    "bam": _check_bam,
    "model_cml": lambda rng, **kw: end_to_end_check("cml", int(rng.integers(1000)), **kw),
    "model_protonet": lambda rng, **kw: end_to_end_check("protonet", int(rng.integers(1000)), **kw),
}

FAULTY = {"faulty_square": _simple(_faulty_square, (5,))}


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    def to_dict(self) -> dict:
        w = self.report.worst
        return {
            "op": self.name, "passed": self.report.passed, "max_rel_error": self.report.max_error,
            "tolerance": self.report.tolerance, "coordinates": len(self.report.entries),
            "worst": None if w is None else {"param": w.param, "index": list(w.index),
                                             "analytic": w.analytic, "numeric": w.numeric},
        }


def run_checks(names=None, seed: int = 0, tolerance: float = 1e-4, inject_fault: bool = False) -> list:
    table = dict(CHECKS)
    if names:
        unknown = set(names) - set(table) - set(FAULTY)
        if unknown:
            raise KeyError(f"unknown checks: {sorted(unknown)}")
        table = {n: {**CHECKS, **FAULTY}[n] for n in names}
    if inject_fault:
        table.update(FAULTY)
    results = []
    for i, (name, fn) in enumerate(table.items()):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        results.append(CheckResult(name, fn(rng, tolerance=tolerance)))
    return results
