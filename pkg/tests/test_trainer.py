import numpy as np
import pytest

from fsfg.datagen import GeneratorConfig, generate
from fsfg.episodes import EpisodeSpec, episode_rng, make_split, sample_episode
from fsfg.network import init_params
from fsfg.tensor import Tape, Tensor, backward
from fsfg.trainer import (LOG_COLUMNS, TrainConfig, TrainingError, TrainLog, episode_losses, learning_rate,
                          sgd_step, total_loss, train)

QUICK = dict(spec=EpisodeSpec(2, 1, 1), seed=1)


def scalar(v, grad=False):
    return Tensor(np.array(v, dtype=float), requires_grad=grad)


def test_total_loss_examples():
    parts = [scalar(0.5), scalar(0.4), scalar(0.3)]
    assert total_loss(scalar(2.0), parts, TrainConfig()).item() == pytest.approx(2.12, abs=1e-12)
    assert total_loss(scalar(2.0), parts, TrainConfig(alpha=0.0)).item() == 2.0
    with pytest.raises(FloatingPointError):
        total_loss(scalar(np.nan), parts, TrainConfig())


def test_total_loss_gradient_is_weighted_sum(small_data, small_split):
    cfg = TrainConfig(**QUICK)
    ep = sample_episode(small_data, small_split.train_classes, cfg.spec, episode_rng(0, 0))
    p = init_params(0)

    def grads(pick):
        p.zero_grad()
        with Tape() as tape:
            out = episode_losses(p, small_data, ep, cfg, training=False)
        backward(pick(out), tape)
        return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in p.parameters()]

    full = grads(lambda o: o.total)
    meta = grads(lambda o: o.meta)
    ss = [grads(lambda o, i=i: o.saliency[i]) for i in range(3)]
    for j in range(len(full)):
        want = cfg.alpha * (ss[0][j] + ss[1][j] + ss[2][j]) + cfg.beta * meta[j]
        np.testing.assert_allclose(full[j], want, rtol=1e-9, atol=1e-12)


def test_sgd_examples():
    p = scalar([3.0, -1.0], grad=True)
    p.grad = p.data.copy()
    vel = [np.zeros(2)]
    sgd_step([p], 1.0, 0.0, vel)
    assert np.all(p.data == 0)

    p = scalar(1.0, grad=True)
    vel = [np.zeros(())]
    for _ in range(2):
        p.grad = p.data.copy()          # gradient of p^2 / 2
        sgd_step([p], 0.1, 0.0, vel)
    assert p.item() == pytest.approx(0.81, abs=1e-15)


def test_sgd_momentum_trace():
    p = scalar(1.0, grad=True)
    vel = [np.zeros(())]
    # hand-unrolled: v1=1, p1=0.9; v2=0.9+0.9=1.8, p2=0.72; v3=1.62+0.72=2.34, p3=0.486
    for want in (0.9, 0.72, 0.486):
        p.grad = p.data.copy()
        sgd_step([p], 0.1, 0.9, vel)
        assert p.item() == pytest.approx(want, abs=1e-12)
    q = scalar(2.0, grad=True)
    sgd_step([q], 0.1, 0.9, [np.zeros(())])
    assert q.item() == 2.0


def test_schedule():
    cfg = TrainConfig(total_episodes=100, lr=0.5)
    lrs = [learning_rate(cfg, e) for e in range(100)]
    assert lrs[0] == lrs[49] == 0.5
    assert lrs[50] == lrs[82] == pytest.approx(0.05)
    assert lrs[83] == lrs[99] == pytest.approx(0.005)


@pytest.mark.parametrize("bad", [dict(alpha=-1), dict(beta=0), dict(lr=0), dict(milestones=(0.6, 0.5)),
                                 dict(milestones=(0.0, 0.5)), dict(method="maml"), dict(total_episodes=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_config_roundtrip():
    cfg = TrainConfig(total_episodes=7, spec=EpisodeSpec(3, 2, 4), method="protonet")
    assert TrainConfig(**cfg.to_dict()) == cfg


def test_zero_episodes_returns_init(small_data, small_split):
    p, log = train(small_data, small_split, TrainConfig(total_episodes=0, **QUICK))
    assert p.equals(init_params(1)) and log.records == []


def test_training_deterministic_and_logged(small_data, small_split, tmp_path):
    cfg = TrainConfig(total_episodes=6, lr=0.01, **QUICK)
    a, log_a = train(small_data, small_split, cfg)
    b, log_b = train(small_data, small_split, cfg)
    assert a.equals(b)
    assert [{k: r[k] for k in LOG_COLUMNS} for r in log_a.records] == log_b.records
    for r in log_a.records:
        assert r["lr"] == learning_rate(cfg, r["episode"])
        assert all(np.isfinite(v) for v in r.values())
    back = TrainLog.read_csv(log_a.write_csv(tmp_path / "log.csv"))
    assert [r["loss_total"] for r in back] == pytest.approx(list(log_a.column("loss_total")), rel=1e-15)


def test_alpha_zero_leaves_bottom_up_untouched(small_data, small_split):
    before = init_params(1)
    after, _ = train(small_data, small_split, TrainConfig(total_episodes=3, alpha=0.0, lr=0.05, **QUICK))
    names = [n for n in before.names() if ".bottom_up" in n]
    assert names and all(np.array_equal(before[n].data, after[n].data) for n in names)
    assert not np.array_equal(before["fusion.weight"].data, after["fusion.weight"].data)


def test_nonfinite_aborts_with_episode(small_data, small_split):
    p = init_params(1)
    p["fusion.bias"].data[:] = np.nan
    with pytest.raises(TrainingError) as exc:
        train(small_data, small_split, TrainConfig(total_episodes=2, **QUICK), params=p)
    assert exc.value.episode == 0


@pytest.mark.slow
def test_loss_decreases_on_easy_data():
    data = generate(GeneratorConfig(num_classes=4, samples_per_class=10, inter_class_gap=1.0, seed=0))
    split = make_split(data, 0.5, seed=0)
    _, log = train(data, split, TrainConfig(total_episodes=300, spec=EpisodeSpec(2, 1, 5), seed=0))
    loss = log.column("loss_total")
    assert loss[-50:].mean() < loss[:50].mean()
