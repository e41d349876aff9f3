from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsfg.datagen import Dataset, GeneratorConfig, SyntheticClip
from fsfg.episodes import (EpisodeSpec, SamplingError, Split, SplitError, check_episode, episode_rng,
                           episode_stream, make_split, sample_episode)


def label_only_dataset(num_classes, per_class):
    """Dataset whose clips are empty placeholders: sampling only reads labels."""
    z = np.zeros((3, 1, 1, 1), dtype=np.float32)
    clips = [SyntheticClip(z, z[:1], c, np.zeros((1, 4), dtype=np.int64))
             for c in range(num_classes) for _ in range(per_class)]
    cfg = GeneratorConfig(num_classes=num_classes, samples_per_class=per_class)
    return Dataset(clips, [f"c{c}" for c in range(num_classes)], cfg)


def test_split_examples():
    d10 = label_only_dataset(10, 2)
    s = make_split(d10, 0.2, seed=0)
    assert len(s.train_classes) == 8 and len(s.test_classes) == 2
    assert not set(s.train_classes) & set(s.test_classes)
    assert sorted(s.train_classes + s.test_classes) == list(range(10))
    assert make_split(d10, 0.2, seed=0) == s
    s99 = make_split(label_only_dataset(99, 1), 0.5, seed=0)
    assert len(s99.test_classes) == 50 and len(s99.train_classes) == 49


def test_split_errors(tmp_path):
    with pytest.raises(SplitError):
        make_split(label_only_dataset(2, 2), 0.5, seed=0, min_test_classes=2)
    with pytest.raises(SplitError):
        make_split(label_only_dataset(4, 2), 1.0)
    with pytest.raises(SplitError):
        Split([0, 1], [1, 2])
    s = make_split(label_only_dataset(6, 2), 0.5, seed=3)
    assert Split.load(s.save(tmp_path / "split.json")) == s


def test_forced_selection():
    d = label_only_dataset(2, 2)
    ep = sample_episode(d, [0, 1], EpisodeSpec(2, 1, 1), episode_rng(0, 0))
    assert sorted(ep.class_map.values()) == [0, 1]
    assert not set(ep.support_indices) & set(ep.query_indices)
    assert check_episode(ep, d, EpisodeSpec(2, 1, 1), [0, 1]) == []


def test_same_stream_same_episode():
    d = label_only_dataset(8, 6)
    spec = EpisodeSpec(3, 2, 2)
    a = sample_episode(d, range(8), spec, episode_rng(5, 17, 3))
    b = sample_episode(d, range(8), spec, episode_rng(5, 17, 3))
    assert a == b
    c = sample_episode(d, range(8), spec, episode_rng(5, 18, 3))
    assert c != a


def test_stream_is_index_addressable():
    d = label_only_dataset(8, 6)
    spec = EpisodeSpec(3, 1, 2)
    eps = list(episode_stream(d, range(8), spec, seed=2, count=10, purpose=3))
    assert eps[7] == sample_episode(d, range(8), spec, episode_rng(2, 7, 3))


def test_spec_validation_and_shortage():
    for bad in [(1, 1, 1), (2, 0, 1), (2, 1, 0)]:
        with pytest.raises(SamplingError):
            EpisodeSpec(*bad)
    d = label_only_dataset(4, 3)
    with pytest.raises(SamplingError):
        sample_episode(d, [0, 1], EpisodeSpec(3, 1, 1), episode_rng(0, 0))
    with pytest.raises(SamplingError):
        sample_episode(d, [0, 1, 2], EpisodeSpec(2, 2, 2), episode_rng(0, 0))


@given(st.integers(2, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_episode_invariants(n, k, q, seed):
    d = label_only_dataset(7, 6)
    allowed = [0, 2, 3, 5, 6]
    spec = EpisodeSpec(n, k, q)
    ep = sample_episode(d, allowed, spec, episode_rng(seed, 0))
    assert check_episode(ep, d, spec, allowed) == []


def test_check_episode_flags_leak():
    d = label_only_dataset(4, 4)
    spec = EpisodeSpec(2, 1, 1)
    ep = sample_episode(d, [0, 1], spec, episode_rng(0, 0))
    assert any("leaked" in p for p in check_episode(ep, d, spec, [2, 3]))
    ep.query = ep.query + [ep.support[0]]
    assert check_episode(ep, d, spec, [0, 1])


def test_class_frequency_near_uniform():
    d = label_only_dataset(20, 6)
    counts = Counter()
    for ep in episode_stream(d, range(20), EpisodeSpec(5, 1, 5), seed=0, count=6000, purpose=3):
        counts.update(ep.class_map.values())
    expected = 6000 * 5 / 20
    assert set(counts) == set(range(20))
    assert all(abs(c - expected) <= 0.1 * expected for c in counts.values())


def test_local_labels_follow_draw_order():
    d = label_only_dataset(10, 3)
    maps = [sample_episode(d, range(10), EpisodeSpec(4, 1, 1), episode_rng(1, i)).class_map for i in range(20)]
    assert any([m[i] for i in range(4)] != sorted(m.values()) for m in maps)
