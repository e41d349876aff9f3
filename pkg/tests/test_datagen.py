import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsfg.datagen import (ConfigError, GeneratorConfig, class_mean_distance, dataset_from_bytes,
                          dataset_to_bytes, downsample_saliency, generate, read_dataset, render_clip,
                          saliency_mass_inside, write_dataset)
from fsfg.formats import FormatError
from fsfg.network import ScaleConfig

TINY = GeneratorConfig(num_classes=3, samples_per_class=4, seed=11)


@pytest.fixture(scope="module")
def tiny():
    return generate(TINY)


def test_same_config_bitwise_identical(tiny):
    again = generate(GeneratorConfig(**TINY.to_dict()))
    assert again == tiny
    assert dataset_to_bytes(again) == dataset_to_bytes(tiny)


def test_noise_free_trajectory_repeats():
    quiet = GeneratorConfig(num_classes=2, samples_per_class=2, noise_sigma=0.0, distractor_count=0, seed=4)
    a, b = render_clip(quiet, 1, 0), render_clip(quiet, 1, 0)
    assert a == b
    noisy = GeneratorConfig(**{**quiet.to_dict(), "noise_sigma": 0.1, "distractor_count": 2})
    # noise and distractors never move the foreground
    c = render_clip(noisy, 1, 0)
    np.testing.assert_array_equal(a.boxes, c.boxes)
    np.testing.assert_array_equal(a.saliency, c.saliency)


def test_gap_separates_class_means():
    base = dict(num_classes=5, samples_per_class=6, seed=2)
    far = class_mean_distance(generate(GeneratorConfig(inter_class_gap=1.0, **base)))
    near = class_mean_distance(generate(GeneratorConfig(inter_class_gap=0.05, **base)))
    assert far > near


@pytest.mark.slow
def test_gap_monotone_over_seeds():
    for seed in range(5):
        d = [class_mean_distance(generate(GeneratorConfig(num_classes=5, samples_per_class=6,
                                                          inter_class_gap=g, seed=seed)))
             for g in (0.05, 0.25, 0.5, 1.0)]
        assert all(a <= b for a, b in zip(d, d[1:])), (seed, d)


def test_label_balance_and_ranges(tiny):
    assert tiny.class_counts() == {0: 4, 1: 4, 2: 4}
    for clip in tiny.clips:
        assert clip.video.shape == (3, 8, 32, 32) and clip.saliency.shape == (1, 8, 32, 32)
        assert clip.video.min() >= 0 and clip.video.max() <= 1
        assert clip.saliency.min() >= 0 and clip.saliency.max() <= 1
        assert 0 <= clip.label < 3


def test_saliency_mass_in_boxes():
    data = generate(GeneratorConfig(num_classes=4, samples_per_class=10, distractor_count=3, seed=8))
    masses = [saliency_mass_inside(c.saliency, c.box_mask()) for c in data.clips]
    assert min(masses) >= 0.8


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(samples_per_class=0), dict(clip_shape=(3, 8, 4, 4)),
                                 dict(inter_class_gap=0.0), dict(inter_class_gap=1.5), dict(noise_sigma=-1),
                                 dict(clip_shape=(1, 8, 32, 32)), dict(seed=-1)])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(**bad))


# ------------------------------------------------------------- downsampling


def test_downsample_examples():
    s = np.random.default_rng(0).uniform(size=(1, 8, 32, 32))
    (same,) = downsample_saliency(s, [(8, 32, 32)])
    np.testing.assert_array_equal(same.data, s)
    for out in downsample_saliency(np.ones((1, 8, 32, 32)), ScaleConfig().dims):
        assert np.all(out.data == 1.0)
    t, y, x = np.indices((8, 32, 32))
    checker = ((t + y + x) % 2).astype(float)[None]
    (half,) = downsample_saliency(checker, [(4, 16, 16)])
    assert np.allclose(half.data, 0.5)
    with pytest.raises(Exception):
        downsample_saliency(s, [(3, 32, 32)])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10)
def test_downsample_unit_interval(seed):
    s = np.random.default_rng(seed).uniform(size=(1, 8, 32, 32))
    for out in downsample_saliency(s, ScaleConfig().dims):
        assert 0 <= out.data.min() and out.data.max() <= 1


# ------------------------------------------------------------- file format


def test_roundtrip(tiny, tmp_path):
    path = write_dataset(tiny, tmp_path / "d.fsfg", provenance={"note": "x"})
    back = read_dataset(path)
    assert back == tiny
    assert back.config == tiny.config


def test_layout_prefix(tiny):
    blob = dataset_to_bytes(tiny)
    assert blob[:4] == b"FSFG"
    assert int.from_bytes(blob[4:6], "little") == 1
    hlen = int.from_bytes(blob[6:10], "little")
    n = len(tiny)
    assert len(blob) == 10 + hlen + n * (3 + 1) * 8 * 32 * 32 * 4 + 2 * n


def test_bad_magic(tiny):
    blob = bytearray(dataset_to_bytes(tiny))
    blob[0:4] = b"XXXX"
    with pytest.raises(FormatError) as exc:
        dataset_from_bytes(bytes(blob))
    assert exc.value.offset == 0


def test_bad_version(tiny):
    blob = bytearray(dataset_to_bytes(tiny))
    blob[4:6] = (7).to_bytes(2, "little")
    with pytest.raises(FormatError):
        dataset_from_bytes(bytes(blob))


def test_truncated_payload(tiny):
    blob = dataset_to_bytes(tiny)
    with pytest.raises(FormatError) as exc:
        dataset_from_bytes(blob[:-100])
    assert exc.value.offset > 10


def test_count_mismatch(tiny):
    import json
    blob = dataset_to_bytes(tiny)
    hlen = int.from_bytes(blob[6:10], "little")
    header = json.loads(blob[10:10 + hlen])
    header["num_clips"] += 1
    header["foreground_boxes"].append(header["foreground_boxes"][0])
    head = json.dumps(header).encode()
    forged = blob[:6] + len(head).to_bytes(4, "little") + head + blob[10 + hlen:]
    with pytest.raises(FormatError):
        dataset_from_bytes(forged)
