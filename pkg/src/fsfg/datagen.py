"""Synthetic fine-grained "action" clips with exact saliency ground truth.

Every class is one moving foreground blob (a body disk plus an attached limb
disk) whose drift direction, speed, oscillation, limb pose and tint are class
parameters. Class parameters are a shared base plus ``inter_class_gap`` times a
per-class offset, so shrinking the gap pulls all classes toward the same
action. Backgrounds and distractor squares come from one class-independent
pool, and pixel noise is added last.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .tensor import Tensor, pool_to_shape

DATASET_MAGIC = b"FSFG"
DATASET_VERSION = 1

BODY_RADIUS = 4.0
LIMB_RADIUS = 2.0
LIMB_LENGTH = 5.5


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    num_classes: int = 10
    samples_per_class: int = 20
    clip_shape: tuple = (3, 8, 32, 32)
    inter_class_gap: float = 0.5
    noise_sigma: float = 0.05
    distractor_count: int = 1
    seed: int = 0

    def __post_init__(self):
        self.clip_shape = tuple(int(v) for v in self.clip_shape)

    def validate(self) -> "GeneratorConfig":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be at least 1")
        if len(self.clip_shape) != 4 or self.clip_shape[0] != 3:
            raise ConfigError(f"clip_shape must be (3, frames, height, width), got {self.clip_shape}")
        _, t, h, w = self.clip_shape
        if t < 1 or h < 16 or w < 16:
            raise ConfigError(f"clip_shape {self.clip_shape} is too small to hold a foreground blob")
        if not 0.0 < self.inter_class_gap <= 1.0:
            raise ConfigError("inter_class_gap must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.distractor_count < 0:
            raise ConfigError("distractor_count must be nonnegative")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_shape"] = list(self.clip_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


@dataclass(eq=False)
class SyntheticClip:
    video: np.ndarray      # (3, T, H, W) float32 in [0, 1]
    saliency: np.ndarray   # (1, T, H, W) float32 in [0, 1]
    label: int
    boxes: np.ndarray      # (T, 4) int: y0, x0, y1, x1 (half-open) of the foreground per frame

    def box_mask(self) -> np.ndarray:
        """Boolean (T, H, W) mask of the per-frame foreground boxes."""
        _, t, h, w = self.video.shape
        mask = np.zeros((t, h, w), dtype=bool)
        for f, (y0, x0, y1, x1) in enumerate(self.boxes):
            mask[f, y0:y1, x0:x1] = True
        return mask

    def __eq__(self, other):
        if not isinstance(other, SyntheticClip):
            return NotImplemented
        return (self.label == other.label
                and np.array_equal(self.video, other.video)
                and np.array_equal(self.saliency, other.saliency)
                and np.array_equal(self.boxes, other.boxes))


@dataclass(eq=False)
class Dataset:
    clips: list
    class_names: list
    config: GeneratorConfig
    _by_class: dict = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_by_class(self) -> dict:
        if self._by_class is None:
            by = {c: [] for c in range(self.num_classes)}
            for i, clip in enumerate(self.clips):
                by[clip.label].append(i)
            self._by_class = {c: np.array(v, dtype=np.int64) for c, v in by.items()}
        return self._by_class

    def class_counts(self) -> dict:
        return {c: len(v) for c, v in self.indices_by_class().items()}

    def videos(self, indices) -> np.ndarray:
        return np.stack([self.clips[i].video for i in indices]).astype(np.float64)

    def saliencies(self, indices) -> np.ndarray:
        return np.stack([self.clips[i].saliency for i in indices]).astype(np.float64)

    def __len__(self):
        return len(self.clips)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config == other.config and self.class_names == other.class_names
                and len(self.clips) == len(other.clips)
                and all(a == b for a, b in zip(self.clips, other.clips)))


# ------------------------------------------------------------------ generation


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


@dataclass
class _Motion:
    color: np.ndarray
    heading: float
    speed: float
    freq: float
    amplitude: float
    phase: float
    limb_angle: float
    limb_swing: float
    limb_freq: float


def _base_motion(seed: int) -> _Motion:
    rng = _stream(seed, 0)
    return _Motion(
        color=rng.uniform(0.45, 0.75, size=3),
        heading=rng.uniform(0, 2 * np.pi),
        speed=rng.uniform(0.9, 1.2),
        freq=rng.uniform(1.0, 1.4),
        amplitude=rng.uniform(1.5, 2.5),
        phase=rng.uniform(0, 2 * np.pi),
        limb_angle=rng.uniform(0, 2 * np.pi),
        limb_swing=rng.uniform(0.5, 0.9),
        limb_freq=rng.uniform(1.0, 1.6),
    )


def class_motion(seed: int, label: int, gap: float) -> _Motion:
    """Class parameters: shared base plus ``gap`` times a class offset."""
    base = _base_motion(seed)
    rng = _stream(seed, 1, label)
    return _Motion(
        color=np.clip(base.color + gap * rng.uniform(-0.45, 0.45, size=3), 0.0, 1.0),
        heading=base.heading + gap * rng.uniform(-np.pi, np.pi),
        speed=base.speed + gap * rng.uniform(-0.8, 0.8),
        freq=base.freq + gap * rng.uniform(-0.9, 0.9),
        amplitude=base.amplitude + gap * rng.uniform(-1.5, 1.5),
        phase=base.phase + gap * rng.uniform(-np.pi, np.pi),
        limb_angle=base.limb_angle + gap * rng.uniform(-np.pi, np.pi),
        limb_swing=base.limb_swing + gap * rng.uniform(-0.5, 0.5),
        limb_freq=base.limb_freq + gap * rng.uniform(-0.8, 0.8),
    )


def _intra_draw(motion: _Motion, rng: np.random.Generator) -> tuple[_Motion, np.ndarray]:
    jittered = _Motion(
        color=np.clip(motion.color + rng.normal(0, 0.02, size=3), 0.0, 1.0),
        heading=motion.heading + rng.normal(0, 0.08),
        speed=motion.speed * (1 + rng.normal(0, 0.05)),
        freq=motion.freq + rng.normal(0, 0.04),
        amplitude=motion.amplitude * (1 + rng.normal(0, 0.05)),
        phase=motion.phase + rng.normal(0, 0.15),
        limb_angle=motion.limb_angle + rng.normal(0, 0.08),
        limb_swing=motion.limb_swing,
        limb_freq=motion.limb_freq,
    )
    offset = rng.uniform(-3.0, 3.0, size=2)
    return jittered, offset


def foreground_trajectory(motion: _Motion, offset: np.ndarray, frames: int, height: int,
                          width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame (y, x) centres of the body and limb disks."""
    t = np.arange(frames, dtype=np.float64)
    vel = motion.speed * np.array([np.sin(motion.heading), np.cos(motion.heading)])
    centre = np.array([height / 2.0, width / 2.0]) + offset
    drift = (t[:, None] - (frames - 1) / 2.0) * vel
    wobble = motion.amplitude * np.stack([np.sin(motion.freq * t + motion.phase),
                                          np.cos(motion.freq * t + motion.phase)], axis=1)
    body = centre + drift + wobble
    margin = BODY_RADIUS + 1.0
    body[:, 0] = np.clip(body[:, 0], margin, height - 1 - margin)
    body[:, 1] = np.clip(body[:, 1], margin, width - 1 - margin)
    ang = motion.limb_angle + motion.limb_swing * np.sin(motion.limb_freq * t)
    limb = body + LIMB_LENGTH * np.stack([np.sin(ang), np.cos(ang)], axis=1)
    return body, limb


def _disk(cy: float, cx: float, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _box_blur3(occ: np.ndarray) -> np.ndarray:
    """3x3 spatial mean filter per frame with zero padding."""
    p = np.pad(occ.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    h, w = occ.shape[1:]
    acc = sum(p[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    return np.clip(acc / 9.0, 0.0, 1.0)


def render_clip(config: GeneratorConfig, label: int, index: int) -> SyntheticClip:
    c, frames, height, width = config.clip_shape
    seed = int(config.seed)
    motion, offset = _intra_draw(class_motion(seed, label, config.inter_class_gap),
                                 _stream(seed, 2, label, index))
    body, limb = foreground_trajectory(motion, offset, frames, height, width)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    bg_rng = _stream(seed, 3, label, index)
    bg_color = bg_rng.uniform(0.1, 0.35, size=3)
    gdir = bg_rng.uniform(0, 2 * np.pi)
    ramp = (np.sin(gdir) * (yy / height - 0.5) + np.cos(gdir) * (xx / width - 0.5)) * 0.15
    video = np.broadcast_to(bg_color[:, None, None, None] + ramp[None, None], (c, frames, height, width)).copy()

    for _ in range(config.distractor_count):
        dcol = bg_rng.uniform(0.0, 1.0, size=3)
        start = bg_rng.uniform(2, [height - 6, width - 6])
        dvel = bg_rng.uniform(-1.5, 1.5, size=2)
        for f in range(frames):
            y0, x0 = np.round(start + f * dvel).astype(int)
            y0, x0 = int(np.clip(y0, 0, height - 4)), int(np.clip(x0, 0, width - 4))
            video[:, f, y0:y0 + 4, x0:x0 + 4] = dcol[:, None, None]

    occ = np.zeros((frames, height, width), dtype=bool)
    boxes = np.zeros((frames, 4), dtype=np.int64)
    limb_color = motion.color * 0.8
    for f in range(frames):
        b = _disk(body[f, 0], body[f, 1], BODY_RADIUS, yy, xx)
        l = _disk(limb[f, 0], limb[f, 1], LIMB_RADIUS, yy, xx)
        video[:, f][:, b] = motion.color[:, None]
        video[:, f][:, l & ~b] = limb_color[:, None]
        occ[f] = b | l
        ys, xs = np.nonzero(occ[f])
        boxes[f] = (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)

    if config.noise_sigma > 0:
        video = video + _stream(seed, 4, label, index).normal(0.0, config.noise_sigma, size=video.shape)
    video = np.clip(video, 0.0, 1.0)
    saliency = _box_blur3(occ)[None]
    return SyntheticClip(video=video.astype(np.float32), saliency=saliency.astype(np.float32),
                         label=int(label), boxes=boxes)


def generate(config: GeneratorConfig) -> Dataset:
    config.validate()
    clips = [render_clip(config, label, i)
             for label in range(config.num_classes)
             for i in range(config.samples_per_class)]
    names = [f"class_{c:03d}" for c in range(config.num_classes)]
    return Dataset(clips=clips, class_names=names, config=config)


def downsample_saliency(s, scales) -> list:
    """Block-average a saliency volume to each requested (t, w, h) scale."""
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    return [pool_to_shape(s, scale) for scale in scales]


def saliency_mass_inside(saliency: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of a (…, T, H, W) map's total mass that falls inside ``mask``."""
    sal = np.asarray(saliency, dtype=np.float64).reshape(mask.shape)
    total = sal.sum()
    return float(sal[mask].sum() / total) if total > 0 else 0.0


def class_mean_distance(dataset: Dataset) -> float:
    """Mean pairwise L2 distance between class-mean videos."""
    by = dataset.indices_by_class()
    means = np.stack([dataset.videos(by[c]).mean(axis=0).ravel() for c in sorted(by)])
    dists = [np.linalg.norm(means[i] - means[j])
             for i in range(len(means)) for j in range(i + 1, len(means))]
    return float(np.mean(dists))


# ------------------------------------------------------------------------- I/O


def dataset_to_bytes(dataset: Dataset, provenance: dict | None = None) -> bytes:
    clips = dataset.clips
    header = {
        "config": dataset.config.to_dict(),
        "class_names": list(dataset.class_names),
        "num_clips": len(clips),
        "video_shape": list(clips[0].video.shape) if clips else list(dataset.config.clip_shape),
        "saliency_shape": list(clips[0].saliency.shape) if clips else [1, *dataset.config.clip_shape[1:]],
        "foreground_boxes": [c.boxes.tolist() for c in clips],
    }
    if provenance:
        header["provenance"] = provenance
    parts = []
    for clip in clips:
        parts.append(clip.video.astype("<f4").tobytes())
        parts.append(clip.saliency.astype("<f4").tobytes())
    labels = np.array([c.label for c in clips], dtype="<u2").tobytes()
    return formats.pack(DATASET_MAGIC, DATASET_VERSION, header, b"".join(parts) + labels)


def dataset_from_bytes(blob: bytes) -> Dataset:
    header, payload, off = formats.unpack(blob, DATASET_MAGIC, DATASET_VERSION)
    try:
        n = int(header["num_clips"])
        vshape = tuple(header["video_shape"])
        sshape = tuple(header["saliency_shape"])
        config = GeneratorConfig.from_dict(header["config"])
        names = list(header["class_names"])
        boxes = header["foreground_boxes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise formats.FormatError(f"incomplete header: {exc}", off) from None
    vsize, ssize = int(np.prod(vshape)), int(np.prod(sshape))
    expected = n * (vsize + ssize) * 4 + n * 2
    if len(payload) != expected or len(boxes) != n:
        raise formats.FormatError(
            f"payload holds {len(payload)} bytes but header describes {n} clips ({expected} bytes)",
            off + min(len(payload), expected))
    floats = np.frombuffer(payload, dtype="<f4", count=n * (vsize + ssize)).reshape(n, vsize + ssize)
    labels = np.frombuffer(payload, dtype="<u2", offset=n * (vsize + ssize) * 4, count=n)
    clips = []
    for i in range(n):
        if labels[i] >= len(names):
            raise formats.FormatError(f"label {labels[i]} out of range",
                                      off + n * (vsize + ssize) * 4 + 2 * i)
        clips.append(SyntheticClip(
            video=floats[i, :vsize].reshape(vshape).astype(np.float32),
            saliency=floats[i, vsize:].reshape(sshape).astype(np.float32),
            label=int(labels[i]),
            boxes=np.array(boxes[i], dtype=np.int64).reshape(-1, 4),
        ))
    return Dataset(clips=clips, class_names=names, config=config)


def write_dataset(dataset: Dataset, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    formats.write_bytes(path, dataset_to_bytes(dataset, provenance))
    return path


def read_dataset(path) -> Dataset:
    return dataset_from_bytes(formats.read_bytes(path))
