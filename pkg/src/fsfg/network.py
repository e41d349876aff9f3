"""Multi-scale 3D-conv backbone, bidirectional attention per scale, and fusion head."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .tensor import (Tensor, channel_avg_max_pool, concat, conv3d, dropout, mean, no_tape,
                     pool_to_shape, relu, sigmoid, softplus, sqrt)

CHECKPOINT_MAGIC = b"FSFGW"
CHECKPOINT_VERSION = 1
NORM_EPS = 1e-5
# He-uniform bound sqrt(6 / fan_in) for the ReLU stack
BACKBONE_GAIN = np.sqrt(6.0)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleConfig:
    clip_shape: tuple = (3, 8, 32, 32)
    channels: tuple = (16, 32, 64)
    dims: tuple = ((8, 8, 8), (4, 4, 4), (2, 2, 2))
    rep_dim: int = 64
    dropout: float = 0.5

    @property
    def fused_dim(self) -> int:
        return sum(self.channels)


# backbone: stem + one stage per scale; strides are (t, w, h)
_BACKBONE = (
    ("stem", 0, (1, 2, 2)),
    ("stage1", 0, (1, 2, 2)),
    ("stage2", 1, (2, 2, 2)),
    ("stage3", 2, (2, 2, 2)),
)


@dataclass
class ModelParams:
    """Named learnable tensors, in a fixed order."""

    tensors: dict = field(default_factory=dict)
    config: ScaleConfig = field(default_factory=ScaleConfig)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list:
        return list(self.tensors.values())

    def names(self) -> list:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def group(self, prefix: str) -> list:
        return [t for n, t in self.tensors.items() if n.startswith(prefix)]

    def top_down(self) -> list:
        return [t for n, t in self.tensors.items() if ".top_down." in n]

    def bottom_up(self) -> list:
        return [t for n, t in self.tensors.items() if ".bottom_up" in n]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
                           self.config)

    def state(self) -> dict:
        return {n: t.data for n, t in self.tensors.items()}

    def equals(self, other: "ModelParams") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(a.data, b.data) for a, b in zip(self.parameters(), other.parameters())))


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(seed: int = 0, config: ScaleConfig | None = None) -> ModelParams:
    """He-uniform backbone, uniform(+-1/sqrt(fan_in)) elsewhere, zero biases, unit norm gains."""
    cfg = config or ScaleConfig()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    t: dict[str, Tensor] = {}
    c_prev = cfg.clip_shape[0]
    for name, scale, _ in _BACKBONE:
        c = cfg.channels[scale]
        t[f"backbone.{name}.weight"] = _uniform(rng, (c, c_prev, 3, 3, 3), c_prev * 27, BACKBONE_GAIN)
        # no conv bias: the instance norm that follows removes any per-channel constant
        t[f"backbone.{name}.norm.gain"] = Tensor(np.ones(c), requires_grad=True)
        t[f"backbone.{name}.norm.shift"] = _zeros((c,))
        c_prev = c
    for i, c in enumerate(cfg.channels, start=1):
        half = max(c // 2, 1)
        t[f"bam{i}.top_down.weight"] = _uniform(rng, (1, 2, 3, 3, 3), 2 * 27)
        t[f"bam{i}.top_down.bias"] = _zeros((1,))
        t[f"bam{i}.bottom_up1.weight"] = _uniform(rng, (half, c, 3, 3, 3), c * 27)
        t[f"bam{i}.bottom_up1.bias"] = _zeros((half,))
        t[f"bam{i}.bottom_up_norm.gain"] = Tensor(np.ones(half), requires_grad=True)
        t[f"bam{i}.bottom_up_norm.shift"] = _zeros((half,))
        t[f"bam{i}.bottom_up2.weight"] = _uniform(rng, (1, half, 3, 3, 3), half * 27)
        t[f"bam{i}.bottom_up2.bias"] = _zeros((1,))
    t["fusion.weight"] = _uniform(rng, (cfg.fused_dim, cfg.rep_dim), cfg.fused_dim)
    t["fusion.bias"] = _zeros((cfg.rep_dim,))
    return ModelParams(t, cfg)


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return (x.reshape(1, *x.shape) if x.ndim == 4 else x), x.ndim == 4


# ------------------------------------------------------------------ backbone


def backbone_forward(clip, params: ModelParams) -> tuple:
    """Return the three feature maps (F1, F2, F3); accepts one clip or a batch.

    Each stage is conv -> instance norm -> ReLU. Per-sample normalisation keeps
    every clip's features independent of the rest of the episode.
    """
    x, single = _batched(clip)
    cfg = params.config
    if x.ndim != 5 or tuple(x.shape[1:]) != tuple(cfg.clip_shape):
        raise ContractError(f"clip must have shape {cfg.clip_shape}, got {x.shape}")
    feats = []
    h = x
    for name, _, stride in _BACKBONE:
        p = f"backbone.{name}"
        h = conv3d(h, params[f"{p}.weight"], None, stride)
        h = relu(instance_norm(h, params[f"{p}.norm.gain"], params[f"{p}.norm.shift"]))
        if name != "stem":
            feats.append(h)
    if single:
        feats = [f[0] for f in feats]
    return tuple(feats)


# ------------------------------------------------------------------------ BAM


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Normalise each (sample, channel) over its (t, w, h) voxels."""
    axes = (2, 3, 4)
    mu = mean(x, axis=axes, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, axis=axes, keepdims=True)
    y = centred / sqrt(var + NORM_EPS)
    return y * gain.reshape(1, -1, 1, 1, 1) + shift.reshape(1, -1, 1, 1, 1)


def saliency_bce(logits: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and soft targets."""
    return mean(softplus(logits) - target * logits)


def top_down_attention(f: Tensor, params: ModelParams, scale: int) -> Tensor:
    p = f"bam{scale}.top_down"
    return conv3d(channel_avg_max_pool(f), params[f"{p}.weight"], params[f"{p}.bias"])


def bottom_up_attention(f: Tensor, params: ModelParams, scale: int) -> Tensor:
    p = f"bam{scale}"
    h = conv3d(f, params[f"{p}.bottom_up1.weight"], params[f"{p}.bottom_up1.bias"])
    h = relu(instance_norm(h, params[f"{p}.bottom_up_norm.gain"], params[f"{p}.bottom_up_norm.shift"]))
    return conv3d(h, params[f"{p}.bottom_up2.weight"], params[f"{p}.bottom_up2.bias"])


@dataclass
class BAMOutput:
    attended: Tensor
    top_down: Tensor
    bottom_up: Tensor
    saliency_loss: Tensor | None


def bam_forward(f, s, params: ModelParams, scale: int) -> BAMOutput:
    """Residual bidirectional attention at one scale.

    The bottom-up branch reads a detached copy of ``f`` and its output is
    detached before fusion, so it is trained by the saliency loss alone while
    the task loss only reaches the top-down branch and the backbone.
    """
    f, single = _batched(f)
    a_t = top_down_attention(f, params, scale)
    a_b = bottom_up_attention(f.detach(), params, scale)
    gate = sigmoid(a_t + a_b.detach())
    attended = f + f * gate
    loss = None
    if s is not None:
        st = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
        if st.ndim == 4:
            st = Tensor(st.data[None])
        if np.any(st.data < 0) or np.any(st.data > 1):
            raise ContractError("saliency targets must lie in [0, 1]")
        if st.shape != a_b.shape:
            raise ContractError(f"saliency shape {st.shape} does not match attention {a_b.shape}")
        loss = saliency_bce(a_b, st)
    if single:
        return BAMOutput(attended[0], a_t[0], a_b[0], loss)
    return BAMOutput(attended, a_t, a_b, loss)


# --------------------------------------------------------------------- fusion


def fusion_forward(attended: tuple, params: ModelParams, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Global-average-pool each scale, concatenate, dropout, affine map to ``rep_dim``."""
    single = attended[0].ndim == 4
    pooled = []
    for f in attended:
        f = f.reshape(1, *f.shape) if single else f
        pooled.append(mean(f, axis=(2, 3, 4)))
    v = concat(pooled, axis=1)
    v = dropout(v, params.config.dropout, rng, training)
    r = v @ params["fusion.weight"] + params["fusion.bias"]
    return r[0] if single else r


@dataclass
class ModelOutput:
    reps: Tensor                     # (b, d)
    saliency_losses: list            # three scalar Tensors, or Nones without targets
    fused_attention: list            # per scale, sigma(a_t + a_b) as arrays (b, 1, t, w, h)
    bottom_up_attention: list        # per scale, sigma(a_b) as arrays


def model_forward(clips, saliency, params: ModelParams, training: bool = False,
                  rng: np.random.Generator | None = None) -> ModelOutput:
    """Full forward pass over a batch ``(b, 3, 8, 32, 32)``.

    ``saliency`` is None or a list of three per-scale targets ``(b, 1, t, w, h)``.
    """
    x, _ = _batched(clips)
    feats = backbone_forward(x, params)
    outs = []
    for i, f in enumerate(feats, start=1):
        s = None if saliency is None else saliency[i - 1]
        outs.append(bam_forward(f, s, params, i))
    reps = fusion_forward(tuple(o.attended for o in outs), params, training, rng)
    sig = lambda z: np.exp(-np.logaddexp(0.0, -z))  # noqa: E731 - overflow-free sigmoid
    return ModelOutput(
        reps=reps,
        saliency_losses=[o.saliency_loss for o in outs],
        fused_attention=[sig(o.top_down.data + o.bottom_up.data) for o in outs],
        bottom_up_attention=[sig(o.bottom_up.data) for o in outs],
    )


def saliency_targets(saliency: np.ndarray, config: ScaleConfig | None = None) -> list:
    """Block-average batched (b, 1, T, H, W) saliency to every network scale."""
    cfg = config or ScaleConfig()
    s = Tensor(np.asarray(saliency, dtype=np.float64))
    return [pool_to_shape(s, d) for d in cfg.dims]


def embed(clips: np.ndarray, params: ModelParams, batch_size: int = 32) -> np.ndarray:
    """Eval-mode representations for a stack of clips, as a (n, d) array."""
    out = []
    with no_tape():
        for i in range(0, len(clips), batch_size):
            out.append(model_forward(clips[i:i + batch_size], None, params).reps.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.config.rep_dim))


# ----------------------------------------------------------------- checkpoint


def checkpoint_to_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    cfg = params.config
    header = {
        "layers": [{"name": n, "shape": list(t.shape)} for n, t in params.tensors.items()],
        "scale_config": {"clip_shape": list(cfg.clip_shape), "channels": list(cfg.channels),
                         "dims": [list(d) for d in cfg.dims], "rep_dim": cfg.rep_dim,
                         "dropout": cfg.dropout},
        "parameter_count": params.count(),
    }
    if extra:
        header["provenance"] = extra
    payload = b"".join(t.data.astype("<f4").tobytes() for t in params.tensors.values())
    return formats.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload)


def checkpoint_from_bytes(blob: bytes) -> tuple[ModelParams, dict]:
    header, payload, off = formats.unpack(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        layers = header["layers"]
        sc = header["scale_config"]
        cfg = ScaleConfig(clip_shape=tuple(sc["clip_shape"]), channels=tuple(sc["channels"]),
                          dims=tuple(tuple(d) for d in sc["dims"]), rep_dim=int(sc["rep_dim"]),
                          dropout=float(sc["dropout"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise formats.FormatError(f"incomplete checkpoint header: {exc}", off) from None
    total = sum(int(np.prod(layer["shape"])) for layer in layers)
    if len(payload) != 4 * total:
        raise formats.FormatError(f"payload holds {len(payload)} bytes, manifest needs {4 * total}",
                                  off + min(len(payload), 4 * total))
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    tensors, pos = {}, 0
    for layer in layers:
        n = int(np.prod(layer["shape"]))
        tensors[layer["name"]] = Tensor(flat[pos:pos + n].reshape(layer["shape"]).copy(), requires_grad=True)
        pos += n
    return ModelParams(tensors, cfg), header.get("provenance", {})


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    path = Path(path)
    formats.write_bytes(path, checkpoint_to_bytes(params, extra))
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    return checkpoint_from_bytes(formats.read_bytes(path))


def attention_to_bytes(maps: list) -> bytes:
    """Pack per-scale attention arrays in the dataset container for inspection."""
    header = {"kind": "attention", "shapes": [list(m.shape) for m in maps]}
    payload = b"".join(np.asarray(m).astype("<f4").tobytes() for m in maps)
    return formats.pack(b"FSFG", 1, header, payload)
