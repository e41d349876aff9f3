import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsfg.formats import FormatError
from fsfg.network import (ContractError, ScaleConfig, backbone_forward, bam_forward, checkpoint_from_bytes,
                          checkpoint_to_bytes, embed, fusion_forward, init_params, load_checkpoint,
                          model_forward, saliency_targets, save_checkpoint)
from fsfg.tensor import Tape, Tensor, backward, sigmoid, tsum

CFG = ScaleConfig()


@pytest.fixture(scope="module")
def params():
    return init_params(0)


def clip(seed):
    return np.random.default_rng(seed).uniform(size=(3, 8, 32, 32))


def test_zero_clip_zero_features(params):
    for f in backbone_forward(np.zeros((3, 8, 32, 32)), params):
        assert np.all(f.data == 0)


def test_feature_shapes(params):
    feats = backbone_forward(clip(1), params)
    for f, c, dims in zip(feats, CFG.channels, CFG.dims):
        assert f.shape == (c, *dims)
    batched = backbone_forward(np.stack([clip(1), clip(2)]), params)
    assert [f.shape[0] for f in batched] == [2, 2, 2]
    with pytest.raises(ContractError):
        backbone_forward(np.zeros((3, 8, 16, 16)), params)


def test_single_voxel_changes_features(params):
    a = clip(3)
    b = a.copy()
    b[1, 4, 20, 9] += 0.5
    fa, fb = backbone_forward(a, params), backbone_forward(b, params)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(fa, fb))


def test_batch_forward_matches_per_clip(params):
    x = np.stack([clip(i) for i in range(3)])
    together = embed(x, params)
    alone = np.concatenate([embed(x[i:i + 1], params) for i in range(3)])
    np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)


def test_param_inventory(params):
    assert params.count() == sum(t.size for t in params.parameters())
    assert all(t.requires_grad for t in params.parameters())
    assert params["fusion.weight"].shape == (112, 64)
    assert len(params.top_down()) == 6 and len(params.bottom_up()) == 18


# ------------------------------------------------------------------------ BAM


def silenced(scale):
    # zero the last layer of both branches so a_t = a_b = 0
    p = init_params(1)
    for name in (f"bam{scale}.top_down.weight", f"bam{scale}.top_down.bias",
                 f"bam{scale}.bottom_up2.weight", f"bam{scale}.bottom_up2.bias"):
        p[name].data[...] = 0.0
    return p


def test_zero_attention_scales_by_one_and_a_half():
    p = silenced(2)
    f = Tensor(np.random.default_rng(0).normal(size=(32, 4, 4, 4)))
    out = bam_forward(f, None, p, 2)
    np.testing.assert_allclose(out.attended.data, 1.5 * f.data, rtol=0, atol=1e-15)


def test_symmetric_bce_is_ln2():
    p = silenced(1)
    f = Tensor(np.random.default_rng(1).normal(size=(16, 8, 8, 8)))
    out = bam_forward(f, np.full((1, 8, 8, 8), 0.5), p, 1)
    assert out.saliency_loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_saliency_range_enforced(params):
    f = Tensor(np.ones((16, 8, 8, 8)))
    with pytest.raises(ContractError):
        bam_forward(f, np.full((1, 8, 8, 8), 1.2), params, 1)
    with pytest.raises(ContractError):
        bam_forward(f, np.full((1, 4, 4, 4), 0.5), params, 1)


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3]))
@settings(max_examples=15)
def test_residual_bound(seed, scale):
    rng = np.random.default_rng(seed)
    c, dims = CFG.channels[scale - 1], CFG.dims[scale - 1]
    f = rng.normal(size=(c, *dims))
    out = bam_forward(Tensor(f), None, init_params(seed % 7), scale)
    fa = out.attended.data
    assert np.all(np.sign(fa) == np.sign(f))
    assert np.all(np.abs(f) <= np.abs(fa) + 1e-15) and np.all(np.abs(fa) <= 2 * np.abs(f) + 1e-15)
    assert out.top_down.shape == out.bottom_up.shape == (1, *dims)


def grads(loss_fn, p):
    p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    return loss


@pytest.mark.parametrize("scale", [1, 2, 3])
def test_gradient_isolation(scale):
    rng = np.random.default_rng(scale)
    p = init_params(scale)
    c, dims = CFG.channels[scale - 1], CFG.dims[scale - 1]
    f = Tensor(rng.normal(size=(2, c, *dims)), requires_grad=True)
    s = rng.uniform(size=(2, 1, *dims))
    w = Tensor(rng.normal(size=f.shape))

    grads(lambda: bam_forward(f, s, p, scale).saliency_loss, p)
    g_top = [t.grad for t in p.top_down()]
    assert all(g is None or not np.any(g) for g in g_top)
    assert f.grad is None or not np.any(f.grad)    # L_ss never reaches the features

    f.grad = None
    grads(lambda: tsum(bam_forward(f, s, p, scale).attended * w), p)
    assert all(t.grad is None or not np.any(t.grad) for t in p.bottom_up())
    assert any(t.grad is not None and np.any(t.grad) for t in p.group(f"bam{scale}.top_down"))


def test_fit_saliency_alone():
    from fsfg.trainer import fit_saliency
    rng = np.random.default_rng(0)
    p = init_params(0)
    before = {n: p[n].data.copy() for n in p.names()}
    f = Tensor(np.abs(rng.normal(size=(2, 16, 8, 8, 8))))
    s = np.zeros((2, 1, 8, 8, 8))
    s[:, :, :, 2:5, 3:7] = 1.0
    losses = fit_saliency(p, f, s, scale=1)
    assert len(losses) == 200 and losses[-1] < losses[0]
    out = bam_forward(f, s, p, 1)
    assert np.mean(np.abs(sigmoid(out.bottom_up).data - s)) < 0.1
    moved = {n for n in p.names() if not np.array_equal(before[n], p[n].data)}
    assert moved and all(n.startswith("bam1.bottom_up") for n in moved)


# --------------------------------------------------------------------- fusion


def test_fusion_constant_maps(params):
    consts = [np.linspace(-1, 1, c) for c in CFG.channels]
    maps = tuple(Tensor(np.broadcast_to(v[:, None, None, None], (c, *d)).copy())
                 for v, c, d in zip(consts, CFG.channels, CFG.dims))
    r = fusion_forward(maps, params)
    expected = np.concatenate(consts) @ params["fusion.weight"].data + params["fusion.bias"].data
    np.testing.assert_allclose(r.data, expected, atol=1e-12)
    assert r.shape == (64,)


def test_dropout_only_in_training(params):
    x = np.stack([clip(5), clip(6)])
    a = model_forward(x, None, params, training=False).reps.data
    b = model_forward(x, None, params, training=False).reps.data
    assert np.array_equal(a, b)
    t1 = model_forward(x, None, params, training=True, rng=np.random.default_rng(0)).reps.data
    t2 = model_forward(x, None, params, training=True, rng=np.random.default_rng(0)).reps.data
    assert np.array_equal(t1, t2) and not np.allclose(t1, a)


def test_model_forward_outputs(small_data, params):
    idx = [0, 9, 17]
    tg = saliency_targets(small_data.saliencies(idx))
    out = model_forward(small_data.videos(idx), tg, params)
    assert out.reps.shape == (3, 64)
    assert all(np.isfinite(l.item()) and l.item() >= 0 for l in out.saliency_losses)
    for m, d in zip(out.fused_attention + out.bottom_up_attention, list(CFG.dims) * 2):
        assert m.shape == (3, 1, *d) and m.min() > 0 and m.max() < 1


# ----------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip(tmp_path, params):
    path = save_checkpoint(params, tmp_path / "m.ckpt", {"seed": 0})
    back, meta = load_checkpoint(path)
    assert meta == {"seed": 0}
    assert back.names() == params.names()
    for a, b in zip(back.parameters(), params.parameters()):
        np.testing.assert_array_equal(a.data, b.data.astype(np.float32).astype(np.float64))
    again, _ = checkpoint_from_bytes(checkpoint_to_bytes(back))
    assert again.equals(back)


def test_checkpoint_corruption(params):
    blob = checkpoint_to_bytes(params)
    with pytest.raises(FormatError):
        checkpoint_from_bytes(b"FSFGX" + blob[5:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob[:-8])
