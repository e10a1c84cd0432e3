"""Prior-encoder checks: group partitioning, pooling algebra, token layout,
frozen-ness, pretraining, and the feature cache."""

import numpy as np
import pytest

from hieralign.autodiff import Rng, Tensor, grad, tsum
from hieralign.checkpoint import load_encoder_weights, save_encoder_weights
from hieralign.encoder import (
    ConvAutoencoder,
    ConvEncoder,
    EncoderSpec,
    LayerSpec,
    build_groups,
    compute_feature_arrays,
    encode_hierarchy,
    flatten_tokens,
    load_feature_cache,
    pool_to_grid,
    pretrain_and_freeze,
    save_feature_cache,
    unflatten_tokens,
)
from hieralign.errors import ConfigError


TINY = EncoderSpec.desk_default(stage_channels=(4, 8, 16, 16), input_size=16)


# ---------------------------------------------------------------------------
# build_groups
# ---------------------------------------------------------------------------

def test_desk_default_partition():
    spec = EncoderSpec.desk_default()
    part = build_groups(spec)
    assert [g.id for g in part.groups] == ["G1", "G2", "G3", "G4"]
    assert part.mid_id == "G3" and part.deep_id == "G4"
    assert part.c_mid == 64 and part.c_deep == 64
    assert part.k_mid == part.k_deep == 3  # balanced split of the 64-channel run
    ids = [lid for g in part.groups for lid in g.layer_ids]
    assert ids == [l.name for l in spec.layers]  # disjoint cover, in order


def test_four_stage_spec_with_distinct_bottleneck():
    # stages 16@32, 32@16, 64@8, 64@4: same-channel deep run splits 1+1 at the
    # resolution boundary via the balanced rule
    layers = (
        LayerSpec("s0", 16, 32),
        LayerSpec("s1", 32, 16),
        LayerSpec("s2", 64, 8),
        LayerSpec("s3", 64, 4),
    )
    part = build_groups(EncoderSpec(layers, input_size=32))
    assert part.group("mid").layer_ids == ("s2",)
    assert part.group("deep").layer_ids == ("s3",)
    assert part.c_mid == part.c_deep == 64


def test_sd_vae_partition_rows():
    part = build_groups(EncoderSpec.sd_vae())
    assert part.group("G1").layer_ids == (
        "conv_in", "down_0_block_0", "down_0_block_1", "down_0_downsample")
    assert part.group("G2").layer_ids == (
        "down_1_block_0", "down_1_block_1", "down_1_downsample")
    assert part.group("G3").layer_ids == (
        "down_2_block_0", "down_2_block_1", "down_2_downsample", "down_3_block_0")
    assert part.group("G4").layer_ids == (
        "down_3_block_1", "mid_block_1", "mid_attn_1", "mid_block_2")
    assert (part.group("G1").channels, part.group("G2").channels) == (128, 256)
    assert part.c_mid == part.c_deep == 512
    assert part.k_mid == part.k_deep == 4  # balanced configuration


def test_build_groups_rejects_too_few_stages():
    layers = (LayerSpec("a", 8, 32), LayerSpec("b", 16, 16))
    with pytest.raises(ConfigError):
        build_groups(EncoderSpec(layers))
    with pytest.raises(ConfigError):
        build_groups(EncoderSpec((LayerSpec("a", 8, 32), LayerSpec("b", 16, 16),
                                  LayerSpec("c", 32, 8))))


def test_build_groups_rejects_too_many_stages():
    layers = tuple(LayerSpec(f"l{i}", 2 ** (i + 2), 32 // 2**i) for i in range(5))
    with pytest.raises(ConfigError):
        build_groups(EncoderSpec(layers))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def test_pool_shapes_and_paper_grid():
    x = np.random.default_rng(0).normal(size=(5, 32, 32))
    out = pool_to_grid(x, 16)
    assert out.shape == (5, 16, 16)


def test_pool_constant_map_unchanged():
    x = np.full((3, 12, 12), 2.5)
    out = pool_to_grid(x, 4)
    assert np.allclose(out, 2.5)


def test_pool_mean_preserved_when_divisible():
    x = np.random.default_rng(1).normal(size=(2, 24, 16)).astype(np.float64)
    out = pool_to_grid(x, 8)
    assert abs(out.mean() - x.mean()) < 1e-12 * max(1.0, abs(x.mean()))


def test_pool_idempotent_on_grid_sized_input():
    x = np.random.default_rng(2).normal(size=(4, 8, 8))
    assert np.array_equal(pool_to_grid(x, 8), x)


def test_pool_rejects_upsampling():
    with pytest.raises(ValueError):
        pool_to_grid(np.zeros((2, 4, 4)), 8)
    with pytest.raises(ValueError):
        pool_to_grid(np.zeros((2, 16, 4)), 8)


# ---------------------------------------------------------------------------
# token flattening
# ---------------------------------------------------------------------------

def test_flatten_row_major_cell_order():
    s = 2
    pooled = np.arange(1 * s * s).reshape(1, s, s).astype(float)  # cell (a,b) -> a*s+b
    tokens = flatten_tokens(pooled)
    assert tokens.shape == (4, 1)
    assert np.array_equal(tokens[:, 0], [0, 1, 2, 3])


def test_flatten_roundtrip():
    x = np.random.default_rng(3).normal(size=(6, 4, 4))
    assert np.array_equal(unflatten_tokens(flatten_tokens(x), 4), x)


def test_flatten_matches_patch_grid_indexing():
    # label each 4x4 patch of a 16x16 image by its row-major patch index, then
    # check token r of the pooled map covers the same spatial cell
    s, patch = 4, 4
    img = np.zeros((1, s * patch, s * patch))
    for a in range(s):
        for b in range(s):
            img[0, a * patch : (a + 1) * patch, b * patch : (b + 1) * patch] = a * s + b
    tokens = flatten_tokens(pool_to_grid(img, s))
    assert np.array_equal(tokens[:, 0], np.arange(s * s))


# ---------------------------------------------------------------------------
# encoder forward, freezing, gradients
# ---------------------------------------------------------------------------

def test_taps_shapes_follow_spec():
    enc = ConvEncoder(TINY, Rng(0))
    x = Tensor(np.zeros((2, 3, 16, 16), dtype=np.float32))
    taps = enc.taps(x)
    for tap, layer in zip(taps, TINY.layers):
        assert tap.shape == (2, layer.channels, layer.resolution, layer.resolution)


def test_constant_input_gives_constant_maps():
    enc = ConvEncoder(TINY, Rng(1), dtype=np.float64)
    x = Tensor(np.full((1, 3, 16, 16), 0.37))
    for tap in enc.taps(x):
        flat = tap.data.reshape(tap.shape[1], -1)
        assert np.allclose(flat, flat[:, :1], atol=1e-12)
    enc.freeze()
    part = build_groups(TINY)
    bank = encode_hierarchy(enc, part, np.full((1, 3, 16, 16), 0.37), 4)
    for gid in bank.group_ids:
        toks = bank.tokens(gid)[0]  # (K, L, C)
        assert np.allclose(toks, toks[:, :1, :], atol=1e-12)


def test_encode_requires_frozen_and_min_size():
    enc = ConvEncoder(TINY, Rng(2))
    part = build_groups(TINY)
    img = np.zeros((1, 3, 16, 16))
    with pytest.raises(RuntimeError):
        encode_hierarchy(enc, part, img, 4)
    enc.freeze()
    with pytest.raises(ValueError):
        encode_hierarchy(enc, part, np.zeros((1, 3, 2, 2)), 4)


def test_bank_contents_and_shapes():
    enc = ConvEncoder(TINY, Rng(3))
    enc.freeze()
    part = build_groups(TINY)
    imgs = Rng(4).normal((3, 3, 16, 16))
    bank = encode_hierarchy(enc, part, imgs, 4)
    assert bank.group_ids == ("G3", "G4")
    assert bank.tokens("mid").shape == (3, part.k_mid, 16, part.c_mid)
    assert bank.maps("deep").shape == (3, part.k_deep, part.c_deep, 4, 4)
    full = encode_hierarchy(enc, part, imgs, 4, include_shallow=True)
    assert set(full.group_ids) == {"G1", "G2", "G3", "G4"}


def test_frozen_encoder_receives_no_gradient():
    enc = ConvEncoder(TINY, Rng(5))
    enc.freeze()
    pset = enc.param_set("encoder.")
    x = Tensor(np.ones((1, 3, 16, 16), dtype=np.float32), requires_grad=True)
    loss = tsum(enc.taps(x)[-1])
    g = grad(loss, pset)
    assert all(np.all(v == 0.0) for v in g.values())
    # hash unchanged by the backward pass
    assert enc.content_hash() == enc.content_hash()


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _toy_images(n=64, side=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(n, 3, side, side)).astype(np.float32)
    return np.clip(base * 0.3, -1, 1)


def test_pretrain_improves_holdout_and_is_deterministic(tmp_path):
    imgs = _toy_images(96)
    train, hold = imgs[:64], imgs[64:]
    res1 = pretrain_and_freeze(train, TINY, epochs=2, rng=Rng(7), holdout=hold,
                               out_path=tmp_path / "w1.npz", batch_size=32)
    assert res1.final_holdout_loss < res1.init_holdout_loss
    assert res1.encoder.frozen
    res2 = pretrain_and_freeze(train, TINY, epochs=2, rng=Rng(7), holdout=hold,
                               out_path=tmp_path / "w2.npz", batch_size=32)
    assert res1.content_hash == res2.content_hash


def test_pretrain_epochs_zero_is_valid_frozen_source():
    res = pretrain_and_freeze(_toy_images(8), TINY, epochs=0, rng=Rng(8))
    assert res.encoder.frozen
    part = build_groups(TINY)
    bank = encode_hierarchy(res.encoder, part, _toy_images(2), 4)
    assert bank.tokens("mid").shape[0] == 2


def test_pretrain_rejects_empty_dataset():
    with pytest.raises(ConfigError):
        pretrain_and_freeze(np.zeros((0, 3, 16, 16)), TINY, epochs=1, rng=Rng(9))


def test_weights_roundtrip(tmp_path):
    res = pretrain_and_freeze(_toy_images(16), TINY, epochs=1, rng=Rng(10),
                              out_path=tmp_path / "weights.npz", batch_size=16)
    enc2 = load_encoder_weights(tmp_path / "weights.npz")
    assert enc2.content_hash() == res.content_hash
    assert enc2.frozen


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

def test_feature_cache_roundtrip(tmp_path):
    res = pretrain_and_freeze(_toy_images(8), TINY, epochs=0, rng=Rng(11))
    part = build_groups(TINY)
    imgs = _toy_images(10, seed=3)
    mid, deep = compute_feature_arrays(res.encoder, part, imgs, 4, batch_size=4)
    assert mid.shape == (10, part.k_mid, 16, part.c_mid)
    path = tmp_path / "cache.npz"
    save_feature_cache(path, mid, deep, res.content_hash, 4)
    mid2, deep2, header = load_feature_cache(path)
    assert np.array_equal(mid, mid2) and np.array_equal(deep, deep2)
    assert header["encoder_hash"] == res.content_hash
    assert (header["S"], header["K_mid"], header["K_deep"]) == (4, part.k_mid, part.k_deep)
    assert (header["C_mid"], header["C_deep"]) == (part.c_mid, part.c_deep)
