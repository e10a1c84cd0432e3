"""Frozen convolutional feature encoder: group partitioning, hierarchical
feature taps, adaptive pooling onto the transformer token grid, autoencoder
pretraining, and the per-dataset feature cache."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Rng, Tensor, adaptive_avg_pool2d, grad, no_grad, silu, tmean
from .errors import ConfigError, NumericError
from .modules import Module, xavier_uniform
from .optim import AdamW


# ---------------------------------------------------------------------------
# encoder specification and group partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One tapped encoder layer: its name, channel count, and output resolution."""

    name: str
    channels: int
    resolution: int


@dataclass(frozen=True)
class EncoderSpec:
    layers: tuple[LayerSpec, ...]
    in_channels: int = 3
    input_size: int = 32
    latent_channels: int = 8

    @staticmethod
    def desk_default(stage_channels: Sequence[int] = (16, 32, 64, 64), input_size: int = 32,
                     in_channels: int = 3, latent_channels: int = 4) -> "EncoderSpec":
        """Eleven-layer encoder with two downsamples; channel stages mirror a
        shallow/shallow/mid/bottleneck split, with the mid group spanning the
        second resolution boundary and a balanced 3+3 mid/deep layer count."""
        c1, c2, c3, c4 = stage_channels
        s = input_size
        layers = (
            LayerSpec("conv_in", c1, s),
            LayerSpec("down0_block", c1, s),
            LayerSpec("down0_down", c1, s // 2),
            LayerSpec("down1_block0", c2, s // 2),
            LayerSpec("down1_block1", c2, s // 2),
            LayerSpec("down2_block0", c3, s // 2),
            LayerSpec("down2_block1", c3, s // 2),
            LayerSpec("down2_down", c3, s // 4),
            LayerSpec("mid_block0", c4, s // 4),
            LayerSpec("mid_block1", c4, s // 4),
            LayerSpec("mid_block2", c4, s // 4),
        )
        return EncoderSpec(layers, in_channels=in_channels, input_size=input_size,
                           latent_channels=latent_channels)

    @staticmethod
    def sd_vae() -> "EncoderSpec":
        """The 15-layer SD-VAE encoder listing (256x256 input), for partition checks."""
        rows = [
            ("conv_in", 128, 256), ("down_0_block_0", 128, 256), ("down_0_block_1", 128, 256),
            ("down_0_downsample", 128, 128),
            ("down_1_block_0", 256, 128), ("down_1_block_1", 256, 128), ("down_1_downsample", 256, 64),
            ("down_2_block_0", 512, 64), ("down_2_block_1", 512, 64), ("down_2_downsample", 512, 32),
            ("down_3_block_0", 512, 32),
            ("down_3_block_1", 512, 32), ("mid_block_1", 512, 32), ("mid_attn_1", 512, 32),
            ("mid_block_2", 512, 32),
        ]
        return EncoderSpec(tuple(LayerSpec(*r) for r in rows), in_channels=3, input_size=256)


@dataclass(frozen=True)
class Group:
    id: str
    layer_ids: tuple[str, ...]
    channels: int
    native_resolution: tuple[int, ...]


@dataclass(frozen=True)
class GroupPartition:
    groups: tuple[Group, ...]
    mid_id: str = "G3"
    deep_id: str = "G4"

    def group(self, gid: str) -> Group:
        key = {"mid": self.mid_id, "deep": self.deep_id}.get(gid, gid)
        for g in self.groups:
            if g.id == key:
                return g
        raise KeyError(gid)

    @property
    def k_mid(self) -> int:
        return len(self.group(self.mid_id).layer_ids)

    @property
    def k_deep(self) -> int:
        return len(self.group(self.deep_id).layer_ids)

    @property
    def c_mid(self) -> int:
        return self.group(self.mid_id).channels

    @property
    def c_deep(self) -> int:
        return self.group(self.deep_id).channels


def build_groups(spec: EncoderSpec) -> GroupPartition:
    """Partition encoder layers into four channel-uniform groups.

    Layers are grouped into runs of equal channel count. Four runs map
    directly onto G1..G4; three runs split the deepest run into a mid and a
    bottleneck group with balanced layer counts (the extra layer, if any,
    goes to the bottleneck side). Anything else cannot form four
    channel-uniform groups and is rejected.
    """
    layers = spec.layers
    if not layers:
        raise ConfigError("encoder spec has no layers")
    runs: list[list[LayerSpec]] = [[layers[0]]]
    for layer in layers[1:]:
        if layer.channels == runs[-1][-1].channels:
            runs[-1].append(layer)
        else:
            runs.append([layer])
    if len(runs) == 3:
        deep_run = runs.pop()
        if len(deep_run) < 2:
            raise ConfigError("fewer than 4 distinct stages in the encoder spec")
        k_mid = len(deep_run) // 2
        runs.append(deep_run[:k_mid])
        runs.append(deep_run[k_mid:])
    if len(runs) != 4:
        raise ConfigError(
            f"encoder spec yields {len(runs)} channel stages; exactly 4 channel-uniform "
            "groups are required"
        )
    groups = tuple(
        Group(
            id=f"G{i + 1}",
            layer_ids=tuple(l.name for l in run),
            channels=run[0].channels,
            native_resolution=tuple(l.resolution for l in run),
        )
        for i, run in enumerate(runs)
    )
    return GroupPartition(groups)


# ---------------------------------------------------------------------------
# pooling and token flattening
# ---------------------------------------------------------------------------

def pool_to_grid(feature_map, grid_side: int):
    """Adaptive average pooling of (..., H, W) onto a grid_side^2 grid.

    Numpy arrays come back as numpy; Tensors stay on the tape.
    """
    if isinstance(feature_map, Tensor):
        return adaptive_avg_pool2d(feature_map, grid_side)
    return adaptive_avg_pool2d(Tensor(np.asarray(feature_map)), grid_side).data


def flatten_tokens(pooled: np.ndarray) -> np.ndarray:
    """(... , C, S, S) -> (..., L, C) with row r = a*S + b for spatial cell (a, b)."""
    pooled = np.asarray(pooled)
    *lead, c, s1, s2 = pooled.shape
    return np.moveaxis(pooled, -3, -1).reshape(*lead, s1 * s2, c)


def unflatten_tokens(tokens: np.ndarray, grid_side: int) -> np.ndarray:
    """Inverse of flatten_tokens: (..., L, C) -> (..., C, S, S)."""
    tokens = np.asarray(tokens)
    *lead, l, c = tokens.shape
    if l != grid_side * grid_side:
        raise ValueError(f"token count {l} is not {grid_side}^2")
    return np.moveaxis(tokens.reshape(*lead, grid_side, grid_side, c), -1, -3)


# ---------------------------------------------------------------------------
# the convolutional encoder (and its pretraining autoencoder)
# ---------------------------------------------------------------------------

class ConvEncoder(Module):
    """Stack of 3x3 convolutions following an EncoderSpec.

    Every layer after the first is followed by SiLU; taps are post-activation
    block outputs. Convolutions use replicated-edge padding so a constant
    input field stays constant per channel through the stack.
    """

    def __init__(self, spec: EncoderSpec, rng: Rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.frozen = False
        self.calls = 0
        self._strides: list[int] = []
        prev_c, prev_res = spec.in_channels, spec.input_size
        for layer in spec.layers:
            if layer.resolution == prev_res:
                stride = 1
            elif layer.resolution * 2 == prev_res:
                stride = 2
            else:
                raise ConfigError(
                    f"layer {layer.name}: resolution {layer.resolution} does not follow "
                    f"{prev_res} by stride 1 or 2"
                )
            self._strides.append(stride)
            fan_in, fan_out = prev_c * 9, layer.channels * 9
            self.param(f"{layer.name}.w",
                       xavier_uniform(rng, fan_in, fan_out, (layer.channels, prev_c, 3, 3), dtype))
            self.param(f"{layer.name}.b", np.zeros(layer.channels, dtype=dtype))
            prev_c, prev_res = layer.channels, layer.resolution
        self.out_channels = prev_c
        self.out_resolution = prev_res

    def taps(self, x: Tensor) -> list[Tensor]:
        """Forward pass returning every layer's (post-activation) output."""
        from .autodiff import conv2d

        outs = []
        h = x
        for i, layer in enumerate(self.spec.layers):
            w = self._params[f"{layer.name}.w"]
            b = self._params[f"{layer.name}.b"]
            h = conv2d(h, w, b, stride=self._strides[i], padding=1, pad_mode="edge")
            if i > 0:
                h = silu(h)
            outs.append(h)
        return outs

    def freeze(self) -> None:
        self.set_requires_grad(False)
        self.frozen = True


class ConvAutoencoder(Module):
    """Encoder plus a small mirror decoder, used only for pretraining."""

    def __init__(self, spec: EncoderSpec, rng: Rng, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.encoder = self.child("encoder", ConvEncoder(spec, rng.derive("encoder"), dtype))
        dec_rng = rng.derive("decoder")
        c = self.encoder.out_channels
        self._dec_layers: list[tuple[str, bool]] = []  # (name, upsample_before)

        def dec_conv(name, c_in, c_out, upsample):
            self.param(f"{name}.w", xavier_uniform(dec_rng, c_in * 9, c_out * 9,
                                                   (c_out, c_in, 3, 3), dtype))
            self.param(f"{name}.b", np.zeros(c_out, dtype=dtype))
            self._dec_layers.append((name, upsample))

        dec_conv("latent", c, spec.latent_channels, False)
        dec_conv("dec_in", spec.latent_channels, c, False)
        res = self.encoder.out_resolution
        i = 0
        while res < spec.input_size:
            c_out = max(c // 2, 8)
            dec_conv(f"dec_up{i}", c, c_out, True)
            c, res, i = c_out, res * 2, i + 1
        dec_conv("dec_out", c, spec.in_channels, False)

    def reconstruct(self, x: Tensor) -> Tensor:
        from .autodiff import conv2d, upsample_nearest2d

        h = self.encoder.taps(x)[-1]
        last = self._dec_layers[-1][0]
        for name, upsample in self._dec_layers:
            if upsample:
                h = upsample_nearest2d(h, 2)
            h = conv2d(h, self._params[f"{name}.w"], self._params[f"{name}.b"],
                       stride=1, padding=1, pad_mode="edge")
            if name != last:
                h = silu(h)
        return h


def reconstruction_loss(auto: ConvAutoencoder, images: np.ndarray, dtype=np.float32) -> float:
    with no_grad():
        x = Tensor(np.asarray(images, dtype=dtype))
        diff = auto.reconstruct(x) - x
        return float(tmean(diff * diff).data)


@dataclass
class PretrainResult:
    encoder: ConvEncoder
    content_hash: str
    init_holdout_loss: float | None = None
    final_holdout_loss: float | None = None
    weights_path: str | None = None


def pretrain_and_freeze(
    images: np.ndarray,
    spec: EncoderSpec,
    epochs: int,
    rng: Rng,
    *,
    batch_size: int = 64,
    lr: float = 1e-3,
    holdout: np.ndarray | None = None,
    out_path=None,
    dtype=np.float32,
) -> PretrainResult:
    """Train a small autoencoder on `images`, then freeze and hash the encoder.

    epochs=0 freezes the random initialization, which is also a valid prior
    source. A weights container is written when out_path is given.
    """
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise ConfigError("pretraining dataset is empty")
    auto = ConvAutoencoder(spec, rng.derive("autoencoder-init"), dtype=dtype)
    init_loss = reconstruction_loss(auto, holdout, dtype) if holdout is not None else None

    loop_rng = rng.derive("pretrain-loop")
    opt = AdamW(lr=lr)
    pset = auto.param_set()
    params = dict(pset.items())
    step = 0
    for _ in range(int(epochs)):
        order = loop_rng.permutation(images.shape[0])
        for lo in range(0, images.shape[0], batch_size):
            idx = order[lo : lo + batch_size]
            x = Tensor(images[idx].astype(dtype))
            diff = auto.reconstruct(x) - x
            loss = tmean(diff * diff)
            if not np.isfinite(loss.data):
                raise NumericError("pretraining diverged (non-finite loss)", step=step)
            opt.step(params, grad(loss, pset))
            step += 1

    final_loss = reconstruction_loss(auto, holdout, dtype) if holdout is not None else None
    enc = auto.encoder
    enc.freeze()
    result = PretrainResult(enc, enc.content_hash(), init_loss, final_loss)
    if out_path is not None:
        from .checkpoint import save_encoder_weights

        result.weights_path = str(save_encoder_weights(out_path, enc, rng.seed))
    return result


# ---------------------------------------------------------------------------
# hierarchical feature extraction
# ---------------------------------------------------------------------------

@dataclass
class FeatureBank:
    """Pooled, flattened feature stacks per group, batch-first.

    tokens_by_group[g] has shape (B, K_g, L, C_g) with L = grid_side^2.
    """

    grid_side: int
    mid_id: str
    deep_id: str
    tokens_by_group: dict[str, np.ndarray] = field(default_factory=dict)

    def tokens(self, gid: str) -> np.ndarray:
        key = {"mid": self.mid_id, "deep": self.deep_id}.get(gid, gid)
        return self.tokens_by_group[key]

    def maps(self, gid: str) -> np.ndarray:
        """(B, K_g, C_g, S, S) view of the pooled feature maps."""
        return unflatten_tokens(self.tokens(gid), self.grid_side)

    @property
    def group_ids(self) -> tuple[str, ...]:
        return tuple(self.tokens_by_group)


def encode_hierarchy(
    encoder: ConvEncoder,
    partition: GroupPartition,
    images: np.ndarray,
    grid_side: int,
    include_shallow: bool = False,
) -> FeatureBank:
    """Pooled, flattened features for the mid/deep groups of a frozen encoder.

    The encoder must be frozen; no gradients ever reach it from downstream
    losses (features are extracted off-tape).
    """
    if not encoder.frozen:
        raise RuntimeError("encoder weights must be loaded and frozen before feature extraction")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[-1] < grid_side or images.shape[-2] < grid_side:
        raise ValueError(f"image extents {images.shape[-2:]} smaller than grid {grid_side}")
    encoder.calls += 1

    name_to_idx = {l.name: i for i, l in enumerate(encoder.spec.layers)}
    wanted = [partition.group(partition.mid_id), partition.group(partition.deep_id)]
    if include_shallow:
        wanted = [g for g in partition.groups if g.id not in (partition.mid_id, partition.deep_id)] + wanted
    with no_grad():
        taps = encoder.taps(Tensor(images.astype(np.float64)))
        bank = FeatureBank(grid_side, partition.mid_id, partition.deep_id)
        for g in wanted:
            stacks = []
            for name in g.layer_ids:
                fm = taps[name_to_idx[name]].data
                stacks.append(flatten_tokens(pool_to_grid(fm, grid_side)))
            bank.tokens_by_group[g.id] = np.stack(stacks, axis=1)  # (B, K, L, C)
    return bank


# ---------------------------------------------------------------------------
# feature cache (one record per image id, keyed by encoder hash)
# ---------------------------------------------------------------------------

_CACHE_HEADER_KEYS = ("encoder_hash", "S", "C_mid", "C_deep", "K_mid", "K_deep")


def compute_feature_arrays(
    encoder: ConvEncoder,
    partition: GroupPartition,
    images: np.ndarray,
    grid_side: int,
    batch_size: int = 256,
    dtype=np.float32,
) -> tuple[np.ndarray, np.ndarray]:
    """Mid/deep token stacks for a whole dataset: (N, K_g, L, C_g) each."""
    mids, deeps = [], []
    for lo in range(0, images.shape[0], batch_size):
        bank = encode_hierarchy(encoder, partition, images[lo : lo + batch_size], grid_side)
        mids.append(bank.tokens("mid").astype(dtype))
        deeps.append(bank.tokens("deep").astype(dtype))
    return np.concatenate(mids, axis=0), np.concatenate(deeps, axis=0)


def save_feature_cache(path, mid: np.ndarray, deep: np.ndarray, encoder_hash: str,
                       grid_side: int) -> None:
    header = {
        "encoder_hash": encoder_hash,
        "S": grid_side,
        "C_mid": mid.shape[-1],
        "C_deep": deep.shape[-1],
        "K_mid": mid.shape[1],
        "K_deep": deep.shape[1],
    }
    np.savez(path, mid=mid, deep=deep,
             **{f"header_{k}": np.asarray(v) for k, v in header.items()})


def load_feature_cache(path) -> tuple[np.ndarray, np.ndarray, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = {}
        for k in _CACHE_HEADER_KEYS:
            v = z[f"header_{k}"]
            header[k] = str(v) if v.dtype.kind in "US" else int(v)
        return z["mid"], z["deep"], header
