"""Small patch diffusion transformer with timestep/class conditioning, the
linear interpolant with velocity-prediction loss, an Euler sampler with
classifier-free guidance, and the hidden-state tap at the alignment depth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    Rng,
    Tensor,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    silu,
    softmax,
    tmean,
    transpose,
)
from .errors import ConfigError
from .modules import Module, xavier_uniform


def default_align_depth(depth: int) -> int:
    """Alignment tap at ~25% of model depth (block index is 1-based)."""
    return max(1, round(0.25 * depth))


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 6
    hidden: int = 128
    heads: int = 4
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    num_classes: int = 8
    align_depth: int | None = None  # None -> default_align_depth(depth)
    cfg_dropout_prob: float = 0.1
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.image_size % self.patch != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.hidden % 4 != 0:
            raise ConfigError("hidden dim must be divisible by 4 for the 2-D position encoding")
        l = self.resolved_align_depth
        if not 1 <= l <= self.depth:
            raise ConfigError(f"align depth {l} outside [1, {self.depth}]")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch**2

    @property
    def resolved_align_depth(self) -> int:
        return self.align_depth if self.align_depth is not None else default_align_depth(self.depth)


@dataclass
class InterpolantState:
    """Linear-path interpolant: x_t = (1-t) x + t eps, v_target = eps - x."""

    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray


def interpolate(x: np.ndarray, eps: np.ndarray, t) -> InterpolantState:
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t, dtype=x.dtype)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = t_arr.reshape((-1,) + (1,) * (x.ndim - 1)) if t_arr.ndim == 1 else t_arr
    x_t = (1.0 - tb) * x + tb * eps
    return InterpolantState(x, eps, t_arr, x_t, eps - x)


def diffusion_loss(v_pred: Tensor, v_target) -> Tensor:
    """Mean squared error over all elements and the batch."""
    tgt = v_target if isinstance(v_target, Tensor) else Tensor(np.asarray(v_target, dtype=v_pred.dtype))
    if v_pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {v_pred.shape} vs {tgt.shape}")
    diff = v_pred - tgt
    return tmean(diff * diff)


def _sincos_1d(d: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d // 2))
    ang = np.outer(pos, omega)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_pos_embed_2d(d: int, grid_side: int) -> np.ndarray:
    """Fixed 2-D sin/cos position encoding over the row-major token grid."""
    r = np.arange(grid_side * grid_side)
    return np.concatenate([_sincos_1d(d // 2, r // grid_side), _sincos_1d(d // 2, r % grid_side)], axis=1)


class PatchTransformer(Module):
    """Patchify -> adaLN-modulated transformer blocks -> velocity head.

    Conditioning is additive timestep + class embeddings driving per-block
    scale/shift/gate modulation; modulation and the final head are
    zero-initialized so blocks start as identities.
    """

    def __init__(self, cfg: BackboneConfig, rng: Rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        d = cfg.hidden
        self.pos = sincos_pos_embed_2d(d, cfg.grid_side).astype(dtype)
        self._t_freqs = np.exp(
            -np.log(10000.0) * np.arange(d // 2, dtype=np.float64) / (d // 2)
        )
        self.param("patch.w", xavier_uniform(rng, cfg.patch_dim, d, dtype=dtype))
        self.param("patch.b", np.zeros(d, dtype=dtype))
        self.param("tmlp.w1", xavier_uniform(rng, d, d, dtype=dtype))
        self.param("tmlp.b1", np.zeros(d, dtype=dtype))
        self.param("tmlp.w2", xavier_uniform(rng, d, d, dtype=dtype))
        self.param("tmlp.b2", np.zeros(d, dtype=dtype))
        self.param("label.table", (0.02 * rng.normal((cfg.num_classes + 1, d))).astype(dtype))
        m = cfg.mlp_ratio * d
        for i in range(cfg.depth):
            p = f"block{i + 1}."
            self.param(p + "mod.w", np.zeros((d, 6 * d), dtype=dtype))
            self.param(p + "mod.b", np.zeros(6 * d, dtype=dtype))
            self.param(p + "qkv.w", xavier_uniform(rng, d, 3 * d, dtype=dtype))
            self.param(p + "qkv.b", np.zeros(3 * d, dtype=dtype))
            self.param(p + "attn.w", xavier_uniform(rng, d, d, dtype=dtype))
            self.param(p + "attn.b", np.zeros(d, dtype=dtype))
            self.param(p + "mlp.w1", xavier_uniform(rng, d, m, dtype=dtype))
            self.param(p + "mlp.b1", np.zeros(m, dtype=dtype))
            self.param(p + "mlp.w2", xavier_uniform(rng, m, d, dtype=dtype))
            self.param(p + "mlp.b2", np.zeros(d, dtype=dtype))
        self.param("final.mod.w", np.zeros((d, 2 * d), dtype=dtype))
        self.param("final.mod.b", np.zeros(2 * d, dtype=dtype))
        self.param("final.w", np.zeros((d, cfg.patch_dim), dtype=dtype))
        self.param("final.b", np.zeros(cfg.patch_dim, dtype=dtype))

    @property
    def null_label(self) -> int:
        return self.cfg.num_classes

    # -- conditioning ------------------------------------------------------

    def _time_features(self, t: np.ndarray) -> np.ndarray:
        ang = np.outer(np.asarray(t, dtype=np.float64) * 1000.0, self._t_freqs)
        return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(self.dtype)

    def _condition(self, t: np.ndarray, labels: np.ndarray) -> Tensor:
        feat = Tensor(self._time_features(t))
        h = silu(matmul(feat, self._params["tmlp.w1"]) + self._params["tmlp.b1"])
        t_emb = matmul(h, self._params["tmlp.w2"]) + self._params["tmlp.b2"]
        from .autodiff import embedding

        y_emb = embedding(self._params["label.table"], labels)
        return t_emb + y_emb

    def _check_labels(self, labels, batch: int) -> np.ndarray:
        if labels is None:
            return np.full(batch, self.null_label, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim == 0:
            labels = np.full(batch, int(labels), dtype=np.int64)
        if np.any(labels < 0) or np.any(labels > self.null_label):
            raise ValueError(f"class label out of range [0, {self.null_label}]")
        return labels

    # -- patch grid --------------------------------------------------------

    def patchify(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        c, p, s = self.cfg.channels, self.cfg.patch, self.cfg.grid_side
        g = reshape(x, (b, c, s, p, s, p))
        g = transpose(g, (0, 2, 4, 1, 3, 5))
        return reshape(g, (b, s * s, c * p * p))

    def unpatchify(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        c, p, s = self.cfg.channels, self.cfg.patch, self.cfg.grid_side
        g = reshape(tokens, (b, s, s, c, p, p))
        g = transpose(g, (0, 3, 1, 4, 2, 5))
        return reshape(g, (b, c, s * p, s * p))

    # -- transformer -------------------------------------------------------

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        b, l, d = x.shape
        nh = self.cfg.heads
        dh = d // nh
        qkv = matmul(x, self._params[prefix + "qkv.w"]) + self._params[prefix + "qkv.b"]
        qkv = transpose(reshape(qkv, (b, l, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        out = matmul(softmax(scores, axis=-1), v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, l, d))
        return matmul(out, self._params[prefix + "attn.w"]) + self._params[prefix + "attn.b"]

    def _block(self, x: Tensor, c: Tensor, i: int) -> Tensor:
        p = f"block{i}."
        d = self.cfg.hidden
        b = c.shape[0]
        m = matmul(silu(c), self._params[p + "mod.w"]) + self._params[p + "mod.b"]
        mods = [reshape(m[:, j * d : (j + 1) * d], (b, 1, d)) for j in range(6)]
        shift1, scale1, gate1, shift2, scale2, gate2 = mods
        h = layer_norm(x) * (1.0 + scale1) + shift1
        x = x + gate1 * self._attention(h, p)
        h = layer_norm(x) * (1.0 + scale2) + shift2
        w1, b1 = self._params[p + "mlp.w1"], self._params[p + "mlp.b1"]
        w2, b2 = self._params[p + "mlp.w2"], self._params[p + "mlp.b2"]
        return x + gate2 * (matmul(silu(matmul(h, w1) + b1), w2) + b2)

    def forward(self, x_t, t, labels=None, stop_at_block: int | None = None):
        """Velocity prediction plus the block-l hidden-state tap.

        x_t: (B, C, H, W) array or Tensor; t: scalar or (B,); labels: ints in
        [0, num_classes] where num_classes is the learned null (CFG-dropped)
        embedding, or None for all-null. Returns (v_pred, h_l); with
        stop_at_block set, returns (None, h_block) early.
        """
        xt = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        b = xt.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        labels = self._check_labels(labels, b)
        cond = self._condition(t, labels)
        h = matmul(self.patchify(xt), self._params["patch.w"]) + self._params["patch.b"]
        h = h + Tensor(self.pos)
        h_l = None
        l_tap = self.cfg.resolved_align_depth
        limit = stop_at_block if stop_at_block is not None else self.cfg.depth
        for i in range(1, self.cfg.depth + 1):
            if i > limit:
                break
            h = self._block(h, cond, i)
            if i == l_tap:
                h_l = h
            if stop_at_block is not None and i == stop_at_block:
                return None, h
        d = self.cfg.hidden
        fm = matmul(silu(cond), self._params["final.mod.w"]) + self._params["final.mod.b"]
        shift = reshape(fm[:, :d], (b, 1, d))
        scale = reshape(fm[:, d:], (b, 1, d))
        out = layer_norm(h) * (1.0 + scale) + shift
        out = matmul(out, self._params["final.w"]) + self._params["final.b"]
        return self.unpatchify(out), h_l

    def velocity(self, x: np.ndarray, t: float, labels=None) -> np.ndarray:
        """Inference-only velocity field used by the sampler."""
        with no_grad():
            v, _ = self.forward(x, t, labels)
        return v.data

    @property
    def supports_unconditional(self) -> bool:
        return True


def sample_euler(model, class_label, nfe: int, cfg_scale: float, rng: Rng,
                 sample_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Integrate dx/dt = v from t=1 (noise) to t=0 on a uniform grid.

    The grid is t_k = 1 - k/nfe; the final step integrates from t = 1/nfe to 0
    using the velocity evaluated at 1/nfe. With cfg_scale != 1 the guided
    velocity v_u + cfg_scale (v_c - v_u) is used, which requires a model with
    an unconditional branch; cfg_scale == 1 runs the conditional branch only.
    Never touches the encoder, router, or projection head.
    """
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be nonnegative")
    guided = cfg_scale != 1.0
    if guided and not getattr(model, "supports_unconditional", True):
        raise ValueError("cfg_scale != 1 requires a model with an unconditional branch")
    labels = np.atleast_1d(np.asarray(class_label, dtype=np.int64))
    shape = sample_shape if sample_shape is not None else (
        model.cfg.channels, model.cfg.image_size, model.cfg.image_size)
    x = rng.normal((labels.shape[0], *shape))
    for k in range(nfe):
        t_k = 1.0 - k / nfe
        if guided:
            v_c = model.velocity(x, t_k, labels)
            v_u = model.velocity(x, t_k, None)
            v = v_u + cfg_scale * (v_c - v_u)
        else:
            v = model.velocity(x, t_k, labels)
        x = x - v / nfe
    return x
