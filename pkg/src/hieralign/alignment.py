"""Projection head and the per-token cosine alignment loss, plus the joint
objective bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Rng, Tensor, clip_min, conv2d, reshape, sqrt, tmean, transpose, tsum
from .errors import ConfigError
from .modules import Module, xavier_uniform

NORM_FLOOR = 1e-8


class ProjectionHead(Module):
    """One 3x3 convolution mapping backbone tokens onto the target channels.

    Tokens are reshaped onto their S x S grid, convolved (stride 1, padding 1,
    no nonlinearity) and flattened back, so each output token depends only on
    its 3x3 spatial neighborhood.
    """

    def __init__(self, d_model: int, out_channels: int, rng: Rng, dtype=np.float32):
        super().__init__()
        self.d_model, self.out_channels = int(d_model), int(out_channels)
        self.calls = 0
        fan_in, fan_out = d_model * 9, out_channels * 9
        self.param("w", xavier_uniform(rng, fan_in, fan_out, (out_channels, d_model, 3, 3), dtype))
        self.param("b", np.zeros(out_channels, dtype=dtype))

    def project(self, tokens: Tensor) -> Tensor:
        """(B, L, D) -> (B, L, out_channels); L must be a perfect square."""
        self.calls += 1
        b, l, d = tokens.shape
        s = math.isqrt(l)
        if s * s != l:
            raise ValueError(f"token count {l} is not a perfect square")
        grid = transpose(reshape(tokens, (b, s, s, d)), (0, 3, 1, 2))
        out = conv2d(grid, self._params["w"], self._params["b"], stride=1, padding=1)
        return reshape(transpose(out, (0, 2, 3, 1)), (b, l, self.out_channels))

    def namespace_meta(self) -> dict:
        return {"d_model": self.d_model, "out_channels": self.out_channels}


def align_loss(projected, target, floor: float = NORM_FLOOR) -> Tensor:
    """Mean over tokens (and batch) of 1 - cos(projected_r, target_r).

    Norms in the denominator are floored at `floor` so degenerate all-zero
    tokens cannot produce NaN. The value lies in [0, 2].
    """
    p = projected if isinstance(projected, Tensor) else Tensor(np.asarray(projected))
    z = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch: projected {p.shape} vs target {z.shape}")
    dots = tsum(p * z, axis=-1)
    denom = clip_min(sqrt(tsum(p * p, axis=-1)), floor) * clip_min(sqrt(tsum(z * z, axis=-1)), floor)
    return tmean(1.0 - dots / denom)


@dataclass
class LossBreakdown:
    """Joint objective record: loss_total = loss_diff + lam * loss_align, exactly."""

    loss_diff: float
    loss_align: float
    loss_total: float
    lam: float


def total_loss(loss_diff: float, loss_align: float, lam: float) -> LossBreakdown:
    """Exact weighted sum of the two objectives; lam must be nonnegative."""
    if lam < 0:
        raise ConfigError(f"alignment weight must be nonnegative, got {lam}")
    ld, la, w = float(loss_diff), float(loss_align), float(lam)
    for v in (ld, la):
        if not np.isfinite(v):
            raise ValueError("loss terms must be finite")
    return LossBreakdown(ld, la, ld + w * la, w)
