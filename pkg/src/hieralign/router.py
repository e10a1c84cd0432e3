"""Timestep-conditioned dynamic router: linear time embedding, MLP head
emitting intra-group and inter-group logits, softmax aggregation and sigmoid
scaling into the composed alignment target. Includes the non-learned
scheduling baselines and the lookup-table router variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Rng,
    Tensor,
    concat,
    embedding,
    matmul,
    reshape,
    sigmoid,
    silu,
    softmax,
    tsum,
)
from .errors import ConfigError
from .modules import Module, xavier_uniform


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timestep outside [0, 1]: {t}")
    return t


@dataclass
class RouterOutput:
    """Raw router logits for one timestep."""

    alpha_logits_mid: np.ndarray
    alpha_logits_deep: np.ndarray
    beta_logits: np.ndarray

    def __post_init__(self):
        self.alpha_logits_mid = np.atleast_1d(np.asarray(self.alpha_logits_mid, dtype=np.float64))
        self.alpha_logits_deep = np.atleast_1d(np.asarray(self.alpha_logits_deep, dtype=np.float64))
        self.beta_logits = np.atleast_1d(np.asarray(self.beta_logits, dtype=np.float64))
        if self.beta_logits.shape != (2,):
            raise ValueError("expected exactly two inter-group logits")
        for a in (self.alpha_logits_mid, self.alpha_logits_deep, self.beta_logits):
            if not np.isfinite(a).all():
                raise ValueError("router logits must be finite")

    @property
    def total_logits(self) -> int:
        return self.alpha_logits_mid.size + self.alpha_logits_deep.size + 2


@dataclass
class AlignmentTarget:
    """Composed, channel-concatenated alignment target for one timestep.

    tokens: (L, C_mid + C_deep); the first C_mid channels come from the mid
    group, the rest from the deep group.
    """

    tokens: np.ndarray
    beta: np.ndarray
    alpha_mid: np.ndarray
    alpha_deep: np.ndarray
    c_mid: int

    def __post_init__(self):
        for a in (self.alpha_mid, self.alpha_deep):
            if np.any(a < 0) or abs(float(a.sum()) - 1.0) > 1e-6:
                raise ValueError("alpha weights must be a simplex (nonnegative, sum 1)")


def _np_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class DynamicRouter(Module):
    """Linear time embedding feeding a smooth MLP head.

    The output layer is zero-initialized, so at step 0 every alpha is uniform
    and every beta is 0.5 for any t. Hidden activations are SiLU, keeping the
    routing policy continuous in t.
    """

    variant = "mlp"

    def __init__(self, k_mid: int, k_deep: int, d_embed: int = 128, hidden: int = 256,
                 depth: int = 4, dtype=np.float32, rng: Rng | None = None):
        super().__init__()
        if depth < 2:
            raise ConfigError("router MLP needs at least an embedding-facing and an output layer")
        self.k_mid, self.k_deep = int(k_mid), int(k_deep)
        self.d_embed, self.hidden, self.depth = int(d_embed), int(hidden), int(depth)
        self.dtype = dtype
        self.calls = 0
        self._initialized = False
        if rng is not None:
            self.init_params(rng)

    @property
    def k_total(self) -> int:
        return self.k_mid + self.k_deep + 2

    def init_params(self, rng: Rng) -> "DynamicRouter":
        dt = self.dtype
        self.param("embed.w", xavier_uniform(rng, 1, self.d_embed, (1, self.d_embed), dt))
        self.param("embed.b", np.zeros(self.d_embed, dtype=dt))
        dims = [self.d_embed] + [self.hidden] * (self.depth - 1) + [self.k_total]
        for i in range(self.depth):
            d_in, d_out = dims[i], dims[i + 1]
            last = i == self.depth - 1
            w = np.zeros((d_in, d_out), dtype=dt) if last else xavier_uniform(rng, d_in, d_out, dtype=dt)
            self.param(f"mlp.{i}.w", w)
            self.param(f"mlp.{i}.b", np.zeros(d_out, dtype=dt))
        self._initialized = True
        return self

    def _require_init(self):
        if not self._initialized:
            raise RuntimeError("router parameters are uninitialized; call init_params first")

    def embed_time(self, t) -> Tensor:
        """Affine embedding e(t) = W t + b for t (or a batch of t) in [0, 1]."""
        self._require_init()
        ts = _check_time(t).reshape(-1, 1).astype(self.dtype)
        return matmul(Tensor(ts), self._params["embed.w"]) + self._params["embed.b"]

    def logits(self, t) -> Tensor:
        """(B, K_mid + K_deep + 2) raw logits; differentiable w.r.t. router params."""
        self._require_init()
        self.calls += 1
        h = self.embed_time(t)
        for i in range(self.depth):
            h = matmul(h, self._params[f"mlp.{i}.w"]) + self._params[f"mlp.{i}.b"]
            if i < self.depth - 1:
                h = silu(h)
        return h

    def route(self, t: float) -> RouterOutput:
        z = self.logits(float(t)).data[0]
        return RouterOutput(z[: self.k_mid], z[self.k_mid : self.k_mid + self.k_deep], z[-2:])

    def namespace_meta(self) -> dict:
        return {"D_embed": self.d_embed, "hidden": self.hidden, "depth": self.depth,
                "K_mid": self.k_mid, "K_deep": self.k_deep, "variant": self.variant}


class LutRouter(Module):
    """Piecewise-constant router: N learnable logit rows indexed by floor(t*N)."""

    variant = "lut"

    def __init__(self, k_mid: int, k_deep: int, bins: int = 10, dtype=np.float32,
                 table: np.ndarray | None = None):
        super().__init__()
        if bins < 1:
            raise ConfigError("lookup table needs at least one bin")
        self.k_mid, self.k_deep, self.bins = int(k_mid), int(k_deep), int(bins)
        self.calls = 0
        k_total = self.k_mid + self.k_deep + 2
        init = np.zeros((self.bins, k_total), dtype=dtype) if table is None else np.asarray(table, dtype=dtype)
        if init.shape != (self.bins, k_total):
            raise ConfigError(f"lookup table must be ({self.bins}, {k_total})")
        self.table = self.param("table", init)

    @property
    def k_total(self) -> int:
        return self.k_mid + self.k_deep + 2

    def bin_index(self, t) -> np.ndarray:
        ts = _check_time(t)
        return np.minimum((ts * self.bins).astype(np.int64), self.bins - 1)

    def logits(self, t) -> Tensor:
        self.calls += 1
        idx = np.atleast_1d(self.bin_index(t))
        return embedding(self.table, idx)

    def route(self, t: float) -> RouterOutput:
        z = self.logits(float(t)).data[0]
        return RouterOutput(z[: self.k_mid], z[self.k_mid : self.k_mid + self.k_deep], z[-2:])

    def namespace_meta(self) -> dict:
        return {"D_embed": 0, "hidden": 0, "depth": 0, "K_mid": self.k_mid,
                "K_deep": self.k_deep, "variant": self.variant, "bins": self.bins}


BASELINE_KINDS = ("static_uniform", "linear_heuristic")


def schedule_baseline(kind: str, t: float, k_mid: int, k_deep: int):
    """Non-learned scheduling baselines.

    static_uniform ignores t: uniform alphas, beta = (1, 1).
    linear_heuristic: uniform alphas, beta = (1 - t, t).
    """
    _check_time(t)
    alpha_mid = np.full(k_mid, 1.0 / k_mid)
    alpha_deep = np.full(k_deep, 1.0 / k_deep)
    if kind == "static_uniform":
        beta = np.array([1.0, 1.0])
    elif kind == "linear_heuristic":
        beta = np.array([1.0 - t, t])
    else:
        raise ConfigError(f"unknown baseline scheduler: {kind!r}")
    return alpha_mid, alpha_deep, beta


def aggregate_group(group_tokens: np.ndarray, alpha_logits: np.ndarray) -> np.ndarray:
    """Softmax-weighted sum of a (K, L, C) feature stack, tokenwise."""
    group_tokens = np.asarray(group_tokens)
    alpha_logits = np.asarray(alpha_logits, dtype=np.float64)
    if alpha_logits.shape != (group_tokens.shape[0],):
        raise ValueError(
            f"logit count {alpha_logits.shape} does not match layer count {group_tokens.shape[0]}")
    w = _np_softmax(alpha_logits)
    return np.tensordot(w, group_tokens, axes=(0, 0))


def compose_target(v_mid: np.ndarray, v_deep: np.ndarray, beta_logits: np.ndarray,
                   alpha_mid: np.ndarray | None = None,
                   alpha_deep: np.ndarray | None = None) -> AlignmentTarget:
    """Sigmoid-scale the two aggregated groups and concatenate along channels."""
    v_mid, v_deep = np.asarray(v_mid), np.asarray(v_deep)
    if v_mid.shape[0] != v_deep.shape[0]:
        raise ValueError(f"token-count mismatch: {v_mid.shape[0]} vs {v_deep.shape[0]}")
    beta = _np_sigmoid(np.asarray(beta_logits, dtype=np.float64))
    tokens = np.concatenate([beta[0] * v_mid, beta[1] * v_deep], axis=-1)
    if alpha_mid is None:
        alpha_mid = np.full(1, 1.0)
    if alpha_deep is None:
        alpha_deep = np.full(1, 1.0)
    return AlignmentTarget(tokens, beta, np.asarray(alpha_mid), np.asarray(alpha_deep),
                           c_mid=v_mid.shape[-1])


def build_target(bank, router_out: RouterOutput) -> AlignmentTarget:
    """Aggregate a FeatureBank (single image) under a RouterOutput."""
    mid = bank.tokens("mid")
    deep = bank.tokens("deep")
    if mid.ndim == 4:
        if mid.shape[0] != 1:
            raise ValueError("build_target expects a single-image bank")
        mid, deep = mid[0], deep[0]
    v_mid = aggregate_group(mid, router_out.alpha_logits_mid)
    v_deep = aggregate_group(deep, router_out.alpha_logits_deep)
    return compose_target(v_mid, v_deep, router_out.beta_logits,
                          _np_softmax(router_out.alpha_logits_mid),
                          _np_softmax(router_out.alpha_logits_deep))


# ---------------------------------------------------------------------------
# routing policies: one interface over learned routers and fixed schedules
# ---------------------------------------------------------------------------

POLICY_KINDS = ("learned", "static_uniform", "linear_heuristic", "uniform_mid", "uniform_deep")


class RoutingPolicy:
    """Produces per-timestep (alpha_mid, alpha_deep, beta) weight batches.

    Learned policies return autodiff Tensors so the alignment loss trains the
    router jointly; fixed policies return constant arrays. The single-group
    diagnostic policies (uniform_mid / uniform_deep) align only their group's
    channel half (target_mode), mirroring single-group supervision rather
    than a composed target with a zeroed half.
    """

    def __init__(self, kind: str, k_mid: int, k_deep: int, router: Module | None = None):
        if kind not in POLICY_KINDS:
            raise ConfigError(f"unknown routing policy: {kind!r}")
        if kind == "learned" and router is None:
            raise ConfigError("learned policy requires a router")
        self.kind = kind
        self.k_mid, self.k_deep = int(k_mid), int(k_deep)
        self.router = router
        self._fixed_calls = 0

    @property
    def target_mode(self) -> str:
        """Which channel span the alignment cosine covers: both | mid | deep."""
        if self.kind == "uniform_mid":
            return "mid"
        if self.kind == "uniform_deep":
            return "deep"
        return "both"

    @property
    def calls(self) -> int:
        return self.router.calls if self.router is not None else self._fixed_calls

    def weights(self, t):
        """(alpha_mid, alpha_deep, beta), each batched over t."""
        ts = np.atleast_1d(_check_time(t))
        b = ts.shape[0]
        if self.kind == "learned":
            z = self.router.logits(ts)
            alpha_mid = softmax(z[:, : self.k_mid], axis=-1)
            alpha_deep = softmax(z[:, self.k_mid : self.k_mid + self.k_deep], axis=-1)
            beta = sigmoid(z[:, self.k_mid + self.k_deep :])
            return alpha_mid, alpha_deep, beta
        self._fixed_calls += 1
        alpha_mid = np.full((b, self.k_mid), 1.0 / self.k_mid)
        alpha_deep = np.full((b, self.k_deep), 1.0 / self.k_deep)
        if self.kind == "static_uniform":
            beta = np.ones((b, 2))
        elif self.kind == "linear_heuristic":
            beta = np.stack([1.0 - ts, ts], axis=1)
        elif self.kind == "uniform_mid":
            beta = np.broadcast_to(np.array([1.0, 0.0]), (b, 2)).copy()
        else:  # uniform_deep
            beta = np.broadcast_to(np.array([0.0, 1.0]), (b, 2)).copy()
        return alpha_mid, alpha_deep, beta

    def trainable(self) -> Module | None:
        return self.router if self.kind == "learned" else None


def compose_target_batch(bank_mid: np.ndarray, bank_deep: np.ndarray,
                         alpha_mid, alpha_deep, beta) -> Tensor:
    """Batched alignment-target composition on the autodiff tape.

    bank_*: (B, K, L, C) constants; alpha_*: (B, K); beta: (B, 2). Returns a
    (B, L, C_mid + C_deep) Tensor; gradients flow into the weights only.
    """
    bm, bd = Tensor(bank_mid), Tensor(bank_deep)
    am = alpha_mid if isinstance(alpha_mid, Tensor) else Tensor(np.asarray(alpha_mid, dtype=bank_mid.dtype))
    ad = alpha_deep if isinstance(alpha_deep, Tensor) else Tensor(np.asarray(alpha_deep, dtype=bank_deep.dtype))
    bt = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta, dtype=bank_mid.dtype))
    b, k_mid = am.shape
    v_mid = tsum(reshape(am, (b, k_mid, 1, 1)) * bm, axis=1)
    v_deep = tsum(reshape(ad, (b, ad.shape[1], 1, 1)) * bd, axis=1)
    beta_mid = reshape(bt[:, 0:1], (b, 1, 1))
    beta_deep = reshape(bt[:, 1:2], (b, 1, 1))
    return concat([beta_mid * v_mid, beta_deep * v_deep], axis=-1)
