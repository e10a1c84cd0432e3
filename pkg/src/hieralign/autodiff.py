"""Minimal reverse-mode autodiff over numpy arrays.

Tensors wrap dense float arrays and record a tape of operations; `backward`
walks the tape to accumulate gradients. Diagnostics run in float64, training
may run in float32 (ops preserve the input dtype). A central-difference
oracle (`finite_diff_grad`) provides the independent check for every
differentiable op.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "GradientBatch",
    "Rng",
    "no_grad",
    "backward",
    "grad",
    "per_sample_grads",
    "finite_diff_grad",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float array with optional gradient tracking.

    Data is row-major; shape is whatever numpy carries. A Tensor produced by
    an op is treated as immutable. NaN/Inf entries are an error state that is
    checked at loss boundaries rather than per-op.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # store without copying; accumulation below is out-of-place, so a
        # gradient array shared between two parents is never mutated
        t.grad = g.astype(t.data.dtype) if g.dtype != t.data.dtype else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), _bw)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def _bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), _bw)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = a.data / b.data

    def _bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return _make(out, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    def _bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), _bw)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def _bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), _bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def _bw(g):
        _accum(a, g * out)

    return _make(out, (a,), _bw)


def log(a: Tensor) -> Tensor:
    def _bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), _bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def _bw(g):
        _accum(a, g * 0.5 / out)

    return _make(out, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def _bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), _bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-safe and uses numpy's SIMD tanh loop
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def _bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), _bw)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def _bw(g):
        # d silu = s * (1 + x * (1 - s)), built with in-place passes
        tmp = 1.0 - s
        tmp *= a.data
        tmp += 1.0
        tmp *= s
        tmp *= g
        _accum(a, tmp)

    return _make(out, (a,), _bw)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), _bw)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient is zero in the floored region."""
    mask = a.data > floor

    def _bw(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, floor), (a,), _bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), _bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = a.data.size / out.size

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / scale)

    return _make(out, (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    def _bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), _bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), _bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing only; index regions must not overlap."""
    out = a.data[idx]

    def _bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out.copy(), (a,), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with ndim >= 2")
    # collapse (..., M, K) @ (K, N) into one 2-D GEMM: numpy's batched matmul
    # runs one BLAS call per batch element, which dominates small-model cost
    if b.ndim == 2 and a.ndim > 2:
        ashape = a.data.shape
        a2 = a.data.reshape(-1, ashape[-1])
        out = (a2 @ b.data).reshape(*ashape[:-1], b.data.shape[-1])

        def _bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(ashape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        return _make(out, (a, b), _bw2)

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), _bw)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), _bw)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = a.data.shape[-1]

    def _bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - xhat * gxm))

    del n
    return _make(xhat, (a,), _bw)


def _pad2d(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    spec = ((0, 0),) * (x.ndim - 2) + ((p, p), (p, p))
    return np.pad(x, spec, mode="constant" if mode == "zeros" else "edge")


def _unpad2d_grad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "zeros":
        return gp[..., p:-p, p:-p]
    # edge padding replicates border pixels: fold their gradients back in
    g = gp[..., p:-p, p:-p].copy()
    g[..., 0, :] += gp[..., :p, p:-p].sum(axis=-2)
    g[..., -1, :] += gp[..., -p:, p:-p].sum(axis=-2)
    g[..., :, 0] += gp[..., p:-p, :p].sum(axis=-1)
    g[..., :, -1] += gp[..., p:-p, -p:].sum(axis=-1)
    g[..., 0, 0] += gp[..., :p, :p].sum(axis=(-1, -2))
    g[..., 0, -1] += gp[..., :p, -p:].sum(axis=(-1, -2))
    g[..., -1, 0] += gp[..., -p:, :p].sum(axis=(-1, -2))
    g[..., -1, -1] += gp[..., -p:, -p:].sum(axis=(-1, -2))
    return g


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 1,
    pad_mode: str = "zeros",
) -> Tensor:
    """2-D convolution, NCHW layout, square kernel, via im2col.

    x: (B, C, H, W); w: (O, C, kh, kw); returns (B, O, Ho, Wo).
    pad_mode "edge" replicates borders (used by the feature encoder so that a
    constant field stays constant under convolution).
    """
    B, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    s, p = int(stride), int(padding)
    xp = _pad2d(x.data, p, pad_mode)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    w2 = w.data.reshape(O, C * kh * kw)
    out2 = cols @ w2.T
    if b is not None:
        out2 = out2 + b.data
    out = out2.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            _accum(w, (g2.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + Ho * s : s, j : j + Wo * s : s] += gcols[..., i, j]
            _accum(x, _unpad2d_grad(gxp, p, pad_mode))

    return _make(np.ascontiguousarray(out), parents, _bw)


def adaptive_avg_pool2d(x: Tensor, out_side: int) -> Tensor:
    """Adaptive average pooling of the trailing two axes onto out_side^2 cells.

    Cell (a, b) averages the window rows [floor(a*H/S), ceil((a+1)*H/S)) and
    the matching columns. Requires H >= S and W >= S.
    """
    S = int(out_side)
    *lead, H, W = x.data.shape
    if H < S or W < S:
        raise ValueError(f"adaptive_avg_pool2d: input {H}x{W} smaller than grid {S}x{S}")
    if H % S == 0 and W % S == 0:
        hk, wk = H // S, W // S
        out = x.data.reshape(*lead, S, hk, S, wk).mean(axis=(-3, -1))

        def _bw(g):
            gx = np.broadcast_to(
                g[..., :, None, :, None] / (hk * wk), (*lead, S, hk, S, wk)
            ).reshape(x.data.shape)
            _accum(x, gx)

        return _make(out, (x,), _bw)

    bounds_h = [((a * H) // S, -((-(a + 1) * H) // S)) for a in range(S)]
    bounds_w = [((b * W) // S, -((-(b + 1) * W) // S)) for b in range(S)]
    out = np.empty((*lead, S, S), dtype=x.data.dtype)
    for a, (r0, r1) in enumerate(bounds_h):
        for b, (c0, c1) in enumerate(bounds_w):
            out[..., a, b] = x.data[..., r0:r1, c0:c1].mean(axis=(-1, -2))

    def _bw(g):
        gx = np.zeros_like(x.data)
        for a, (r0, r1) in enumerate(bounds_h):
            for b, (c0, c1) in enumerate(bounds_w):
                n = (r1 - r0) * (c1 - c0)
                gx[..., r0:r1, c0:c1] += g[..., a, b, None, None] / n
        _accum(x, gx)

    return _make(out, (x,), _bw)


def upsample_nearest2d(x: Tensor, factor: int) -> Tensor:
    k = int(factor)
    out = np.repeat(np.repeat(x.data, k, axis=-2), k, axis=-1)

    def _bw(g):
        *lead, H, W = x.data.shape
        _accum(x, g.reshape(*lead, H, k, W, k).sum(axis=(-3, -1)))

    return _make(out, (x,), _bw)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather from a (N, D) table with scatter-add backward."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _make(out.copy(), (table,), _bw)


# ---------------------------------------------------------------------------
# backward pass and gradient extraction
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` for every reachable tensor."""
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


class ParamSet:
    """Named parameter tensors with a stable, declared ordering.

    Flattening follows declaration order, row-major within each tensor.
    """

    def __init__(self, named: Iterable[tuple[str, Tensor]] | Mapping[str, Tensor]):
        if isinstance(named, Mapping):
            pairs = list(named.items())
        else:
            pairs = list(named)
        names = [n for n, _ in pairs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self._names: tuple[str, ...] = tuple(names)
        self._tensors: dict[str, Tensor] = dict(pairs)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def total_dim(self) -> int:
        return sum(self._tensors[n].size for n in self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, self._tensors[n]) for n in self._names)

    def subset(self, names: Sequence[str]) -> "ParamSet":
        return ParamSet([(n, self._tensors[n]) for n in names])

    def flatten(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(values[n]).ravel() for n in self._names])

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        k = 0
        for n in self._names:
            t = self._tensors[n]
            out[n] = vec[k : k + t.size].reshape(t.shape)
            k += t.size
        return out


@dataclass
class GradientBatch:
    """B flattened per-sample gradient vectors over a declared parameter subset."""

    per_sample: np.ndarray  # (B, total_dim)
    param_subset: tuple[str, ...]

    def __post_init__(self):
        self.per_sample = np.asarray(self.per_sample)
        if self.per_sample.ndim != 2 or self.per_sample.shape[0] < 1:
            raise ValueError("per_sample must be a (B, dim) array with B >= 1")

    @property
    def batch_size(self) -> int:
        return self.per_sample.shape[0]


def grad(loss: Tensor, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss for every parameter; unreachable params get zeros."""
    for _, t in params.items():
        t.grad = None
    backward(loss)
    out = {}
    for name, t in params.items():
        out[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return out


def per_sample_grads(loss_fn: Callable, batch: Sequence, params: ParamSet) -> GradientBatch:
    """One backward pass per sample (micro-batch of one), rows in param order."""
    if len(batch) < 1:
        raise ValueError("per_sample_grads requires a non-empty batch")
    rows = []
    for sample in batch:
        g = grad(loss_fn(sample), params)
        rows.append(params.flatten(g))
    return GradientBatch(np.stack(rows), params.names)


def finite_diff_grad(f: Callable[[], float], params: ParamSet, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of f() under in-place parameter perturbation.

    f is evaluated with gradients disabled; any non-finite value at a probe
    point is an error.
    """
    if h <= 0:
        raise ValueError("step h must be positive")

    def _eval() -> float:
        with no_grad():
            v = f()
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise FloatingPointError("finite_diff_grad: objective is not finite at a probe point")
        return v

    out = {}
    for name, t in params.items():
        g = np.zeros(t.size, dtype=np.float64)
        flat = t.data.reshape(-1)
        for k in range(t.size):
            v0 = flat[k]
            flat[k] = v0 + h
            fp = _eval()
            flat[k] = v0 - h
            fm = _eval()
            flat[k] = v0
            g[k] = (fp - fm) / (2.0 * h)
        out[name] = g.reshape(t.shape)
    return out


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; identical seed and draw sequence give identical values."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, key: str) -> "Rng":
        """Independent child stream keyed by name (does not advance this stream)."""
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        u = self._gen.random(shape, dtype=dtype)
        if low != 0.0 or high != 1.0:
            u = low + (high - low) * u
        return u

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state
