"""Lightweight parameter containers shared by the encoder, router and backbone."""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import ParamSet, Rng, Tensor, add, matmul


class Module:
    """Holds named parameter tensors and (optionally) named child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._params.items()]
        for cname, c in self._children.items():
            out.extend(c.named_params(prefix + cname + "."))
        return out

    def param_set(self, prefix: str = "") -> ParamSet:
        return ParamSet(self.named_params(prefix))

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.named_params():
            if n not in state:
                raise KeyError(f"missing parameter in state: {n}")
            src = np.asarray(state[n])
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {n}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_params():
            t.requires_grad = bool(flag)

    def astype(self, dtype) -> None:
        for _, t in self.named_params():
            t.data = t.data.astype(dtype)

    def content_hash(self) -> str:
        """SHA-256 over sorted (name, shape, bytes); stable across processes."""
        h = hashlib.sha256()
        for n, t in sorted(self.named_params()):
            h.update(n.encode())
            h.update(str(t.data.shape).encode())
            h.update(str(t.data.dtype).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None, dtype=np.float32) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(shape or (fan_in, fan_out), -limit, limit, dtype=dtype)


class Linear(Module):
    """Affine map y = x @ w + b for (..., d_in) inputs."""

    def __init__(self, rng: Rng, d_in: int, d_out: int, dtype=np.float32, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = xavier_uniform(rng, d_in, d_out, dtype=dtype)
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)
