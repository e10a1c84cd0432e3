"""Single-file containers for checkpoints and frozen encoder weights.

Containers are npz archives with a magic tag, a format version, a JSON
metadata block, and named arrays. Loads validate magic/version and (for
checkpoints) the config hash, refusing mismatches unless overridden.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = "HIERALIGN"
FORMAT_VERSION = 1


def arrays_hash(arrays: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over sorted (name, shape, dtype, bytes); filesystem-independent."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _save_container(path, kind: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        __magic__=np.asarray(MAGIC),
        __format_version__=np.asarray(FORMAT_VERSION),
        __kind__=np.asarray(kind),
        __meta__=np.asarray(json.dumps(meta)),
        **{f"arr.{k}": np.asarray(v) for k, v in arrays.items()},
    )
    return path


def _load_container(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            names = set(z.files)
            if "__magic__" not in names or str(z["__magic__"]) != MAGIC:
                raise CheckpointError(f"{path}: bad container magic")
            version = int(z["__format_version__"])
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {version}")
            if str(z["__kind__"]) != kind:
                raise CheckpointError(f"{path}: container kind {z['__kind__']} != {kind}")
            meta = json.loads(str(z["__meta__"]))
            arrays = {n[4:]: z[n] for n in names if n.startswith("arr.")}
        return meta, arrays
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable container ({exc})") from exc


# ---------------------------------------------------------------------------
# frozen encoder weights
# ---------------------------------------------------------------------------

def save_encoder_weights(path, encoder, seed: int) -> Path:
    from .encoder import ConvEncoder  # noqa: F401  (type only)

    arrays = encoder.state()
    spec = encoder.spec
    meta = {
        "format_version": FORMAT_VERSION,
        "encoder_spec": {
            "layers": [[l.name, l.channels, l.resolution] for l in spec.layers],
            "in_channels": spec.in_channels,
            "input_size": spec.input_size,
            "latent_channels": spec.latent_channels,
        },
        "seed": int(seed),
        "content_hash": encoder.content_hash(),
    }
    return _save_container(path, "encoder-weights", meta, arrays)


def load_encoder_weights(path, dtype=np.float32):
    """Rebuild a frozen ConvEncoder from a weights container."""
    from .autodiff import Rng
    from .encoder import ConvEncoder, EncoderSpec, LayerSpec

    meta, arrays = _load_container(path, "encoder-weights")
    sp = meta["encoder_spec"]
    spec = EncoderSpec(
        tuple(LayerSpec(n, int(c), int(r)) for n, c, r in sp["layers"]),
        in_channels=int(sp["in_channels"]),
        input_size=int(sp["input_size"]),
        latent_channels=int(sp["latent_channels"]),
    )
    enc = ConvEncoder(spec, Rng(0), dtype=dtype)
    enc.load_state(arrays)
    enc.freeze()
    if enc.content_hash() != meta["content_hash"]:
        raise CheckpointError(f"{path}: weights content hash mismatch")
    return enc


# ---------------------------------------------------------------------------
# training checkpoints
# ---------------------------------------------------------------------------

@dataclass
class CheckpointData:
    step: int
    config_hash: str
    model: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    opt: dict
    rng_state: dict
    meta: dict
    warnings: list[str] = field(default_factory=list)


def save_checkpoint(
    path,
    *,
    config_hash: str,
    step: int,
    model: Mapping[str, np.ndarray],
    ema: Mapping[str, np.ndarray],
    opt_state: dict,
    rng_state: dict,
    extra_meta: dict | None = None,
) -> Path:
    arrays: dict[str, np.ndarray] = {}
    arrays.update({f"model.{k}": v for k, v in model.items()})
    arrays.update({f"ema.{k}": v for k, v in ema.items()})
    arrays.update({f"opt_m.{k}": v for k, v in opt_state["m"].items()})
    arrays.update({f"opt_v.{k}": v for k, v in opt_state["v"].items()})
    meta = {
        "config_hash": config_hash,
        "step": int(step),
        "opt_t": int(opt_state["t"]),
        "rng_state": rng_state,
        "model_hash": arrays_hash(dict(model)),
    }
    if extra_meta:
        meta.update(extra_meta)
    return _save_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path, expect_config_hash: str | None = None, override: bool = False) -> CheckpointData:
    meta, arrays = _load_container(path, "checkpoint")
    warnings: list[str] = []
    if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
        msg = (f"config hash mismatch: checkpoint {meta['config_hash'][:12]} vs "
               f"current {expect_config_hash[:12]}")
        if not override:
            raise CheckpointError(f"{path}: {msg} (pass override to load anyway)")
        warnings.append(msg)

    def bucket(prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}

    return CheckpointData(
        step=int(meta["step"]),
        config_hash=meta["config_hash"],
        model=bucket("model."),
        ema=bucket("ema."),
        opt={"t": int(meta["opt_t"]), "m": bucket("opt_m."), "v": bucket("opt_v.")},
        rng_state=meta["rng_state"],
        meta=meta,
        warnings=warnings,
    )
