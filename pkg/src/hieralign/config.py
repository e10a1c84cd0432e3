"""Run configuration: a line-oriented `key = value` text format with section
headers, canonicalized (sorted sections/keys, normalized whitespace) before
hashing; the hash stamps every artifact a run produces."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .encoder import EncoderSpec, build_groups
from .errors import ConfigError

SCHEDULER_KINDS = ("learned", "static_uniform", "linear_heuristic", "off")
ROUTER_VARIANTS = ("mlp", "lut")

_OUT_OF_SCOPE_ROUTERS = {
    "attention": "attention/prototype routers are out of scope",
    "content_adaptive": "content-adaptive routing is out of scope",
}
_OUT_OF_SCOPE_TIME_ENCODINGS = {
    "sinusoidal": "sinusoidal time encoding is out of scope (non-default variant)",
    "fourier": "random-Fourier time encoding is out of scope (non-default variant)",
}


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    """Parse `[section]` / `key = value` lines; `#` starts a comment."""
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"config line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        sections[current][key] = value
    return sections


def canonical_config_text(sections: dict[str, dict[str, str]]) -> str:
    lines = []
    for sec in sorted(sections):
        lines.append(f"[{sec}]")
        for key in sorted(sections[sec]):
            lines.append(f"{key} = {sections[sec][key]}")
        lines.append("")
    return "\n".join(lines)


def config_hash_of_text(text: str) -> str:
    return hashlib.sha256(canonical_config_text(parse_config_text(text)).encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _as_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Full reproducible run description; see `to_text` for the file schema."""

    # [dataset]
    dataset_kind: str = "synthetic"  # synthetic | image_folder
    data_n: int = 5000
    data_classes: int = 8
    data_side: int = 32
    data_seed: int = 1234
    data_crossover: bool = True
    data_path: str = ""

    # [encoder]
    enc_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    enc_latent: int = 8
    enc_pretrain_epochs: int = 2
    enc_lr: float = 1e-3
    enc_seed: int = 1
    enc_feature_tap: str = "post_activation"

    # [backbone]
    depth: int = 6
    hidden: int = 128
    heads: int = 4
    patch: int = 4
    align_depth: int = 0  # 0 -> auto (~25% of depth)
    cfg_dropout: float = 0.1
    mlp_ratio: int = 4

    # [router]
    router_variant: str = "mlp"
    time_encoding: str = "linear"
    d_embed: int = 128
    router_hidden: int = 256
    router_depth: int = 4
    lut_bins: int = 10

    # [alignment]
    lam: float = 1.0
    scheduler: str = "learned"

    # [optim]
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    max_grad_norm: float = 2.0
    ema_decay: float = 0.9999

    # [run]
    batch_size: int = 64
    total_steps: int = 4000
    seed: int = 0
    checkpoint_interval: int = 0  # 0 -> only at the final step
    train_dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.dataset_kind not in ("synthetic", "image_folder"):
            raise ConfigError(f"unknown dataset kind {self.dataset_kind!r}")
        if self.dataset_kind == "image_folder" and not self.data_path:
            raise ConfigError("image_folder dataset requires data_path")
        if self.router_variant in _OUT_OF_SCOPE_ROUTERS:
            raise ConfigError(f"router variant {self.router_variant!r}: "
                              f"{_OUT_OF_SCOPE_ROUTERS[self.router_variant]}")
        if self.router_variant not in ROUTER_VARIANTS:
            raise ConfigError(f"unknown router variant {self.router_variant!r} "
                              f"(allowed: {', '.join(ROUTER_VARIANTS)})")
        if self.time_encoding in _OUT_OF_SCOPE_TIME_ENCODINGS:
            raise ConfigError(f"time encoding {self.time_encoding!r}: "
                              f"{_OUT_OF_SCOPE_TIME_ENCODINGS[self.time_encoding]}")
        if self.time_encoding != "linear":
            raise ConfigError(f"unknown time encoding {self.time_encoding!r}")
        if self.scheduler not in SCHEDULER_KINDS:
            raise ConfigError(f"unknown scheduler {self.scheduler!r} "
                              f"(allowed: {', '.join(SCHEDULER_KINDS)})")
        if self.lam < 0:
            raise ConfigError("alignment weight lambda must be nonnegative")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1]")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"unknown train dtype {self.train_dtype!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("lr must be positive; batch_size >= 1; total_steps >= 0")
        # dimensional consistency: backbone grid == encoder pooling grid, and
        # mid/deep native resolutions must not be finer than the grid
        bb = self.backbone_config()
        spec = self.encoder_spec()
        part = build_groups(spec)
        s = bb.grid_side
        for gid in (part.mid_id, part.deep_id):
            for res in part.group(gid).native_resolution:
                if res < s:
                    raise ConfigError(
                        f"group {gid} native resolution {res} is finer than the "
                        f"token grid {s}; pooling cannot upsample")

    # -- derived objects ---------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec.desk_default(self.enc_channels, self.data_side,
                                        latent_channels=self.enc_latent)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            depth=self.depth, hidden=self.hidden, heads=self.heads, patch=self.patch,
            image_size=self.data_side, channels=3, num_classes=self.data_classes,
            align_depth=self.align_depth if self.align_depth > 0 else None,
            cfg_dropout_prob=self.cfg_dropout, mlp_ratio=self.mlp_ratio,
        )

    @property
    def grid_side(self) -> int:
        return self.data_side // self.patch

    @property
    def dtype(self):
        return np.float32 if self.train_dtype == "float32" else np.float64

    @property
    def alignment_enabled(self) -> bool:
        return self.scheduler != "off" and self.lam > 0.0

    # -- serialization -------------------------------------------------------

    _SECTIONS = {
        "dataset": ("dataset_kind", "data_n", "data_classes", "data_side", "data_seed",
                    "data_crossover", "data_path"),
        "encoder": ("enc_channels", "enc_latent", "enc_pretrain_epochs", "enc_lr",
                    "enc_seed", "enc_feature_tap"),
        "backbone": ("depth", "hidden", "heads", "patch", "align_depth", "cfg_dropout",
                     "mlp_ratio"),
        "router": ("router_variant", "time_encoding", "d_embed", "router_hidden",
                   "router_depth", "lut_bins"),
        "alignment": ("lam", "scheduler"),
        "optim": ("lr", "beta1", "beta2", "weight_decay", "max_grad_norm", "ema_decay"),
        "run": ("batch_size", "total_steps", "seed", "checkpoint_interval", "train_dtype"),
    }

    def to_sections(self) -> dict[str, dict[str, str]]:
        return {sec: {k: _fmt(getattr(self, k)) for k in keys}
                for sec, keys in self._SECTIONS.items()}

    def to_text(self) -> str:
        return canonical_config_text(self.to_sections())

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def encoder_cache_key(self) -> str:
        """Hash of the fields that determine the frozen encoder and its features."""
        sections = self.to_sections()
        sub = {k: sections[k] for k in ("dataset", "encoder")}
        return hashlib.sha256(canonical_config_text(sub).encode()).hexdigest()

    @staticmethod
    def from_sections(sections: dict[str, dict[str, str]]) -> "TrainConfig":
        kwargs = {}
        known = {sec: dict.fromkeys(keys) for sec, keys in TrainConfig._SECTIONS.items()}
        for sec, kv in sections.items():
            if sec not in known:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, value in kv.items():
                if key not in known[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                kwargs[key] = value
        return TrainConfig(**_coerce_types(kwargs))

    @staticmethod
    def from_text(text: str) -> "TrainConfig":
        return TrainConfig.from_sections(parse_config_text(text))

    @staticmethod
    def from_file(path) -> "TrainConfig":
        return TrainConfig.from_text(Path(path).read_text())

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def _coerce_types(kwargs: dict[str, str]) -> dict:
    out = {}
    hints = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in kwargs.items():
        hint = hints[key]
        if hint == "int":
            # reject multi-valued align depths explicitly: single-block only
            if key == "align_depth" and ("," in raw or raw.strip().startswith("[")):
                raise ConfigError("multi-stage alignment (several blocks) is out of scope; "
                                  "align_depth takes a single block index")
            out[key] = int(raw) if raw != "auto" else 0
        elif hint == "float":
            out[key] = float(raw)
        elif hint == "bool":
            out[key] = _as_bool(raw)
        elif hint.startswith("tuple"):
            parts = tuple(int(p) for p in raw.split(","))
            if len(parts) != 4:
                raise ConfigError(f"{key} expects 4 comma-separated channel counts")
            out[key] = parts
        else:
            out[key] = raw
    return out
