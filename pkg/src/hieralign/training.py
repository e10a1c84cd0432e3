"""Joint training loop: AdamW over backbone + projection + router, gradient
clipping, EMA shadow, CFG label dropout, per-step metrics, checkpointing, and
the probes the diagnostics run against trained state."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import ProjectionHead, align_loss
from .autodiff import GradientBatch, ParamSet, Rng, Tensor, grad, no_grad, per_sample_grads
from .backbone import PatchTransformer, diffusion_loss, interpolate
from .checkpoint import load_checkpoint, load_encoder_weights, save_checkpoint, save_encoder_weights
from .config import TrainConfig
from .data import SyntheticDataset, gen_synthetic_dataset, load_image_folder
from .encoder import (
    build_groups,
    compute_feature_arrays,
    load_feature_cache,
    pretrain_and_freeze,
    save_feature_cache,
)
from .errors import NumericError
from .optim import AdamW, clip_grad_norm, ema_update
from .router import DynamicRouter, LutRouter, RoutingPolicy, compose_target_batch

METRICS_HEADER = ("step,loss_total,loss_diff,loss_align,grad_norm_pre_clip,"
                  "beta_mid_at_half,beta_deep_at_half,lr,wallclock_s")


@dataclass
class MetricsRow:
    step: int
    loss_total: float
    loss_diff: float
    loss_align: float
    grad_norm_pre_clip: float
    beta_mid_at_half: float | None
    beta_deep_at_half: float | None
    lr: float
    wallclock_s: float

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.9g}"

        return (f"{self.step},{fmt(self.loss_total)},{fmt(self.loss_diff)},"
                f"{fmt(self.loss_align)},{fmt(self.grad_norm_pre_clip)},"
                f"{fmt(self.beta_mid_at_half)},{fmt(self.beta_deep_at_half)},"
                f"{fmt(self.lr)},{self.wallclock_s:.3f}")


@dataclass
class TrainState:
    config: TrainConfig
    dataset: SyntheticDataset
    encoder: object
    encoder_hash: str
    partition: object
    bank_mid: np.ndarray  # (N, K_mid, L, C_mid), training dtype
    bank_deep: np.ndarray
    backbone: PatchTransformer
    proj: ProjectionHead | None
    policy: RoutingPolicy | None
    opt: AdamW
    ema: dict[str, np.ndarray]
    rng: Rng
    step: int = 0
    wallclock_start: float = field(default_factory=time.perf_counter)

    def trained_params(self) -> ParamSet:
        named = self.backbone.named_params("backbone.")
        if self.config.alignment_enabled:
            named += self.proj.named_params("proj.")
            router = self.policy.trainable()
            if router is not None:
                named += router.named_params("router.")
        return ParamSet(named)

    def all_module_params(self) -> ParamSet:
        named = self.backbone.named_params("backbone.")
        if self.proj is not None:
            named += self.proj.named_params("proj.")
        if self.policy is not None and self.policy.router is not None:
            named += self.policy.router.named_params("router.")
        return ParamSet(named)


def alignment_branch_counters(state: TrainState) -> dict[str, int]:
    """Monotone invocation counts of the alignment-branch components.

    encoder_calls counts feature fetches (cache hits included: a memoized
    feature lookup still exercises the alignment branch)."""
    return {
        "encoder_calls": state.encoder.calls,
        "router_calls": state.policy.calls if state.policy is not None else 0,
        "proj_calls": state.proj.calls if state.proj is not None else 0,
    }


def _make_router(config: TrainConfig, k_mid: int, k_deep: int, rng: Rng):
    if config.router_variant == "lut":
        return LutRouter(k_mid, k_deep, bins=config.lut_bins, dtype=config.dtype)
    return DynamicRouter(k_mid, k_deep, d_embed=config.d_embed, hidden=config.router_hidden,
                         depth=config.router_depth, dtype=config.dtype, rng=rng)


def _load_dataset(config: TrainConfig) -> SyntheticDataset:
    if config.dataset_kind == "image_folder":
        return load_image_folder(config.data_path, config.data_side, config.data_classes)
    return gen_synthetic_dataset(config.data_n, config.data_classes, config.data_side,
                                 config.data_seed, config.data_crossover)


def prepare_encoder(config: TrainConfig, dataset: SyntheticDataset, cache_dir=None):
    """Pretrain (or load cached) frozen encoder plus the pooled feature arrays."""
    spec = config.encoder_spec()
    partition = build_groups(spec)
    key = config.encoder_cache_key()[:16]
    weights_path = Path(cache_dir) / f"encoder-{key}.npz" if cache_dir else None

    if weights_path is not None and weights_path.exists():
        encoder = load_encoder_weights(weights_path, dtype=np.float32)
    else:
        result = pretrain_and_freeze(
            dataset.images, spec, config.enc_pretrain_epochs, Rng(config.enc_seed),
            batch_size=min(64, len(dataset)), lr=config.enc_lr)
        encoder = result.encoder
        if weights_path is not None:
            save_encoder_weights(weights_path, encoder, config.enc_seed)
    enc_hash = encoder.content_hash()

    cache_path = Path(cache_dir) / f"features-{key}-{enc_hash[:12]}.npz" if cache_dir else None
    if cache_path is not None and cache_path.exists():
        mid, deep, header = load_feature_cache(cache_path)
        if header["encoder_hash"] == enc_hash and header["S"] == config.grid_side:
            return encoder, enc_hash, partition, mid, deep
    mid, deep = compute_feature_arrays(encoder, partition, dataset.images, config.grid_side,
                                       dtype=config.dtype)
    if cache_path is not None:
        save_feature_cache(cache_path, mid, deep, enc_hash, config.grid_side)
    return encoder, enc_hash, partition, mid, deep


def build_state(config: TrainConfig, cache_dir=None) -> TrainState:
    """Construct everything a run needs; all init draws come from derived streams."""
    dataset = _load_dataset(config)
    encoder, enc_hash, partition, mid, deep = prepare_encoder(config, dataset, cache_dir)

    root = Rng(config.seed)
    backbone = PatchTransformer(config.backbone_config(), root.derive("backbone-init"),
                                dtype=config.dtype)
    proj = policy = None
    if config.scheduler != "off":
        c_target = partition.c_mid + partition.c_deep
        proj = ProjectionHead(config.hidden, c_target, root.derive("proj-init"),
                              dtype=config.dtype)
        if config.scheduler == "learned":
            router = _make_router(config, partition.k_mid, partition.k_deep,
                                  root.derive("router-init"))
            policy = RoutingPolicy("learned", partition.k_mid, partition.k_deep, router)
        else:
            policy = RoutingPolicy(config.scheduler, partition.k_mid, partition.k_deep)

    state = TrainState(
        config=config, dataset=dataset, encoder=encoder, encoder_hash=enc_hash,
        partition=partition, bank_mid=mid.astype(config.dtype), bank_deep=deep.astype(config.dtype),
        backbone=backbone, proj=proj, policy=policy,
        opt=AdamW(lr=config.lr, betas=(config.beta1, config.beta2),
                  weight_decay=config.weight_decay),
        ema={}, rng=root.derive("train-loop"),
    )
    for name, t in state.trained_params().items():
        state.ema[name] = t.data.copy()
    return state


def _beta_probe(state: TrainState) -> tuple[float | None, float | None]:
    if state.policy is None or not state.config.alignment_enabled:
        return None, None
    with no_grad():
        _, _, beta = state.policy.weights(np.array([0.5]))
    b = np.asarray(getattr(beta, "data", beta), dtype=np.float64)[0]
    return float(b[0]), float(b[1])


def train_step(state: TrainState) -> MetricsRow:
    """One optimization step; rng draw order is fixed across configurations."""
    cfg = state.config
    dt = cfg.dtype
    n = len(state.dataset)
    idx = state.rng.integers(0, n, size=cfg.batch_size)
    t = state.rng.uniform((cfg.batch_size,))
    eps = state.rng.normal((cfg.batch_size, *state.dataset.images.shape[1:]), dtype=dt)
    drop = state.rng.uniform((cfg.batch_size,)) < cfg.cfg_dropout

    x = state.dataset.images[idx].astype(dt)
    labels = state.dataset.labels[idx].copy()
    labels[drop] = state.backbone.null_label
    interp = interpolate(x, eps, t.astype(dt))

    v_pred, h_l = state.backbone.forward(Tensor(interp.x_t), t, labels)
    l_diff = diffusion_loss(v_pred, interp.v_target)

    if cfg.alignment_enabled:
        state.encoder.calls += 1  # feature fetch (cache hit counts as an encoder use)
        am, ad, beta = state.policy.weights(t)
        z = compose_target_batch(state.bank_mid[idx], state.bank_deep[idx], am, ad, beta)
        l_align = align_loss(state.proj.project(h_l), z)
        l_total = l_diff + cfg.lam * l_align
        l_align_val = float(l_align.data)
    else:
        l_total = l_diff
        l_align_val = 0.0

    if not np.isfinite(l_total.data):
        raise NumericError(f"non-finite loss at step {state.step + 1}", step=state.step + 1)

    pset = state.trained_params()
    grads = grad(l_total, pset)
    grads, pre_norm = clip_grad_norm(grads, cfg.max_grad_norm)
    state.opt.step(dict(pset.items()), grads)
    ema_update(state.ema, dict(pset.items()), cfg.ema_decay)
    state.step += 1

    beta_mid, beta_deep = _beta_probe(state)
    l_diff_val = float(l_diff.data)
    return MetricsRow(
        step=state.step,
        loss_total=l_diff_val + cfg.lam * l_align_val,
        loss_diff=l_diff_val,
        loss_align=l_align_val,
        grad_norm_pre_clip=pre_norm,
        beta_mid_at_half=beta_mid,
        beta_deep_at_half=beta_deep,
        lr=cfg.lr,
        wallclock_s=time.perf_counter() - state.wallclock_start,
    )


# ---------------------------------------------------------------------------
# checkpoint round-trip
# ---------------------------------------------------------------------------

def _router_meta(state: TrainState) -> dict:
    if state.policy is not None and state.policy.router is not None:
        return {"router": state.policy.router.namespace_meta()}
    return {}


def save_state(state: TrainState, path) -> Path:
    pset = state.all_module_params()
    return save_checkpoint(
        path,
        config_hash=state.config.config_hash,
        step=state.step,
        model={n: t.data for n, t in pset.items()},
        ema=state.ema,
        opt_state=state.opt.state_dict(),
        rng_state=state.rng.get_state(),
        extra_meta={**_router_meta(state), "encoder_hash": state.encoder_hash,
                    "proj": state.proj.namespace_meta() if state.proj else {}},
    )


def load_state(config: TrainConfig, path, cache_dir=None, override: bool = False) -> tuple[TrainState, list[str]]:
    """Rebuild a TrainState from config, then restore the checkpoint exactly."""
    data = load_checkpoint(path, expect_config_hash=config.config_hash, override=override)
    state = build_state(config, cache_dir=cache_dir)
    pset = state.all_module_params()
    for name, t in pset.items():
        t.data = data.model[name].astype(t.data.dtype, copy=True)
    state.ema = {k: v.copy() for k, v in data.ema.items()}
    state.opt.load_state_dict(data.opt)
    state.rng.set_state(data.rng_state)
    state.step = data.step
    return state, data.warnings


# ---------------------------------------------------------------------------
# the full training entry point
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    metrics_path: Path
    checkpoint_path: Path
    state: TrainState
    aborted_at: int | None = None


def train(config: TrainConfig, out_dir, cache_dir=None, resume_from=None,
          override_hash: bool = False) -> TrainReport:
    """Run (or resume) a training job, writing metrics and checkpoints.

    Writes `config.canonical.txt`, `metrics.csv` (one MetricsRow per step) and
    `checkpoint_step*.npz` under out_dir. A non-finite loss aborts with the
    offending step recorded in the metrics trailer.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.canonical.txt").write_text(config.to_text())

    warnings: list[str] = []
    if resume_from is not None:
        state, warnings = load_state(config, resume_from, cache_dir=cache_dir,
                                     override=override_hash)
    else:
        state = build_state(config, cache_dir=cache_dir)

    metrics_path = out_dir / "metrics.csv"
    interval = config.checkpoint_interval or config.total_steps
    aborted_at = None
    with open(metrics_path, "w") as f:
        for w in warnings:
            f.write(f"# warning: {w}\n")
        f.write(METRICS_HEADER + "\n")
        try:
            while state.step < config.total_steps:
                row = train_step(state)
                f.write(row.to_csv() + "\n")
                if interval and state.step % interval == 0:
                    save_state(state, out_dir / f"checkpoint_step{state.step}.npz")
        except NumericError as exc:
            aborted_at = exc.step
            f.write(f"# aborted: non-finite loss at step {exc.step}\n")
            raise
        finally:
            if state.step > 0 and aborted_at is None:
                if not (interval and state.step % interval == 0):
                    save_state(state, out_dir / f"checkpoint_step{state.step}.npz")
    return TrainReport(metrics_path, out_dir / f"checkpoint_step{state.step}.npz", state)


# ---------------------------------------------------------------------------
# evaluation and diagnostics probes over trained state
# ---------------------------------------------------------------------------

def eval_loss_diff(state: TrainState, images: np.ndarray, labels: np.ndarray,
                   seed: int = 0, batch_size: int = 64, use_ema: bool = False) -> float:
    """Velocity-prediction MSE on a fixed probe: stratified t plus seeded eps.

    The probe is deterministic in (images, seed), so comparisons across
    checkpoints are paired. Defaults to the online weights: at desk-scale step
    counts the 0.9999 EMA shadow is still dominated by the initialization.
    """
    n = images.shape[0]
    t = (np.arange(n) + 0.5) / n
    eps = Rng(seed).derive("eval-eps").normal(images.shape, dtype=np.float64)
    model = sampling_model(state, use_ema=use_ema)
    total = 0.0
    with no_grad():
        for lo in range(0, n, batch_size):
            sl = slice(lo, min(lo + batch_size, n))
            interp = interpolate(images[sl].astype(np.float64), eps[sl], t[sl])
            v_pred, _ = model.forward(interp.x_t, t[sl], labels[sl])
            total += float(((v_pred.data - interp.v_target) ** 2).mean() * (sl.stop - lo))
    return total / n


def sampling_model(state: TrainState, use_ema: bool = True) -> PatchTransformer:
    """Stand-alone backbone with (by default) the EMA parameter shadow loaded."""
    model = PatchTransformer(state.config.backbone_config(), Rng(0), dtype=state.config.dtype)
    source = state.ema if use_ema else {n: t.data for n, t in state.all_module_params().items()}
    model.load_state({n[len("backbone."):]: v for n, v in source.items()
                      if n.startswith("backbone.")})
    return model


def generate_samples(state: TrainState, num: int, nfe: int, cfg_scale: float, seed: int,
                     out_dir, use_ema: bool = True, batch_size: int = 64) -> Path:
    """Sample `num` images (classes round-robin) and write them as 8-bit PPMs.

    Files land at out_dir/class_<label>/<index>.ppm next to a manifest
    recording {seed, nfe, cfg_scale, checkpoint_hash}. The sampler never
    touches the encoder, router, or projection head.
    """
    import json

    from .backbone import sample_euler
    from .checkpoint import arrays_hash
    from .ppm import write_ppm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = sampling_model(state, use_ema=use_ema)
    labels = np.arange(num, dtype=np.int64) % state.config.data_classes
    rng = Rng(seed)
    counts: dict[int, int] = {}
    for lo in range(0, num, batch_size):
        batch_labels = labels[lo : lo + batch_size]
        latents = sample_euler(model, batch_labels, nfe, cfg_scale, rng)
        for lab, img in zip(batch_labels, latents):
            i = counts.get(int(lab), 0)
            counts[int(lab)] = i + 1
            write_ppm(out_dir / f"class_{int(lab)}" / f"{i:06d}.ppm",
                      np.moveaxis(np.clip(img, -1, 1), 0, -1))
    manifest = {
        "seed": int(seed),
        "nfe": int(nfe),
        "cfg_scale": float(cfg_scale),
        "checkpoint_hash": arrays_hash({n: t.data for n, t in model.named_params()}),
        "weights": "ema" if use_ema else "online",
        "num": int(num),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def make_alignment_probe(state: TrainState, policy: RoutingPolicy | None = None,
                         images: np.ndarray | None = None,
                         labels: np.ndarray | None = None):
    """Per-sample alignment-gradient provider for gsnr sweeps.

    The parameter subset is everything the alignment loss can reach:
    projection head + router + backbone blocks 1..l. Model copies run in
    float64 (diagnostics precision); the policy defaults to the trained one.
    """
    cfg = state.config
    policy = policy or state.policy
    if policy is None or state.proj is None:
        raise ValueError("alignment probe needs a projection head and a policy")
    images = state.dataset.images if images is None else images
    labels = state.dataset.labels if labels is None else labels

    model = PatchTransformer(cfg.backbone_config(), Rng(0), dtype=np.float64)
    model.load_state({n[len("backbone."):]: t.data for n, t in
                      state.backbone.named_params("backbone.")})
    proj = ProjectionHead(cfg.hidden, state.proj.out_channels, Rng(0), dtype=np.float64)
    proj.load_state({n[len("proj."):]: t.data for n, t in state.proj.named_params("proj.")})
    router64 = None
    if policy.kind == "learned":
        src = policy.router
        if isinstance(src, LutRouter):
            router64 = LutRouter(src.k_mid, src.k_deep, bins=src.bins, dtype=np.float64,
                                 table=src.table.data)
        else:
            router64 = DynamicRouter(src.k_mid, src.k_deep, d_embed=src.d_embed,
                                     hidden=src.hidden, depth=src.depth, dtype=np.float64,
                                     rng=Rng(0))
            router64.load_state(src.state())
        policy = RoutingPolicy("learned", src.k_mid, src.k_deep, router64)

    l_tap = cfg.backbone_config().resolved_align_depth
    block_names = [n for n, _ in model.named_params("backbone.")
                   if any(n.startswith(f"backbone.block{i}.") for i in range(1, l_tap + 1))]
    named = proj.named_params("proj.")
    if router64 is not None:
        named += router64.named_params("router.")
    named += [(n, t) for n, t in model.named_params("backbone.") if n in set(block_names)]
    subset = ParamSet(named)

    bank_mid = state.bank_mid.astype(np.float64)
    bank_deep = state.bank_deep.astype(np.float64)
    c_mid = state.partition.c_mid
    mode = policy.target_mode

    def provider(t: float, batch_size: int, rng: Rng) -> GradientBatch:
        idx = rng.integers(0, images.shape[0], size=batch_size)
        eps = rng.normal((batch_size, *images.shape[1:]))

        def loss_fn(i):
            j = idx[i]
            interp = interpolate(images[j : j + 1].astype(np.float64), eps[i : i + 1], t)
            _, h_l = model.forward(interp.x_t, t, labels[j : j + 1], stop_at_block=l_tap)
            am, ad, beta = policy.weights(np.array([t]))
            projected = proj.project(h_l)
            if mode == "both":
                z = compose_target_batch(bank_mid[j : j + 1], bank_deep[j : j + 1],
                                         am, ad, beta)
            elif mode == "mid":
                # single-group supervision: cosine over the mid channel half only
                z = Tensor(np.einsum("bk,bklc->blc", np.asarray(am), bank_mid[j : j + 1]))
                projected = projected[:, :, :c_mid]
            else:
                z = Tensor(np.einsum("bk,bklc->blc", np.asarray(ad), bank_deep[j : j + 1]))
                projected = projected[:, :, c_mid:]
            return align_loss(projected, z)

        return per_sample_grads(loss_fn, range(batch_size), subset)

    return provider
