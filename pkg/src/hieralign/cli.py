"""Command-line entry points for every workflow: dataset generation, encoder
pretraining, training, sampling, gradient diagnostics, router tracing, and
PCA visualization.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .config import TrainConfig
from .errors import CheckpointError, ConfigError, NumericError


def _load_config(args, seed_overrides_config: bool = False) -> TrainConfig:
    """Read the config file plus any targeted overrides.

    --seed rewrites the run config only for `train`; for the other commands it
    seeds that command's own rng, leaving the config hash intact.
    """
    cfg = TrainConfig.from_file(args.config)
    overrides = {}
    if seed_overrides_config and getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if getattr(args, "lam", None) is not None:
        overrides["lam"] = args.lam
    if getattr(args, "scheduler", None) is not None:
        overrides["scheduler"] = args.scheduler
    return cfg.with_overrides(**overrides) if overrides else cfg


def _cmd_gen_data(args) -> int:
    from .data import gen_synthetic_dataset, validate_crossover
    from .training import prepare_encoder

    cfg = _load_config(args)
    ds = gen_synthetic_dataset(cfg.data_n, cfg.data_classes, cfg.data_side,
                               cfg.data_seed, cfg.data_crossover)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "dataset.npz", images=ds.images, labels=ds.labels)
    print(f"wrote {len(ds)} images ({ds.num_classes} classes) to {out / 'dataset.npz'}")
    if args.validate:
        encoder, _, partition, _, _ = prepare_encoder(cfg, ds, cache_dir=args.cache)
        report = validate_crossover(ds, encoder, partition, cfg.grid_side)
        print(f"probe AUC: mid={report.auc_mid:.4f} deep={report.auc_deep:.4f} "
              f"gap={report.gap:+.4f}")
    return 0


def _cmd_pretrain_encoder(args) -> int:
    from .data import gen_synthetic_dataset
    from .encoder import pretrain_and_freeze

    cfg = _load_config(args)
    ds = gen_synthetic_dataset(cfg.data_n, cfg.data_classes, cfg.data_side,
                               cfg.data_seed, cfg.data_crossover)
    out = Path(args.out)
    result = pretrain_and_freeze(ds.images, cfg.encoder_spec(), cfg.enc_pretrain_epochs,
                                 Rng(cfg.enc_seed), lr=cfg.enc_lr,
                                 out_path=out / "encoder_weights.npz")
    print(f"frozen encoder hash {result.content_hash}")
    print(f"weights at {result.weights_path}")
    return 0


def _cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args, seed_overrides_config=True)
    report = train(cfg, args.out, cache_dir=args.cache, resume_from=args.resume,
                   override_hash=args.override_hash)
    print(f"config hash {cfg.config_hash}")
    print(f"metrics at {report.metrics_path}")
    print(f"checkpoint at {report.checkpoint_path}")
    return 0


def _cmd_sample(args) -> int:
    from .training import generate_samples, load_state

    cfg = _load_config(args)
    state, warnings = load_state(cfg, args.checkpoint, cache_dir=args.cache,
                                 override=args.override_hash)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = generate_samples(state, args.num, args.nfe, args.cfg_scale, args.seed or 0,
                           args.out, use_ema=args.weights == "ema")
    print(f"samples under {out}")
    return 0


def _cmd_probe_gsnr(args) -> int:
    from .diagnostics import default_t_grid, gsnr_sweep, write_gsnr_csv
    from .router import RoutingPolicy
    from .training import load_state, make_alignment_probe

    cfg = _load_config(args)
    state, _ = load_state(cfg, args.checkpoint, cache_dir=args.cache,
                          override=args.override_hash)
    if args.policy == "learned":
        policy = state.policy
        if policy is None or policy.kind != "learned":
            raise ConfigError("checkpoint has no learned router; pick a fixed policy")
    else:
        policy = RoutingPolicy(args.policy, state.partition.k_mid, state.partition.k_deep)
    provider = make_alignment_probe(state, policy)
    result = gsnr_sweep(provider, default_t_grid(args.t_samples), args.batch_size,
                        Rng(args.seed or 0), param_subset="proj+router+blocks1..l")
    path = write_gsnr_csv(Path(args.out) / f"gsnr_{args.policy}.csv", result)
    print(f"trajectory_avg={result.trajectory_avg:.6g} inf_count={result.inf_count}")
    print(f"sweep at {path}")
    return 0


def _cmd_trace_router(args) -> int:
    from .diagnostics import trace_router, write_trace_csv
    from .router import RoutingPolicy
    from .training import load_state

    cfg = _load_config(args)
    if args.policy == "learned":
        if args.checkpoint is None:
            raise ConfigError("tracing the learned policy requires --checkpoint")
        state, _ = load_state(cfg, args.checkpoint, cache_dir=args.cache,
                              override=args.override_hash)
        policy = state.policy
        if policy is None or policy.kind != "learned":
            raise ConfigError("checkpoint has no learned router")
        k_mid, k_deep = state.partition.k_mid, state.partition.k_deep
    else:
        from .encoder import build_groups

        part = build_groups(cfg.encoder_spec())
        k_mid, k_deep = part.k_mid, part.k_deep
        policy = RoutingPolicy(args.policy, k_mid, k_deep)
    grid = np.linspace(0.0, 1.0, args.t_samples)
    trace = trace_router(policy, grid)
    path = write_trace_csv(Path(args.out) / f"trace_{args.policy}.csv", trace)
    print(f"trace at {path}")
    return 0


def _cmd_pca_viz(args) -> int:
    from .diagnostics import pca_rgb
    from .encoder import encode_hierarchy
    from .ppm import write_ppm
    from .training import _load_dataset, prepare_encoder

    cfg = _load_config(args)
    ds = _load_dataset(cfg)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside dataset of {len(ds)} images")
    encoder, _, partition, _, _ = prepare_encoder(cfg, ds, cache_dir=args.cache)
    bank = encode_hierarchy(encoder, partition, ds.images[args.index], cfg.grid_side)
    out = Path(args.out)
    write_ppm(out / f"original_{args.index}.ppm",
              np.moveaxis(ds.images[args.index], 0, -1))
    for gid in (partition.mid_id, partition.deep_id):
        path = write_ppm(out / f"pca_{gid}_{args.index}.ppm", pca_rgb(bank, gid))
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hieralign",
                                     description="desk-scale routed hierarchical alignment lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="config file (key = value sections)")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--cache", default=None, help="cache dir for encoder weights/features")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="materialize the synthetic dataset")
    common(p)
    p.add_argument("--validate", action="store_true",
                   help="run the mid-vs-deep linear probe on the generated set")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain-encoder", help="pretrain and freeze the feature encoder")
    common(p)
    p.set_defaults(func=_cmd_pretrain_encoder)

    p = sub.add_parser("train", help="run the joint training loop")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--scheduler", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--override-hash", action="store_true",
                   help="load checkpoints whose config hash mismatches")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfe", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--num", type=int, default=64)
    p.add_argument("--weights", choices=("ema", "online"), default="ema")
    p.add_argument("--override-hash", action="store_true")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("probe-gsnr", help="gradient signal-to-noise sweep over t")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--policy", default="learned",
                   choices=("learned", "static_uniform", "linear_heuristic",
                            "uniform_mid", "uniform_deep"))
    p.add_argument("--t-samples", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--override-hash", action="store_true")
    p.set_defaults(func=_cmd_probe_gsnr)

    p = sub.add_parser("trace-router", help="evaluate the routing policy on a t grid")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--policy", default="learned",
                   choices=("learned", "static_uniform", "linear_heuristic",
                            "uniform_mid", "uniform_deep"))
    p.add_argument("--t-samples", type=int, default=101)
    p.add_argument("--override-hash", action="store_true")
    p.set_defaults(func=_cmd_trace_router)

    p = sub.add_parser("pca-viz", help="group-averaged PCA feature visualization")
    common(p)
    p.add_argument("--index", type=int, default=0, help="dataset image index")
    p.set_defaults(func=_cmd_pca_viz)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
