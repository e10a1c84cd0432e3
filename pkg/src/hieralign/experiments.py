"""Desk-scale experiment driver: trains learned-router and vanilla variants
over several seeds (in parallel worker processes), then evaluates held-out
velocity loss, routing-policy traces, and trajectory-averaged gradient
signal-to-noise for the policy family on the trained checkpoints."""

from __future__ import annotations

import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import gen_synthetic_dataset
from .diagnostics import default_t_grid, gsnr_sweep, trace_router, write_gsnr_csv, write_trace_csv
from .errors import NumericError
from .training import build_state, eval_loss_diff, load_state, make_alignment_probe, train

GSNR_POLICIES = ("learned", "uniform_mid", "uniform_deep")


@dataclass
class SeedOutcome:
    seed: int
    heldout_ahpa: float
    heldout_vanilla: float
    beta_deep_low_t: float
    beta_deep_high_t: float
    gsnr_avg: dict[str, float]
    encoder_hash: str

    @property
    def acceleration_ok(self) -> bool:
        return self.heldout_ahpa <= self.heldout_vanilla

    @property
    def handover_ok(self) -> bool:
        return self.beta_deep_high_t > self.beta_deep_low_t

    @property
    def gsnr_ordering_ok(self) -> bool:
        learned = self.gsnr_avg["learned"]
        return all(learned >= self.gsnr_avg[p] for p in ("uniform_mid", "uniform_deep"))


@dataclass
class DeskExperimentResult:
    config: TrainConfig
    seeds: tuple[int, ...]
    outcomes: list[SeedOutcome] = field(default_factory=list)
    encoder_hash_initial: str = ""

    def majority(self, flag: str) -> int:
        return sum(int(getattr(o, flag)) for o in self.outcomes)


def _variant_config(base: TrainConfig, seed: int, vanilla: bool) -> TrainConfig:
    overrides = {"seed": seed}
    if vanilla:
        overrides["lam"] = 0.0
    return base.with_overrides(**overrides)


def _run_dir(root: Path, seed: int, vanilla: bool) -> Path:
    return root / ("vanilla" if vanilla else "ahpa") / f"seed{seed}"


def _is_complete(cfg: TrainConfig, out_dir: Path) -> bool:
    ckpt = out_dir / f"checkpoint_step{cfg.total_steps}.npz"
    if not ckpt.exists():
        return False
    try:
        return load_checkpoint(ckpt).config_hash == cfg.config_hash
    except Exception:
        return False


def _train_subprocess(cfg: TrainConfig, out_dir: Path, cache_dir: Path, threads: int) -> subprocess.Popen:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = out_dir / "run.cfg"
    cfg_path.write_text(cfg.to_text())
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)
    log = open(out_dir / "train.log", "w")
    return subprocess.Popen(
        [sys.executable, "-m", "hieralign.cli", "train", "--config", str(cfg_path),
         "--out", str(out_dir), "--cache", str(cache_dir)],
        stdout=log, stderr=subprocess.STDOUT, env=env)


def run_training_matrix(base: TrainConfig, seeds, out_root, cache_dir,
                        parallel: bool = True, threads_per_run: int = 4) -> None:
    """Train {ahpa, vanilla} x seeds, reusing any completed runs, in parallel."""
    out_root, cache_dir = Path(out_root), Path(cache_dir)
    jobs = []
    for seed in seeds:
        for vanilla in (False, True):
            cfg = _variant_config(base, seed, vanilla)
            out_dir = _run_dir(out_root, seed, vanilla)
            if not _is_complete(cfg, out_dir):
                jobs.append((cfg, out_dir))
    if not jobs:
        return
    # the shared encoder/feature cache is built once up front so parallel
    # workers only ever read it
    build_state(jobs[0][0], cache_dir=cache_dir)
    if parallel:
        procs = [_train_subprocess(cfg, out_dir, cache_dir, threads_per_run)
                 for cfg, out_dir in jobs]
        for proc, (cfg, out_dir) in zip(procs, jobs):
            rc = proc.wait()
            if rc != 0:
                raise NumericError(
                    f"training run in {out_dir} exited with {rc}; see train.log")
    else:
        for cfg, out_dir in jobs:
            train(cfg, out_dir, cache_dir=cache_dir)
    for cfg, out_dir in jobs:
        if not _is_complete(cfg, out_dir):
            raise NumericError(f"training run in {out_dir} produced no valid checkpoint")


def heldout_split(base: TrainConfig, n: int = 512):
    """Evaluation split drawn from the same generator with a shifted seed."""
    ds = gen_synthetic_dataset(n, base.data_classes, base.data_side,
                               base.data_seed + 1, base.data_crossover)
    return ds.images, ds.labels


def run_desk_experiment(base: TrainConfig, seeds=(0, 1, 2), out_root="desk_runs",
                        cache_dir=None, parallel: bool = True,
                        gsnr_batch: int = 64, gsnr_points: int = 100,
                        trace_points: int = 101) -> DeskExperimentResult:
    """Full directional-replication experiment; reuses completed artifacts."""
    from .router import RoutingPolicy

    out_root = Path(out_root)
    cache_dir = Path(cache_dir) if cache_dir else out_root / "cache"
    result = DeskExperimentResult(base, tuple(seeds))

    run_training_matrix(base, seeds, out_root, cache_dir, parallel=parallel)

    eval_images, eval_labels = heldout_split(base)
    t_grid = default_t_grid(gsnr_points)
    trace_grid = np.linspace(0.0, 1.0, trace_points)

    for seed in seeds:
        cfg_a = _variant_config(base, seed, vanilla=False)
        cfg_v = _variant_config(base, seed, vanilla=True)
        dir_a = _run_dir(out_root, seed, False)
        dir_v = _run_dir(out_root, seed, True)
        state_a, _ = load_state(cfg_a, dir_a / f"checkpoint_step{base.total_steps}.npz",
                                cache_dir=cache_dir)
        state_v, _ = load_state(cfg_v, dir_v / f"checkpoint_step{base.total_steps}.npz",
                                cache_dir=cache_dir)

        held_a = eval_loss_diff(state_a, eval_images, eval_labels, seed=0)
        held_v = eval_loss_diff(state_v, eval_images, eval_labels, seed=0)

        trace = trace_router(state_a.policy, trace_grid)
        write_trace_csv(dir_a / "trace_learned.csv", trace)
        lo = float(trace.beta[np.argmin(np.abs(trace_grid - 0.1)), 1])
        hi = float(trace.beta[np.argmin(np.abs(trace_grid - 0.9)), 1])

        gsnr_avg = {}
        for policy_kind in GSNR_POLICIES:
            if policy_kind == "learned":
                policy = state_a.policy
            else:
                policy = RoutingPolicy(policy_kind, state_a.partition.k_mid,
                                       state_a.partition.k_deep)
            provider = make_alignment_probe(state_a, policy)
            sweep = gsnr_sweep(provider, t_grid, gsnr_batch, Rng(1000 + seed),
                               param_subset="proj+router+blocks1..l")
            write_gsnr_csv(dir_a / f"gsnr_{policy_kind}.csv", sweep)
            gsnr_avg[policy_kind] = sweep.trajectory_avg

        result.outcomes.append(SeedOutcome(
            seed=seed, heldout_ahpa=held_a, heldout_vanilla=held_v,
            beta_deep_low_t=lo, beta_deep_high_t=hi, gsnr_avg=gsnr_avg,
            encoder_hash=state_a.encoder.content_hash()))
        if not result.encoder_hash_initial:
            result.encoder_hash_initial = state_a.encoder_hash
    return result
