"""Gradient signal-to-noise diagnostics, routing-policy traces, and
group-averaged PCA feature visualization.

All statistics run in double precision; everything here is read-only over
model state.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import GradientBatch, Rng, no_grad
from .router import RoutingPolicy

DENOM_FLOOR = 1e-30


@dataclass
class GsnrPoint:
    t: float
    gsnr: float  # nonnegative; +inf sentinel for zero-variance nonzero-signal batches
    batch_size: int
    param_subset: str

    @property
    def is_inf(self) -> bool:
        return np.isinf(self.gsnr)


def gsnr(batch: GradientBatch) -> float:
    """Empirical gradient signal-to-noise ratio of a per-sample gradient batch.

    numerator = ||mean row||^2; denominator = unbiased per-sample deviation
    energy sum ||g_i - mean||^2 / (B - 1). Degenerate cases: +inf when the
    denominator vanishes but the signal does not, 0 when both vanish.
    """
    b = batch.batch_size
    if b < 2:
        raise ValueError("gsnr needs B >= 2 (unbiased variance undefined)")
    rows = batch.per_sample.astype(np.float64, copy=False)
    mean = rows.mean(axis=0)
    num = float(mean @ mean)
    dev = rows - mean
    den = float((dev * dev).sum() / (b - 1))
    if den < DENOM_FLOOR:
        return float("inf") if num > 0.0 else 0.0
    return num / den


def default_t_grid(n: int = 100) -> np.ndarray:
    """Evenly spaced midpoints covering [0, 1] (the 100-sample trajectory grid)."""
    return (np.arange(n, dtype=np.float64) + 0.5) / n


@dataclass
class SweepResult:
    points: list[GsnrPoint]
    trajectory_avg: float
    inf_count: int


GradProvider = Callable[[float, int, Rng], GradientBatch]


def gsnr_sweep(
    provider: GradProvider,
    t_list: Sequence[float] | None = None,
    batch_size: int = 64,
    rng: Rng | None = None,
    param_subset: str = "align_reachable",
) -> SweepResult:
    """Evaluate gsnr at each t; average finite points, counting +inf separately.

    `provider(t, B, rng)` returns the per-sample gradient batch of the
    alignment objective at timestep t. Per-t rng streams are derived from the
    t index, so sweeps with the same seed are paired across policies.
    """
    ts = default_t_grid() if t_list is None else np.asarray(t_list, dtype=np.float64)
    if ts.size == 0:
        raise ValueError("t_list must be nonempty")
    if np.any(ts < 0) or np.any(ts > 1):
        raise ValueError("t values must lie in [0, 1]")
    rng = rng or Rng(0)
    points = []
    for i, t in enumerate(ts):
        gb = provider(float(t), batch_size, rng.derive(f"t{i}"))
        points.append(GsnrPoint(float(t), gsnr(gb), gb.batch_size, param_subset))
    finite = [p.gsnr for p in points if not p.is_inf]
    avg = float(np.mean(finite)) if finite else float("nan")
    return SweepResult(points, avg, len(points) - len(finite))


def write_gsnr_csv(path, result: SweepResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["t,gsnr,B,param_subset,inf_flag"]
    for p in result.points:
        g = "inf" if p.is_inf else f"{p.gsnr:.10g}"
        lines.append(f"{p.t:.10g},{g},{p.batch_size},{p.param_subset},{int(p.is_inf)}")
    lines.append(f"# trajectory_avg={result.trajectory_avg:.10g} inf_count={result.inf_count}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_gsnr_csv(path) -> SweepResult:
    lines = Path(path).read_text().strip().splitlines()
    points = []
    avg, inf_count = float("nan"), 0
    for line in lines[1:]:
        if line.startswith("#"):
            fields = dict(kv.split("=") for kv in line[1:].split())
            avg, inf_count = float(fields["trajectory_avg"]), int(fields["inf_count"])
            continue
        t, g, b, subset, _ = line.split(",")
        points.append(GsnrPoint(float(t), float(g), int(b), subset))
    return SweepResult(points, avg, inf_count)


# ---------------------------------------------------------------------------
# routing-policy traces
# ---------------------------------------------------------------------------

@dataclass
class PolicyTrace:
    t: np.ndarray  # (N,)
    beta: np.ndarray  # (N, 2)
    alpha_mid: np.ndarray  # (N, K_mid)
    alpha_deep: np.ndarray  # (N, K_deep)

    def __post_init__(self):
        for a in (self.alpha_mid, self.alpha_deep):
            if np.any(a < 0) or np.max(np.abs(a.sum(axis=-1) - 1.0)) > 1e-6:
                raise ValueError("trace alpha rows must be simplex vectors")


def trace_router(policy: RoutingPolicy, t_grid: Sequence[float]) -> PolicyTrace:
    """Evaluate softmaxed alphas and sigmoided betas on a grid; no writes."""
    ts = np.asarray(t_grid, dtype=np.float64)
    with no_grad():
        am, ad, beta = policy.weights(ts)
    unwrap = lambda x: np.asarray(getattr(x, "data", x), dtype=np.float64)
    return PolicyTrace(ts, unwrap(beta), unwrap(am), unwrap(ad))


def write_trace_csv(path, trace: PolicyTrace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k_mid, k_deep = trace.alpha_mid.shape[1], trace.alpha_deep.shape[1]
    header = (["t", "beta_mid", "beta_deep"]
              + [f"alpha_mid_{i}" for i in range(k_mid)]
              + [f"alpha_deep_{i}" for i in range(k_deep)])
    lines = [",".join(header)]
    for i in range(trace.t.size):
        row = [trace.t[i], trace.beta[i, 0], trace.beta[i, 1],
               *trace.alpha_mid[i], *trace.alpha_deep[i]]
        lines.append(",".join(f"{v:.10g}" for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# PCA feature visualization
# ---------------------------------------------------------------------------

_RANGE_FLOOR = 1e-12


def pca_project(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project (L, C) position samples onto their top-3 principal components.

    Channels are centered over positions; the covariance is taken in channel
    space. Returns (projection (L, 3), explained-variance ratios (3,)).
    Components beyond the available rank project to zero.
    """
    x = np.asarray(tokens, dtype=np.float64)
    l, c = x.shape
    if l < 3:
        raise ValueError(f"PCA needs at least 3 positions, got {l}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (l - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    total = float(vals.sum())
    n = min(3, c)
    proj = np.zeros((l, 3))
    proj[:, :n] = xc @ vecs[:, :n]
    evr = np.zeros(3)
    if total > _RANGE_FLOOR:
        evr[:n] = vals[:n] / total
    return proj, evr


def _minmax_unit(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < _RANGE_FLOOR:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def pca_rgb(bank, group_id: str, index: int = 0) -> np.ndarray:
    """Group-averaged PCA visualization: (S, S, 3) image with values in [0, 1].

    The group's K feature stacks are averaged uniformly, PCA-projected over
    the S^2 positions, and each component is min-max normalized into one of
    R, G, B. Zero-variance components render mid-gray.
    """
    tokens = bank.tokens(group_id)
    if tokens.ndim == 4:
        tokens = tokens[index]
    avg = np.asarray(tokens, dtype=np.float64).mean(axis=0)  # (L, C)
    proj, _ = pca_project(avg)
    s = bank.grid_side
    rgb = np.stack([_minmax_unit(proj[:, i]) for i in range(3)], axis=-1)
    return rgb.reshape(s, s, 3)
