"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 9 and 11 share one desk-scale experiment (5k crossover images,
batch 64, 4k steps, seeds 0/1/2, learned-router vs vanilla) driven by
hieralign.experiments. Its artifacts persist under .acceptance/ keyed by
config hash, so finished runs are reused across pytest invocations.

Determinism comparisons exclude the wallclock_s column: the MetricsRow schema
includes wall time, which cannot repeat across runs.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from hieralign.alignment import align_loss, total_loss
from hieralign.autodiff import (
    GradientBatch,
    ParamSet,
    Rng,
    Tensor,
    finite_diff_grad,
    grad,
    per_sample_grads,
)
from hieralign.backbone import diffusion_loss, interpolate, sample_euler
from hieralign.checkpoint import load_checkpoint
from hieralign.config import TrainConfig
from hieralign.data import validate_crossover
from hieralign.diagnostics import gsnr, pca_project, pca_rgb, trace_router
from hieralign.experiments import run_desk_experiment
from hieralign.router import DynamicRouter, RoutingPolicy, compose_target_batch
from hieralign.training import (
    METRICS_HEADER,
    alignment_branch_counters,
    build_state,
    generate_samples,
    load_state,
    train,
    train_step,
)

from conftest import tiny_config

ACCEPT_DIR = Path(__file__).resolve().parent.parent / ".acceptance"


def report(criterion: str, ok: bool, detail: str):
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {criterion}: {detail}"


def gb(rows):
    return GradientBatch(np.asarray(rows, dtype=np.float64), ("w",))


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_result():
    """The 3-seed desk experiment behind criteria 9 and 11 (cached on disk)."""
    base = TrainConfig()  # desk defaults: 5000 images, 32x32, batch 64, 4000 steps
    return run_desk_experiment(base, seeds=(0, 1, 2), out_root=ACCEPT_DIR / "desk",
                               parallel=True)


@pytest.fixture(scope="module")
def small_instance():
    """Depth-2, hidden-32 double-precision instance for gradient criteria."""
    cfg = tiny_config(enc_channels=(2, 4, 8, 8), enc_latent=2, train_dtype="float64",
                      batch_size=2, data_n=24, mlp_ratio=2)
    state = build_state(cfg, cache_dir=ACCEPT_DIR / "cache-small")
    noise = Rng(5)
    for _, t in state.trained_params().items():
        if t.data.ndim >= 2:
            t.data = t.data + 0.3 * noise.normal(t.data.shape) / np.sqrt(t.data.shape[0])
        else:
            t.data = t.data + 0.02 * noise.normal(t.data.shape)
    rng = Rng(77)
    fixed = {
        "idx": rng.integers(0, cfg.data_n, size=cfg.batch_size),
        "t": rng.uniform((cfg.batch_size,)),
        "eps": rng.normal((cfg.batch_size, 3, cfg.data_side, cfg.data_side)),
    }
    return state, fixed


def total_loss_closure(state, fixed, sample=None):
    """L_total on the fixed batch (or one sample of it), as a Tensor."""
    cfg = state.config
    sl = slice(None) if sample is None else slice(sample, sample + 1)
    idx, t, eps = fixed["idx"][sl], fixed["t"][sl], fixed["eps"][sl]
    x = state.dataset.images[idx].astype(np.float64)
    labels = state.dataset.labels[idx]
    interp = interpolate(x, eps, t)
    v_pred, h_l = state.backbone.forward(Tensor(interp.x_t), t, labels)
    l_diff = diffusion_loss(v_pred, interp.v_target)
    am, ad, beta = state.policy.weights(t)
    z = compose_target_batch(state.bank_mid[idx].astype(np.float64),
                             state.bank_deep[idx].astype(np.float64), am, ad, beta)
    l_align = align_loss(state.proj.project(h_l), z)
    return l_diff + cfg.lam * l_align


def reachable_subset(state) -> ParamSet:
    l_tap = state.config.backbone_config().resolved_align_depth
    named = state.proj.named_params("proj.") + state.policy.router.named_params("router.")
    prefixes = tuple(f"backbone.block{i}." for i in range(1, l_tap + 1))
    named += [(n, t) for n, t in state.backbone.named_params("backbone.")
              if n.startswith(prefixes)]
    return ParamSet(named)


# ---------------------------------------------------------------------------
# criterion 1: G-SNR estimator exactness
# ---------------------------------------------------------------------------

def test_c01_gsnr_estimator_exactness():
    t0 = time.perf_counter()
    hand = gsnr(gb([[1.0, 0.0], [0.0, 1.0]]))
    anti = gsnr(gb([[1.0, 0.0], [-1.0, 0.0]]))
    ident = gsnr(gb([[2.0, -1.0]] * 4))
    elapsed = time.perf_counter() - t0
    ok = abs(hand - 0.5) < 1e-12 and anti == 0.0 and np.isinf(ident) and elapsed < 1.0
    report("1 G-SNR exactness", ok,
           f"hand={hand!r} anti={anti!r} identical=inf:{np.isinf(ident)} in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# criterion 2: G-SNR invariances
# ---------------------------------------------------------------------------

def test_c02_gsnr_invariances():
    t0 = time.perf_counter()
    rng = Rng(0)
    worst = 0.0
    for _ in range(100):
        rows = rng.normal((16, 64)) + 0.5 * rng.normal((64,))
        base = gsnr(gb(rows))
        q, r = np.linalg.qr(rng.normal((64, 64)))
        q = q * np.sign(np.diag(r))
        perm = rng.permutation(16)
        for variant in (rows * 7.0, rows @ q, rows[perm]):
            worst = max(worst, abs(gsnr(gb(variant)) - base) / abs(base))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 10.0
    report("2 G-SNR invariances", ok, f"worst rel dev {worst:.2e} in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: gradient correctness against finite differences
# ---------------------------------------------------------------------------

def test_c03_gradient_correctness(small_instance):
    state, fixed = small_instance
    t0 = time.perf_counter()
    subset = reachable_subset(state)
    analytic = grad(total_loss_closure(state, fixed, sample=0), subset)
    fd = finite_diff_grad(lambda: total_loss_closure(state, fixed, sample=0), subset, h=1e-5)
    worst_name, worst = "", 0.0
    for name in subset.names:
        denom = max(np.linalg.norm(fd[name]), 1e-12)
        err = np.linalg.norm(analytic[name] - fd[name]) / denom
        if err > worst:
            worst_name, worst = name, err
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120.0
    report("3 gradient correctness", ok,
           f"{subset.total_dim} params, worst rel err {worst:.2e} at {worst_name}, "
           f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 4: per-sample gradient consistency
# ---------------------------------------------------------------------------

def test_c04_per_sample_consistency(small_instance):
    state, fixed = small_instance
    subset = reachable_subset(state)
    b = state.config.batch_size
    batch = per_sample_grads(lambda i: total_loss_closure(state, fixed, sample=i),
                             range(b), subset)
    mean_loss = total_loss_closure(state, fixed, sample=0)
    for i in range(1, b):
        mean_loss = mean_loss + total_loss_closure(state, fixed, sample=i)
    mean_loss = mean_loss * (1.0 / b)
    batch_grad = subset.flatten(grad(mean_loss, subset))
    rel = np.linalg.norm(batch.per_sample.mean(axis=0) - batch_grad) / np.linalg.norm(batch_grad)
    report("4 per-sample consistency", rel < 1e-6, f"rel err {rel:.2e} over {batch.batch_size} rows")


# ---------------------------------------------------------------------------
# criterion 5: alignment-loss contracts
# ---------------------------------------------------------------------------

def test_c05_alignment_loss_contracts():
    rng = Rng(1)
    worst_scale = worst_beta = 0.0
    bounds_ok = True
    for _ in range(1000):
        p = rng.normal((1, 4, 6))
        v_mid, v_deep = rng.normal((1, 4, 3)), rng.normal((1, 4, 3))
        beta = rng.uniform((1, 2), 0.05, 0.95)
        z = compose_target_batch(v_mid[:, None], v_deep[:, None],
                                 np.ones((1, 1)), np.ones((1, 1)), beta)
        base = float(align_loss(p, z).data)
        bounds_ok &= 0.0 <= base <= 2.0
        c = float(np.exp(2.0 * rng.normal(())))
        worst_scale = max(worst_scale, abs(float(align_loss(c * p, z).data) - base))
        zc = compose_target_batch(v_mid[:, None], v_deep[:, None],
                                  np.ones((1, 1)), np.ones((1, 1)), c * beta)
        worst_beta = max(worst_beta, abs(float(align_loss(p, zc).data) - base))
    ok = bounds_ok and worst_scale < 1e-9 and worst_beta < 1e-9
    report("5 alignment-loss contracts", ok,
           f"bounds ok={bounds_ok}, scale dev {worst_scale:.2e}, joint-beta dev {worst_beta:.2e}")


# ---------------------------------------------------------------------------
# criterion 6: routing algebra
# ---------------------------------------------------------------------------

def test_c06_routing_algebra():
    draws = 0
    simplex_ok = beta_ok = True
    for trial in range(50):
        router = DynamicRouter(2, 2, d_embed=16, hidden=32, dtype=np.float64,
                               rng=Rng(trial))
        noise = Rng(9000 + trial)
        for _, t in router.named_params():
            if t.data.ndim >= 2:
                t.data = noise.normal(t.data.shape) / np.sqrt(t.data.shape[0])
            else:
                t.data = 0.1 * noise.normal(t.data.shape)
        policy = RoutingPolicy("learned", 2, 2, router)
        am, ad, beta = policy.weights(noise.uniform((20,)))
        draws += 20
        for a in (am.data, ad.data):
            simplex_ok &= bool(np.all(a >= 0) and np.max(np.abs(a.sum(-1) - 1)) < 1e-6)
        beta_ok &= bool(np.all((beta.data > 0) & (beta.data < 1)))

    zero_policy = RoutingPolicy("learned", 2, 2, DynamicRouter(2, 2, rng=Rng(0)))
    am, ad, beta = zero_policy.weights(np.linspace(0, 1, 21))
    zero_ok = (np.all(am.data == 0.5) and np.all(ad.data == 0.5)
               and np.all(beta.data == 0.5))

    grid = np.linspace(0.0, 1.0, 101)
    trace = trace_router(RoutingPolicy("linear_heuristic", 2, 2), grid)
    heuristic_ok = np.array_equal(trace.beta[:, 1], grid)

    ok = simplex_ok and beta_ok and zero_ok and heuristic_ok
    report("6 routing algebra", ok,
           f"{draws} draws: simplex={simplex_ok} beta(0,1)={beta_ok} "
           f"zero-init-exact={zero_ok} heuristic-identity={heuristic_ok}")


# ---------------------------------------------------------------------------
# criterion 7: sampler oracle
# ---------------------------------------------------------------------------

def test_c07_sampler_oracle():
    class ConstantField:
        supports_unconditional = True

        def velocity(self, x, t, labels=None):
            return np.full_like(x, 0.4)

    const_dev = 0.0
    for nfe in (1, 3, 16, 250):
        out = sample_euler(ConstantField(), np.array([0]), nfe, 1.0, Rng(2),
                           sample_shape=(1, 4, 4))
        eps = Rng(2).normal((1, 1, 4, 4))
        const_dev = max(const_dev, float(np.max(np.abs(out - (eps - 0.4)))))

    x_star = Rng(3).normal((1, 2, 3, 3))

    class OnePoint:
        supports_unconditional = True

        def velocity(self, x, t, labels=None):
            return (x - x_star) / t

    out = sample_euler(OnePoint(), np.array([0]), 50, 1.0, Rng(4), sample_shape=(2, 3, 3))
    one_point_err = float(np.max(np.abs(out - x_star)))

    state = build_state(tiny_config(), cache_dir=ACCEPT_DIR / "cache-small")
    from hieralign.training import sampling_model

    model = sampling_model(state, use_ema=False)
    a = sample_euler(model, np.array([0, 1]), 6, 1.0, Rng(5))

    class CondOnly:
        supports_unconditional = False

        def velocity(self, x, t, labels=None):
            return model.velocity(x, t, labels)

    b = sample_euler(CondOnly(), np.array([0, 1]), 6, 1.0, Rng(5), sample_shape=(3, 16, 16))
    cfg1_bit_equal = np.array_equal(a, b)

    ok = const_dev < 1e-12 and one_point_err < 1e-6 and cfg1_bit_equal
    report("7 sampler oracle", ok,
           f"const dev {const_dev:.2e}, one-point err {one_point_err:.2e}, "
           f"cfg=1 bitwise={cfg1_bit_equal}")


# ---------------------------------------------------------------------------
# criterion 8: zero inference cost
# ---------------------------------------------------------------------------

def test_c08_zero_inference_cost(tmp_path):
    t0 = time.perf_counter()
    state = build_state(tiny_config(), cache_dir=ACCEPT_DIR / "cache-small")
    before = alignment_branch_counters(state)
    generate_samples(state, num=64, nfe=50, cfg_scale=1.5, seed=0, out_dir=tmp_path / "s")
    after_sample = alignment_branch_counters(state)
    sample_inert = after_sample == before
    train_step(state)
    after_step = alignment_branch_counters(state)
    step_incremented = all(after_step[k] >= after_sample[k] + 1 for k in after_step)
    elapsed = time.perf_counter() - t0
    ok = sample_inert and step_incremented and elapsed < 60.0
    report("8 zero inference cost", ok,
           f"sample64 inert={sample_inert}, train-step incremented={step_incremented}, "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 9: frozen prior across the 4k-step run
# ---------------------------------------------------------------------------

def test_c09_frozen_prior(desk_result):
    hashes = {o.encoder_hash for o in desk_result.outcomes}
    ok = hashes == {desk_result.encoder_hash_initial}
    report("9 frozen prior", ok,
           f"encoder hash {desk_result.encoder_hash_initial[:12]} unchanged across "
           f"{len(desk_result.outcomes)} trained seeds")


# ---------------------------------------------------------------------------
# criterion 10: determinism and resume
# ---------------------------------------------------------------------------

def _metric_rows(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == METRICS_HEADER
    return [l.rsplit(",", 1)[0] for l in lines[1:]]  # drop wallclock_s


def test_c10_determinism_and_resume(tmp_path):
    cfg = tiny_config(total_steps=200, checkpoint_interval=100)
    cache = ACCEPT_DIR / "cache-small"
    r1 = train(cfg, tmp_path / "a", cache_dir=cache)
    r2 = train(cfg, tmp_path / "b", cache_dir=cache)
    identical = _metric_rows(r1.metrics_path) == _metric_rows(r2.metrics_path)

    resumed = train(cfg, tmp_path / "c", cache_dir=cache,
                    resume_from=tmp_path / "a" / "checkpoint_step100.npz")
    tail_identical = _metric_rows(resumed.metrics_path) == _metric_rows(r1.metrics_path)[100:]
    ck_a = load_checkpoint(tmp_path / "a" / "checkpoint_step200.npz")
    ck_c = load_checkpoint(tmp_path / "c" / "checkpoint_step200.npz")
    bits = all(np.array_equal(ck_a.model[n], ck_c.model[n]) for n in ck_a.model) and all(
        np.array_equal(ck_a.ema[n], ck_c.ema[n]) for n in ck_a.ema)
    ok = identical and tail_identical and bits
    report("10 determinism and resume", ok,
           f"200-step CSVs identical={identical} (wallclock excluded), "
           f"resume rows identical={tail_identical}, checkpoints bitwise={bits}")


# ---------------------------------------------------------------------------
# criterion 11: directional desk-scale replication (3 seeds)
# ---------------------------------------------------------------------------

def test_c11a_acceleration(desk_result):
    wins = desk_result.majority("acceleration_ok")
    detail = "; ".join(
        f"seed{o.seed}: ahpa={o.heldout_ahpa:.4f} vs vanilla={o.heldout_vanilla:.4f}"
        for o in desk_result.outcomes)
    report("11a held-out loss ordering", wins >= 2, f"{wins}/3 seeds ({detail})")


def test_c11b_handover(desk_result):
    wins = desk_result.majority("handover_ok")
    detail = "; ".join(
        f"seed{o.seed}: beta_deep {o.beta_deep_low_t:.3f}@0.1 -> {o.beta_deep_high_t:.3f}@0.9"
        for o in desk_result.outcomes)
    report("11b autonomous handover", wins >= 2, f"{wins}/3 seeds ({detail})")


def test_c11c_gsnr_ordering(desk_result):
    wins = desk_result.majority("gsnr_ordering_ok")
    detail = "; ".join(
        f"seed{o.seed}: learned={o.gsnr_avg['learned']:.3f} "
        f"mid={o.gsnr_avg['uniform_mid']:.3f} deep={o.gsnr_avg['uniform_deep']:.3f}"
        for o in desk_result.outcomes)
    report("11c trajectory G-SNR ordering", wins >= 2, f"{wins}/3 seeds ({detail})")


# ---------------------------------------------------------------------------
# criterion 12: PCA visualization contract
# ---------------------------------------------------------------------------

def test_c12_pca_contract():
    class Bank:
        grid_side = 8

        def __init__(self, tokens):
            self._t = tokens

        def tokens(self, g):
            return self._t

    rng = Rng(6)
    rand_img = pca_rgb(Bank(rng.normal((2, 64, 16))), "mid")
    shape_ok = rand_img.shape == (8, 8, 3) and 0.0 <= rand_img.min() and rand_img.max() <= 1.0

    rank1 = np.outer(rng.normal((64,)), rng.normal((16,)))
    _, evr = pca_project(rank1)
    rank1_ok = evr[0] >= 0.999

    const_img = pca_rgb(Bank(np.full((1, 64, 16), 2.2)), "deep")
    const_ok = np.all(const_img == 0.5)

    ok = shape_ok and rank1_ok and const_ok
    report("12 PCA contract", ok,
           f"shape/range={shape_ok}, rank-1 evr={evr[0]:.6f}, constant mid-gray={const_ok}")


# ---------------------------------------------------------------------------
# supporting check: the engineered feature hierarchy of the desk dataset
# ---------------------------------------------------------------------------

def test_dataset_crossover_probe_gap(desk_result):
    from hieralign.checkpoint import load_encoder_weights
    from hieralign.data import gen_synthetic_dataset
    from hieralign.encoder import build_groups

    base = desk_result.config
    ds = gen_synthetic_dataset(1500, base.data_classes, base.data_side, base.data_seed,
                               base.data_crossover)
    key = base.encoder_cache_key()[:16]
    encoder = load_encoder_weights(ACCEPT_DIR / "desk" / "cache" / f"encoder-{key}.npz")
    partition = build_groups(base.encoder_spec())
    rep = validate_crossover(ds, encoder, partition, base.grid_side)
    report("(dataset) deep-vs-mid probe gap", rep.gap > 0,
           f"auc_mid={rep.auc_mid:.4f} auc_deep={rep.auc_deep:.4f} gap={rep.gap:+.4f}")
