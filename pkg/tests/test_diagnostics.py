"""Diagnostics checks: gsnr exactness and invariances, sweep mechanics and
CSV format, policy tracing, and the PCA visualization contract."""

import numpy as np
import pytest

from hieralign.autodiff import GradientBatch, Rng
from hieralign.diagnostics import (
    GsnrPoint,
    default_t_grid,
    gsnr,
    gsnr_sweep,
    pca_project,
    pca_rgb,
    read_gsnr_csv,
    trace_router,
    write_gsnr_csv,
    write_trace_csv,
)
from hieralign.ppm import read_ppm, write_ppm
from hieralign.router import DynamicRouter, RoutingPolicy


def gb(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return GradientBatch(rows, ("w",))


# ---------------------------------------------------------------------------
# estimator exactness
# ---------------------------------------------------------------------------

def test_gsnr_zero_mean_antisymmetric():
    assert gsnr(gb([[1.0, 0.0], [-1.0, 0.0]])) == 0.0


def test_gsnr_hand_computed_half():
    # mean (0.5, 0.5): numerator 0.5; deviations +-(0.5, -0.5): denominator 1
    assert abs(gsnr(gb([[1.0, 0.0], [0.0, 1.0]])) - 0.5) < 1e-12


def test_gsnr_identical_rows_inf_sentinel():
    assert np.isinf(gsnr(gb([[2.0, -1.0]] * 4)))


def test_gsnr_all_zero_rows_is_zero():
    assert gsnr(gb(np.zeros((3, 5)))) == 0.0


def test_gsnr_rejects_single_row():
    with pytest.raises(ValueError):
        gsnr(gb([[1.0, 2.0]]))


# ---------------------------------------------------------------------------
# estimator invariances
# ---------------------------------------------------------------------------

def _random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal((d, d)))
    return q * np.sign(np.diag(r))


def test_gsnr_invariances_on_random_batches():
    rng = Rng(0)
    for trial in range(100):
        rows = rng.normal((16, 64)) + 0.5 * rng.normal((64,))
        base = gsnr(gb(rows))
        scaled = gsnr(gb(rows * 7.0))
        assert abs(scaled - base) <= 1e-9 * abs(base)
        q = _random_orthogonal(rng, 64)
        rotated = gsnr(gb(rows @ q))
        assert abs(rotated - base) <= 1e-9 * abs(base)
        perm = rng.permutation(16)
        assert abs(gsnr(gb(rows[perm])) - base) <= 1e-9 * abs(base)


def test_gsnr_shrinks_with_batch_for_zero_mean_noise():
    wins = 0
    for seed in range(10):
        rng = Rng(1000 + seed)
        big = gsnr(gb(rng.normal((1024, 8))))
        small = gsnr(gb(rng.normal((16, 8))))
        wins += int(big < small)
    assert wins >= 6  # majority over 10 seeds


def test_gsnr_monte_carlo_matches_analytic_ratio():
    dim, b = 32, 256
    rng = Rng(5)
    mu = np.zeros(dim)
    mu[0] = 2.0  # ||mu||^2 = 4, sigma^2 = 1 -> trace = dim
    vals = []
    for _ in range(20):
        rows = mu + rng.normal((b, dim))
        vals.append(gsnr(gb(rows)))
    measured = float(np.mean(vals))
    analytic = 4.0 / dim
    assert abs(measured - analytic) < 0.2 * analytic


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _noisy_provider(mu_scale):
    def provider(t, b, rng):
        mu = mu_scale * (1.0 + t) * np.ones(8)
        return GradientBatch(mu + rng.normal((b, 8)), ("w",))

    return provider


def test_sweep_row_count_and_default_grid():
    res = gsnr_sweep(_noisy_provider(0.5), t_list=None, batch_size=16, rng=Rng(2))
    assert len(res.points) == 100
    assert default_t_grid().shape == (100,)
    assert res.inf_count == 0
    assert np.isfinite(res.trajectory_avg)


def test_sweep_scale_invariance_pointwise():
    t_list = [0.1, 0.5, 0.9]
    r1 = gsnr_sweep(_noisy_provider(0.5), t_list, 32, Rng(3))

    def scaled(t, b, rng):
        base = _noisy_provider(0.5)(t, b, rng)
        return GradientBatch(base.per_sample * 7.0, base.param_subset)

    r2 = gsnr_sweep(scaled, t_list, 32, Rng(3))
    for p1, p2 in zip(r1.points, r2.points):
        assert abs(p1.gsnr - p2.gsnr) <= 1e-9 * abs(p1.gsnr)


def test_sweep_pairing_across_policies_same_seed():
    calls = []

    def recorder(t, b, rng):
        calls.append(rng.normal((2,)).tolist())
        return GradientBatch(np.ones((b, 4)) + 0.1 * rng.normal((b, 4)), ("w",))

    gsnr_sweep(recorder, [0.2, 0.8], 4, Rng(9))
    first = list(calls)
    calls.clear()
    gsnr_sweep(recorder, [0.2, 0.8], 4, Rng(9))
    assert calls == first  # same derived draws per t index


def test_sweep_inf_handling_and_validation():
    def degenerate(t, b, rng):
        return GradientBatch(np.ones((b, 3)), ("w",))

    res = gsnr_sweep(degenerate, [0.25, 0.75], 8, Rng(4))
    assert res.inf_count == 2 and np.isnan(res.trajectory_avg)
    with pytest.raises(ValueError):
        gsnr_sweep(degenerate, [], 8, Rng(4))
    with pytest.raises(ValueError):
        gsnr_sweep(degenerate, [1.2], 8, Rng(4))


def test_gsnr_csv_roundtrip(tmp_path):
    res = gsnr_sweep(_noisy_provider(1.0), [0.1, 0.9], 16, Rng(6), param_subset="proj+router")
    path = write_gsnr_csv(tmp_path / "sweep.csv", res)
    text = path.read_text().splitlines()
    assert text[0] == "t,gsnr,B,param_subset,inf_flag"
    assert text[-1].startswith("# trajectory_avg=")
    back = read_gsnr_csv(path)
    assert back.inf_count == res.inf_count
    assert back.trajectory_avg == pytest.approx(res.trajectory_avg, rel=1e-9)
    assert [p.t for p in back.points] == pytest.approx([0.1, 0.9])
    assert back.points[0].param_subset == "proj+router"


# ---------------------------------------------------------------------------
# policy tracing
# ---------------------------------------------------------------------------

def test_trace_zero_init_router():
    policy = RoutingPolicy("learned", 2, 2, DynamicRouter(2, 2, rng=Rng(7)))
    trace = trace_router(policy, np.linspace(0, 1, 11))
    assert np.all(trace.alpha_mid == 0.5) and np.all(trace.alpha_deep == 0.5)
    assert np.all(trace.beta == 0.5)


def test_trace_linear_heuristic_reproduces_identity():
    grid = np.linspace(0.0, 1.0, 101)
    trace = trace_router(RoutingPolicy("linear_heuristic", 2, 2), grid)
    assert np.array_equal(trace.beta[:, 1], grid)
    assert np.array_equal(trace.beta[:, 0], 1.0 - grid)


def test_trace_performs_no_writes():
    router = DynamicRouter(2, 2, rng=Rng(8))
    before = router.content_hash()
    trace_router(RoutingPolicy("learned", 2, 2, router), np.linspace(0, 1, 7))
    assert router.content_hash() == before


def test_trace_csv_format(tmp_path):
    policy = RoutingPolicy("learned", 3, 2, DynamicRouter(3, 2, rng=Rng(9)))
    trace = trace_router(policy, [0.0, 0.5, 1.0])
    path = write_trace_csv(tmp_path / "trace.csv", trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,beta_mid,beta_deep,alpha_mid_0,alpha_mid_1,alpha_mid_2,alpha_deep_0,alpha_deep_1"
    assert len(lines) == 4


# ---------------------------------------------------------------------------
# PCA visualization
# ---------------------------------------------------------------------------

class FakeBank:
    def __init__(self, tokens, grid_side):
        self._tokens = tokens
        self.grid_side = grid_side

    def tokens(self, g):
        return self._tokens


def test_pca_rank1_first_component_dominates():
    rng = Rng(10)
    a = rng.normal((16,))
    u = rng.normal((6,))
    tokens = np.outer(a, u)[None]  # (K=1, L=16, C=6) rank-1 field
    proj, evr = pca_project(tokens[0])
    assert evr[0] >= 0.999
    assert evr[0] >= evr[1] >= evr[2]
    img = pca_rgb(FakeBank(tokens, 4), "G3")
    assert img.shape == (4, 4, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_pca_constant_field_mid_gray():
    tokens = np.full((2, 16, 5), 3.3)
    img = pca_rgb(FakeBank(tokens, 4), "G4")
    assert np.all(img == 0.5)


def test_pca_output_contract_random():
    rng = Rng(11)
    tokens = rng.normal((3, 64, 7))
    img = pca_rgb(FakeBank(tokens[None], 8), "mid")
    assert img.shape == (8, 8, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    _, evr = pca_project(tokens.mean(axis=0))
    assert evr[0] >= evr[1] >= evr[2] >= 0.0


def test_pca_rejects_too_few_positions():
    with pytest.raises(ValueError):
        pca_project(np.zeros((2, 4)))


def test_pca_narrow_channels_padded_mid_gray():
    rng = Rng(12)
    tokens = rng.normal((1, 9, 2))  # only two channels -> third component degenerate
    img = pca_rgb(FakeBank(tokens, 3), "deep")
    assert np.all(img[..., 2] == 0.5)


# ---------------------------------------------------------------------------
# ppm i/o
# ---------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path):
    rng = Rng(13)
    img = rng.uniform((5, 7, 3))
    path = write_ppm(tmp_path / "img.ppm", img)
    back = read_ppm(path)
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back.astype(float) / 255.0 - img)) < 1 / 255.0 + 1e-9


def test_ppm_symmetric_range_mapping(tmp_path):
    img = np.stack([np.full((2, 2), -1.0), np.zeros((2, 2)), np.full((2, 2), 1.0)], axis=-1)
    back = read_ppm(write_ppm(tmp_path / "m.ppm", img))
    assert back[0, 0, 0] == 0 and back[0, 0, 2] == 255
    assert back[0, 0, 1] == 128  # 0.0 maps to mid-scale
