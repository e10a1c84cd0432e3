"""Backbone checks: interpolant identities, forward shapes and determinism,
the alignment-depth rule, the velocity loss, and the Euler sampler oracles."""

import numpy as np
import pytest

from hieralign.autodiff import Rng, Tensor
from hieralign.backbone import (
    BackboneConfig,
    PatchTransformer,
    default_align_depth,
    diffusion_loss,
    interpolate,
    sample_euler,
)
from hieralign.errors import ConfigError


CFG = BackboneConfig(depth=2, hidden=16, heads=2, patch=4, image_size=16, num_classes=4)


def make_model(cfg=CFG, seed=0, randomize=True, dtype=np.float64):
    model = PatchTransformer(cfg, Rng(seed), dtype=dtype)
    if randomize:
        noise = Rng(seed + 100)
        for _, t in model.named_params():
            t.data = t.data + 0.05 * noise.normal(t.data.shape).astype(t.data.dtype)
    return model


# ---------------------------------------------------------------------------
# interpolant
# ---------------------------------------------------------------------------

def test_interpolate_endpoints():
    rng = Rng(0)
    x, eps = rng.normal((2, 3, 4, 4)), rng.normal((2, 3, 4, 4))
    assert np.array_equal(interpolate(x, eps, 0.0).x_t, x)
    assert np.array_equal(interpolate(x, eps, 1.0).x_t, eps)


def test_interpolate_velocity_independent_of_t():
    rng = Rng(1)
    x, eps = rng.normal((2, 3, 4, 4)), rng.normal((2, 3, 4, 4))
    s1 = interpolate(x, eps, 0.2)
    s2 = interpolate(x, eps, 0.7)
    assert np.array_equal(s1.v_target, s2.v_target)
    assert np.array_equal(s1.v_target, eps - x)


def test_interpolate_per_sample_t_and_errors():
    rng = Rng(2)
    x, eps = rng.normal((3, 1, 2, 2)), rng.normal((3, 1, 2, 2))
    t = np.array([0.0, 0.5, 1.0])
    st = interpolate(x, eps, t)
    assert np.allclose(st.x_t[0], x[0]) and np.allclose(st.x_t[2], eps[2])
    with pytest.raises(ValueError):
        interpolate(x, eps[:2], 0.5)
    with pytest.raises(ValueError):
        interpolate(x, eps, 1.5)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_forward_shapes_and_tap():
    model = make_model()
    x = Rng(3).normal((2, 3, 16, 16))
    v, h_l = model.forward(x, 0.4, np.array([0, 3]))
    assert v.shape == x.shape  # shape preservation
    assert h_l.shape == (2, CFG.tokens, CFG.hidden)
    assert CFG.tokens == 16  # S^2 with S=4


def test_default_align_depth_rule():
    assert default_align_depth(6) == 2
    assert default_align_depth(12) == 3
    assert default_align_depth(2) == 1
    assert default_align_depth(1) == 1


def test_forward_deterministic():
    model = make_model()
    x = Rng(4).normal((2, 3, 16, 16))
    v1, _ = model.forward(x, 0.3, np.array([1, 2]))
    v2, _ = model.forward(x, 0.3, np.array([1, 2]))
    assert np.array_equal(v1.data, v2.data)


def test_label_out_of_range_rejected():
    model = make_model()
    x = np.zeros((1, 3, 16, 16))
    with pytest.raises(ValueError):
        model.forward(x, 0.5, np.array([5]))  # 4 is the null slot, 5 is out of range
    with pytest.raises(ValueError):
        model.forward(x, 0.5, np.array([-1]))


def test_null_and_real_label_diverge_for_generic_params():
    model = make_model()
    x = Rng(5).normal((1, 3, 16, 16))
    v_cond, _ = model.forward(x, 0.5, np.array([2]))
    v_null, _ = model.forward(x, 0.5, None)
    assert not np.allclose(v_cond.data, v_null.data)


def test_stop_at_block_matches_full_forward_prefix():
    model = make_model()
    x = Rng(6).normal((2, 3, 16, 16))
    _, h_full = model.forward(x, 0.2, np.array([0, 1]))
    v, h_partial = model.forward(x, 0.2, np.array([0, 1]),
                                 stop_at_block=CFG.resolved_align_depth)
    assert v is None
    assert np.array_equal(h_full.data, h_partial.data)


def test_patchify_roundtrip():
    model = make_model(randomize=False)
    x = Tensor(Rng(7).normal((2, 3, 16, 16)))
    assert np.allclose(model.unpatchify(model.patchify(x)).data, x.data)


# ---------------------------------------------------------------------------
# diffusion loss
# ---------------------------------------------------------------------------

def test_diffusion_loss_values():
    rng = Rng(8)
    v = rng.normal((2, 3, 4, 4))
    assert float(diffusion_loss(Tensor(v), v).data) == 0.0
    assert float(diffusion_loss(Tensor(v + 1.0), v).data) == pytest.approx(1.0)
    base = float(diffusion_loss(Tensor(v + 0.3), v).data)
    quad = float(diffusion_loss(Tensor(v + 0.6), v).data)
    assert quad == pytest.approx(4 * base)


# ---------------------------------------------------------------------------
# Euler sampler oracles
# ---------------------------------------------------------------------------

class ConstantField:
    """Stub model with v(x, t) = c."""

    supports_unconditional = True

    def __init__(self, c):
        self.c = c

    def velocity(self, x, t, labels=None):
        return np.broadcast_to(self.c, x.shape).copy()


class OnePointField:
    """Analytic field v(x, t) = (x - x_star) / t for a one-point dataset."""

    supports_unconditional = True

    def __init__(self, x_star):
        self.x_star = x_star

    def velocity(self, x, t, labels=None):
        return (x - self.x_star) / t


def test_constant_field_exact_for_any_nfe():
    c = 0.75
    for nfe in (1, 4, 7, 32):
        rng = Rng(9)
        out = sample_euler(ConstantField(c), np.array([0]), nfe, 1.0, rng,
                           sample_shape=(1, 4, 4))
        eps = Rng(9).normal((1, 1, 4, 4))
        assert np.max(np.abs(out - (eps - c))) < 1e-12


def test_one_point_field_recovers_datapoint():
    x_star = Rng(10).normal((1, 2, 3, 3))
    out = sample_euler(OnePointField(x_star), np.array([0]), 50, 1.0, Rng(11),
                       sample_shape=(2, 3, 3))
    assert np.max(np.abs(out - x_star)) < 1e-6


def test_cfg_one_bit_equals_conditional_only():
    model = make_model()
    out_cfg1 = sample_euler(model, np.array([1, 2]), 8, 1.0, Rng(12))

    class CondOnly:
        supports_unconditional = False

        def velocity(self, x, t, labels=None):
            return model.velocity(x, t, labels)

    out_cond = sample_euler(CondOnly(), np.array([1, 2]), 8, 1.0, Rng(12),
                            sample_shape=(3, 16, 16))
    assert np.array_equal(out_cfg1, out_cond)


def test_cfg_requires_unconditional_branch():
    class CondOnly:
        supports_unconditional = False

        def velocity(self, x, t, labels=None):
            return np.zeros_like(x)

    with pytest.raises(ValueError):
        sample_euler(CondOnly(), np.array([0]), 4, 2.0, Rng(13), sample_shape=(1, 4, 4))
    with pytest.raises(ValueError):
        sample_euler(ConstantField(0.0), np.array([0]), 0, 1.0, Rng(14), sample_shape=(1, 4, 4))


def test_guided_sampling_runs_and_differs_from_conditional():
    model = make_model()
    out1 = sample_euler(model, np.array([1]), 6, 1.0, Rng(15))
    out4 = sample_euler(model, np.array([1]), 6, 4.0, Rng(15))
    assert out1.shape == out4.shape == (1, 3, 16, 16)
    assert not np.allclose(out1, out4)


def test_sampler_training_consistency():
    # a model that outputs the exact v_target of a fixed (x, eps) pair maps
    # that eps back to x (constant field, Euler exact)
    rng = Rng(16)
    x = rng.normal((1, 2, 4, 4))
    eps = rng.normal((1, 2, 4, 4))

    class Oracle:
        supports_unconditional = True

        def velocity(self, x_t, t, labels=None):
            return np.broadcast_to(eps - x, x_t.shape).copy()

    class SeededNoise(Rng):
        def normal(self, shape=(), dtype=np.float64):
            return eps.reshape(shape)

    out = sample_euler(Oracle(), np.array([0]), 16, 1.0, SeededNoise(0), sample_shape=(2, 4, 4))
    assert np.max(np.abs(out - x)) < 1e-12


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(hidden=30, heads=4)
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=30, patch=4)
    with pytest.raises(ConfigError):
        BackboneConfig(depth=4, align_depth=5)
