import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pairflow import flowmatch
from pairflow.errors import NumericError, ShapeError, ValidationError
from pairflow.flowmatch import (SamplerSpec, euler_sample, flow_matching_loss,
                                interpolate, make_flow_state,
                                predict_clean_point, sample_timesteps,
                                time_shift, velocity_target,
                                weighted_flow_matching_loss)


def test_interpolate_endpoints_exact():
    z = torch.randn(4, 3, 3)
    eps = torch.randn(4, 3, 3)
    assert torch.equal(interpolate(z, eps, 0.0), eps)
    assert torch.equal(interpolate(z, eps, 1.0), z)


def test_interpolate_midpoint_arithmetic():
    z = torch.ones(2, 2)
    eps = torch.zeros(2, 2)
    assert torch.all(interpolate(z, eps, 0.5) == 0.5)


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeError):
        interpolate(torch.zeros(2, 2), torch.zeros(3, 2), 0.5)


def test_velocity_trivials():
    z = torch.randn(3, 3)
    assert torch.all(velocity_target(z, z) == 0)
    assert torch.all(velocity_target(torch.ones(2), torch.zeros(2)) == 1)


def test_reconstruction_identity_1000_draws():
    gen = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        z = torch.randn(2, 4, 4, generator=gen)
        eps = torch.randn(2, 4, 4, generator=gen)
        t = float(rng.uniform())
        state = make_flow_state(z, eps, t)
        state.check(tol=1e-6)


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
def test_reconstruction_identity_property(t, seed):
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(3, 3, generator=gen)
    eps = torch.randn(3, 3, generator=gen)
    x_t = interpolate(z, eps, t)
    recon = predict_clean_point(x_t, t, velocity_target(z, eps))
    assert (recon - z).abs().max() <= 1e-6


def test_logit_normal_median_and_support():
    gen = torch.Generator().manual_seed(0)
    t = sample_timesteps(100_000, gen, loc=0.0, scale=1.0)
    assert abs(float(t.median()) - 0.5) <= 0.01
    big = sample_timesteps(1_000_000, gen, loc=0.0, scale=1.0)
    assert float(big.min()) > 0.0 and float(big.max()) < 1.0


def test_logit_normal_small_scale_limit():
    gen = torch.Generator().manual_seed(0)
    t = sample_timesteps(1000, gen, loc=0.7, scale=1e-8)
    assert torch.allclose(t, torch.sigmoid(torch.tensor(0.7)).expand(1000), atol=1e-6)
    with pytest.raises(ValidationError):
        sample_timesteps(1, gen, scale=0.0)


def test_time_shift_identity_endpoints_monotone():
    ts = torch.linspace(0, 1, 101)
    assert torch.allclose(time_shift(ts, 1.0), ts)
    for s in (1.0, 1.5, 2.0, 4.0):
        assert time_shift(0.0, s) == 0.0
        assert time_shift(1.0, s) == pytest.approx(1.0)
        shifted = time_shift(ts, s)
        assert torch.all(shifted[1:] > shifted[:-1])
    with pytest.raises(ValidationError):
        time_shift(0.5, 0.5)


def test_loss_fm_trivials():
    v = torch.randn(2, 3, 4, 4)
    assert float(flow_matching_loss(v, v)) == 0.0
    c = 0.7
    assert float(flow_matching_loss(v + c, v)) == pytest.approx(c * c, rel=1e-5)


def _fd_gradient(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar f at x (float64)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = g.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def test_loss_fm_gradient_matches_finite_differences():
    torch.manual_seed(0)
    v_target = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    def f(z):
        return float(flow_matching_loss(z, v_target))

    xg = x.clone().requires_grad_(True)
    flow_matching_loss(xg, v_target).backward()
    fd = _fd_gradient(f, x.clone())
    rel = (xg.grad - fd).norm() / fd.norm()
    assert rel <= 1e-3


def test_loss_fmw_reduces_to_fm_and_is_linear_in_weights():
    torch.manual_seed(1)
    v_pred = torch.randn(1, 3, 4, 4)
    v_target = torch.randn(1, 3, 4, 4)
    w = torch.ones(1, 1, 4, 4)
    a = weighted_flow_matching_loss(v_pred, v_target, w)
    b = flow_matching_loss(v_pred, v_target)
    assert torch.allclose(a, b, atol=1e-7)
    # doubling one cell's weight doubles its contribution
    w2 = w.clone()
    w2[0, 0, 1, 2] = 2.0
    cell = ((v_pred - v_target) ** 2)[0, :, 1, 2].mean() / 16.0
    delta = weighted_flow_matching_loss(v_pred, v_target, w2) - a
    assert torch.allclose(delta, cell, atol=1e-6)


def test_loss_fmw_rejects_nonpositive_weights():
    v = torch.randn(1, 1, 2, 2)
    with pytest.raises(ValidationError):
        weighted_flow_matching_loss(v, v, torch.zeros(1, 1, 2, 2))


def test_loss_fmw_gradient_matches_finite_differences():
    torch.manual_seed(2)
    v_target = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    w = torch.rand(1, 1, 4, 4, dtype=torch.float64) + 0.5
    w = w / w.mean()
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64)

    for literal in (False, True):
        def f(z):
            return float(weighted_flow_matching_loss(z, v_target, w, literal))

        xg = x.clone().requires_grad_(True)
        weighted_flow_matching_loss(xg, v_target, w, literal).backward()
        fd = _fd_gradient(f, x.clone())
        rel = (xg.grad - fd).norm() / fd.norm()
        assert rel <= 1e-3


def test_literal_double_weight_differs():
    torch.manual_seed(3)
    v_pred = torch.randn(1, 1, 4, 4)
    v_target = torch.randn(1, 1, 4, 4)
    w = torch.rand(1, 1, 4, 4) + 0.5
    a = weighted_flow_matching_loss(v_pred, v_target, w, literal_double_weight=False)
    b = weighted_flow_matching_loss(v_pred, v_target, w, literal_double_weight=True)
    assert not torch.allclose(a, b)


class _OracleModel:
    """Returns the true constant velocity toward a fixed clean latent."""

    def __init__(self, clean: torch.Tensor):
        self.clean = clean
        self.calls = []

    def __call__(self, x, t, cond):
        self.calls.append(cond is not None and getattr(cond, "_is_null", False))
        target = x[..., : self.clean.shape[-1]]
        # v solves x_t = t*z + (1-t)*eps with eps = (x_t - t*z)/(1-t)
        tt = float(t[0]) if torch.is_tensor(t) else float(t)
        if tt >= 1.0:
            v = self.clean - target
        else:
            eps = (target - tt * self.clean) / (1.0 - tt)
            v = self.clean - eps
        return torch.cat([v, torch.zeros_like(v)], dim=-1) if x.shape[-1] != v.shape[-1] else v


def test_euler_oracle_reaches_clean_in_one_step():
    gen = torch.Generator().manual_seed(0)
    clean = torch.randn(1, 2, 4, 4)
    model = _OracleModel(clean[0])
    spec = SamplerSpec(steps=1, mechanism="single")
    out = euler_sample(model, spec, torch.zeros(1, 24, 8), (2, 4, 4),
                       gen, batch=1)
    assert (out - clean).abs().max() <= 1e-5


def test_euler_step_count_invariant_for_constant_velocity():
    clean = torch.randn(1, 2, 4, 4)
    outs = []
    for steps in (32, 64):
        gen = torch.Generator().manual_seed(7)
        model = _OracleModel(clean[0])
        out = euler_sample(model, SamplerSpec(steps=steps, mechanism="single"),
                           torch.zeros(1, 24, 8), (2, 4, 4), gen, batch=1)
        outs.append(out)
    assert (outs[0] - outs[1]).abs().max() <= 1e-4


def test_cfg_zero_never_evaluates_null_branch():
    calls = {"n": 0}

    class Counting:
        def __call__(self, x, t, cond):
            calls["n"] += 1
            return torch.zeros_like(x)

    gen = torch.Generator().manual_seed(0)
    spec = SamplerSpec(steps=8, cfg_scale=0.0, mechanism="single")
    euler_sample(Counting(), spec, torch.zeros(1, 4, 8), (2, 4, 4), gen, batch=1)
    assert calls["n"] == 8  # one conditional call per step, no null branch
    calls["n"] = 0
    spec = SamplerSpec(steps=8, cfg_scale=2.0, mechanism="single")
    euler_sample(Counting(), spec, torch.zeros(1, 4, 8), (2, 4, 4), gen,
                 null_embed=torch.zeros(1, 4, 8), batch=1)
    assert calls["n"] == 16


def test_sampler_determinism():
    clean = torch.randn(1, 2, 4, 4)
    outs = []
    for _ in range(2):
        gen = torch.Generator().manual_seed(123)
        out = euler_sample(_OracleModel(clean[0]), SamplerSpec(steps=4, mechanism="single"),
                           torch.zeros(1, 4, 8), (2, 4, 4), gen, batch=2)
        outs.append(out)
    assert torch.equal(outs[0], outs[1])


def test_sampler_rejects_invalid_specs():
    with pytest.raises(ValidationError):
        SamplerSpec(steps=0).validate()
    with pytest.raises(ValidationError):
        SamplerSpec(steps=8, distilled=True).validate()
    with pytest.raises(ValidationError):
        SamplerSpec(steps=4, cfg_scale=1.0, distilled=True).validate()
    SamplerSpec(steps=4, cfg_scale=0.0, distilled=True).validate()


def test_sampler_flags_nonfinite_state():
    class Bad:
        def __call__(self, x, t, cond):
            return torch.full_like(x, float("nan"))

    gen = torch.Generator().manual_seed(0)
    with pytest.raises(NumericError, match="step"):
        euler_sample(Bad(), SamplerSpec(steps=2, mechanism="single"),
                     torch.zeros(1, 4, 8), (2, 4, 4), gen)
