import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stldm.schedule import (CfgConfig, DdimPlan, DiffusionSchedule, build_schedule, cfg_combine,
                            ddim_step, ddpm_step, forward_diffuse, make_ddim_timesteps,
                            posterior_mean)


def test_two_step_hand_product():
    s = DiffusionSchedule(torch.tensor([0.1, 0.2], dtype=torch.float64))
    assert float(s.alpha_bar(1)) == pytest.approx(0.9, abs=1e-12)
    assert float(s.alpha_bar(2)) == pytest.approx(0.72, abs=1e-12)
    assert float(s.alpha_bar(0)) == 1.0


def test_alpha_bar_recurrence_and_monotonicity():
    s = build_schedule(1000)
    ab = s.alpha_bars.numpy()
    al = 1.0 - s.betas.numpy()
    assert np.allclose(ab[1:], ab[:-1] * al[1:], rtol=0, atol=1e-12)
    assert ab[0] == pytest.approx(al[0], abs=1e-15)
    assert np.all(np.diff(ab) < 0)
    assert s.betas.dtype == torch.float64


def test_linear_endpoints():
    s = build_schedule(1000, 1e-4, 0.02)
    assert float(s.beta(1)) == pytest.approx(1e-4, abs=1e-15)
    assert float(s.beta(1000)) == pytest.approx(0.02, abs=1e-15)


@pytest.mark.parametrize("betas", [[0.0, 0.1], [0.1, 1.0], [0.2, 0.1]])
def test_invalid_betas(betas):
    with pytest.raises(ValueError):
        DiffusionSchedule(torch.tensor(betas, dtype=torch.float64))


def test_out_of_range_timestep():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.beta(11)
    with pytest.raises(ValueError):
        s.beta(0)


def test_posterior_sigma():
    s = build_schedule(100)
    t = 37
    expect = float(s.beta(t) * (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)))
    assert float(s.sigma(t)) ** 2 == pytest.approx(expect, rel=1e-12)
    assert float(s.sigma(1)) ** 2 == pytest.approx(float(s.beta(1)), rel=1e-12)


def test_forward_diffuse_example():
    s = DiffusionSchedule(torch.tensor([0.5, 0.5], dtype=torch.float64))  # ᾱ_2 = 0.25
    z0 = torch.ones(1, dtype=torch.float64)
    zt = forward_diffuse(z0, 2, torch.ones(1, dtype=torch.float64), s)
    assert float(zt) == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-12)
    assert float(zt) == pytest.approx(1.3660, abs=1e-4)


def test_forward_diffuse_per_item_timesteps():
    s = build_schedule(50)
    z0 = torch.randn(3, 2, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 20, 50])
    out = forward_diffuse(z0, t, eps, s)
    for i in range(3):
        assert torch.allclose(out[i], forward_diffuse(z0[i], int(t[i]), eps[i], s))


def test_posterior_mean_example():
    # β=0.1, ᾱ=0.5: (1 - 0.1/sqrt(0.5)) / sqrt(0.9)
    first = 1 - (0.5 / 0.9) / 0.9 ** 5
    s = DiffusionSchedule(torch.tensor([first] + [0.1] * 6, dtype=torch.float64))
    assert float(s.alpha_bar(7)) == pytest.approx(0.5, abs=1e-12)
    mu = posterior_mean(torch.ones(1, dtype=torch.float64), 7, torch.ones(1, dtype=torch.float64), s)
    assert float(mu) == pytest.approx((1 - 0.1 / math.sqrt(0.5)) / math.sqrt(0.9), abs=1e-12)
    assert float(mu) == pytest.approx(0.9050, abs=1e-4)


def test_ddpm_last_step_is_noise_free():
    s = build_schedule(20)
    z = torch.randn(5, dtype=torch.float64)
    eps = torch.randn_like(z)
    a = ddpm_step(z, 1, eps, torch.randn_like(z), s)
    b = ddpm_step(z, 1, eps, torch.randn_like(z), s)
    assert torch.equal(a, b)
    assert torch.equal(a, posterior_mean(z, 1, eps, s))


def test_ddpm_step_adds_scaled_noise():
    s = build_schedule(20)
    z, eps, noise = (torch.randn(5, dtype=torch.float64) for _ in range(3))
    out = ddpm_step(z, 7, eps, noise, s)
    assert torch.allclose(out, posterior_mean(z, 7, eps, s) + s.sigma(7) * noise)


def test_ddim_inverts_forward_with_true_noise():
    s = build_schedule(1000)
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        z0 = torch.randn(16, generator=g, dtype=torch.float64)
        eps = torch.randn(16, generator=g, dtype=torch.float64)
        t = int(torch.randint(1, 1001, (1,), generator=g))
        rec = ddim_step(forward_diffuse(z0, t, eps, s), t, 0, eps, s)
        worst = max(worst, float((rec - z0).norm() / z0.norm()))
    assert worst <= 1e-6


def test_ddim_intermediate_target_matches_forward():
    s = build_schedule(100)
    z0 = torch.randn(8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    out = ddim_step(forward_diffuse(z0, 80, eps, s), 80, 30, eps, s)
    assert torch.allclose(out, forward_diffuse(z0, 30, eps, s), atol=1e-12)


def test_ddim_rejects_bad_order():
    s = build_schedule(10)
    z = torch.zeros(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        ddim_step(z, 3, 3, z, s)


def test_ddim_plan():
    assert make_ddim_timesteps(1000, 20).timesteps[:3] == (1000, 950, 900)
    plan = make_ddim_timesteps(1000, 20)
    assert len(plan.timesteps) == 20 and plan.timesteps[-1] == 50
    assert plan.pairs()[-1] == (50, 0)
    with pytest.raises(ValueError):
        DdimPlan((5, 5, 1))
    with pytest.raises(ValueError):
        DdimPlan((3, 0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 60))
def test_ddim_timesteps_strictly_decreasing(T, n):
    n = min(n, T)
    ts = make_ddim_timesteps(T, n).timesteps
    assert len(ts) == n and ts[0] == T and all(a > b >= 1 for a, b in zip(ts, ts[1:]))


def test_cfg_combine_example():
    out = cfg_combine(torch.tensor([2.0]), torch.tensor([1.0]), 1.0)
    assert float(out) == 3.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 4))
def test_cfg_identities(a, w):
    x = torch.full((3,), a, dtype=torch.float64)
    y = torch.randn(3, dtype=torch.float64)
    assert torch.equal(cfg_combine(x, x, w), x)
    assert torch.equal(cfg_combine(x, y, 0.0), x)


def test_cfg_defaults():
    c = CfgConfig()
    assert c.guidance_strength == 1.0 and c.drop_probability == 0.15
    assert c.null_condition_kind == "zeros"
