import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from haploomni.diffusion import (
    DiffusionBatch,
    NoiseSchedule,
    ddim_step,
    diffusion_loss,
    forward_noise,
    predict_x0,
    sample,
)

SCHED = NoiseSchedule()


def test_schedule_shape_and_monotone():
    b = SCHED.betas
    assert b[0] == pytest.approx(1e-4) and b[-1] == pytest.approx(2e-2)
    assert torch.all(b[1:] >= b[:-1])
    ab = SCHED.alphas_cumprod
    assert torch.all(ab[1:] < ab[:-1])
    assert SCHED.alpha_bar(0) == 1.0
    assert SCHED.alpha_bar(1000) == pytest.approx(4.0358e-05, rel=1e-3)


def test_schedule_rejects_bad_constants():
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.0)
    with pytest.raises(ValueError):
        NoiseSchedule(beta_start=0.5, beta_end=0.1)


def test_ddim_timesteps():
    assert SCHED.ddim_timesteps(1) == [1000, 0]
    ts = SCHED.ddim_timesteps(50)
    assert len(ts) == 51 and ts[0] == 1000 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(ValueError):
        SCHED.ddim_timesteps(0)


def test_forward_noise_limits_and_range():
    x0 = torch.randn(4, 6, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    near = forward_noise(SCHED, x0, 1, eps=eps)
    assert (near.x_t - x0).abs().max() < 0.05
    far = forward_noise(NoiseSchedule(beta_end=0.5), x0, 1000, eps=eps)
    assert (far.x_t - eps).abs().max() < 1e-6
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            forward_noise(SCHED, x0, bad)


def test_stored_eps_reconstruction():
    x0 = torch.randn(5, 8, 4, dtype=torch.float64)
    t = torch.tensor([1, 10, 300, 700, 1000])
    b = forward_noise(SCHED, x0, t, rng=torch.Generator().manual_seed(0))
    ab = SCHED.alpha_bar(t)[:, None, None]
    rec = (b.x_t - ab.sqrt() * x0) / (1 - ab).sqrt()
    assert (rec - b.eps).abs().max() < 1e-6


def test_noise_energy_statistics():
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(1, 16, 48, generator=g, dtype=torch.float64).expand(1000, -1, -1)
    t = 400
    b = forward_noise(SCHED, x0, t, rng=g)
    ab = float(SCHED.alpha_bar(t))
    expect = ab * float(x0[0].pow(2).mean()) + (1 - ab)
    assert float(b.x_t.pow(2).mean()) == pytest.approx(expect, rel=0.02)


def test_loss_examples():
    eps = torch.randn(2, 3, 4, dtype=torch.float64)
    batch = DiffusionBatch(x0=eps, t=torch.tensor([1, 2]), eps=eps, x_t=eps)
    assert diffusion_loss(eps, batch) == 0
    assert diffusion_loss(eps + 1, batch) == pytest.approx(1.0)
    e2 = torch.randn_like(eps)
    ref = sum(float((a - b) ** 2) for a, b in zip(e2.reshape(-1), eps.reshape(-1))) / eps.numel()
    assert float(diffusion_loss(e2, batch)) == pytest.approx(ref, rel=1e-12)
    perm = torch.tensor([1, 0])
    assert float(diffusion_loss(e2[perm], eps[perm])) == pytest.approx(float(diffusion_loss(e2, eps)), rel=1e-14)
    with pytest.raises(ValueError):
        diffusion_loss(eps[:1], batch)


def test_ddim_step_argument_checks_and_boundary():
    x = torch.randn(3, 2, dtype=torch.float64)
    with pytest.raises(ValueError):
        ddim_step(SCHED, x, x, 5, 5)
    assert torch.equal(predict_x0(SCHED, x, torch.randn_like(x), 0), x)


@given(st.integers(1, 1000), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_single_ddim_step_inverts_forward_noise(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 4, 3, generator=g)
    b = forward_noise(SCHED, x0, t, rng=g)
    rec = ddim_step(SCHED, b.x_t, b.eps, t, 0)
    assert (rec - x0).abs().max() < 1e-4


@pytest.mark.parametrize("steps", [1, 10, 50, 1000])
def test_sampler_with_oracle_predictor_recovers_x0(steps):
    g = torch.Generator().manual_seed(steps)
    x0 = torch.randn(1, 16, 12, generator=g)
    def oracle(x_t, t):
        ab = SCHED.alpha_bar(t)
        return ((x_t.double() - ab.sqrt() * x0.double()) / (1 - ab).sqrt()).to(x_t.dtype)

    out = sample(oracle, None, steps, torch.Generator().manual_seed(99), SCHED, shape=x0.shape)
    assert (out - x0).abs().max() < 1e-4


def test_sampler_is_deterministic_and_needs_shape():
    f = lambda x, t: 0.5 * x
    a = sample(f, None, 20, torch.Generator().manual_seed(3), SCHED, shape=(1, 4, 2))
    b = sample(f, None, 20, torch.Generator().manual_seed(3), SCHED, shape=(1, 4, 2))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        sample(f, None, 5, torch.Generator(), SCHED)
