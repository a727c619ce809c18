"""Forward noising, the epsilon-prediction objective, and deterministic DDIM sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .adaln import TimeEmbedding, sinusoidal


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. ``alphas_cumprod[t-1]`` is the cumulative product at step t."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> torch.Tensor:
        return torch.linspace(self.beta_start, self.beta_end, self.T, dtype=torch.float64)

    @property
    def alphas_cumprod(self) -> torch.Tensor:
        return torch.cumprod(1.0 - self.betas, dim=0)

    def alpha_bar(self, t) -> torch.Tensor:
        """Cumulative alpha at integer step(s) ``t``; step 0 is the clean signal."""
        t = torch.as_tensor(t, dtype=torch.long)
        table = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        return table[t]

    def ddim_timesteps(self, steps: int) -> list[int]:
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must lie in [1, {self.T}], got {steps}")
        grid = np.linspace(self.T, 0, steps + 1)
        return [int(round(v)) for v in grid]

    def metadata(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    x_t: torch.Tensor


def _bcast(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return a.reshape(a.shape + (1,) * (like.dim() - a.dim())).to(like.dtype)


def forward_noise(sched: NoiseSchedule, x0: torch.Tensor, t, rng: torch.Generator | None = None,
                  eps: torch.Tensor | None = None) -> DiffusionBatch:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with one timestep per sample."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(x0.shape[0]) if x0.dim() > 1 else t
    if bool(torch.any(t < 1)) or bool(torch.any(t > sched.T)):
        raise ValueError(f"timesteps must lie in [1, {sched.T}]")
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    ab = sched.alpha_bar(t)
    x_t = _bcast(ab.sqrt(), x0) * x0 + _bcast((1 - ab).sqrt(), x0) * eps
    return DiffusionBatch(x0=x0, t=t, eps=eps, x_t=x_t)


def diffusion_loss(eps_hat: torch.Tensor, batch: DiffusionBatch | torch.Tensor) -> torch.Tensor:
    eps = batch.eps if isinstance(batch, DiffusionBatch) else batch
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: eps_hat {tuple(eps_hat.shape)} vs eps {tuple(eps.shape)}")
    return (eps_hat - eps).pow(2).mean()


def predict_x0(sched: NoiseSchedule, x_t, eps_hat, t) -> torch.Tensor:
    ab = sched.alpha_bar(t)
    return (x_t.double() - (1 - ab).sqrt() * eps_hat.double()) / ab.sqrt()


def ddim_step(sched: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """One eta=0 DDIM update from ``t`` to ``t_prev`` (``t_prev=0`` returns the x0 estimate)."""
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x0 = predict_x0(sched, x_t, eps_hat, t)
    ab_prev = sched.alpha_bar(t_prev)
    out = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps_hat.double()
    return out.to(x_t.dtype)


def timestep_embedding(t: int, d_t: int, dtype=torch.float32) -> TimeEmbedding:
    return TimeEmbedding(theta=sinusoidal(t, d_t, dtype=dtype), t=int(t))


Predictor = Callable[[torch.Tensor, int], torch.Tensor]


def sample(model, cond_tokens, steps: int, rng: torch.Generator, sched: NoiseSchedule,
           shape: tuple[int, ...] | None = None, dtype=torch.float32) -> torch.Tensor:
    """Run ``steps`` evenly spaced DDIM updates starting from unit Gaussian latents.

    ``model`` is either a :class:`~haploomni.model.ModelBundle` (with
    ``cond_tokens`` the prompt bytes) or any callable ``(x_t, t) -> eps_hat``,
    in which case ``shape`` gives the latent shape.
    """
    from .model import ModelBundle

    if isinstance(model, ModelBundle):
        plan = model.generation_plan(cond_tokens)
        shape = (1, plan.n_noise, model.config.d_lat) if shape is None else shape
        dtype = model.dtype

        def predictor(x_t, t):
            return model.forward_generation(plan, x_t, t)
    else:
        if shape is None:
            raise ValueError("shape is required for a bare predictor")
        predictor = model

    x = torch.randn(shape, generator=rng, dtype=dtype)
    ts = sched.ddim_timesteps(steps)
    with torch.no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            eps_hat = predictor(x, t)
            x = ddim_step(sched, x, eps_hat, t, t_prev)
    return x
