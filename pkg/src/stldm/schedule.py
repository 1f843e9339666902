"""Diffusion-time machinery: noise schedules, forward corruption, reverse steps and CFG.

All timesteps are 1-based (``t`` in ``[1, T]``); ``alpha_bar(0)`` is defined as 1 so the
DDIM step can land exactly on the clean estimate. Every function here is pure: callers
own all randomness and pass noise tensors in explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import torch

Timestep = Union[int, torch.Tensor]


def _constant_one(t):
    return 1.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """Closed-form quantities of a discrete variance-preserving diffusion.

    Arrays are float64 tensors of length ``T`` where index ``i`` holds step ``t = i + 1``.
    """

    betas: torch.Tensor
    gamma: Callable = field(default=_constant_one, compare=False)

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValueError("schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        if not bool((betas[1:] >= betas[:-1]).all()):
            raise ValueError("betas must be non-decreasing in t")
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
        sig2 = betas * (1.0 - prev) / (1.0 - alpha_bars)
        sig2[0] = betas[0]
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "posterior_sigmas", sig2.sqrt())

    @property
    def total_steps(self) -> int:
        return int(self.betas.numel())

    T = total_steps

    def _lookup(self, arr: torch.Tensor, t: Timestep, pad_zero: float | None = None):
        t = torch.as_tensor(t)
        lo = 0 if pad_zero is not None else 1
        if bool((t < lo).any()) or bool((t > self.total_steps).any()):
            raise ValueError(f"timestep out of range [{lo}, {self.total_steps}]: {t.tolist()}")
        if pad_zero is not None:
            arr = torch.cat([torch.full((1,), pad_zero, dtype=arr.dtype), arr])
            return arr[t.long()]
        return arr[t.long() - 1]

    def beta(self, t: Timestep) -> torch.Tensor:
        return self._lookup(self.betas, t)

    def alpha(self, t: Timestep) -> torch.Tensor:
        return self._lookup(self.alphas, t)

    def alpha_bar(self, t: Timestep) -> torch.Tensor:
        """ᾱ_t for t in [0, T], with ᾱ_0 = 1."""
        return self._lookup(self.alpha_bars, t, pad_zero=1.0)

    def sigma(self, t: Timestep) -> torch.Tensor:
        return self._lookup(self.posterior_sigmas, t)


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64)
    return DiffusionSchedule(betas)


def _coef(values: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Broadcast per-sample coefficients against a ``[B, ...]`` tensor."""
    values = values.to(like.dtype)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0: torch.Tensor, t: Timestep, eps: torch.Tensor,
                    sched: DiffusionSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps. ``t`` may be a scalar or one per batch item."""
    _check_same(z0, eps, "forward_diffuse")
    ab = sched._lookup(sched.alpha_bars, t)
    return _coef(ab.sqrt(), z0) * z0 + _coef((1 - ab).sqrt(), z0) * eps


def posterior_mean(z_t: torch.Tensor, t: Timestep, eps_hat: torch.Tensor,
                   sched: DiffusionSchedule) -> torch.Tensor:
    _check_same(z_t, eps_hat, "posterior_mean")
    beta = sched.beta(t)
    ab = sched._lookup(sched.alpha_bars, t)
    scale = 1.0 / (1.0 - beta).sqrt()
    return _coef(scale, z_t) * (z_t - _coef(beta / (1 - ab).sqrt(), z_t) * eps_hat)


def ddpm_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, noise: torch.Tensor | None,
              sched: DiffusionSchedule) -> torch.Tensor:
    """Ancestral step z_t -> z_{t-1}. No noise is injected at t = 1."""
    t = int(t)
    mean = posterior_mean(z_t, t, eps_hat, sched)
    if t == 1 or noise is None:
        return mean
    _check_same(z_t, noise, "ddpm_step")
    return mean + sched.sigma(t).to(z_t.dtype) * noise


def ddim_step(z_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor,
              sched: DiffusionSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from t to t_prev; t_prev = 0 gives the clean estimate."""
    _check_same(z_t, eps_hat, "ddim_step")
    t, t_prev = int(t), int(t_prev)
    if not t > t_prev >= 0:
        raise ValueError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab = sched.alpha_bar(t).to(z_t.dtype)
    ab_prev = sched.alpha_bar(t_prev).to(z_t.dtype)
    z0_hat = (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    return ab_prev.sqrt() * z0_hat + (1 - ab_prev).sqrt() * eps_hat


@dataclass(frozen=True)
class DdimPlan:
    timesteps: tuple
    eta: float = 0.0

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ValueError("empty DDIM plan")
        if any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 1:
            raise ValueError(f"plan must be strictly decreasing within [1, T]: {ts}")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")
        object.__setattr__(self, "timesteps", ts)

    def __len__(self):
        return len(self.timesteps)

    def pairs(self):
        """(t, t_prev) pairs; the last step always lands on t_prev = 0."""
        ts = self.timesteps
        return list(zip(ts, ts[1:] + (0,)))


def make_ddim_timesteps(T: int, n: int) -> DdimPlan:
    if not 1 <= n <= T:
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    stride = T / n
    return DdimPlan(tuple(T - int(i * stride) for i in range(n)))


@dataclass(frozen=True)
class CfgConfig:
    guidance_strength: float = 1.0
    drop_probability: float = 0.15
    null_condition_kind: str = "zeros"

    def __post_init__(self):
        if self.guidance_strength < 0:
            raise ValueError("guidance strength must be >= 0")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop probability must lie in [0, 1]")
        if self.null_condition_kind != "zeros":
            raise ValueError(f"unsupported null condition {self.null_condition_kind!r}")


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """ε̃ = ε(x, c) - w (ε(x, ∅) - ε(x, c))."""
    _check_same(eps_cond, eps_uncond, "cfg_combine")
    if w == 0:
        return eps_cond
    return eps_cond - w * (eps_uncond - eps_cond)
