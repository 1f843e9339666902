"""The five-term STLDM objective with per-term reporting.

All reductions are means over every element, so term magnitudes do not depend on
resolution or sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .schedule import DiffusionSchedule

TERMS = ("l_mse", "l_c", "kl_encoder", "kl_translator", "l_prior", "l_diffusion")


@dataclass(frozen=True)
class LossWeights:
    l_mse: float = 1.0
    l_c: float = 1.0
    kl_encoder: float = 1e-4
    kl_translator: float = 1e-4
    l_prior: float = 1e-4
    l_diffusion: float = 1.0

    def as_tuple(self):
        return tuple(getattr(self, k) for k in TERMS)


@dataclass
class LossBreakdown:
    l_mse: torch.Tensor
    l_c: torch.Tensor
    kl_encoder: torch.Tensor
    kl_translator: torch.Tensor
    l_prior: torch.Tensor
    l_diffusion: torch.Tensor
    total: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    def scalars(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in TERMS}
        out["total"] = float(self.total.detach())
        return out


def _same(*xs):
    if any(x.shape != xs[0].shape for x in xs[1:]):
        raise ValueError("shape mismatch: " + ", ".join(str(tuple(x.shape)) for x in xs))


def mse(a, b):
    _same(a, b)
    return (a - b).pow(2).mean()


def recon_and_constraint(x_full, x_hat, y, y_bar):
    """Reconstruction MSE over all M+N frames, and the constraint MSE on the first estimation."""
    return mse(x_full, x_hat), mse(y, y_bar)


def kl_diag_standard(mu, logvar):
    """Mean of KL(N(mu, exp(logvar)) || N(0, 1)) per element."""
    _same(mu, logvar)
    return 0.5 * (logvar.exp() + mu.pow(2) - 1.0 - logvar).mean()


def prior_loss(z0, sched: DiffusionSchedule):
    """KL(N(sqrt(ᾱ_T) z0, 1 - ᾱ_T) || N(0, 1)), averaged over elements."""
    ab = float(sched.alpha_bar(sched.total_steps))
    if ab >= 1.0:
        raise ValueError("prior loss undefined when alpha_bar_T == 1")
    var = 1.0 - ab
    return 0.5 * (var + ab * z0.pow(2) - 1.0 - math.log(var)).mean()


def diffusion_loss(eps, eps_hat, t, sched: DiffusionSchedule):
    """γ(t) weighted ε-prediction MSE; ``t`` may be one value per batch element."""
    _same(eps, eps_hat)
    sq = (eps - eps_hat).pow(2)
    gamma = sched.gamma(t)
    if isinstance(gamma, torch.Tensor) and gamma.ndim:
        gamma = gamma.to(sq.dtype).reshape(gamma.shape + (1,) * (sq.ndim - gamma.ndim))
    return (gamma * sq).mean()


def total_loss(parts: dict, weights: LossWeights = LossWeights()) -> LossBreakdown:
    vals = {}
    for k in TERMS:
        v = parts.get(k, 0.0)
        v = v if isinstance(v, torch.Tensor) else torch.tensor(float(v))
        if not bool(torch.isfinite(v).all()):
            raise FloatingPointError(f"non-finite loss term {k}: {float(v)}")
        vals[k] = v
    total = sum(w * vals[k] for k, w in zip(TERMS, weights.as_tuple()))
    return LossBreakdown(**vals, total=total, weights=weights)


CSV_HEADER = ("step", "lr") + TERMS + ("total",)


def csv_row(step: int, lr: float, loss: LossBreakdown) -> str:
    s = loss.scalars()
    return ",".join([str(step), repr(float(lr))] + [repr(s[k]) for k in TERMS + ("total",)])
