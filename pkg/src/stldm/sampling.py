"""Inference: first estimation, CFG-guided DDIM sampling, ensembles and timing."""

from __future__ import annotations

import statistics
import time
from typing import Sequence

import numpy as np
import torch

from .data import DATA_RANGE, EventSource, denormalize, normalize
from .metrics import csi, contingency
from .networks import STLDM
from .schedule import DdimPlan, DiffusionSchedule, cfg_combine, ddim_step, make_ddim_timesteps
from .training import stream_seed


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x[None], True) if x.ndim == 4 else (x, False)


@torch.no_grad()
def first_estimation(x: torch.Tensor, model: STLDM, return_latent: bool = False):
    """Decoded translator forecast Ȳ from normalised inputs ``[M,1,H,W]`` or ``[B,M,1,H,W]``."""
    x, single = _batched(x)
    mu, _ = model.encode(x)
    zbar, _ = model.translate(mu)
    ybar = model.decode(zbar)
    if single:
        ybar, zbar = ybar[0], zbar[0]
    return (ybar, zbar) if return_latent else ybar


class DenoiserCounter:
    """Counts network passes (one per batch call) made by a model's denoiser."""

    def __init__(self, model: STLDM):
        self.model = model
        self.calls = 0
        self._handle = None

    def __enter__(self):
        def hook(*_):
            self.calls += 1
        self._handle = self.model.denoiser.register_forward_hook(hook)
        return self

    def __exit__(self, *exc):
        self._handle.remove()


@torch.no_grad()
def denoise_latent(model: STLDM, z: torch.Tensor, cond: torch.Tensor | None, plan: DdimPlan,
                   sched: DiffusionSchedule, w: float | None) -> torch.Tensor:
    """Run the DDIM plan from ``z``. ``w=None`` means conditional-only (no CFG)."""
    for t, t_prev in plan.pairs():
        eps = model.denoise_eps(z, t, cond)
        if w is not None and w != 0:
            eps = cfg_combine(eps, model.denoise_eps(z, t, None), w)
        z = ddim_step(z, t, t_prev, eps, sched)
    return z


def _latent_shape(model: STLDM, batch: int):
    d = model.dims
    return (batch, d.N, d.Cz, d.hz, d.wz)


@torch.no_grad()
def sample_member(x: torch.Tensor, model: STLDM, plan: DdimPlan, sched: DiffusionSchedule,
                  w: float | None = 1.0, rng: torch.Generator | int = 0,
                  cond: torch.Tensor | None = None) -> torch.Tensor:
    """One forecast in normalised space, from a fresh N(0, I) latent drawn from ``rng``."""
    x, single = _batched(x)
    if isinstance(rng, int):
        rng = torch.Generator().manual_seed(rng)
    if cond is None:
        _, cond = first_estimation(x, model, return_latent=True)
    z = torch.randn(_latent_shape(model, x.shape[0]), generator=rng, dtype=x.dtype)
    y = model.decode(denoise_latent(model, z, cond, plan, sched, w))
    return y[0] if single else y


def member_generator(seed: int, i: int) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(seed, 0xE45, i))


@torch.no_grad()
def predict_ensemble(x: torch.Tensor, model: STLDM, n_members: int = 10,
                     plan: DdimPlan | None = None, sched: DiffusionSchedule | None = None,
                     w: float | None = 1.0, seed: int = 0) -> list[torch.Tensor]:
    """``n_members`` forecasts; member ``i`` takes its start noise from stream ``(seed, i)``.

    All members are denoised together as one batch; results come back in member order,
    each shaped like ``x`` minus the input frames.
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    if sched is None:
        raise ValueError("a diffusion schedule is required")
    plan = plan or make_ddim_timesteps(sched.total_steps, 20)
    x, single = _batched(x)
    b = x.shape[0]
    _, cond = first_estimation(x, model, return_latent=True)
    # every event of the batch starts member i from the same draw, so a member never
    # depends on which other events were batched with it
    z = torch.cat([torch.randn(_latent_shape(model, 1), generator=member_generator(seed, i),
                               dtype=x.dtype).expand(_latent_shape(model, b))
                   for i in range(n_members)])
    cond_all = cond.repeat(n_members, *([1] * (cond.ndim - 1)))
    out = model.decode(denoise_latent(model, z, cond_all, plan, sched, w))
    members = list(out.split(b))
    return [m[0] for m in members] if single else members


def to_physical(y: torch.Tensor, data_range: float = DATA_RANGE) -> np.ndarray:
    """Denormalise and clamp to ``[0, R]``."""
    return np.clip(denormalize(y.detach().cpu().double().numpy(), data_range), 0.0, data_range)


def time_inference(x: torch.Tensor, model: STLDM, plan: DdimPlan, sched: DiffusionSchedule,
                   w: float | None = 1.0, repeats: int = 5) -> float:
    """Median wall-clock seconds for one single-member forecast (after one warm-up run)."""
    sample_member(x, model, plan, sched, w, rng=0)
    times = []
    for r in range(max(repeats, 5)):
        t0 = time.perf_counter()
        sample_member(x, model, plan, sched, w, rng=r)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def load_events(source: EventSource, indices: Sequence[int], m: int, data_range: float):
    seqs = np.stack([source[int(i)] for i in indices])
    return torch.from_numpy(normalize(seqs, data_range)), seqs[:, m:]


@torch.no_grad()
def validate(model: STLDM, cfg, source: EventSource, n_events: int) -> dict:
    """Quick validation on the first ``n_events`` events: one member per event."""
    was_training = model.training
    model.eval()
    dims, R = cfg.dims, cfg.data.synth.data_range
    sched = cfg.schedule.build()
    plan = make_ddim_timesteps(sched.total_steps, cfg.eval.ddim_steps)
    seqs, obs = load_events(source, range(n_events), dims.M, R)
    x, y = seqs[:, :dims.M], seqs[:, dims.M:]
    ybar = first_estimation(x, model)
    yhat = sample_member(x, model, plan, sched, cfg.cfg.guidance_strength, rng=cfg.train.seed)
    pred = to_physical(yhat, R)
    scores = [csi(contingency(pred, obs, t)) for t in cfg.eval.thresholds]
    model.train(was_training)
    return {
        "mse": float(((yhat.clamp(-1, 1) - y) ** 2).mean()),
        "mse_first_estimation": float(((ybar - y) ** 2).mean()),
        "csi_m": float(np.mean(scores)),
    }
