"""Autodiff gradients of the complete objective against central finite differences."""

import time

import numpy as np
import torch

from stldm.losses import TERMS, LossWeights
from stldm.networks import ModelDims, init_params
from stldm.schedule import build_schedule
from stldm.training import compute_losses, draw_step_noise

from conftest import MICRO_DIMS

H = 1e-6


def micro_problem():
    dims = ModelDims(**MICRO_DIMS)
    model = init_params(dims, seed=0, dtype=torch.float64)
    sched = build_schedule(1000)
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, dims.M, 1, dims.H, dims.W, generator=g, dtype=torch.float64) * 2 - 1
    y = torch.rand(2, dims.N, 1, dims.H, dims.W, generator=g, dtype=torch.float64) * 2 - 1
    noise = draw_step_noise(g, 2, dims, sched.total_steps, 0.15, torch.float64)
    noise = noise._replace(drop=torch.tensor([True, False]))   # exercise both condition paths

    def loss():
        return compute_losses(model, x, y, noise, sched, LossWeights(), detach_target=False)
    return model, loss


def relative_errors(sample: int | None = None, seed: int = 0):
    """Per-element relative errors; ``sample`` picks that many random elements instead of all."""
    model, loss = micro_problem()
    model.zero_grad()
    value = loss().total
    value.backward()
    # a central difference cannot resolve gradients much below eps * |L| / h; compare
    # those on an absolute scale a thousand times above that round-off level
    floor = 1e3 * np.finfo(np.float64).eps * abs(float(value.detach())) / H
    params = list(model.parameters())
    slots = [(j, i) for j, p in enumerate(params) for i in range(p.numel())]
    if sample is not None:
        pick = np.random.default_rng(seed).choice(len(slots), size=sample, replace=False)
        slots = [slots[k] for k in sorted(pick)]
    errs = []
    with torch.no_grad():
        for j, i in slots:
            flat, grad = params[j].view(-1), params[j].grad.view(-1)
            old = float(flat[i])
            flat[i] = old + H
            up = float(loss().total)
            flat[i] = old - H
            down = float(loss().total)
            flat[i] = old
            num, ana = (up - down) / (2 * H), float(grad[i])
            errs.append(abs(num - ana) / max(abs(num), abs(ana), floor))
    return np.array(errs)


def test_all_five_terms_are_active():
    _, loss = micro_problem()
    parts = loss().scalars()
    assert all(parts[k] > 0 for k in TERMS)


def test_gradients_match_finite_differences_on_a_sample():
    errs = relative_errors(sample=400)
    assert np.mean(errs <= 1e-3) >= 0.95
    assert errs.max() <= 1e-2


def test_detached_target_blocks_only_the_target_path():
    model, _ = micro_problem()
    dims = model.dims
    sched = build_schedule(1000)
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, dims.M, 1, dims.H, dims.W, generator=g, dtype=torch.float64)
    y = torch.rand(2, dims.N, 1, dims.H, dims.W, generator=g, dtype=torch.float64)
    noise = draw_step_noise(g, 2, dims, 1000, 0.0, torch.float64)
    grads = []
    for detach in (True, False):
        model.zero_grad()
        compute_losses(model, x, y, noise, sched, terms=("l_diffusion",),
                       detach_target=detach).total.backward()
        grads.append(model.encoder.mu.weight.grad.clone())
    # the condition still carries diffusion gradients into the encoder
    assert float(grads[0].abs().sum()) > 0
    assert not torch.equal(grads[0], grads[1])
