"""Walk through the noise schedule, the deterministic sampler and guidance mixing.

Run: python demos/01_schedule_and_guidance.py
"""
import torch

from stldm.schedule import (build_schedule, cfg_combine, ddim_step, forward_diffuse,
                            make_ddim_timesteps)

sched = build_schedule(1000)
ab = sched.alpha_bars
print(f"T = {sched.total_steps}; alpha_bar at t=1, 500, 1000: "
      f"{ab[0]:.4f}, {ab[499]:.4f}, {ab[999]:.2e}")

# Noise a latent to step t, then jump straight back with the true noise.
g = torch.Generator().manual_seed(0)
z0 = torch.randn(4, 16, generator=g, dtype=torch.float64)
eps = torch.randn(4, 16, generator=g, dtype=torch.float64)
t = 700
zt = forward_diffuse(z0, t, eps, sched)
back = ddim_step(zt, t, 0, eps, sched)
print(f"max |z0 - ddim(z_t, eps)| = {(back - z0).abs().max():.2e}")

# A 20-step plan visits a strided subset of the chain.
plan = make_ddim_timesteps(1000, 20)
print("DDIM plan starts:", list(plan.timesteps[:5]), "...")

# Guidance: w=0 gives the conditional prediction, larger w pushes away from it.
ec, eu = torch.ones(3), torch.zeros(3)
for w in (0.0, 1.0, 2.0):
    print(f"w={w:g}: combined = {cfg_combine(ec, eu, w).tolist()}")
