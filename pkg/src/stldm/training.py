"""End-to-end trainer: strategies A/B/C, condition dropping, lr schedule, checkpoints.

Randomness is counter-based: everything drawn for global step ``s`` comes from streams
keyed by ``(seed, s)``. Resuming from a checkpoint therefore replays the exact same
batches and noise as an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from . import io as stio
from .config import Config, TrainConfig, dump_config, from_dict
from .data import EventSource, SyntheticSource, normalize, split
from .losses import CSV_HEADER, TERMS, LossBreakdown, LossWeights, csv_row
from .losses import diffusion_loss, kl_diag_standard, mse, prior_loss, total_loss
from .networks import STLDM, init_params, reparameterize
from .schedule import DiffusionSchedule, forward_diffuse

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

ALL_GROUPS = ("vae", "translator", "denoiser")


def lr_at(step: int, cfg) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    total, warm, peak = cfg.total_steps, cfg.warmup_steps, cfg.peak_lr
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


@dataclass(frozen=True)
class Stage:
    name: str
    steps: int
    trainable: tuple
    terms: tuple


@dataclass(frozen=True)
class StrategyMask:
    strategy: str
    stages: tuple

    @property
    def final(self) -> Stage:
        return self.stages[-1]

    def stage_at(self, step: int) -> tuple[int, int]:
        """(stage index, 1-based step within that stage) for a 1-based global step."""
        for i, st in enumerate(self.stages):
            if step <= st.steps:
                return i, step
            step -= st.steps
        raise ValueError("step beyond the end of training")

    def stage_start(self, index: int) -> int:
        return sum(st.steps for st in self.stages[:index])


VAE_TERMS = ("l_mse", "kl_encoder")
TRANSLATOR_TERMS = ("l_c", "kl_translator")


def strategy_mask(cfg: TrainConfig) -> StrategyMask:
    total = cfg.total_steps
    if cfg.strategy == "C":
        return StrategyMask("C", (Stage("joint", total, ALL_GROUPS, TERMS),))
    if cfg.strategy == "B":
        rest = total - cfg.vae_stage_steps
        if rest < 1:
            raise ValueError("strategy B needs total_steps > vae_stage_steps")
        return StrategyMask("B", (
            Stage("vae", cfg.vae_stage_steps, ("vae",), VAE_TERMS),
            Stage("joint", rest, ("translator", "denoiser"), TERMS),
        ))
    rest = total - cfg.vae_stage_steps - cfg.translator_stage_steps
    if rest < 1:
        raise ValueError("strategy A needs total_steps > vae + translator stage steps")
    return StrategyMask("A", (
        Stage("vae", cfg.vae_stage_steps, ("vae",), VAE_TERMS),
        Stage("translator", cfg.translator_stage_steps, ("translator",), TRANSLATOR_TERMS),
        Stage("denoiser", rest, ("denoiser",), TERMS),
    ))


def stream_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


class StepNoise(NamedTuple):
    enc: torch.Tensor      # reparameterisation noise for all M+N frames
    t: torch.Tensor        # diffusion step per batch item, in [1, T]
    eps: torch.Tensor      # forward-diffusion noise for the N target latents
    drop: torch.Tensor     # bool per batch item: replace the condition with zeros


def draw_step_noise(gen: torch.Generator, batch: int, dims, T: int, drop_p: float,
                    dtype=torch.float32) -> StepNoise:
    lat = (dims.Cz, dims.hz, dims.wz)
    enc = torch.randn((batch, dims.M + dims.N) + lat, generator=gen, dtype=dtype)
    t = torch.randint(1, T + 1, (batch,), generator=gen)
    eps = torch.randn((batch, dims.N) + lat, generator=gen, dtype=dtype)
    drop = torch.rand(batch, generator=gen, dtype=torch.float64) < drop_p
    return StepNoise(enc, t, eps, drop)


def compute_losses(model: STLDM, x: torch.Tensor, y: torch.Tensor, noise: StepNoise,
                   sched: DiffusionSchedule, weights: LossWeights = LossWeights(),
                   terms: Sequence[str] = TERMS, fixed_translator_sigma: bool = False,
                   detach_target: bool = True) -> LossBreakdown:
    """All five terms for one batch of normalised ``x [B,M,1,H,W]`` and ``y [B,N,1,H,W]``.

    Terms outside ``terms`` are reported as zero and skipped where possible. With
    ``detach_target`` the diffusion loss does not reach the encoder through the noised
    target latent; otherwise the encoder can shrink its latents to make ε-prediction
    trivial. The encoder still receives diffusion gradients via the condition.
    """
    m = x.shape[1]
    x_full = torch.cat([x, y], dim=1)
    mu, logvar = model.encode(x_full)
    z = reparameterize(mu, logvar, noise.enc)
    zero = x.new_zeros(())
    parts = dict.fromkeys(TERMS, zero)

    if "l_mse" in terms:
        parts["l_mse"] = mse(x_full, model.decode(z))
    if "kl_encoder" in terms:
        parts["kl_encoder"] = kl_diag_standard(mu, logvar)

    need_translator = {"l_c", "kl_translator", "l_diffusion"} & set(terms)
    if need_translator:
        zbar, logvar_bar = model.translate(z[:, :m])
        if fixed_translator_sigma:
            logvar_bar = torch.zeros_like(logvar_bar)
        if "l_c" in terms:
            parts["l_c"] = mse(y, model.decode(zbar))
        if "kl_translator" in terms:
            parts["kl_translator"] = kl_diag_standard(zbar, logvar_bar)

    z0 = z[:, m:]
    if "l_prior" in terms:
        parts["l_prior"] = prior_loss(z0, sched)
    if "l_diffusion" in terms:
        target = z0.detach() if detach_target else z0
        z_t = forward_diffuse(target, noise.t, noise.eps, sched)
        cond = torch.where(noise.drop.reshape(-1, 1, 1, 1, 1), torch.zeros_like(zbar), zbar)
        eps_hat = model.denoise_eps(z_t, noise.t, cond)
        parts["l_diffusion"] = diffusion_loss(noise.eps, eps_hat, noise.t, sched)

    active = LossWeights(**{k: (w if k in terms else 0.0) for k, w in zip(TERMS, weights.as_tuple())})
    return total_loss(parts, active)


def make_optimizer(params: Sequence[torch.nn.Parameter], lr: float = 0.0) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float, clip: float | None = 1.0) -> float:
    """Adam update at ``lr`` after global-norm clipping; returns the pre-clip gradient norm."""
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    for p in params:
        if not bool(torch.isfinite(p.grad).all()):
            raise FloatingPointError("non-finite gradient")
    if clip is not None and params:
        norm = float(torch.nn.utils.clip_grad_norm_(params, clip))
    else:
        norm = float(sum(p.grad.pow(2).sum() for p in params) ** 0.5) if params else 0.0
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.step()
    return norm


def batch_indices(seed: int, step: int, n_events: int, batch: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x5EED, step]).integers(0, n_events, batch)


def load_batch(source: EventSource, idx: Sequence[int], m: int, data_range: float):
    seqs = np.stack([source[int(i)] for i in idx])
    seqs = torch.from_numpy(normalize(seqs, data_range))
    return seqs[:, :m], seqs[:, m:]


@dataclass
class TrainState:
    model: STLDM
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    stage: int = -1


class Trainer:
    """Owns the model and optimizer. Not thread-safe by design."""

    def __init__(self, cfg: Config, model: STLDM | None = None):
        self.cfg = cfg
        self.sched = cfg.schedule.build()
        self.mask = strategy_mask(cfg.train)
        if model is None:
            model = init_params(cfg.dims, cfg.train.seed, schedule=self.sched)
        self.state = TrainState(model)

    @property
    def model(self) -> STLDM:
        return self.state.model

    def _enter_stage(self, index: int):
        stage = self.mask.stages[index]
        groups = self.model.groups()
        for name, params in groups.items():
            for p in params:
                p.requires_grad_(name in stage.trainable)
        params = [p for name in stage.trainable for p in groups[name]]
        self.state.optimizer = make_optimizer(params)
        self.state.stage = index

    def stage_lr(self, step: int) -> float:
        index, local = self.mask.stage_at(step)
        st = self.mask.stages[index]
        tc = self.cfg.train
        warm = min(tc.warmup_steps, st.steps - 1)
        return lr_at(local, dataclasses.replace(tc, total_steps=st.steps, warmup_steps=warm))

    def step_generator(self, step: int) -> torch.Generator:
        return torch.Generator().manual_seed(stream_seed(self.cfg.train.seed, 0x7A1, step))

    def train_step(self, x: torch.Tensor, y: torch.Tensor, gen: torch.Generator) -> LossBreakdown:
        step = self.state.step + 1
        index, _ = self.mask.stage_at(step)
        if index != self.state.stage:
            self._enter_stage(index)
        stage = self.mask.stages[index]
        model, opt = self.model, self.state.optimizer
        model.train()
        noise = draw_step_noise(gen, x.shape[0], self.cfg.dims, self.sched.total_steps,
                                self.cfg.cfg.drop_probability, dtype=x.dtype)
        tc = self.cfg.train
        loss = compute_losses(model, x, y, noise, self.sched, self.cfg.loss_weights, stage.terms,
                              tc.fixed_translator_sigma, tc.detach_diffusion_target)
        if not bool(torch.isfinite(loss.total)):
            raise FloatingPointError(f"non-finite loss at step {step}: {loss.scalars()}")
        opt.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer_step(opt, self.stage_lr(step), self.cfg.train.grad_clip)
        self.state.step = step
        return loss

    # ------------------------------------------------------------------ checkpoints

    def save_checkpoint(self, directory: str | Path) -> None:
        directory = Path(directory)
        tmp = directory.with_name(directory.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        stio.save_params(self.model, tmp, seed=self.cfg.train.seed)
        if self.state.optimizer is not None:
            torch.save(self.state.optimizer.state_dict(), tmp / "optimizer.pt")
        (tmp / "trainer_state.json").write_text(json.dumps(
            {"step": self.state.step, "stage": self.state.stage}) + "\n")
        dump_config(self.cfg, tmp / "config.json")
        if directory.exists():
            shutil.rmtree(directory)
        tmp.rename(directory)

    @classmethod
    def from_checkpoint(cls, directory: str | Path, cfg: Config | None = None) -> "Trainer":
        directory = Path(directory)
        if cfg is None:
            cfg = from_dict(json.loads((directory / "config.json").read_text()))
        model = stio.load_params(directory, cfg.dims)
        trainer = cls(cfg, model)
        meta = json.loads((directory / "trainer_state.json").read_text())
        if meta["stage"] >= 0:
            trainer._enter_stage(meta["stage"])
            opt_path = directory / "optimizer.pt"
            if opt_path.exists():
                trainer.state.optimizer.load_state_dict(torch.load(opt_path, weights_only=True))
        trainer.state.step = meta["step"]
        return trainer


@dataclass
class TrainResult:
    trainer: Trainer
    losses: list = field(default_factory=list)
    validation: list = field(default_factory=list)


def sources_for(cfg: Config):
    sp = split(cfg.data.train_range, cfg.data.val_range, cfg.data.test_range)
    synth = cfg.data.synth
    return (SyntheticSource(synth, sp.train), SyntheticSource(synth, sp.val),
            SyntheticSource(synth, sp.test))


def _validation_steps(cfg: TrainConfig) -> set:
    every = cfg.validation_every
    steps = set(range(every, cfg.total_steps + 1, every)) if every > 0 else set()
    steps.add(min(100, cfg.total_steps))
    steps.add(cfg.total_steps)
    return steps


def run_training(cfg: Config, out: str | Path, train: EventSource | None = None,
                 val: EventSource | None = None, resume: bool = False,
                 validate: Callable | None = None, progress: Callable[[str], None] | None = None
                 ) -> TrainResult:
    """Train to ``cfg.train.total_steps``, writing checkpoints, loss CSV and validation CSV."""
    from .sampling import validate as default_validate

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"
    if train is None or val is None:
        train, val = sources_for(cfg)[:2]
    validate = validate or default_validate

    if resume and (ckpt / "trainer_state.json").exists():
        trainer = Trainer.from_checkpoint(ckpt, cfg)
    else:
        trainer = Trainer(cfg)
    result = TrainResult(trainer)
    dump_config(cfg, out / "config.json")

    loss_csv, val_csv = out / "loss.csv", out / "validation.csv"
    start = trainer.state.step
    _truncate_csv(loss_csv, start, ",".join(CSV_HEADER))
    _truncate_csv(val_csv, start, "step,mse,mse_first_estimation,csi_m")

    tc = cfg.train
    val_steps = _validation_steps(tc)
    n_val = min(tc.validation_events, len(val))
    with open(loss_csv, "a") as lf, open(val_csv, "a") as vf:
        for step in range(start + 1, tc.total_steps + 1):
            idx = batch_indices(tc.seed, step, len(train), tc.batch_size)
            x, y = load_batch(train, idx, cfg.dims.M, cfg.data.synth.data_range)
            loss = trainer.train_step(x, y, trainer.step_generator(step))
            lr = trainer.stage_lr(step)
            lf.write(csv_row(step, lr, loss) + "\n")
            result.losses.append(loss.scalars())
            if progress is not None and (step % 100 == 0 or step == tc.total_steps):
                progress(f"step={step} loss={float(loss.total.detach()):.6f}")
            if step in val_steps and n_val:
                v = validate(trainer.model, cfg, val, n_val)
                v = {"step": step, **v}
                result.validation.append(v)
                vf.write(f"{step},{v['mse']!r},{v['mse_first_estimation']!r},{v['csi_m']!r}\n")
                vf.flush()
            if tc.checkpoint_every and (step % tc.checkpoint_every == 0 or step == tc.total_steps):
                lf.flush()
                trainer.save_checkpoint(ckpt)
    if trainer.state.step == tc.total_steps and not (ckpt / "trainer_state.json").exists():
        trainer.save_checkpoint(ckpt)
    return result


def _truncate_csv(path: Path, keep_through: int, header: str) -> None:
    """Drop rows logged after the step we are resuming from."""
    rows = []
    if keep_through and path.exists():
        for line in path.read_text().splitlines()[1:]:
            if line and int(line.split(",", 1)[0]) <= keep_through:
                rows.append(line)
    path.write_text("\n".join([header] + rows) + "\n")
