"""Desk-scale experiment drivers shared by the ``ablate`` command and the acceptance suite.

A run directory holds ``config.json``, ``loss.csv``, ``validation.csv`` and
``checkpoint/``. :func:`ensure_trained` reuses a finished run whose config matches and
resumes an unfinished one, so repeated invocations cost nothing once trained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import Config, dump_config, to_dict
from .data import EventSource
from .io import load_params
from .metrics import EvalReport, evaluate, flicker_gap
from .networks import STLDM
from .sampling import first_estimation, load_events, predict_ensemble, to_physical
from .schedule import make_ddim_timesteps
from .training import run_training, sources_for

STUDIES = ("lc", "strategy", "temporal", "cfg")


def read_validation(run: str | Path) -> list[dict]:
    path = Path(run) / "validation.csv"
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    keys = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if line:
            vals = line.split(",")
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(keys, vals)})
    return rows


def run_dir(root: str | Path, name: str, cfg: Config) -> Path:
    """``root/name-<hash>``: the hash covers the full config, so any change retrains."""
    digest = hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()[:12]
    return Path(root) / f"{name}-{digest}"


def _finished(cfg: Config, run: Path) -> bool:
    state = run / "checkpoint" / "trainer_state.json"
    saved = run / "checkpoint" / "config.json"
    if not (state.exists() and saved.exists()):
        return False
    if json.loads(saved.read_text()) != to_dict(cfg):
        return False
    return json.loads(state.read_text())["step"] == cfg.train.total_steps


def ensure_trained(cfg: Config, run: str | Path,
                   progress: Callable[[str], None] | None = None) -> STLDM:
    """Train ``cfg`` into ``run`` unless an identical finished run is already there."""
    run = Path(run)
    if not _finished(cfg, run):
        saved = run / "checkpoint" / "config.json"
        resume = saved.exists() and json.loads(saved.read_text()) == to_dict(cfg)
        run_training(cfg, run, resume=resume, progress=progress)
    model = load_params(run / "checkpoint", cfg.dims)
    model.eval()
    return model


@dataclass
class Forecasts:
    members: np.ndarray      # [k, E, N, 1, H, W], physical units
    first: np.ndarray        # [E, N, 1, H, W]
    obs: np.ndarray          # [E, N, 1, H, W]


@torch.no_grad()
def forecast(model: STLDM, cfg: Config, source: EventSource, indices: Sequence[int],
             members: int | None = None, w: float | None = None, steps: int | None = None,
             seed: int = 0, chunk: int = 8) -> Forecasts:
    """Ensemble forecasts for the events at ``indices`` of ``source``.

    Events are processed ``chunk`` at a time; member ``i`` of every event uses noise stream
    ``(seed, i)``, so results do not depend on the chunk size.
    """
    members = cfg.eval.members if members is None else members
    w = cfg.cfg.guidance_strength if w is None else w
    steps = cfg.eval.ddim_steps if steps is None else steps
    sched = cfg.schedule.build()
    plan = make_ddim_timesteps(sched.total_steps, steps)
    R, M = cfg.data.synth.data_range, cfg.dims.M
    preds, firsts, obs = [], [], []
    indices = list(indices)
    for start in range(0, len(indices), chunk):
        seqs, y = load_events(source, indices[start:start + chunk], M, R)
        x = seqs[:, :M]
        firsts.append(to_physical(first_estimation(x, model), R))
        out = predict_ensemble(x, model, members, plan, sched, w, seed)
        preds.append(np.stack([to_physical(m, R) for m in out]))
        obs.append(y)
    return Forecasts(np.concatenate(preds, axis=1), np.concatenate(firsts), np.concatenate(obs))


def score(fc: Forecasts, cfg: Config) -> EvalReport:
    R = cfg.data.synth.data_range
    report = evaluate(list(fc.members), fc.obs, cfg.eval.thresholds, cfg.eval.pools, R)
    report.extra["flicker_gap"] = float(np.mean([flicker_gap(m, fc.obs) for m in fc.members]))
    report.extra["mse_first_estimation"] = float(np.mean(((fc.first - fc.obs) / R) ** 2))
    return report


def evaluation_indices(cfg: Config, n_events: int | None = None) -> range:
    n = cfg.eval.test_events if n_events is None else n_events
    return range(min(n, cfg.data.test_range[1] - cfg.data.test_range[0]))


# ---------------------------------------------------------------------------- ablations

def study_configs(study: str, cfg: Config) -> dict[str, Config]:
    """The paired training configurations of a study (``cfg`` runs once, two samplers)."""
    if study == "lc":
        return {"l_c=1": cfg.replace(loss_weights={"l_c": 1.0}),
                "l_c=0": cfg.replace(loss_weights={"l_c": 0.0})}
    if study == "strategy":
        return {f"strategy={s}": cfg.replace(train={"strategy": s}) for s in ("A", "B", "C")}
    if study == "temporal":
        return {"spatio-temporal": cfg.replace(dims={"temporal_attention": True}),
                "spatial-only": cfg.replace(dims={"temporal_attention": False})}
    if study == "cfg":
        return {"fixed": cfg}
    raise ValueError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")


COLUMNS = ("csi_m", "csi4_m", "csi16_m", "hss", "ssim", "mse", "mse_first_estimation",
           "flicker_gap")


def _row(report: EvalReport) -> dict:
    row = {"csi_m": report.csi_m, "csi4_m": report.csi4_m, "csi16_m": report.csi16_m,
           "hss": report.hss, "ssim": report.ssim, "mse": report.mse}
    row.update({k: report.extra[k] for k in ("mse_first_estimation", "flicker_gap")})
    return row


def run_study(study: str, cfg: Config, out: str | Path, n_events: int | None = None,
              progress: Callable[[str], None] | None = None) -> dict[str, dict]:
    """Train (or reuse) each arm of ``study``, score it on the test split and write a table."""
    arms = study_configs(study, cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for name, arm_cfg in arms.items():
        run = out / name.replace("=", "_")
        model = ensure_trained(arm_cfg, run, progress)
        test = sources_for(arm_cfg)[2]
        idx = evaluation_indices(arm_cfg, n_events)
        if study == "cfg":
            for w in (1.0, 0.0):
                rows[f"w={w:g}"] = _row(score(forecast(model, arm_cfg, test, idx, w=w), arm_cfg))
        else:
            rows[name] = _row(score(forecast(model, arm_cfg, test, idx), arm_cfg))
    write_table(out / f"ablation_{study}.txt", study, rows)
    dump_config(cfg, out / "config.json")
    return rows


def write_table(path: Path, study: str, rows: dict[str, dict]) -> None:
    lines = [f"# study: {study}",
             "# LPIPS is omitted; flicker_gap is a temporal-consistency proxy, not FVD",
             "arm\t" + "\t".join(COLUMNS)]
    for name, row in rows.items():
        lines.append(name + "\t" + "\t".join(f"{row[c]:.6f}" for c in COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")

