"""Command-line interface: ``stldm {generate-data,train,sample,evaluate,ablate}``.

Exit codes: 0 ok, 2 configuration or usage error, 3 I/O error, 4 non-finite loss,
5 checkpoint/config dims mismatch, 6 prediction/observation shape mismatch.
Stdout carries progress lines only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiments
from .config import THRESHOLD_PRESETS, Config, ConfigError, dump_config, load_config
from .data import (DirectorySource, FrameFormatError, event_filename, generate_event,
                   normalize, read_frames, split, write_frames, write_pgm)
from .io import CheckpointMismatchError, load_params
from .metrics import evaluate
from .sampling import first_estimation, predict_ensemble, time_inference, to_physical
from .schedule import make_ddim_timesteps
from .training import run_training, sources_for

log = logging.getLogger("stldm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_MISMATCH, EXIT_SHAPE = 0, 2, 3, 4, 5, 6


class ShapeMismatch(ValueError):
    pass


def _say(line: str) -> None:
    print(line, flush=True)


# ---------------------------------------------------------------------------- commands

def cmd_generate_data(args, cfg: Config) -> int:
    out = Path(args.out)
    sp = split(cfg.data.train_range, cfg.data.val_range, cfg.data.test_range)
    for name, seeds in (("train", sp.train), ("val", sp.val), ("test", sp.test)):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for seed in seeds:
            write_frames(d / event_filename(seed), generate_event(cfg.data.synth, seed))
        _say(f"split={name} events={len(seeds)}")
    dump_config(cfg, out / "config.json")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    train = val = None
    if args.data is not None:
        train, val = DirectorySource(Path(args.data) / "train"), DirectorySource(Path(args.data) / "val")
        if not len(train):
            raise FileNotFoundError(f"no training events under {args.data}/train")
    result = run_training(cfg, args.out, train=train, val=val, resume=args.resume, progress=_say)
    for v in result.validation:
        _say("validation " + " ".join(f"{k}={v[k]}" for k in v))
    return EXIT_OK


def _inputs(args, cfg: Config):
    """(names, inputs [E, M, 1, H, W] physical, observations or None)."""
    M, N = cfg.dims.M, cfg.dims.N
    if args.input == "testset":
        test = sources_for(cfg)[2]
        idx = experiments.evaluation_indices(cfg, args.events)
        seqs = np.stack([test[i] for i in idx])
        names = [event_filename(test.seeds[i]) for i in idx]
        return names, seqs[:, :M], seqs[:, M:M + N]
    path = Path(args.input)
    files = sorted(path.glob("*.stlf")) if path.is_dir() else [path]
    seqs = [read_frames(f) for f in files]
    if any(s.shape[0] < M for s in seqs):
        raise ShapeMismatch(f"inputs need at least {M} frames")
    obs = np.stack([s[M:M + N] for s in seqs]) if all(s.shape[0] >= M + N for s in seqs) else None
    return [f.name for f in files], np.stack([s[:M] for s in seqs]), obs


def cmd_sample(args, cfg: Config) -> int:
    model = load_params(args.ckpt, cfg.dims)
    model.eval()
    R = cfg.data.synth.data_range
    sched = cfg.schedule.build()
    plan = make_ddim_timesteps(sched.total_steps, args.steps)
    names, x_phys, obs = _inputs(args, cfg)
    x = torch.from_numpy(normalize(x_phys, R))
    out = Path(args.out)
    member_dirs = [out / "members" / f"m{i:02d}" for i in range(args.members)]
    for d in member_dirs + [out / "first_estimation"] + ([out / "obs"] if obs is not None else []):
        d.mkdir(parents=True, exist_ok=True)
    all_members = [[] for _ in range(args.members)]
    for j, name in enumerate(names):
        xb = x[j:j + 1]
        members = predict_ensemble(xb, model, args.members, plan, sched, args.w, args.seed)
        ybar = to_physical(first_estimation(xb, model), R)[0]
        write_frames(out / "first_estimation" / name, ybar)
        for i, m in enumerate(members):
            y = to_physical(m, R)[0]
            all_members[i].append(y)
            write_frames(member_dirs[i] / name, y)
            if args.images:
                for f, frame in enumerate(y):
                    write_pgm(member_dirs[i] / f"{Path(name).stem}_f{f:02d}.pgm", frame, R)
        if args.images:
            for f, frame in enumerate(ybar):
                write_pgm(out / "first_estimation" / f"{Path(name).stem}_f{f:02d}.pgm", frame, R)
        if obs is not None:
            write_frames(out / "obs" / name, obs[j])
        _say(f"event={name} members={args.members}")
    t_sample = time_inference(x[0], model, plan, sched, args.w)
    lines = [f"members = {args.members}", f"w = {args.w:g}", f"ddim_steps = {args.steps}",
             f"seed = {args.seed}", f"events = {len(names)}", f"t_sample_seconds = {t_sample:.6f}"]
    text = "\n".join(lines) + "\n"
    if obs is not None:
        report = evaluate([np.stack(m) for m in all_members], obs, cfg.eval.thresholds,
                          cfg.eval.pools, R)
        text += report.to_text()
    (out / "report.txt").write_text(text)
    _say(f"report={out / 'report.txt'}")
    return EXIT_OK


def parse_thresholds(text: str) -> tuple[float, ...]:
    if text in THRESHOLD_PRESETS:
        return THRESHOLD_PRESETS[text]
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"thresholds must be a preset ({', '.join(THRESHOLD_PRESETS)}) "
                          f"or a comma-separated list, got {text!r}") from exc


def _load_dir(directory: Path, names: list[str]) -> np.ndarray:
    arrays = [read_frames(directory / n) for n in names]
    if len({a.shape for a in arrays}) > 1:
        raise ShapeMismatch(f"{directory}: files have differing shapes")
    return np.stack(arrays)


def cmd_evaluate(args, cfg: Config) -> int:
    pred, obs_dir = Path(args.pred), Path(args.obs)
    names = sorted(f.name for f in obs_dir.glob("*.stlf"))
    if not names:
        raise FileNotFoundError(f"no .stlf files in {obs_dir}")
    member_dirs = sorted(d for d in pred.glob("m*") if d.is_dir()) or [pred]
    obs = _load_dir(obs_dir, names)
    members = []
    for d in member_dirs:
        missing = [n for n in names if not (d / n).exists()]
        if missing:
            raise FileNotFoundError(f"{d} lacks {len(missing)} files, e.g. {missing[0]}")
        m = [read_frames(d / n) for n in names]
        for n, a, b in zip(names, m, obs):
            if a.shape != b.shape:
                raise ShapeMismatch(f"{d / n}: shape {a.shape} vs observation {b.shape}")
        members.append(np.stack(m))
    report = evaluate(members, obs, parse_thresholds(args.thresholds), cfg.eval.pools,
                      args.data_range if args.data_range is not None else cfg.data.synth.data_range)
    report.write(args.out)
    _say(f"report={args.out} csi_m={report.csi_m:.6f}")
    return EXIT_OK


def cmd_ablate(args, cfg: Config) -> int:
    if args.study not in experiments.STUDIES:
        raise ConfigError(f"unknown study {args.study!r}; choose from {', '.join(experiments.STUDIES)}")
    rows = experiments.run_study(args.study, cfg, args.out, args.events, progress=_say)
    for name, row in rows.items():
        _say(f"arm={name} " + " ".join(f"{k}={row[k]:.6f}" for k in experiments.COLUMNS))
    return EXIT_OK


# ---------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stldm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", default=None, help="JSON config (defaults if omitted)")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("generate-data", help="write the synthetic train/val/test splits")
    common(g)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    t.add_argument("--data", default=None, help="directory written by generate-data "
                   "(events are generated on the fly when omitted)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="ensemble forecasts from a checkpoint")
    common(s)
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--input", default="testset", help="frame file, directory of files, or 'testset'")
    s.add_argument("--members", type=int, default=10)
    s.add_argument("--w", type=float, default=1.0, help="guidance strength (0 = conditional only)")
    s.add_argument("--steps", type=int, default=20, help="DDIM steps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--events", type=int, default=None, help="test events to use with --input testset")
    s.add_argument("--images", action="store_true", help="also write PGM frames")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="score prediction files against observations")
    e.add_argument("--config", default=None)
    e.add_argument("--pred", required=True, help="directory of predictions or of member subdirs m*/")
    e.add_argument("--obs", required=True)
    e.add_argument("--thresholds", default="synthetic", help="preset name or comma-separated list")
    e.add_argument("--data-range", type=float, default=None)
    e.add_argument("--out", required=True, help="report file")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run a paired desk-scale study")
    common(a)
    a.add_argument("--study", required=True, help="one of: " + ", ".join(experiments.STUDIES))
    a.add_argument("--events", type=int, default=None, help="test events to score")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CheckpointMismatchError as exc:
        log.error("checkpoint mismatch: %s", exc)
        return EXIT_MISMATCH
    except ShapeMismatch as exc:
        log.error("shape mismatch: %s", exc)
        return EXIT_SHAPE
    except FloatingPointError as exc:
        log.error("non-finite loss, last good checkpoint kept: %s", exc)
        return EXIT_NONFINITE
    except (OSError, FrameFormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
