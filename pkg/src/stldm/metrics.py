"""Forecast verification: contingency scores, pooled CSI, SSIM and ensemble reports.

Conventions: a pixel is an event when its value is ``>= threshold``. With no events in
either field, CSI is 1; HSS is 1 when its denominator vanishes on a perfect forecast and 0
otherwise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.tp + other.tp, self.fp + other.fp,
                                self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_shapes(pred, obs):
    if np.shape(pred) != np.shape(obs):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(obs)}")


def contingency(pred, obs, thr: float) -> ContingencyTable:
    _check_shapes(pred, obs)
    p = np.asarray(pred) >= thr
    o = np.asarray(obs) >= thr
    tp = int(np.count_nonzero(p & o))
    fp = int(np.count_nonzero(p & ~o))
    fn = int(np.count_nonzero(~p & o))
    return ContingencyTable(tp, fp, fn, p.size - tp - fp - fn)


def csi(t: ContingencyTable) -> float:
    denom = t.tp + t.fp + t.fn
    return 1.0 if denom == 0 else t.tp / denom


def hss(t: ContingencyTable) -> float:
    # float arithmetic: products of pixel counts overflow int64 on large stacks
    tp, fp, fn, tn = (float(v) for v in (t.tp, t.fp, t.fn, t.tn))
    denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    if denom == 0:
        return 1.0 if fp == 0 and fn == 0 else 0.0
    return 2.0 * (tp * tn - fn * fp) / denom


def _max_pool(mask: np.ndarray, pool: int) -> np.ndarray:
    *lead, h, w = mask.shape
    if h % pool or w % pool:
        raise ValueError(f"frame {h}x{w} not divisible by pool {pool}")
    return mask.reshape(*lead, h // pool, pool, w // pool, pool).any(axis=(-3, -1))


def pooled_contingency(pred, obs, thr: float, pool: int) -> ContingencyTable:
    _check_shapes(pred, obs)
    p = _max_pool(np.asarray(pred) >= thr, pool)
    o = _max_pool(np.asarray(obs) >= thr, pool)
    tp = int(np.count_nonzero(p & o))
    fp = int(np.count_nonzero(p & ~o))
    fn = int(np.count_nonzero(~p & o))
    return ContingencyTable(tp, fp, fn, p.size - tp - fp - fn)


def pooled_csi(pred, obs, thr: float, pool: int) -> float:
    """CSI after binarising at ``thr`` and max-pooling with kernel = stride = ``pool``."""
    return csi(pooled_contingency(pred, obs, thr, pool))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    pad = (len(g) - 1) // 2
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim(pred_frame, obs_frame, data_range: float = 255.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03)."""
    _check_shapes(pred_frame, obs_frame)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    x = np.asarray(pred_frame, dtype=np.float64).squeeze()
    y = np.asarray(obs_frame, dtype=np.float64).squeeze()
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D frames of at least {SSIM_WINDOW} pixels, got {x.shape}")
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def sequence_ssim(pred, obs, data_range: float = 255.0) -> float:
    """Average frame SSIM over a ``[T, 1, H, W]`` (or ``[T, H, W]``) sequence."""
    _check_shapes(pred, obs)
    p = np.asarray(pred).reshape(-1, *np.shape(pred)[-2:])
    o = np.asarray(obs).reshape(-1, *np.shape(obs)[-2:])
    return float(np.mean([ssim(a, b, data_range) for a, b in zip(p, o)]))


def flicker(seq) -> float:
    """Mean absolute change between consecutive frames of ``[..., T, 1, H, W]`` sequences."""
    a = np.asarray(seq, dtype=np.float64)
    return float(np.mean(np.abs(np.diff(a, axis=-4))))


def flicker_gap(pred, obs) -> float:
    """|flicker(pred) - flicker(obs)|: a temporal-consistency proxy, not FVD."""
    return abs(flicker(pred) - flicker(obs))


@dataclass
class EvalReport:
    thresholds: tuple
    csi: dict
    csi_m: float
    csi4_m: float
    csi16_m: float
    hss: float
    ssim: float
    mse: float
    members: int
    ensemble_mean: dict = field(default_factory=dict)
    per_member: list = field(default_factory=list)
    t_sample: float | None = None
    extra: dict = field(default_factory=dict)

    def items(self) -> list[tuple[str, object]]:
        out = [("members", self.members),
               ("thresholds", " ".join(f"{t:g}" for t in self.thresholds)),
               ("no_event_convention", "csi=1;hss=1_if_perfect_else_0")]
        for t in self.thresholds:
            out.append((f"csi@{t:g}", self.csi[t]))
        out += [("csi_m", self.csi_m), ("csi4_m", self.csi4_m), ("csi16_m", self.csi16_m),
                ("hss", self.hss), ("ssim", self.ssim), ("mse", self.mse)]
        for k, v in self.ensemble_mean.items():
            out.append((f"ensemble_mean.{k}", v))
        if self.t_sample is not None:
            out.append(("t_sample_seconds", self.t_sample))
        out += sorted(self.extra.items())
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.items():
            lines.append(f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text())


def read_report(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def _scores(pred: np.ndarray, obs: np.ndarray, thresholds, pools, data_range) -> dict:
    """Scores for one forecast stack ``[E, T, 1, H, W]`` against observations of equal shape."""
    s = {}
    for thr in thresholds:
        s[f"csi@{thr:g}"] = csi(contingency(pred, obs, thr))
        s[f"hss@{thr:g}"] = hss(contingency(pred, obs, thr))
        for pool in pools:
            if pool > 1:
                s[f"csi{pool}@{thr:g}"] = pooled_csi(pred, obs, thr, pool)
    s["csi_m"] = float(np.mean([s[f"csi@{t:g}"] for t in thresholds]))
    s["hss"] = float(np.mean([s[f"hss@{t:g}"] for t in thresholds]))
    for pool in (4, 16):
        keys = [f"csi{pool}@{t:g}" for t in thresholds]
        s[f"csi{pool}_m"] = float(np.mean([s[k] for k in keys])) if all(k in s for k in keys) else float("nan")
    s["ssim"] = float(np.mean([sequence_ssim(p, o, data_range) for p, o in zip(pred, obs)]))
    s["mse"] = float(np.mean(((pred - obs) / data_range) ** 2))
    return s


def evaluate(members: Sequence, obs, thresholds: Sequence[float], pools: Sequence[int] = (1, 4, 16),
             data_range: float = 255.0) -> EvalReport:
    """Score each ensemble member against ``obs`` and average the per-member scores.

    ``members`` is a list of forecasts in physical units with the shape of ``obs``
    (``[N, 1, H, W]`` or a stack of events ``[E, N, 1, H, W]``). The score of the ensemble
    mean forecast is also reported.
    """
    if len(members) == 0:
        raise ValueError("evaluate needs at least one ensemble member")
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 4:
        obs = obs[None]
    stacks = []
    for m in members:
        m = np.asarray(m, dtype=np.float64)
        m = m[None] if m.ndim == 4 else m
        _check_shapes(m, obs)
        stacks.append(m)
    thresholds = tuple(float(t) for t in thresholds)
    per = [_scores(m, obs, thresholds, pools, data_range) for m in stacks]
    avg = {k: float(np.mean([p[k] for p in per])) for k in per[0]}
    ens = _scores(np.mean(stacks, axis=0), obs, thresholds, pools, data_range)
    return EvalReport(
        thresholds=thresholds,
        csi={t: avg[f"csi@{t:g}"] for t in thresholds},
        csi_m=avg["csi_m"], csi4_m=avg["csi4_m"], csi16_m=avg["csi16_m"],
        hss=avg["hss"], ssim=avg["ssim"], mse=avg["mse"], members=len(stacks),
        ensemble_mean={k: ens[k] for k in ("csi_m", "csi4_m", "csi16_m", "hss", "ssim", "mse")},
        per_member=per,
    )
