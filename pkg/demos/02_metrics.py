"""Score a forecast against observations with the verification metrics.

Run: python demos/02_metrics.py
"""
import numpy as np

from stldm.config import SYNTHETIC_THRESHOLDS
from stldm.data import SynthConfig, generate_event
from stldm.metrics import contingency, csi, evaluate, flicker_gap, hss

cfg = SynthConfig()
event = generate_event(cfg, 7)            # [frames, 1, H, W] in 0..255
obs = event[cfg.input_frames:]

# Persistence: repeat the last observed frame.
persistence = np.repeat(event[cfg.input_frames - 1:cfg.input_frames], len(obs), axis=0)

thr = SYNTHETIC_THRESHOLDS[0]
table = contingency(persistence, obs, thr)
print(f"threshold {thr:g}: {table}  CSI={csi(table):.3f}  HSS={hss(table):.3f}")

# A fake two-member ensemble: persistence plus small noise.
rng = np.random.default_rng(0)
members = [np.clip(persistence + rng.normal(0, 5, obs.shape), 0, 255)[None] for _ in range(2)]
report = evaluate(members, obs[None], SYNTHETIC_THRESHOLDS, (1, 4, 16), 255.0)
print(report.to_text())
print(f"flicker gap of member 0: {flicker_gap(members[0], obs[None]):.4f}")
