"""Generate data, train a tiny model for a few hundred steps and forecast with it.

Run: python demos/03_quickstart.py [workdir]
The model is far too small and briefly trained to forecast well; the point is the
workflow, which is the same at desk scale (``stldm train --config ...``).
"""
import sys
from pathlib import Path

import numpy as np
import torch

from stldm import Config
from stldm.experiments import forecast, score
from stldm.training import run_training, sources_for

work = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart-run")

cfg = Config().replace(
    dims={"H": 16, "W": 16, "M": 2, "N": 2, "Cz": 4, "base_channels": 8, "depth": 1,
          "patch0": 2, "vae_channels": 8, "translator_channels": 8, "translator_blocks": 1,
          "channel_mult": [1]},
    schedule={"T": 200},
    train={"total_steps": 300, "batch_size": 4, "warmup_steps": 20, "validation_every": 100,
           "validation_events": 4, "checkpoint_every": 100},
    data={"synth": {"height": 16, "width": 16, "input_frames": 2, "output_frames": 2},
          "train_range": [0, 400], "val_range": [400, 420], "test_range": [420, 440]},
    eval={"members": 4, "ddim_steps": 10, "test_events": 8, "pools": [1, 4, 16]},
)

result = run_training(cfg, work, progress=print)
print("validation history:", result.validation)

from stldm.io import load_params  # noqa: E402

model = load_params(work / "checkpoint", cfg.dims).eval()
test = sources_for(cfg)[2]
fc = forecast(model, cfg, test, range(8))
print(score(fc, cfg).to_text())
print("member spread (mean std across members):", float(np.std(fc.members, axis=0).mean()))
