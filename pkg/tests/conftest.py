import numpy as np
import pytest
import torch

from stldm.config import Config
from stldm.networks import ModelDims

torch.set_num_threads(1)

MICRO_DIMS = dict(M=2, N=2, H=8, W=8, Cz=2, base_channels=4, depth=1, patch0=2,
                  vae_channels=4, translator_channels=4, translator_blocks=1, channel_mult=(1,))
SMALL_DIMS = dict(M=2, N=2, H=16, W=16, Cz=4, base_channels=8, depth=1, patch0=2,
                  vae_channels=8, translator_channels=8, translator_blocks=1, channel_mult=(1,))


def small_config(**train) -> Config:
    """A config that trains in well under a second per hundred steps."""
    base = {"total_steps": 20, "batch_size": 2, "warmup_steps": 2, "validation_every": 0,
            "validation_events": 2, "checkpoint_every": 10, "vae_stage_steps": 6,
            "translator_stage_steps": 6}
    base.update(train)
    return Config().replace(
        dims=SMALL_DIMS, train=base, schedule={"T": 50},
        data={"synth": {"height": 16, "width": 16, "input_frames": 2, "output_frames": 2},
              "train_range": [0, 40], "val_range": [40, 44], "test_range": [44, 52]},
        eval={"members": 2, "ddim_steps": 4, "test_events": 4, "pools": [1, 4]},
    )


@pytest.fixture
def micro_dims():
    return ModelDims(**MICRO_DIMS)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
