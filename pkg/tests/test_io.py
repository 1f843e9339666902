import json

import numpy as np
import pytest
import torch

from stldm.io import (BLOB, MANIFEST, CheckpointMismatchError, group_bytes, load_params,
                      read_manifest, save_params)
from stldm.networks import ModelDims, init_params
from stldm.schedule import build_schedule


def test_round_trip_is_bit_exact(tmp_path, micro_dims):
    m = init_params(micro_dims, seed=4, schedule=build_schedule(50))
    save_params(m, tmp_path, seed=4)
    back = load_params(tmp_path, micro_dims)
    assert group_bytes(back) == group_bytes(m)
    assert torch.equal(back.schedule.betas, m.schedule.betas)
    z = torch.randn(1, micro_dims.N, micro_dims.Cz, 2, 2)
    assert torch.equal(back.denoise_eps(z, 7), m.denoise_eps(z, 7))


def test_blob_layout(tmp_path, micro_dims):
    m = init_params(micro_dims)
    save_params(m, tmp_path)
    man = read_manifest(tmp_path)
    blob = (tmp_path / BLOB).read_bytes()
    assert len(blob) == 4 * sum(p.numel() for p in m.state_dict().values())
    first = man["tensors"][0]
    arr = np.frombuffer(blob, "<f4", count=first["nbytes"] // 4, offset=first["offset"])
    assert np.array_equal(arr.reshape(first["shape"]), m.state_dict()[first["name"]].numpy())


def test_dims_mismatch(tmp_path, micro_dims):
    save_params(init_params(micro_dims), tmp_path)
    other = ModelDims(**{**micro_dims.to_dict(), "Cz": 3})
    with pytest.raises(CheckpointMismatchError):
        load_params(tmp_path, other)


def test_truncated_blob(tmp_path, micro_dims):
    save_params(init_params(micro_dims), tmp_path)
    raw = (tmp_path / BLOB).read_bytes()
    (tmp_path / BLOB).write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path)


def test_wrong_manifest(tmp_path):
    (tmp_path / MANIFEST).write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        read_manifest(tmp_path)
