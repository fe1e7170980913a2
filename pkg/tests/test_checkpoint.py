import struct

import numpy as np
import pytest

from clmae.checkpoint import CheckpointError, checkpoint_bytes, checkpoint_load, checkpoint_save
from clmae.config import load_config
from clmae.training import TrainState, run_training


@pytest.fixture
def trained(tiny_config, tiny_images):
    state = TrainState.create(tiny_config, len(tiny_images))
    run_training(tiny_images, state=state, stop_at=4)
    return state


def test_save_load_save_identical(trained, tmp_path):
    checkpoint_save(trained, tmp_path / "a.clmae")
    back = checkpoint_load(tmp_path / "a.clmae")
    checkpoint_save(back, tmp_path / "b.clmae")
    assert (tmp_path / "a.clmae").read_bytes() == (tmp_path / "b.clmae").read_bytes()
    assert back.t == trained.t
    assert back.param_digest("mae") == trained.param_digest("mae")


def test_float32_roundtrip(tiny_config, tiny_images, tmp_path):
    cfg = load_config(overrides={"dtype": "float32"}, base=tiny_config)
    state = TrainState.create(cfg, len(tiny_images))
    run_training(tiny_images, state=state, stop_at=2)
    checkpoint_save(state, tmp_path / "a.clmae")
    assert checkpoint_bytes(checkpoint_load(tmp_path / "a.clmae")) == checkpoint_bytes(state)


def test_corrupt_byte_detected(trained, tmp_path):
    raw = bytearray(checkpoint_bytes(trained))
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "c.clmae").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(tmp_path / "c.clmae")


def test_truncated_and_magic(trained, tmp_path):
    raw = checkpoint_bytes(trained)
    (tmp_path / "t.clmae").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "t.clmae")
    (tmp_path / "m.clmae").write_bytes(b"NOTCKP" + raw[6:])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(tmp_path / "m.clmae")


def test_wrong_version_names_both(trained, tmp_path):
    raw = bytearray(checkpoint_bytes(trained))
    raw[6:8] = struct.pack("<H", 7)
    (tmp_path / "v.clmae").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match=r"version 7.*expected 1"):
        checkpoint_load(tmp_path / "v.clmae")


def test_config_mismatch(trained, tmp_path, tiny_config):
    checkpoint_save(trained, tmp_path / "a.clmae")
    other = load_config(overrides={"seed": 5}, base=tiny_config)
    with pytest.raises(CheckpointError, match="different configuration"):
        checkpoint_load(tmp_path / "a.clmae", other)


def test_resume_matches_uninterrupted(tiny_config, tiny_images, tmp_path):
    full = run_training(tiny_images, tiny_config)
    half = tiny_config.T // 2
    state = TrainState.create(tiny_config, len(tiny_images))
    first = run_training(tiny_images, state=state, stop_at=half)
    checkpoint_save(state, tmp_path / "mid.clmae")
    rest = run_training(tiny_images, state=checkpoint_load(tmp_path / "mid.clmae"))
    assert first.rows + rest.rows == full.rows
    assert rest.state.param_digest("cmm") == full.state.param_digest("cmm")
