import dataclasses
import struct

import numpy as np
import pytest

from flextsf.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, CheckpointError, config_text,
                                decode, encode, load, parse_config_text, save)
from flextsf.model import FlexTSF, ModelConfig
from flextsf.optim import make_rng, restore_rng, rng_state

TINY = ModelConfig(patch_len=4, latent_dim=8, heads=2, head_dim=4, layers=1, solver_hidden=8)


@pytest.fixture
def ckpt():
    rng = make_rng(4)
    rng.standard_normal(5)
    return Checkpoint.from_model(FlexTSF(TINY, seed=2), rng_state(rng), {"seed": 4, "epochs": 3})


def test_round_trip_is_byte_identical(ckpt):
    buf = encode(ckpt)
    assert buf.startswith(MAGIC)
    back = decode(buf)
    assert encode(back) == buf
    assert back.config == TINY and back.meta == ckpt.meta
    for k, v in ckpt.arrays.items():
        assert np.array_equal(back.arrays[k], v)


def test_restored_model_and_rng_continue_identically(ckpt):
    back = decode(encode(ckpt))
    model = back.to_model()
    orig = ckpt.to_model()
    for name in orig.params:
        assert np.array_equal(model.params[name].data, orig.params[name].data)
    a, b = restore_rng(ckpt.rng_state), restore_rng(back.rng_state)
    assert a.standard_normal(3).tolist() == b.standard_normal(3).tolist()


def test_config_text_round_trip():
    cfg = dataclasses.replace(TINY, solver="rk4", disable_vt_norm=True)
    assert parse_config_text(config_text(cfg)) == cfg


def test_save_load_and_mismatch(tmp_path, ckpt):
    path = tmp_path / "checkpoint.bin"
    save(ckpt, path)
    assert load(path, TINY).config == TINY
    with pytest.raises(CheckpointError, match="latent_dim"):
        load(path, dataclasses.replace(TINY, latent_dim=16))


def test_rejects_corrupt_buffers(ckpt):
    buf = encode(ckpt)
    with pytest.raises(CheckpointError):
        decode(b"NOTACKPT" + buf[8:])
    with pytest.raises(CheckpointError):
        decode(buf[:8] + struct.pack("<I", FORMAT_VERSION + 1) + buf[12:])
    for cut in (4, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointError):
            decode(buf[:cut])
    with pytest.raises(CheckpointError):
        decode(buf + b"\0")
