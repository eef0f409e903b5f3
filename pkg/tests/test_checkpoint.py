import struct
from dataclasses import replace

import numpy as np
import pytest

from src.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from src.config import ModelVariant
from src.errors import ConfigError, DataError
from src.regression_model import ModelState, forward, init_state
from src.rotation_codecs import RepresentationKind


@pytest.mark.parametrize("variant", list(ModelVariant))
@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_round_trip_is_bit_identical(tmp_path, tiny_model_cfg, variant, dtype):
    cfg = replace(tiny_model_cfg, variant=variant, dtype=dtype, representation=RepresentationKind.QUAT)
    state = init_state(cfg, seed=4)
    state.buffers["bn0.running_mean"][:] = [0.25, -1.5]
    x = np.random.default_rng(0).uniform(0, 1, size=(3, *cfg.input_dims))
    before = forward(state, x, [0, 1, 3])

    path = save_checkpoint(tmp_path / "model.ckpt", state, {"epoch": 7, "fold": 2})
    loaded, metadata = load_checkpoint(path)

    assert metadata == {"epoch": 7, "fold": 2}
    assert loaded.cfg == cfg
    assert loaded.params.keys() == state.params.keys()
    assert loaded.buffers.keys() == state.buffers.keys()
    for name, value in {**state.params, **state.buffers}.items():
        got = {**loaded.params, **loaded.buffers}[name]
        assert got.dtype == value.dtype
        np.testing.assert_array_equal(got, value)
    np.testing.assert_array_equal(forward(loaded, x, [0, 1, 3]), before)


def test_file_starts_with_magic_and_version(tmp_path, tiny_model_cfg):
    path = save_checkpoint(tmp_path / "m.ckpt", init_state(tiny_model_cfg))
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack("<I", raw[8:12]) == (1,)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_checkpoint(tmp_path, tiny_model_cfg):
    path = save_checkpoint(tmp_path / "m.ckpt", init_state(tiny_model_cfg))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_unsupported_version(tmp_path, tiny_model_cfg):
    path = save_checkpoint(tmp_path / "m.ckpt", init_state(tiny_model_cfg))
    raw = bytearray(path.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version 99"):
        load_checkpoint(path)


def test_invalid_model_header(tmp_path, tiny_model_cfg):
    path = save_checkpoint(tmp_path / "m.ckpt", init_state(tiny_model_cfg))
    raw = path.read_bytes()
    bad = raw.replace(b'"multi_head"', b'"two_head!!"')
    path.write_bytes(bad)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "changes",
    [{"fc_widths": (7, 5)}, {"representation": RepresentationKind.QUAT}, {"variant": ModelVariant.BASELINE}],
)
def test_tensors_must_fit_the_stored_config(tmp_path, tiny_model_cfg, changes):
    state = init_state(tiny_model_cfg)
    other = replace(tiny_model_cfg, **changes)
    path = save_checkpoint(tmp_path / "m.ckpt", ModelState(other, state.params, state.buffers))
    with pytest.raises(ConfigError, match="model config"):
        load_checkpoint(path)


def test_tensor_dtype_must_fit_the_stored_config(tmp_path, tiny_model_cfg):
    state = init_state(replace(tiny_model_cfg, dtype="float32"))
    path = save_checkpoint(tmp_path / "m.ckpt", ModelState(tiny_model_cfg, state.params, state.buffers))
    with pytest.raises(ConfigError, match="float32"):
        load_checkpoint(path)
