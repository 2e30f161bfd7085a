import numpy as np
import pytest

from src.nn import build_encoder, load_checkpoint, save_checkpoint, select_prefix
from src.utils.errors import CheckpointError


def test_round_trip_rounds_to_float32(tmp_path):
    state = {
        "a.weight": np.array([[0.1, 0.2], [0.3, 1 / 3]]),
        "a.bias": np.array([1e-9, -2.5]),
        "scalar": np.array(4.0),
    }
    path = tmp_path / "model.ckpt"
    written = save_checkpoint(path, state)
    assert written == path.stat().st_size
    loaded = load_checkpoint(path)
    assert list(loaded) == list(state)
    for name, value in state.items():
        assert loaded[name].dtype == np.float64
        assert loaded[name].shape == value.shape
        np.testing.assert_array_equal(loaded[name], value.astype(np.float32))


def test_encoder_state_survives_round_trip(tmp_path, tiny_encoder_config):
    encoder = build_encoder(tiny_encoder_config, seed=3)
    path = tmp_path / "encoder.ckpt"
    save_checkpoint(path, encoder.state_dict())
    other = build_encoder(tiny_encoder_config, seed=4)
    other.load_state_dict(load_checkpoint(path))
    for name, value in other.state_dict().items():
        np.testing.assert_array_equal(value, encoder.state_dict()[name].astype(np.float32))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint\nEND\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_data(tmp_path):
    path = tmp_path / "short.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_names_with_whitespace_are_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"bad name": np.ones(1)})


def test_select_prefix_strips_prefix():
    state = {"encoder.0.weight": np.ones(1), "head.fc.bias": np.zeros(1)}
    assert list(select_prefix(state, "encoder.")) == ["0.weight"]
    assert select_prefix(state, "missing.") == {}
