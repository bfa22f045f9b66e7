from pathlib import Path

import numpy as np
import pytest

from evi_melody.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from evi_melody.config import Task, TrainConfig
from evi_melody.exceptions import ConfigError
from evi_melody.network import FrameNetwork, model_from_checkpoint, predict_batch, train
from evi_melody.optim import AdamState
from tests.utils import TINY_MODEL, tiny_clips

DIGEST = "0123456789abcdef" * 4


@pytest.fixture
def trained_checkpoint() -> Checkpoint:
    config = TINY_MODEL(task=Task.M2)
    model = FrameNetwork.build(config)
    train_config = TrainConfig(epochs=2, batch_size=1)
    result = train(model, tiny_clips(config), config=train_config, digest=DIGEST, verbose=False)
    return result.checkpoint


def test_round_trip_preserves_everything(tmp_path: Path, trained_checkpoint: Checkpoint) -> None:
    filepath = tmp_path / "nested" / "model.ckpt"
    save_checkpoint(trained_checkpoint, filepath)
    loaded = load_checkpoint(filepath, expected_digest=DIGEST)

    assert loaded.model_config == trained_checkpoint.model_config
    assert loaded.config_digest == DIGEST
    assert loaded.epoch == 2
    assert loaded.optimizer.step == trained_checkpoint.optimizer.step

    assert list(loaded.weights) == list(trained_checkpoint.weights)
    for name, values in trained_checkpoint.weights.items():
        np.testing.assert_array_equal(loaded.weights[name], values)
    for name, values in trained_checkpoint.optimizer.v.items():
        np.testing.assert_array_equal(loaded.optimizer.v[name], values)


def test_reloaded_predictions_are_bitwise_identical(
    tmp_path: Path, trained_checkpoint: Checkpoint
) -> None:
    filepath = tmp_path / "model.ckpt"
    save_checkpoint(trained_checkpoint, filepath)

    clips = [clip.features for clip in tiny_clips(trained_checkpoint.model_config, seed=5)]
    before = predict_batch(model_from_checkpoint(trained_checkpoint), clips)
    after = predict_batch(model_from_checkpoint(load_checkpoint(filepath)), clips)

    for b, a in zip(before, after):
        np.testing.assert_array_equal(a.f0_hz, b.f0_hz)
        np.testing.assert_array_equal(a.voicing_prob, b.voicing_prob)
        np.testing.assert_array_equal(a.epistemic, b.epistemic)


def test_digest_mismatch_raises(tmp_path: Path, trained_checkpoint: Checkpoint) -> None:
    filepath = tmp_path / "model.ckpt"
    save_checkpoint(trained_checkpoint, filepath)

    with pytest.raises(ConfigError, match="digest"):
        load_checkpoint(filepath, expected_digest="f" * 64)


def test_no_expected_digest_skips_check(tmp_path: Path, trained_checkpoint: Checkpoint) -> None:
    filepath = tmp_path / "model.ckpt"
    save_checkpoint(trained_checkpoint, filepath)
    assert load_checkpoint(filepath).config_digest == DIGEST


@pytest.mark.parametrize("keep_bytes", (4, 40, -8))
def test_truncated_file_raises(
    tmp_path: Path, trained_checkpoint: Checkpoint, keep_bytes: int
) -> None:
    filepath = tmp_path / "model.ckpt"
    save_checkpoint(trained_checkpoint, filepath)
    filepath.write_bytes(filepath.read_bytes()[:keep_bytes])

    with pytest.raises(ConfigError):
        load_checkpoint(filepath)


def test_not_a_checkpoint_raises(tmp_path: Path) -> None:
    filepath = tmp_path / "model.ckpt"
    header = b'{"format": "something-else"}'
    filepath.write_bytes(np.array([len(header)], dtype="<u8").tobytes() + header)

    with pytest.raises(ConfigError, match="Not a checkpoint"):
        load_checkpoint(filepath)


def test_fresh_model_round_trip(tmp_path: Path) -> None:
    model = FrameNetwork.build(TINY_MODEL(task=Task.TCP))
    ckpt = model.snapshot(AdamState(), epoch=0)
    filepath = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, filepath)

    loaded = load_checkpoint(filepath)
    assert "confidence.w" in loaded.weights
    assert loaded.optimizer.step == 0
    assert not loaded.optimizer.m
