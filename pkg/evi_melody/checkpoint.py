"""
Checkpoint serialization.

File layout:
    * 8 bytes: little-endian unsigned header length, in bytes
    * JSON header: config digest, epoch, model config, optimizer step & the ordered tensor table
    * Tensor payloads as little-endian float64, in header order
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from evi_melody.config import ModelConfig, validated
from evi_melody.exceptions import ConfigError
from evi_melody.optim import AdamState

FloatArray = npt.NDArray[np.float64]

FORMAT_NAME = "evi-melody-checkpoint"
FORMAT_VERSION = 1
HEADER_LEN_DTYPE = np.dtype("<u8")
PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass(slots=True, eq=False)
class Checkpoint:
    """
    Snapshot of a model & its optimizer.

    `weights` holds both trainable parameters and batch-norm running statistics, keyed by name.
    """

    model_config: ModelConfig
    weights: dict[str, FloatArray]
    optimizer: AdamState = field(default_factory=AdamState)
    config_digest: str = ""
    epoch: int = 0


def _tensor_groups(ckpt: Checkpoint) -> dict[str, dict[str, FloatArray]]:
    return {"weights": ckpt.weights, "adam_m": ckpt.optimizer.m, "adam_v": ckpt.optimizer.v}


def save_checkpoint(ckpt: Checkpoint, filepath: Path) -> None:
    """Serialize the checkpoint, creating parent directories as needed."""
    table = []
    payloads = []
    for group, tensors in _tensor_groups(ckpt).items():
        for name, values in tensors.items():
            arr = np.asarray(values, dtype=PAYLOAD_DTYPE)
            table.append({"group": group, "name": name, "shape": list(arr.shape)})
            payloads.append(arr.tobytes(order="C"))

    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config_digest": ckpt.config_digest,
        "epoch": ckpt.epoch,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "optimizer_step": ckpt.optimizer.step,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    filepath.parent.mkdir(parents=True, exist_ok=True)
    # Swap in a finished file so an interrupted write never leaves a truncated checkpoint
    partial_path = filepath.with_name(f"{filepath.name}.partial")
    with partial_path.open("wb") as f:
        f.write(np.array([len(header_bytes)], dtype=HEADER_LEN_DTYPE).tobytes())
        f.write(header_bytes)
        for payload in payloads:
            f.write(payload)
    partial_path.replace(filepath)


def load_checkpoint(filepath: Path, expected_digest: str | None = None) -> Checkpoint:
    """
    Load a checkpoint written by `save_checkpoint`.

    If `expected_digest` is provided, a checkpoint recorded under a different config digest is
    rejected with a `ConfigError`.
    """
    raw = filepath.read_bytes()
    if len(raw) < HEADER_LEN_DTYPE.itemsize:
        raise ConfigError(f"Truncated checkpoint file: '{filepath}'")

    header_len = int(np.frombuffer(raw, dtype=HEADER_LEN_DTYPE, count=1)[0])
    offset = HEADER_LEN_DTYPE.itemsize
    try:
        header = json.loads(raw[offset : offset + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"Could not decode checkpoint header: '{filepath}'") from e

    if header.get("format") != FORMAT_NAME:
        raise ConfigError(f"Not a checkpoint file: '{filepath}'")
    if expected_digest is not None and header["config_digest"] != expected_digest:
        raise ConfigError(
            f"Checkpoint config digest {header['config_digest'][:12]} does not match the current "
            f"config ({expected_digest[:12]})"
        )

    offset += header_len
    groups: dict[str, dict[str, FloatArray]] = {"weights": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + count * PAYLOAD_DTYPE.itemsize > len(raw):
            raise ConfigError(f"Truncated checkpoint payload for '{entry['name']}'")

        values = np.frombuffer(raw, dtype=PAYLOAD_DTYPE, count=count, offset=offset)
        groups[entry["group"]][entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
        offset += count * PAYLOAD_DTYPE.itemsize

    return Checkpoint(
        model_config=validated(ModelConfig, header["model_config"]),
        weights=groups["weights"],
        optimizer=AdamState(
            m=groups["adam_m"], v=groups["adam_v"], step=int(header["optimizer_step"])
        ),
        config_digest=header["config_digest"],
        epoch=int(header["epoch"]),
    )
