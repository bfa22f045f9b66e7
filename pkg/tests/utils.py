from __future__ import annotations

import typing as t
from functools import partial

import numpy as np

from evi_melody import dsp
from evi_melody.config import ModelConfig, SyntheticSpec, Task
from evi_melody.dataio import LabeledClip, synthetic_clip
from evi_melody.pitchgrid import FrameTarget, PitchGrid, make_frame_target

TINY_N_FRAMES = 10
TINY_N_FREQ = 65

# 2 blocks of 4 & 8 filters over a 16-bin grid; small enough for finite differences
TINY_MODEL = partial(
    ModelConfig,
    block_filters=(4, 8),
    n_bins=16,
    n_freq=TINY_N_FREQ,
    readout="mean",
    dropout_rate=0.0,
)

# Desk-scale grid (37.5 cents worst-case quantization) on a 65-bin truncated spectrum
SMALL_MODEL = partial(
    ModelConfig,
    block_filters=(4, 8),
    n_bins=64,
    n_freq=TINY_N_FREQ,
    readout="flatten",
    dropout_rate=0.0,
)

# Pitches stay inside the truncated spectrum's 0-500 Hz
LOW_SPEC = SyntheticSpec(pitch_range=(100.0, 400.0), noise_snr=40.0, voiced_fraction=0.8)


def tone(freq: float, seconds: float = 1.0, sample_rate: int = dsp.SAMPLE_RATE) -> dsp.AudioBuffer:
    """Unit amplitude sine."""
    time = np.arange(round(seconds * sample_rate)) / sample_rate
    return dsp.AudioBuffer(np.sin(2 * np.pi * freq * time), sample_rate)


def random_clip(
    f0: t.Sequence[float],
    grid: PitchGrid,
    task: Task,
    source_id: str = "clip",
    n_freq: int = TINY_N_FREQ,
    seed: int = 0,
) -> LabeledClip:
    """Clip with random features & the provided per-frame f0 labels."""
    rng = np.random.default_rng(seed)
    features = dsp.FeatureClip(matrix=rng.random((len(f0), n_freq)))
    targets = tuple(make_frame_target(grid, f, task.target_mode) for f in f0)
    return LabeledClip(features=features, targets=targets, source_id=source_id)


def tiny_clips(
    config: ModelConfig, n_clips: int = 2, seed: int = 0, n_frames: int = TINY_N_FRAMES
) -> list[LabeledClip]:
    """Random-feature clips with a mix of voiced & unvoiced in-grid labels."""
    grid = config.grid()
    rng = np.random.default_rng(seed)
    clips = []
    for idx in range(n_clips):
        bins = rng.integers(0, grid.n_bins, size=n_frames)
        f0 = np.where(rng.random(n_frames) < 0.7, grid.bin_centers()[bins], 0.0)
        f0[0] = grid.bin_centers()[bins[0]]  # At least one voiced frame per clip
        clip = random_clip(f0, grid, config.task, f"clip{idx:02d}", config.n_freq, seed + idx)
        clips.append(clip)

    return clips


def small_synthetic_clips(
    config: ModelConfig,
    count: int,
    seed: int = 0,
    spec: SyntheticSpec = LOW_SPEC,
    domain_tag: str = "synthetic",
) -> list[LabeledClip]:
    """Synthetic 1 s clips truncated to the model's spectrum width."""
    grid = config.grid()
    return [
        synthetic_clip(
            spec, seed * 1_000 + idx, grid, config.task.target_mode, config.n_freq, domain_tag
        )
        for idx in range(count)
    ]


class LabelTrackingClip:
    """Pool clip double that records every time its labels are read."""

    def __init__(self, clip: LabeledClip) -> None:
        self._clip = clip
        self.label_reads = 0

    @property
    def features(self) -> dsp.FeatureClip:  # noqa: D102
        return self._clip.features

    @property
    def source_id(self) -> str:  # noqa: D102
        return self._clip.source_id

    @property
    def domain_tag(self) -> str:  # noqa: D102
        return self._clip.domain_tag

    @property
    def targets(self) -> tuple[FrameTarget, ...]:  # noqa: D102
        self.label_reads += 1
        return self._clip.targets
