from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import numpy.typing as npt

from evi_melody.exceptions import ConfigError, DomainError, GridRangeError

F_MIN = 51.91  # Hz
N_BINS = 384
CENTS_PER_BIN = 12.5
GRID_SPAN = N_BINS * CENTS_PER_BIN  # 4 octaves

# Regression sentinels for frames without a melody when no voicing head is trained (R1/R2)
UNVOICED_CENTS = -1200.0
UNVOICED_HZ = 0.0

FloatArray = npt.NDArray[np.float64]


class TargetMode(str, Enum):
    """How a voiced frame's pitch is presented to the model."""

    CLASS = "class"  # M1, TCP: bin index
    CENTS = "cents"  # M2, R2, beta-NLL: quantized bin center in cents
    HZ = "hz"  # R1: raw frequency, no quantization


@dataclass(frozen=True, slots=True)
class PitchGrid:
    """
    Logarithmic pitch lattice.

    Bin `k` is centered at `f_min * 2 ** (k * cents_per_bin / 1200)`, so `f_min` is the first
    center and the grid's upper edge sits one bin-width above the last center.
    """

    f_min: float = F_MIN
    n_bins: int = N_BINS
    cents_per_bin: float = CENTS_PER_BIN

    def __post_init__(self) -> None:
        if not self.f_min > 0:
            raise ConfigError(f"f_min must be positive, received: {self.f_min}")
        if self.n_bins < 2:
            raise ConfigError(f"n_bins must be at least 2, received: {self.n_bins}")
        if not self.cents_per_bin > 0:
            raise ConfigError(f"cents_per_bin must be positive, received: {self.cents_per_bin}")

    @classmethod
    def with_bins(
        cls, n_bins: int, span_cents: float = GRID_SPAN, f_min: float = F_MIN
    ) -> PitchGrid:
        """Build a grid of `n_bins` bins covering the same `span_cents` as the default grid."""
        return cls(f_min=f_min, n_bins=n_bins, cents_per_bin=span_cents / n_bins)

    @property
    def span_cents(self) -> float:  # noqa: D102
        return self.n_bins * self.cents_per_bin

    @property
    def f_max(self) -> float:
        """Upper (exclusive) edge of the grid, in Hz."""
        return self.f_min * 2 ** (self.span_cents / 1200)

    def bin_centers(self) -> FloatArray:  # noqa: D102
        return self.f_min * np.exp2(np.arange(self.n_bins) * self.cents_per_bin / 1200)


def bin_to_hz(grid: PitchGrid, k: int) -> float:
    """Center frequency, in Hz, of bin `k`."""
    if not 0 <= k < grid.n_bins:
        raise GridRangeError(f"Bin index {k} outside of [0, {grid.n_bins - 1}]")

    return grid.f_min * 2 ** (k * grid.cents_per_bin / 1200)


def bins_to_hz(grid: PitchGrid, ks: npt.ArrayLike) -> FloatArray:
    """Vectorized `bin_to_hz`."""
    ks = np.asarray(ks)
    if ks.size and (ks.min() < 0 or ks.max() >= grid.n_bins):
        raise GridRangeError(f"Bin indices must lie in [0, {grid.n_bins - 1}]")

    return grid.f_min * np.exp2(ks * grid.cents_per_bin / 1200)


def hz_to_cents(grid: PitchGrid, f: float) -> float:
    """Pitch of `f`, in cents above the grid's `f_min`."""
    if not f > 0:
        raise DomainError(f"Frequency must be positive, received: {f}")

    return 1200 * math.log2(f / grid.f_min)


def cents_to_hz(grid: PitchGrid, cents: npt.ArrayLike) -> FloatArray:
    """Inverse of `hz_to_cents`, vectorized."""
    return grid.f_min * np.exp2(np.asarray(cents, dtype=np.float64) / 1200)


def hz_to_bin(grid: PitchGrid, f: float) -> int:
    """
    Nearest grid bin for frequency `f`.

    Frequencies outside of the grid clamp to the edge bins. Exact half-way values round toward the
    higher bin.
    """
    position = hz_to_cents(grid, f) / grid.cents_per_bin
    k = math.floor(position + 0.5)
    return min(max(k, 0), grid.n_bins - 1)


@dataclass(frozen=True, slots=True)
class FrameTarget:
    """
    Ground truth for a single frame.

    Unvoiced frames carry no bin or cents value and a zero `hz_value`. Voiced frames carry all
    three representations; `mode` selects the one used as the training target.
    """

    voiced: bool
    bin_index: int | None = None
    cents_value: float | None = None
    hz_value: float = 0.0
    mode: TargetMode = TargetMode.CLASS


def make_frame_target(grid: PitchGrid, f0: float, mode: TargetMode) -> FrameTarget:
    """Build the `FrameTarget` for a frame with fundamental `f0` Hz (`0` is unvoiced)."""
    if f0 < 0:
        raise DomainError(f"f0 must be non-negative, received: {f0}")

    if f0 == 0:
        return FrameTarget(voiced=False, mode=mode)

    k = hz_to_bin(grid, f0)
    return FrameTarget(
        voiced=True,
        bin_index=k,
        cents_value=k * grid.cents_per_bin,
        hz_value=float(f0),
        mode=mode,
    )


@dataclass(frozen=True, slots=True)
class TargetScaler:
    """
    Affine map between target units (cents or Hz) and the normalized regression space.

    `model = (value - offset) / scale`
    """

    offset: float
    scale: float
    unvoiced_value: float
    voicing_threshold: float

    @classmethod
    def for_mode(cls, grid: PitchGrid, mode: TargetMode) -> TargetScaler:  # noqa: D102
        if mode is TargetMode.HZ:
            return cls(
                offset=(grid.f_min + grid.f_max) / 2,
                scale=(grid.f_max - grid.f_min) / 2,
                unvoiced_value=UNVOICED_HZ,
                voicing_threshold=grid.f_min / 2,
            )

        # Class mode never regresses, but the cents layout is a harmless default for it
        return cls(
            offset=grid.span_cents / 2,
            scale=1200.0,
            unvoiced_value=UNVOICED_CENTS,
            voicing_threshold=UNVOICED_CENTS / 2,
        )

    def to_model(self, values: npt.ArrayLike) -> FloatArray:  # noqa: D102
        return (np.asarray(values, dtype=np.float64) - self.offset) / self.scale

    def from_model(self, values: npt.ArrayLike) -> FloatArray:  # noqa: D102
        return np.asarray(values, dtype=np.float64) * self.scale + self.offset

    def variance_from_model(self, variances: npt.ArrayLike) -> FloatArray:  # noqa: D102
        return np.asarray(variances, dtype=np.float64) * self.scale**2
