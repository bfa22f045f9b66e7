import numpy as np
import pytest

from evi_melody.exceptions import ConfigError, DomainError, GridRangeError
from evi_melody.pitchgrid import (
    PitchGrid,
    TargetMode,
    TargetScaler,
    bin_to_hz,
    bins_to_hz,
    hz_to_bin,
    hz_to_cents,
    make_frame_target,
)

GRID = PitchGrid()

BIN_TO_HZ_CASES = (
    (0, 51.91),
    (296, 439.93),
    (383, 824.63),
)


@pytest.mark.parametrize(("k", "truth_hz"), BIN_TO_HZ_CASES)
def test_bin_to_hz(k: int, truth_hz: float) -> None:
    assert bin_to_hz(GRID, k) == pytest.approx(truth_hz, abs=0.1)


@pytest.mark.parametrize("k", (-1, 384))
def test_bin_to_hz_out_of_range_raises(k: int) -> None:
    with pytest.raises(GridRangeError):
        bin_to_hz(GRID, k)


def test_bins_to_hz_out_of_range_raises() -> None:
    with pytest.raises(GridRangeError):
        bins_to_hz(GRID, [0, 12, 384])


HZ_TO_CENTS_CASES = (
    (51.91, 0.0),
    (103.82, 1200.0),
    (440.0, 3700.3),
)


@pytest.mark.parametrize(("f", "truth_cents"), HZ_TO_CENTS_CASES)
def test_hz_to_cents(f: float, truth_cents: float) -> None:
    assert hz_to_cents(GRID, f) == pytest.approx(truth_cents, abs=0.5)


@pytest.mark.parametrize("f", (0.0, -440.0))
def test_hz_to_cents_nonpositive_raises(f: float) -> None:
    with pytest.raises(DomainError):
        hz_to_cents(GRID, f)


HZ_TO_BIN_CASES = (
    (51.91, 0),
    (440.0, 296),
    (2000.0, 383),
    (20.0, 0),
)


@pytest.mark.parametrize(("f", "truth_bin"), HZ_TO_BIN_CASES)
def test_hz_to_bin(f: float, truth_bin: int) -> None:
    assert hz_to_bin(GRID, f) == truth_bin


def test_hz_to_bin_matches_brute_force() -> None:
    rng = np.random.default_rng(42)
    centers = np.arange(GRID.n_bins) * GRID.cents_per_bin
    for f in np.exp(rng.uniform(np.log(GRID.f_min), np.log(GRID.f_max), size=500)):
        brute = int(np.argmin(np.abs(hz_to_cents(GRID, f) - centers)))
        assert hz_to_bin(GRID, f) == brute


def test_hz_to_bin_half_way_rounds_up() -> None:
    # Two-octave bins put the exact half-way point on a single octave
    grid = PitchGrid(f_min=100.0, n_bins=2, cents_per_bin=2400.0)
    assert hz_to_bin(grid, 200.0) == 1


def test_hz_to_bin_nonpositive_raises() -> None:
    with pytest.raises(DomainError):
        hz_to_bin(GRID, 0.0)


def test_round_trip_every_bin() -> None:
    for k in range(GRID.n_bins):
        assert hz_to_bin(GRID, bin_to_hz(GRID, k)) == k


def test_grid_upper_edge() -> None:
    assert GRID.span_cents == pytest.approx(4800)
    assert GRID.f_max == pytest.approx(830.61, abs=0.1)
    assert bin_to_hz(GRID, 383) * 2 ** (12.5 / 1200) == pytest.approx(830.61, abs=0.1)


def test_bin_centers_strictly_increasing() -> None:
    assert np.all(np.diff(GRID.bin_centers()) > 0)


def test_cents_monotonic() -> None:
    freqs = np.linspace(52, 830, 200)
    cents = [hz_to_cents(GRID, f) for f in freqs]
    assert np.all(np.diff(cents) > 0)


def test_quantization_error_within_half_bin() -> None:
    rng = np.random.default_rng(7)
    for f in rng.uniform(GRID.f_min, bin_to_hz(GRID, 383), size=1000):
        error = hz_to_cents(GRID, f) - hz_to_bin(GRID, f) * GRID.cents_per_bin
        assert abs(error) <= GRID.cents_per_bin / 2 + 1e-9


INVALID_GRID_CASES = (
    {"f_min": 0.0},
    {"n_bins": 1},
    {"cents_per_bin": -12.5},
)


@pytest.mark.parametrize("kwargs", INVALID_GRID_CASES)
def test_invalid_grid_raises(kwargs: dict) -> None:
    with pytest.raises(ConfigError):
        PitchGrid(**kwargs)


def test_with_bins_keeps_span() -> None:
    grid = PitchGrid.with_bins(64)
    assert grid.cents_per_bin == pytest.approx(75.0)
    assert grid.f_max == pytest.approx(GRID.f_max)


def test_frame_target_unvoiced() -> None:
    target = make_frame_target(GRID, 0.0, TargetMode.CENTS)
    assert not target.voiced
    assert target.bin_index is None
    assert target.cents_value is None
    assert target.hz_value == 0


def test_frame_target_class() -> None:
    target = make_frame_target(GRID, 440.0, TargetMode.CLASS)
    assert target.voiced
    assert target.bin_index == 296


def test_frame_target_cents_is_quantized() -> None:
    target = make_frame_target(GRID, 440.0, TargetMode.CENTS)
    assert target.cents_value == 296 * 12.5


def test_frame_target_hz_passthrough() -> None:
    target = make_frame_target(GRID, 440.0, TargetMode.HZ)
    assert target.voiced
    assert target.hz_value == 440.0


def test_frame_target_negative_raises() -> None:
    with pytest.raises(DomainError):
        make_frame_target(GRID, -5.0, TargetMode.CLASS)


def test_frame_target_clamps_out_of_range() -> None:
    assert make_frame_target(GRID, 2000.0, TargetMode.CLASS).bin_index == 383


@pytest.mark.parametrize("mode", (TargetMode.CENTS, TargetMode.HZ))
def test_scaler_round_trip(mode: TargetMode) -> None:
    scaler = TargetScaler.for_mode(GRID, mode)
    values = np.array([0.0, 1200.0, 3700.0])
    np.testing.assert_allclose(scaler.from_model(scaler.to_model(values)), values)


def test_scaler_unvoiced_sentinel_below_threshold() -> None:
    for mode in (TargetMode.CENTS, TargetMode.HZ):
        scaler = TargetScaler.for_mode(GRID, mode)
        assert scaler.unvoiced_value < scaler.voicing_threshold
        assert scaler.voicing_threshold < (0.0 if mode is TargetMode.CENTS else GRID.f_min)
