from __future__ import annotations

import typing as t
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from evi_melody.exceptions import ArgumentError, DomainError, LabelFormatError

TOLERANCE_CENTS = 50.0

FloatArray = npt.NDArray[np.float64]


class FrameTrack(t.NamedTuple):
    """Frame-level melody estimate or reference; `f0 == 0` is unvoiced."""

    times: FloatArray
    f0: FloatArray


def _prepare(ref: npt.ArrayLike, est: npt.ArrayLike) -> tuple[FloatArray, FloatArray]:
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.size != est.size:
        raise ArgumentError(f"Reference has {ref.size} frames, estimate has {est.size}")
    if np.any(ref < 0) or np.any(est < 0):
        raise DomainError("Frame f0 values must be non-negative.")

    return ref, est


def _cent_errors(ref: FloatArray, est: FloatArray) -> FloatArray:
    """Signed cents from reference to estimate; only meaningful where both are voiced."""
    both = (ref > 0) & (est > 0)
    errors = np.full(ref.shape, np.inf)
    errors[both] = 1200 * np.log2(est[both] / ref[both])
    return errors


def _chroma_distance(cents: FloatArray) -> FloatArray:
    return np.abs(cents - 1200 * np.round(cents / 1200))


def _voiced_hit_rate(hits: npt.NDArray[np.bool_], ref: FloatArray) -> float:
    n_voiced = np.count_nonzero(ref > 0)
    if n_voiced == 0:
        return 1.0

    return np.count_nonzero(hits & (ref > 0)) / n_voiced


def rpa(ref: npt.ArrayLike, est: npt.ArrayLike, tolerance_cents: float = TOLERANCE_CENTS) -> float:
    """
    Raw pitch accuracy: fraction of reference-voiced frames estimated within `tolerance_cents`.

    Frames the estimate marks as unvoiced never count as hits. A reference without voiced frames
    scores 1.0.
    """
    ref, est = _prepare(ref, est)
    hits = np.abs(_cent_errors(ref, est)) <= tolerance_cents
    return _voiced_hit_rate(hits, ref)


def rca(ref: npt.ArrayLike, est: npt.ArrayLike, tolerance_cents: float = TOLERANCE_CENTS) -> float:
    """Raw chroma accuracy: as `rpa`, with octave errors forgiven."""
    ref, est = _prepare(ref, est)
    errors = _cent_errors(ref, est)
    finite = np.isfinite(errors)

    hits = np.zeros(ref.shape, dtype=bool)
    hits[finite] = _chroma_distance(errors[finite]) <= tolerance_cents
    return _voiced_hit_rate(hits, ref)


def oa(ref: npt.ArrayLike, est: npt.ArrayLike, tolerance_cents: float = TOLERANCE_CENTS) -> float:
    """
    Overall accuracy over every frame.

    A frame is correct if both sides are unvoiced, or both are voiced & within `tolerance_cents`.
    """
    ref, est = _prepare(ref, est)
    if ref.size == 0:
        return 1.0

    pitch_hits = np.abs(_cent_errors(ref, est)) <= tolerance_cents
    unvoiced_hits = (ref == 0) & (est == 0)
    return np.count_nonzero(pitch_hits | unvoiced_hits) / ref.size


def score_track(
    ref: npt.ArrayLike, est: npt.ArrayLike, tolerance_cents: float = TOLERANCE_CENTS
) -> dict[str, float]:
    """All three metrics for a single track."""
    return {
        "rpa": rpa(ref, est, tolerance_cents),
        "rca": rca(ref, est, tolerance_cents),
        "oa": oa(ref, est, tolerance_cents),
    }


def read_frames_csv(filepath: Path) -> FrameTrack:
    """Read a `time,f0` frame CSV with a header row."""
    frames = pd.read_csv(filepath)
    missing = {"time", "f0"} - set(frames.columns)
    if missing:
        raise LabelFormatError(f"'{filepath}' is missing column(s): {', '.join(sorted(missing))}")

    return FrameTrack(
        times=frames["time"].to_numpy(dtype=np.float64), f0=frames["f0"].to_numpy(dtype=np.float64)
    )


def write_frames_csv(filepath: Path, track: FrameTrack) -> None:  # noqa: D103
    filepath.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"time": track.times, "f0": track.f0}).to_csv(
        filepath, index=False, float_format="%.6f"
    )
