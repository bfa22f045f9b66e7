import math
import typing as t
from pathlib import Path

import numpy as np
import pytest

from evi_melody import metrics
from evi_melody.exceptions import ArgumentError, DomainError, LabelFormatError

REF = [440.0, 220.0, 0.0]
EST = [450.3, 440.0, 0.0]

EXAMPLE_CASES = (
    (metrics.rpa, 0.5),
    (metrics.rca, 1.0),
    (metrics.oa, 2 / 3),
)


@pytest.mark.parametrize(("metric", "truth_score"), EXAMPLE_CASES)
def test_example_track(metric: t.Callable, truth_score: float) -> None:
    assert metric(REF, EST) == pytest.approx(truth_score)


@pytest.mark.parametrize("metric", (metrics.rpa, metrics.rca, metrics.oa))
def test_identical_estimate_scores_one(metric: t.Callable) -> None:
    assert metric(REF, REF) == 1.0


def test_all_unvoiced_estimate() -> None:
    est = np.zeros(len(REF))
    assert metrics.rpa(REF, est) == 0.0
    assert metrics.rca(REF, est) == 0.0


def test_unvoiced_reference_conventions() -> None:
    ref = np.zeros(4)
    assert metrics.rpa(ref, ref) == 1.0
    assert metrics.rca(ref, ref) == 1.0
    assert metrics.oa(ref, ref) == 1.0
    assert metrics.oa(ref, [0, 0, 0, 220.0]) == pytest.approx(0.75)


def test_octave_above_everywhere() -> None:
    ref = np.array([110.0, 220.0, 330.0])
    assert metrics.rpa(ref, 2 * ref) == 0.0
    assert metrics.rca(ref, 2 * ref) == 1.0


def test_empty_track() -> None:
    assert metrics.oa([], []) == 1.0


@pytest.mark.parametrize("metric", (metrics.rpa, metrics.rca, metrics.oa))
def test_length_mismatch_raises(metric: t.Callable) -> None:
    with pytest.raises(ArgumentError):
        metric([440.0, 0.0], [440.0])


def test_negative_f0_raises() -> None:
    with pytest.raises(DomainError):
        metrics.oa([440.0], [-440.0])


def _brute_force(ref: np.ndarray, est: np.ndarray, tol: float) -> tuple[float, float, float]:
    pitch_hits = chroma_hits = correct = n_voiced = 0
    for r, e in zip(ref, est):
        if r > 0:
            n_voiced += 1
            if e > 0:
                cents = 1200 * math.log2(e / r)
                pitch_hit = abs(cents) <= tol
                chroma_hit = min(abs(cents - 1200 * n) for n in range(-6, 7)) <= tol
                pitch_hits += pitch_hit
                chroma_hits += chroma_hit
                correct += pitch_hit
        elif e == 0:
            correct += 1

    if n_voiced == 0:
        return 1.0, 1.0, correct / len(ref)
    return pitch_hits / n_voiced, chroma_hits / n_voiced, correct / len(ref)


def _random_track(rng: np.random.Generator, n_frames: int = 50) -> tuple[np.ndarray, np.ndarray]:
    ref = np.exp(rng.uniform(np.log(55), np.log(880), n_frames))
    ref[rng.random(n_frames) < 0.3] = 0.0

    # Mix of near hits, octave errors & unrelated pitches
    jitter = 2 ** (rng.normal(0, 60, n_frames) / 1200)
    octave = 2.0 ** rng.integers(-2, 3, n_frames)
    est = np.where(rng.random(n_frames) < 0.5, ref * jitter, ref * jitter * octave)
    est = np.where(rng.random(n_frames) < 0.1, rng.uniform(55, 880, n_frames), est)
    est[rng.random(n_frames) < 0.2] = 0.0
    return ref, est


def test_matches_brute_force_oracle() -> None:
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        ref, est = _random_track(rng)
        truth = _brute_force(ref, est, metrics.TOLERANCE_CENTS)
        scores = metrics.score_track(ref, est)
        assert (scores["rpa"], scores["rca"], scores["oa"]) == pytest.approx(truth, abs=1e-12)


def test_metric_properties() -> None:
    rng = np.random.default_rng(99)
    for _ in range(1000):
        ref, est = _random_track(rng)
        scores = metrics.score_track(ref, est)
        assert all(0 <= v <= 1 for v in scores.values())
        assert scores["rca"] >= scores["rpa"]
        assert metrics.rca(ref, 2 * est) == scores["rca"]

        wider = metrics.score_track(ref, est, tolerance_cents=100)
        assert all(wider[name] >= scores[name] for name in scores)


def test_frames_csv_round_trip(tmp_path: Path) -> None:
    track = metrics.FrameTrack(times=np.array([0.0, 0.01, 0.02]), f0=np.array([0.0, 440.0, 0.0]))
    filepath = tmp_path / "frames.csv"
    metrics.write_frames_csv(filepath, track)

    assert filepath.read_text().splitlines()[0] == "time,f0"
    loaded = metrics.read_frames_csv(filepath)
    np.testing.assert_allclose(loaded.times, track.times)
    np.testing.assert_allclose(loaded.f0, track.f0)


def test_frames_csv_missing_column_raises(tmp_path: Path) -> None:
    filepath = tmp_path / "frames.csv"
    filepath.write_text("time,pitch\n0.0,440.0\n")
    with pytest.raises(LabelFormatError, match="f0"):
        metrics.read_frames_csv(filepath)
