from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import librosa
import numpy as np
import numpy.typing as npt
from scipy import signal
from scipy.io import wavfile

from evi_melody.exceptions import AudioFormatError, ConfigError

SAMPLE_RATE = 16_000  # Hz
CLIP_SECONDS = 1.0
MIN_REMAINDER = 0.5  # fraction of a clip; shorter trailing remainders are dropped
N_FFT = 2048
HOP_SECONDS = 0.010
HOP_LENGTH = round(SAMPLE_RATE * HOP_SECONDS)

FloatArray = npt.NDArray[np.float64]


@dataclass(frozen=True, slots=True, eq=False)
class AudioBuffer:
    """
    Real-valued audio samples.

    `samples` is either 1D (mono) or `(n_samples, n_channels)`.
    """

    samples: FloatArray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise AudioFormatError(f"Sample rate must be positive, received: {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("Audio contains non-finite samples.")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def is_mono(self) -> bool:  # noqa: D102
        return self.samples.ndim == 1

    @property
    def duration(self) -> float:
        """Duration, as seconds."""
        return len(self) / self.sample_rate


@dataclass(frozen=True, slots=True, eq=False)
class FeatureClip:
    """
    Per-clip `T x F` log-magnitude feature matrix.

    `fft_size` records the transform the columns came from; a truncated spectrum keeps the full
    `fft_size` and simply has fewer columns.
    """

    matrix: FloatArray
    hop: float = HOP_SECONDS
    sample_rate: int = SAMPLE_RATE
    fft_size: int = N_FFT
    is_mel: bool = False

    @property
    def n_frames(self) -> int:  # noqa: D102
        return self.matrix.shape[0]

    @property
    def n_freq(self) -> int:  # noqa: D102
        return self.matrix.shape[1]


def read_wav(filepath: Path) -> AudioBuffer:
    """
    Load a PCM WAV file into an `AudioBuffer` with samples scaled to `[-1, 1]`.

    8/16/24/32-bit integer and 32-bit float WAVs are supported; 24-bit files are widened to 32-bit
    by `scipy` on read.
    """
    try:
        sample_rate, raw = wavfile.read(filepath)
    except ValueError as e:
        raise AudioFormatError(f"Could not parse WAV file: '{filepath}'") from e

    match raw.dtype:
        case np.uint8:
            samples = (raw.astype(np.float64) - 128) / 128
        case np.int16:
            samples = raw.astype(np.float64) / 2**15
        case np.int32:
            samples = raw.astype(np.float64) / 2**31
        case np.float32 | np.float64:
            samples = raw.astype(np.float64)
        case _:
            raise AudioFormatError(f"Unsupported WAV sample type: '{raw.dtype}'")

    return AudioBuffer(samples=samples, sample_rate=int(sample_rate))


def write_wav(filepath: Path, audio: AudioBuffer) -> None:
    """Write the provided audio as a 32-bit float WAV, creating parent directories as needed."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(filepath, audio.sample_rate, audio.samples.astype(np.float32))


def standardize(audio: AudioBuffer, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """
    Downmix to mono & resample to `sample_rate`.

    Resampling is windowed-sinc polyphase. Audio that is already mono at the target rate is passed
    through untouched. If resampling overshoots, the output is rescaled to a peak of 1.
    """
    if len(audio) == 0:
        raise AudioFormatError("Cannot standardize an empty audio buffer.")

    if audio.is_mono and audio.sample_rate == sample_rate:
        return audio

    samples = audio.samples if audio.is_mono else audio.samples.mean(axis=1)
    if audio.sample_rate != sample_rate:
        common = math.gcd(audio.sample_rate, sample_rate)
        samples = signal.resample_poly(
            samples, up=sample_rate // common, down=audio.sample_rate // common
        )

    peak = np.abs(samples).max()
    if peak > 1:
        samples = samples / peak

    return AudioBuffer(samples=np.asarray(samples, dtype=np.float64), sample_rate=sample_rate)


def segment(
    audio: AudioBuffer, clip_seconds: float = CLIP_SECONDS, min_remainder: float = MIN_REMAINDER
) -> list[AudioBuffer]:
    """
    Split standardized audio into non-overlapping clips of exactly `clip_seconds`.

    A trailing remainder of at least `min_remainder` of a clip is zero-padded to a full clip, any
    shorter remainder is dropped.
    """
    clip_len = round(clip_seconds * audio.sample_rate)
    n_full, remainder = divmod(len(audio), clip_len)

    clips = [
        AudioBuffer(audio.samples[idx * clip_len : (idx + 1) * clip_len], audio.sample_rate)
        for idx in range(n_full)
    ]
    if remainder and remainder >= min_remainder * clip_len:
        padded = np.zeros(clip_len)
        padded[:remainder] = audio.samples[n_full * clip_len :]
        clips.append(AudioBuffer(padded, audio.sample_rate))

    return clips


def log_magnitude_stft(
    clip: AudioBuffer,
    clip_seconds: float = CLIP_SECONDS,
    n_fft: int = N_FFT,
    hop_seconds: float = HOP_SECONDS,
) -> FeatureClip:
    """
    Compute the `ln(1 + |X|)` spectrogram of a standardized clip.

    Frames are Hann-windowed & centered (reflect-padded) so frame `t` is aligned with time
    `t * hop_seconds`; the clip yields `floor(clip_seconds / hop_seconds)` frames.
    """
    if not clip.is_mono or clip.sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"Expected {SAMPLE_RATE} Hz mono audio.")

    expected_len = round(clip_seconds * SAMPLE_RATE)
    if len(clip) != expected_len:
        raise AudioFormatError(f"Expected {expected_len} samples, received: {len(clip)}")

    hop_length = round(hop_seconds * SAMPLE_RATE)
    n_frames = math.floor(clip_seconds / hop_seconds + 1e-9)
    spec = librosa.stft(
        clip.samples,
        n_fft=n_fft,
        hop_length=hop_length,
        window="hann",
        center=True,
        pad_mode="reflect",
    )

    matrix = np.log1p(np.abs(spec[:, :n_frames])).T
    return FeatureClip(
        matrix=np.ascontiguousarray(matrix, dtype=np.float64),
        hop=hop_seconds,
        sample_rate=SAMPLE_RATE,
        fft_size=n_fft,
    )


def mel_filterbank(n_mel: int, sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT) -> FloatArray:
    """
    Triangular mel filterbank spanning 0 Hz to Nyquist, each row normalized to sum to 1.

    Filters that land between FFT bins would be empty; these are rejected as a config error.
    """
    n_freq = n_fft // 2 + 1
    if n_mel < 2 or n_mel >= n_freq:
        raise ConfigError(f"n_mel must be in [2, {n_freq - 1}], received: {n_mel}")

    filters = librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mel, fmin=0.0, fmax=sample_rate / 2, norm=None
    ).astype(np.float64)
    row_sums = filters.sum(axis=1)
    if np.any(row_sums <= 0):
        raise ConfigError(f"n_mel={n_mel} produces empty mel filters for a {n_fft}-point FFT.")

    return filters / row_sums[:, np.newaxis]


def mel_project(clip: FeatureClip, n_mel: int) -> FeatureClip:
    """
    Project a linear-frequency log-magnitude clip onto `n_mel` mel bands.

    The filterbank is applied to the magnitudes, i.e. before the log compression.
    """
    if clip.is_mel:
        raise ConfigError("Clip is already mel-projected.")
    if clip.n_freq != clip.fft_size // 2 + 1:
        raise ConfigError("Mel projection requires the full, untruncated spectrum.")

    filters = mel_filterbank(n_mel, sample_rate=clip.sample_rate, n_fft=clip.fft_size)
    magnitude = np.expm1(clip.matrix)
    return replace(clip, matrix=np.log1p(magnitude @ filters.T), is_mel=True)


def truncate_spectrum(clip: FeatureClip, n_freq: int) -> FeatureClip:
    """Keep only the lowest `n_freq` frequency columns."""
    if not 0 < n_freq <= clip.n_freq:
        raise ConfigError(f"n_freq must be in [1, {clip.n_freq}], received: {n_freq}")

    return replace(clip, matrix=np.ascontiguousarray(clip.matrix[:, :n_freq]))


def audio_to_features(audio: AudioBuffer, n_freq: int | None = None) -> list[FeatureClip]:
    """Full frontend: standardize, segment into 1 s clips, then log-magnitude STFT each clip."""
    clips = [log_magnitude_stft(clip) for clip in segment(standardize(audio))]
    if n_freq is not None:
        clips = [truncate_spectrum(clip, n_freq) for clip in clips]

    return clips
