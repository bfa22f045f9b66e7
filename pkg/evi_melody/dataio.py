from __future__ import annotations

import math
import re
import typing as t
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from evi_melody import dsp
from evi_melody.config import DataSource, SyntheticSpec, load_json_model
from evi_melody.exceptions import ConfigError, LabelFormatError, LabelParseError
from evi_melody.pitchgrid import FrameTarget, PitchGrid, TargetMode, make_frame_target

LABEL_HOP = 0.010  # seconds
HUM_FUNDAMENTAL = 55.0  # Hz
HUM_PARTIALS = (1, 2, 3)

SOURCE_RATIOS = (0.70, 0.15, 0.15)
TARGET_RATIOS = (0.80, 0.20)


class LabelFormat(str, Enum):  # noqa: D101
    TIME_HZ_CSV = "time_hz_csv"  # rows of `time,f0`
    FIXED_HOP_HZ = "fixed_hop_hz"  # one f0 per row, time implied by the hop


class Split(str, Enum):  # noqa: D101
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


SPLIT_ORDER = {
    2: (Split.TRAIN, Split.TEST),
    3: (Split.TRAIN, Split.VALIDATION, Split.TEST),
}


class LabelSeries(t.NamedTuple):
    """Time series of `(time, f0)` pairs, `f0 == 0` marks an unvoiced sample."""

    times: np.ndarray
    f0: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class LabeledClip:  # noqa: D101
    features: dsp.FeatureClip
    targets: tuple[FrameTarget, ...]
    source_id: str
    domain_tag: str = ""

    def __post_init__(self) -> None:
        if len(self.targets) != self.features.n_frames:
            raise LabelFormatError(
                f"{self.source_id}: {len(self.targets)} targets for {self.features.n_frames} frames"
            )


class ManifestEntry(BaseModel):  # noqa: D101
    model_config = ConfigDict(frozen=True, extra="forbid")

    audio: Path
    labels: Path
    domain_tag: str = ""
    label_format: LabelFormat = LabelFormat.TIME_HZ_CSV


class DatasetManifest(BaseModel):
    """
    JSON manifest of a labeled corpus.

    Relative paths are resolved against `root`, which is set to the manifest's directory on load.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    entries: tuple[ManifestEntry, ...]
    ratios: tuple[float, ...] = SOURCE_RATIOS
    seed: int = 0
    group_by_tag: bool = False
    root: Path = Field(default=Path("."), exclude=True)

    @classmethod
    def from_file(cls, filepath: Path) -> DatasetManifest:  # noqa: D102
        manifest = load_json_model(cls, filepath)
        return manifest.model_copy(update={"root": filepath.parent})

    def resolve(self, path: Path) -> Path:  # noqa: D102
        return path if path.is_absolute() else self.root / path

    def to_file(self, filepath: Path) -> None:  # noqa: D102
        filepath.parent.mkdir(parents=True, exist_ok=True)
        filepath.write_text(self.model_dump_json(indent=2))


def _check_numeric(col: pd.Series, col_name: str) -> np.ndarray:
    values = pd.to_numeric(col, errors="coerce")
    bad = values.isna() | ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise LabelParseError(f"Non-numeric {col_name} value '{col.iloc[row]}'", line_no=row + 1)

    return values.to_numpy(dtype=np.float64)


def parse_label_file(
    filepath: Path, label_format: LabelFormat = LabelFormat.TIME_HZ_CSV, hop: float = LABEL_HOP
) -> LabelSeries:
    """
    Parse a frame-level f0 annotation file.

    `time_hz_csv` files contain headerless `time,f0` rows at any hop; `fixed_hop_hz` files contain
    one f0 value per row, with row `i` at time `i * hop`. An f0 of `0` marks an unvoiced sample.

    Malformed rows & negative f0 values raise `LabelParseError` with the offending 1-based line
    number; non-increasing timestamps raise `LabelFormatError`.
    """
    n_cols = 2 if label_format is LabelFormat.TIME_HZ_CSV else 1
    try:
        raw = pd.read_csv(
            filepath,
            header=None,
            dtype=str,
            skip_blank_lines=False,
            names=range(n_cols),
            index_col=False,
        )
    except pd.errors.EmptyDataError:
        return LabelSeries(np.empty(0), np.empty(0))
    except pd.errors.ParserError as e:
        # The tokenizer reports the 1-based file line of the offending row
        found = re.search(r"line (\d+)", str(e))
        line_no = int(found.group(1)) if found else 0
        raise LabelParseError(f"Could not tokenize label file: {e}", line_no=line_no) from e

    if label_format is LabelFormat.TIME_HZ_CSV:
        times = _check_numeric(raw[0], "time")
        f0 = _check_numeric(raw[1], "f0")
    else:
        f0 = _check_numeric(raw[0], "f0")
        times = np.arange(f0.size) * hop

    negative = np.flatnonzero(f0 < 0)
    if negative.size:
        row = int(negative[0])
        raise LabelParseError(f"Negative f0 value {f0[row]}", line_no=row + 1)

    if np.any(np.diff(times) <= 0):
        raise LabelFormatError(f"Timestamps in '{filepath}' are not strictly increasing.")

    return LabelSeries(times, f0)


def write_label_file(filepath: Path, series: LabelSeries) -> None:
    """Write a label series as headerless `time,f0` CSV rows."""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"time": series.times, "f0": series.f0}).to_csv(
        filepath, header=False, index=False, float_format="%.6f"
    )


def align_labels(
    series: LabelSeries,
    grid: PitchGrid,
    mode: TargetMode,
    n_frames: int = 100,
    hop: float = dsp.HOP_SECONDS,
    start_time: float = 0.0,
) -> tuple[FrameTarget, ...]:
    """
    Resample a label series onto the STFT frame times `start_time + t * hop`.

    Each frame takes the label sample nearest to its time, ties going to the earlier sample. Frames
    more than half a label hop from their nearest sample are unvoiced, covering both the region
    outside of the labeled span & gaps inside it, as is every frame of an empty series.
    """
    if series.times.size == 0:
        return tuple(make_frame_target(grid, 0.0, mode) for _ in range(n_frames))

    frame_times = start_time + np.arange(n_frames) * hop
    label_hop = np.median(np.diff(series.times)) if series.times.size > 1 else hop

    # Insertion point gives the right neighbour, step back when the left one is at least as close
    right = np.clip(np.searchsorted(series.times, frame_times), 0, series.times.size - 1)
    left = np.clip(right - 1, 0, series.times.size - 1)
    to_left = np.abs(frame_times - series.times[left])
    to_right = np.abs(series.times[right] - frame_times)
    use_left = to_left <= to_right + 1e-9
    nearest = np.where(use_left, left, right)

    targets = []
    for frame_time, idx in zip(frame_times, nearest):
        if abs(frame_time - series.times[idx]) <= label_hop / 2 + 1e-9:
            f0 = float(series.f0[idx])
        else:
            f0 = 0.0
        targets.append(make_frame_target(grid, f0, mode))

    return tuple(targets)


def generate_synthetic_clip(
    spec: SyntheticSpec,
    seed: int,
    grid: PitchGrid | None = None,
    clip_seconds: float = dsp.CLIP_SECONDS,
    sample_rate: int = dsp.SAMPLE_RATE,
    label_hop: float = LABEL_HOP,
) -> tuple[dsp.AudioBuffer, LabelSeries]:
    """
    Synthesize one clip of monophonic singing-like audio with exact f0 labels.

    The clip is split into `note_rate * clip_seconds` equal notes. Each note is voiced with
    probability `voiced_fraction`, with a base pitch drawn log-uniformly from `pitch_range`. Voiced
    notes are a harmonic stack (amplitude `harmonic_decay ** h`) with sinusoidal vibrato; white
    noise is added at `noise_snr` dB relative to the voice (or to a nominal 0.5 amplitude tone for
    silent clips) and an optional low hum at `accompaniment_level`.

    Labels are the instantaneous f0 at every `label_hop`, `0` inside unvoiced notes.
    """
    grid = grid or PitchGrid()
    low, high = spec.pitch_range
    if low < grid.f_min or high > grid.f_max:
        raise ConfigError(
            f"pitch_range ({low}, {high}) lies outside of the grid [{grid.f_min}, {grid.f_max:.2f}]"
        )

    rng = np.random.default_rng(seed)
    n_samples = round(clip_seconds * sample_rate)
    time = np.arange(n_samples) / sample_rate

    n_notes = max(1, round(spec.note_rate * clip_seconds))
    note_idx = np.minimum((np.arange(n_samples) * n_notes) // n_samples, n_notes - 1)
    voiced_notes = rng.random(n_notes) < spec.voiced_fraction
    base_pitch = np.exp(rng.uniform(np.log(low), np.log(high), size=n_notes))

    vibrato_phase = rng.uniform(0, 2 * np.pi)
    vibrato = spec.vibrato_depth * np.sin(2 * np.pi * spec.vibrato_rate * time + vibrato_phase)
    f0 = np.where(voiced_notes[note_idx], base_pitch[note_idx] * np.exp2(vibrato / 1200), 0.0)

    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voice = np.zeros(n_samples)
    for harmonic in range(1, spec.n_harmonics + 1):
        audible = (f0 * harmonic) < sample_rate / 2
        voice += audible * spec.harmonic_decay ** (harmonic - 1) * np.sin(harmonic * phase)

    if voice.any():
        voice *= 0.5 / np.abs(voice).max()
        signal_power = np.mean(voice[f0 > 0] ** 2)
    else:
        signal_power = 0.125

    noise_power = signal_power / 10 ** (spec.noise_snr / 10)
    audio = voice + rng.normal(0, np.sqrt(noise_power), size=n_samples)

    if spec.accompaniment_level > 0:
        hum_phase = rng.uniform(0, 2 * np.pi, size=len(HUM_PARTIALS))
        for partial, offset in zip(HUM_PARTIALS, hum_phase):
            audio += (
                spec.accompaniment_level
                / partial
                * np.sin(2 * np.pi * HUM_FUNDAMENTAL * partial * time + offset)
            )

    peak = np.abs(audio).max()
    if peak > 1:
        audio /= peak

    label_times = np.arange(math.floor(clip_seconds / label_hop + 1e-9)) * label_hop
    label_idx = np.minimum(np.round(label_times * sample_rate).astype(int), n_samples - 1)
    series = LabelSeries(label_times, f0[label_idx])

    return dsp.AudioBuffer(samples=audio, sample_rate=sample_rate), series


def build_splits(
    manifest: DatasetManifest, ratios: t.Sequence[float] | None = None, seed: int | None = None
) -> dict[Split, list[int]]:
    """
    Assign manifest entries (by index) to train/[validation/]test splits.

    Two ratios give a train/test split, three give train/validation/test. Items are shuffled with
    `seed` then partitioned contiguously at `floor(cumsum(ratios) * n)`, the last split taking the
    rest (10 items at 70/15/15 gives 7/1/2).

    With `group_by_tag`, whole domain tags are partitioned instead, in sorted tag order. Train
    always keeps at least one tag & every positive-ratio tail split gets one where tags allow; with
    too few tags validation is left empty before test is.
    """
    ratios = tuple(manifest.ratios if ratios is None else ratios)
    seed = manifest.seed if seed is None else seed

    if not manifest.entries:
        raise ConfigError("Cannot split an empty manifest.")
    if abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"Split ratios must sum to 1, received: {ratios}")
    if len(ratios) not in SPLIT_ORDER:
        raise ConfigError(f"Expected 2 or 3 split ratios, received: {len(ratios)}")

    split_names = SPLIT_ORDER[len(ratios)]
    if manifest.group_by_tag:
        tags = sorted({entry.domain_tag for entry in manifest.entries})
        tag_splits = _partition(len(tags), ratios, min_tail=1)
        split = {}
        for name, tag_idx in zip(split_names, tag_splits):
            chosen = {tags[i] for i in tag_idx}
            split[name] = [i for i, e in enumerate(manifest.entries) if e.domain_tag in chosen]
        return split

    order = np.random.default_rng(seed).permutation(len(manifest.entries))
    return {
        name: [int(order[i]) for i in idx]
        for name, idx in zip(split_names, _partition(len(order), ratios))
    }


def _partition(n: int, ratios: t.Sequence[float], min_tail: int = 0) -> list[range]:
    cuts = [math.floor(c * n + 1e-9) for c in np.cumsum(ratios)[:-1]]
    if min_tail:
        # Walk back from the end so every positive-ratio tail split keeps `min_tail` items
        upper = n
        for i in range(len(cuts) - 1, -1, -1):
            if ratios[i + 1] > 0:
                cuts[i] = min(cuts[i], upper - min_tail)
            upper = cuts[i]
        # Train keeps `min_tail` items too, taking them from the earliest tail splits
        lower = min(min_tail, n)
        for i, c in enumerate(cuts):
            cuts[i] = lower = max(c, lower)

    bounds = [0, *cuts, n]
    return [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]


def load_clips(
    audio_path: Path,
    label_path: Path,
    grid: PitchGrid,
    mode: TargetMode,
    domain_tag: str = "",
    label_format: LabelFormat = LabelFormat.TIME_HZ_CSV,
    n_freq: int | None = None,
) -> list[LabeledClip]:
    """Load one recording & its labels as a list of 1 s `LabeledClip`s."""
    series = parse_label_file(label_path, label_format)
    features = dsp.audio_to_features(dsp.read_wav(audio_path), n_freq=n_freq)

    clips = []
    for idx, clip in enumerate(features):
        targets = align_labels(
            series,
            grid,
            mode,
            n_frames=clip.n_frames,
            hop=clip.hop,
            start_time=idx * dsp.CLIP_SECONDS,
        )
        clips.append(
            LabeledClip(
                features=clip,
                targets=targets,
                source_id=f"{audio_path.stem}:{idx:04d}",
                domain_tag=domain_tag,
            )
        )

    return clips


def load_entries(
    manifest: DatasetManifest,
    grid: PitchGrid,
    mode: TargetMode,
    entry_idx: t.Iterable[int] | None = None,
    n_freq: int | None = None,
) -> list[LabeledClip]:
    """Load the selected manifest entries (all of them by default), ignoring the split ratios."""
    selected = range(len(manifest.entries)) if entry_idx is None else entry_idx
    clips = []
    for idx in selected:
        entry = manifest.entries[idx]
        clips.extend(
            load_clips(
                manifest.resolve(entry.audio),
                manifest.resolve(entry.labels),
                grid,
                mode,
                domain_tag=entry.domain_tag,
                label_format=entry.label_format,
                n_freq=n_freq,
            )
        )

    return clips


def load_corpus(
    manifest: DatasetManifest,
    grid: PitchGrid,
    mode: TargetMode,
    n_freq: int | None = None,
    verbose: bool = True,
) -> dict[Split, list[LabeledClip]]:
    """Load every manifest entry into `LabeledClip`s, grouped by split."""
    splits = build_splits(manifest)
    if verbose:
        print(f"Found {len(manifest.entries)} recordings to process.")

    corpus: dict[Split, list[LabeledClip]] = {}
    for split_name, entry_idx in splits.items():
        corpus[split_name] = load_entries(manifest, grid, mode, entry_idx, n_freq=n_freq)
        if verbose:
            print(f"{split_name.value}: {len(corpus[split_name])} clips")

    return corpus


def synthetic_clip(
    spec: SyntheticSpec,
    seed: int,
    grid: PitchGrid,
    mode: TargetMode,
    n_freq: int | None = None,
    domain_tag: str = "synthetic",
) -> LabeledClip:
    """Generate a synthetic clip straight into a `LabeledClip`, skipping the disk round trip."""
    audio, series = generate_synthetic_clip(spec, seed, grid=grid)
    features = dsp.log_magnitude_stft(audio)
    if n_freq is not None:
        features = dsp.truncate_spectrum(features, n_freq)

    return LabeledClip(
        features=features,
        targets=align_labels(series, grid, mode, n_frames=features.n_frames, hop=features.hop),
        source_id=f"{domain_tag}-{seed:06d}",
        domain_tag=domain_tag,
    )


def synthetic_corpus(
    spec: SyntheticSpec,
    count: int,
    seed: int,
    grid: PitchGrid,
    mode: TargetMode,
    ratios: t.Sequence[float],
    n_freq: int | None = None,
    domain_tag: str = "synthetic",
) -> dict[Split, list[LabeledClip]]:
    """In-memory synthetic corpus split with the same rules as a manifest corpus."""
    # Clip seeds are offset from the corpus seed so corpora with nearby seeds don't overlap
    clip_seeds = [seed * 1_000_003 + idx for idx in range(count)]
    clips = [synthetic_clip(spec, s, grid, mode, n_freq, domain_tag) for s in clip_seeds]

    placeholder = ManifestEntry(audio=Path(), labels=Path(), domain_tag=domain_tag)
    manifest = DatasetManifest(entries=(placeholder,) * count, ratios=tuple(ratios), seed=seed)
    return {name: [clips[i] for i in idx] for name, idx in build_splits(manifest).items()}


def write_synthetic_corpus(
    spec: SyntheticSpec,
    count: int,
    seed: int,
    out_dir: Path,
    ratios: t.Sequence[float] = SOURCE_RATIOS,
    domain_tag: str = "synthetic",
) -> Path:
    """Write `count` synthetic WAV + label CSV pairs plus a manifest, returning its path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = PitchGrid()

    entries = []
    for idx in range(count):
        clip_seed = seed * 1_000_003 + idx
        audio, series = generate_synthetic_clip(spec, clip_seed, grid=grid)
        stem = f"{domain_tag}_{idx:05d}"
        dsp.write_wav(out_dir / f"{stem}.wav", audio)
        write_label_file(out_dir / f"{stem}.csv", series)
        entries.append(
            ManifestEntry(
                audio=Path(f"{stem}.wav"), labels=Path(f"{stem}.csv"), domain_tag=domain_tag
            )
        )

    manifest_path = out_dir / "manifest.json"
    DatasetManifest(entries=tuple(entries), ratios=tuple(ratios), seed=seed).to_file(manifest_path)
    return manifest_path


def load_source(
    source: DataSource,
    grid: PitchGrid,
    mode: TargetMode,
    n_freq: int | None = None,
    domain_tag: str = "synthetic",
    verbose: bool = True,
) -> dict[Split, list[LabeledClip]]:
    """Materialize a configured corpus, either from its manifest or from its synthetic spec."""
    if source.manifest is not None:
        manifest = DatasetManifest.from_file(source.manifest)
        return load_corpus(manifest, grid, mode, n_freq=n_freq, verbose=verbose)

    assert source.synthetic is not None  # Guaranteed by DataSource validation
    if verbose:
        print(f"Generating {source.count} synthetic '{domain_tag}' clips.")
    return synthetic_corpus(
        source.synthetic,
        source.count,
        source.seed,
        grid,
        mode,
        source.ratios,
        n_freq=n_freq,
        domain_tag=domain_tag,
    )
