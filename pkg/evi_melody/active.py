from __future__ import annotations

import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from evi_melody import db
from evi_melody.checkpoint import Checkpoint
from evi_melody.config import ActiveConfig, Criterion, FinetuneConfig, Task, TrainConfig
from evi_melody.dataio import LabeledClip
from evi_melody.exceptions import ArgumentError, ConfigError
from evi_melody.network import (
    VOICING_THRESHOLD,
    ClipPrediction,
    FrameNetwork,
    evaluate_model,
    model_from_checkpoint,
    predict_batch,
    train,
)

EVIDENTIAL_TASKS = frozenset({Task.M1, Task.M2, Task.R1, Task.R2})
COMPATIBLE_TASKS = {
    Criterion.EPISTEMIC: EVIDENTIAL_TASKS,
    Criterion.ALEATORIC: EVIDENTIAL_TASKS,
    Criterion.TCP_CONFIDENCE: frozenset({Task.TCP}),
    Criterion.PREDICTED_VARIANCE: frozenset({Task.BETA_NLL}),
    Criterion.RANDOM: frozenset(Task),
}
CURVE_COLUMNS = ["criterion", "budget", "seed", "rpa", "rca", "oa"]


class PoolClip(t.Protocol):
    """The only parts of a clip that scoring may look at."""

    @property
    def features(self) -> t.Any: ...  # noqa: D102

    @property
    def source_id(self) -> str: ...  # noqa: D102


@dataclass(frozen=True, slots=True)
class SampleScore:
    """Clip-level acquisition score; larger is selected first."""

    sample_id: str
    criterion: Criterion
    score: float


@dataclass(frozen=True, slots=True)
class CurvePoint:  # noqa: D101
    criterion: Criterion
    budget: int
    seed: int
    rpa: float
    rca: float
    oa: float


def check_criterion(criterion: Criterion, task: Task) -> None:
    """Raise `ConfigError` if the model's task does not produce the criterion's uncertainty."""
    if task not in COMPATIBLE_TASKS[criterion]:
        raise ConfigError(f"Criterion '{criterion.value}' is not available for {task.value} models")


def _frame_values(prediction: ClipPrediction, criterion: Criterion) -> np.ndarray:
    match criterion:
        case Criterion.EPISTEMIC:
            values = prediction.epistemic
        case Criterion.ALEATORIC:
            values = prediction.aleatoric
        case Criterion.TCP_CONFIDENCE:
            values = None if prediction.confidence is None else 1 - prediction.confidence
        case Criterion.PREDICTED_VARIANCE:
            values = prediction.variance
        case _:
            raise ConfigError(f"No per-frame values for criterion '{criterion.value}'")

    if values is None:
        raise ConfigError(f"The model does not provide '{criterion.value}' values")
    return values


def score_samples(
    model: FrameNetwork,
    pool: t.Sequence[PoolClip],
    criterion: Criterion,
    seed: int = 0,
    voiced_only: bool = False,
) -> list[SampleScore]:
    """
    Score each pool clip by its mean per-frame uncertainty under `criterion`.

    The mean runs over every frame, or only the frames predicted as voiced if `voiced_only` is set
    (a clip without predicted-voiced frames then scores 0). For `tcp_confidence` the per-frame
    value is `1 - confidence`, so the least confident clips rank first. `random` scores are a
    permutation drawn from `seed`.

    Only clip features & ids are touched, labels are never read. Scores are returned ordered by
    descending score, ties broken by ascending sample id.
    """
    if not pool:
        raise ArgumentError("Cannot score an empty pool.")
    check_criterion(criterion, model.config.task)

    if criterion is Criterion.RANDOM:
        values = np.random.default_rng(seed).permutation(len(pool)).astype(np.float64)
    else:
        values = np.empty(len(pool))
        predictions = predict_batch(model, [clip.features for clip in pool])
        for idx, prediction in enumerate(predictions):
            frame_values = _frame_values(prediction, criterion)
            if voiced_only:
                voiced = prediction.voicing_prob >= VOICING_THRESHOLD
                values[idx] = frame_values[voiced].mean() if voiced.any() else 0.0
            else:
                values[idx] = frame_values.mean()

    if not np.all(np.isfinite(values)):
        raise ConfigError(f"Non-finite '{criterion.value}' scores; the model may have diverged")

    scores = [
        SampleScore(sample_id=clip.source_id, criterion=criterion, score=float(value))
        for clip, value in zip(pool, values)
    ]
    return sorted(scores, key=lambda s: (-s.score, s.sample_id))


def select_top_k(scores: t.Sequence[SampleScore], k: int) -> list[str]:
    """Sample ids of the `k` highest scores, ties going to the lexicographically smaller id."""
    if not 0 <= k <= len(scores):
        raise ArgumentError(f"Cannot select {k} samples from a pool of {len(scores)}")

    ranked = sorted(scores, key=lambda s: (-s.score, s.sample_id))
    return [s.sample_id for s in ranked[:k]]


def finetune(
    checkpoint: Checkpoint,
    clips: t.Sequence[LabeledClip],
    config: FinetuneConfig,
    task: Task,
    seed: int = 0,
    base_train: TrainConfig = TrainConfig(),
    verbose: bool = False,
) -> Checkpoint:
    """
    Fine-tune a copy of `checkpoint` on `clips` only, with a fresh optimizer.

    The loss hyperparameters come from `base_train`; the epoch count, batch size & learning rate
    from `config`. The KL anneal continues from the checkpoint's epoch. Zero epochs returns the
    checkpoint unchanged.
    """
    if checkpoint.model_config.task is not task:
        raise ConfigError(
            f"Checkpoint was trained for {checkpoint.model_config.task.value}, not {task.value}"
        )
    if not clips:
        raise ArgumentError("Fine-tuning requires at least one selected clip.")
    if config.epochs == 0:
        return checkpoint

    train_config = base_train.model_copy(
        update={
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "lr": config.lr,
            "seed": seed,
            "confidence_epochs": 0,
        }
    )
    model = model_from_checkpoint(checkpoint)
    result = train(
        model,
        clips,
        config=train_config,
        start_epoch=checkpoint.epoch,
        digest=checkpoint.config_digest,
        verbose=verbose,
    )
    return result.checkpoint


def _mean_scores(
    model: FrameNetwork, clips: t.Sequence[LabeledClip]
) -> tuple[float, float, float]:
    mean_row = evaluate_model(model, clips).iloc[-1]
    return float(mean_row["rpa"]), float(mean_row["rca"]), float(mean_row["oa"])


def adaptation_curve(
    base: Checkpoint,
    pool: t.Sequence[LabeledClip],
    test: t.Sequence[LabeledClip],
    config: ActiveConfig,
    base_train: TrainConfig = TrainConfig(),
    cache_digest: str | None = None,
    verbose: bool = True,
) -> list[CurvePoint]:
    """
    Build the accuracy-vs-budget table for every criterion.

    Each criterion gets one budget-0 row with the base model's metrics, recorded under the first
    seed. Every positive (criterion, budget, seed) cell selects its samples afresh from the base
    model's scores and fine-tunes from the base checkpoint; selections are not carried across
    budgets.

    If `cache_digest` is provided, finished cells are read from & written to the curve cache under
    that digest so an interrupted run can resume; the cache must already be initialized.
    """
    if not config.seeds:
        raise ConfigError("At least one seed is required.")

    task = base.model_config.task
    for criterion in config.criteria:
        check_criterion(criterion, task)

    base_model = model_from_checkpoint(base)
    base_rpa, base_rca, base_oa = _mean_scores(base_model, test)
    if verbose:
        print(f"Base model on {len(test)} test clips: OA {base_oa:.3f}")

    points = []
    for criterion in config.criteria:
        points.append(CurvePoint(criterion, 0, config.seeds[0], base_rpa, base_rca, base_oa))

        ranked: list[SampleScore] | None = None
        for budget in (b for b in config.budgets if b > 0):
            for seed in config.seeds:
                if cache_digest is not None:
                    cached = db.get_cell(cache_digest, criterion, budget, seed)
                    if cached is not None:
                        points.append(cached)
                        continue

                # Uncertainty criteria rank the pool the same for every seed
                if criterion is Criterion.RANDOM or ranked is None:
                    scores = score_samples(base_model, pool, criterion, seed, config.voiced_only)
                    if criterion is not Criterion.RANDOM:
                        ranked = scores
                else:
                    scores = ranked

                chosen = set(select_top_k(scores, budget))
                selected = [clip for clip in pool if clip.source_id in chosen]
                tuned = finetune(base, selected, config.finetune, task, seed, base_train)
                tuned_scores = _mean_scores(model_from_checkpoint(tuned), test)
                point = CurvePoint(criterion, budget, seed, *tuned_scores)
                points.append(point)

                if cache_digest is not None:
                    db.insert_cell(cache_digest, point)
                if verbose:
                    print(f"{criterion.value}, N={budget}, seed {seed}: OA {point.oa:.3f}")

    return points


def curve_to_frame(points: t.Sequence[CurvePoint]) -> pd.DataFrame:  # noqa: D103
    rows = [
        {
            "criterion": p.criterion.value,
            "budget": p.budget,
            "seed": p.seed,
            "rpa": p.rpa,
            "rca": p.rca,
            "oa": p.oa,
        }
        for p in points
    ]
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def write_curve_csv(points: t.Sequence[CurvePoint], filepath: Path) -> None:  # noqa: D103
    filepath.parent.mkdir(parents=True, exist_ok=True)
    curve_to_frame(points).to_csv(filepath, index=False, float_format="%.6f")


def write_plot_data(points: t.Sequence[CurvePoint], filepath: Path) -> None:
    """
    Write one whitespace-separated `budget median_oa` series per criterion.

    Each series is preceded by a `# <criterion>` line and series are separated by a blank line.
    """
    curve = curve_to_frame(points)
    medians = curve.groupby(["criterion", "budget"], sort=False)["oa"].median()

    blocks = []
    for criterion in curve["criterion"].unique():
        series = medians.loc[criterion].sort_index()
        lines = [f"# {criterion}", "budget median_oa"]
        lines.extend(f"{budget} {oa:.6f}" for budget, oa in series.items())
        blocks.append("\n".join(lines))

    filepath.parent.mkdir(parents=True, exist_ok=True)
    filepath.write_text("\n\n".join(blocks) + "\n")
