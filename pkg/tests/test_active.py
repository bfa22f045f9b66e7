from pathlib import Path

import numpy as np
import pandas as pd
import peewee as pw
import pytest

from evi_melody import active, db
from evi_melody.active import (
    CurvePoint,
    SampleScore,
    adaptation_curve,
    finetune,
    score_samples,
    select_top_k,
)
from evi_melody.checkpoint import Checkpoint
from evi_melody.config import (
    ActiveConfig,
    Criterion,
    FinetuneConfig,
    ModelConfig,
    SyntheticSpec,
    Task,
    TrainConfig,
)
from evi_melody.dataio import Split, synthetic_corpus
from evi_melody.exceptions import ArgumentError, ConfigError
from evi_melody.network import FrameNetwork, evaluate_model, model_from_checkpoint, predict, train
from evi_melody.optim import AdamState
from tests.utils import TINY_MODEL, LabelTrackingClip, tiny_clips

TEST_DB = pw.SqliteDatabase(":memory:")


def _scores(
    values: dict[str, float], criterion: Criterion = Criterion.EPISTEMIC
) -> list[SampleScore]:
    return [SampleScore(sample_id, criterion, score) for sample_id, score in values.items()]


SELECT_CASES = (
    ({"a": 0.9, "b": 0.1, "c": 0.5}, 2, ["a", "c"]),
    ({"a": 0.9, "b": 0.1, "c": 0.5}, 3, ["a", "c", "b"]),
    ({"a": 0.9, "b": 0.1, "c": 0.5}, 0, []),
    ({"b": 0.5, "a": 0.5, "c": 0.9}, 2, ["c", "a"]),
    ({"b": 0.5, "a": 0.5, "c": 0.9}, 1, ["c"]),
)


@pytest.mark.parametrize(("values", "k", "truth_ids"), SELECT_CASES)
def test_select_top_k(values: dict[str, float], k: int, truth_ids: list[str]) -> None:
    assert select_top_k(_scores(values), k) == truth_ids


@pytest.mark.parametrize("k", (-1, 4))
def test_select_top_k_out_of_range_raises(k: int) -> None:
    with pytest.raises(ArgumentError):
        select_top_k(_scores({"a": 0.9, "b": 0.1, "c": 0.5}), k)


def test_select_top_k_monotone_invariance() -> None:
    rng = np.random.default_rng(17)
    for _ in range(100):
        raw = rng.random(20)
        ids = [f"clip{i:02d}" for i in range(20)]
        k = int(rng.integers(0, 21))
        base = select_top_k(_scores(dict(zip(ids, raw))), k)

        for transform in (np.exp, lambda x: 3 * x + 1, np.sqrt):
            transformed = select_top_k(_scores(dict(zip(ids, transform(raw)))), k)
            assert set(transformed) == set(base)


@pytest.fixture
def m2_model() -> FrameNetwork:
    return FrameNetwork.build(TINY_MODEL(task=Task.M2))


@pytest.fixture
def tracked_pool(m2_model: FrameNetwork) -> list[LabelTrackingClip]:
    return [LabelTrackingClip(clip) for clip in tiny_clips(m2_model.config, n_clips=6, seed=3)]


@pytest.mark.parametrize("criterion", (Criterion.EPISTEMIC, Criterion.ALEATORIC, Criterion.RANDOM))
def test_scoring_never_reads_labels(
    m2_model: FrameNetwork, tracked_pool: list[LabelTrackingClip], criterion: Criterion
) -> None:
    score_samples(m2_model, tracked_pool, criterion, seed=1)
    assert all(clip.label_reads == 0 for clip in tracked_pool)


def test_score_is_mean_frame_uncertainty(
    m2_model: FrameNetwork, tracked_pool: list[LabelTrackingClip]
) -> None:
    ranked = score_samples(m2_model, tracked_pool, Criterion.EPISTEMIC)
    scores = {s.sample_id: s.score for s in ranked}
    for clip in tracked_pool:
        epistemic = predict(m2_model, clip.features).epistemic
        assert epistemic is not None
        assert scores[clip.source_id] == pytest.approx(epistemic.mean())


def test_scores_are_ordered(m2_model: FrameNetwork, tracked_pool: list[LabelTrackingClip]) -> None:
    scores = score_samples(m2_model, tracked_pool, Criterion.ALEATORIC)
    keys = [(-s.score, s.sample_id) for s in scores]
    assert keys == sorted(keys)
    assert all(s.criterion is Criterion.ALEATORIC for s in scores)


def test_voiced_only_scores(m2_model: FrameNetwork, tracked_pool: list[LabelTrackingClip]) -> None:
    scores = score_samples(m2_model, tracked_pool, Criterion.EPISTEMIC, voiced_only=True)
    by_id = {s.sample_id: s.score for s in scores}
    for clip in tracked_pool:
        pred = predict(m2_model, clip.features)
        assert pred.epistemic is not None
        voiced = pred.voicing_prob >= 0.5
        truth = pred.epistemic[voiced].mean() if voiced.any() else 0.0
        assert by_id[clip.source_id] == pytest.approx(truth)


def test_random_scores_are_a_seeded_permutation(
    m2_model: FrameNetwork, tracked_pool: list[LabelTrackingClip]
) -> None:
    first = score_samples(m2_model, tracked_pool, Criterion.RANDOM, seed=4)
    second = score_samples(m2_model, tracked_pool, Criterion.RANDOM, seed=4)

    assert first == second
    assert sorted(s.score for s in first) == list(range(len(tracked_pool)))


def test_tcp_scores_least_confident_first() -> None:
    config = TINY_MODEL(task=Task.TCP)
    model = FrameNetwork.build(config)
    pool = tiny_clips(config, n_clips=4)
    scores = score_samples(model, pool, Criterion.TCP_CONFIDENCE)

    for s in scores:
        clip = next(c for c in pool if c.source_id == s.sample_id)
        confidence = predict(model, clip.features).confidence
        assert confidence is not None
        assert s.score == pytest.approx(np.mean(1 - confidence))


def test_beta_nll_scores_predicted_variance() -> None:
    config = TINY_MODEL(task=Task.BETA_NLL)
    model = FrameNetwork.build(config)
    scores = score_samples(model, tiny_clips(config), Criterion.PREDICTED_VARIANCE)
    assert all(s.score > 0 for s in scores)


INCOMPATIBLE_CASES = (
    (Task.BETA_NLL, Criterion.EPISTEMIC),
    (Task.TCP, Criterion.ALEATORIC),
    (Task.M2, Criterion.PREDICTED_VARIANCE),
    (Task.M1, Criterion.TCP_CONFIDENCE),
)


@pytest.mark.parametrize(("task", "criterion"), INCOMPATIBLE_CASES)
def test_incompatible_criterion_raises(task: Task, criterion: Criterion) -> None:
    config = TINY_MODEL(task=task)
    with pytest.raises(ConfigError, match=criterion.value):
        score_samples(FrameNetwork.build(config), tiny_clips(config), criterion)


def test_score_empty_pool_raises(m2_model: FrameNetwork) -> None:
    with pytest.raises(ArgumentError):
        score_samples(m2_model, [], Criterion.EPISTEMIC)


@pytest.fixture
def base_checkpoint() -> Checkpoint:
    config = TINY_MODEL(task=Task.M2)
    model = FrameNetwork.build(config)
    result = train(
        model,
        tiny_clips(config, n_clips=3),
        config=TrainConfig(epochs=2, batch_size=1),
        verbose=False,
    )
    return result.checkpoint


FAST_FINETUNE = FinetuneConfig(epochs=2, batch_size=2, lr=1e-3)


def test_finetune_zero_epochs_is_identity(base_checkpoint: Checkpoint) -> None:
    clips = tiny_clips(base_checkpoint.model_config, n_clips=2, seed=9)
    tuned = finetune(base_checkpoint, clips, FinetuneConfig(epochs=0), Task.M2)

    assert tuned is base_checkpoint
    before = evaluate_model(model_from_checkpoint(base_checkpoint), clips)
    after = evaluate_model(model_from_checkpoint(tuned), clips)
    pd.testing.assert_frame_equal(before, after)


def test_finetune_is_deterministic(base_checkpoint: Checkpoint) -> None:
    clips = tiny_clips(base_checkpoint.model_config, n_clips=2, seed=9)
    first = finetune(base_checkpoint, clips, FAST_FINETUNE, Task.M2, seed=3)
    second = finetune(base_checkpoint, clips, FAST_FINETUNE, Task.M2, seed=3)

    for name, values in first.weights.items():
        np.testing.assert_array_equal(second.weights[name], values)


def test_finetune_leaves_base_untouched(base_checkpoint: Checkpoint) -> None:
    snapshot = {name: values.copy() for name, values in base_checkpoint.weights.items()}
    clips = tiny_clips(base_checkpoint.model_config, n_clips=2, seed=9)
    tuned = finetune(base_checkpoint, clips, FAST_FINETUNE, Task.M2)

    for name, values in snapshot.items():
        np.testing.assert_array_equal(base_checkpoint.weights[name], values)
    assert not np.array_equal(tuned.weights["head.w"], snapshot["head.w"])
    assert tuned.epoch == base_checkpoint.epoch + FAST_FINETUNE.epochs


def test_finetune_task_mismatch_raises(base_checkpoint: Checkpoint) -> None:
    clips = tiny_clips(base_checkpoint.model_config, n_clips=1)
    with pytest.raises(ConfigError):
        finetune(base_checkpoint, clips, FAST_FINETUNE, Task.M1)


def test_finetune_empty_selection_raises(base_checkpoint: Checkpoint) -> None:
    with pytest.raises(ArgumentError):
        finetune(base_checkpoint, [], FAST_FINETUNE, Task.M2)


def _tiny_active(**kwargs: object) -> ActiveConfig:
    params: dict = {
        "criteria": (Criterion.EPISTEMIC, Criterion.RANDOM),
        "budgets": (0, 2, 4),
        "seeds": (1, 2),
        "finetune": FinetuneConfig(epochs=1, batch_size=2, lr=1e-3),
    }
    params.update(kwargs)
    return ActiveConfig(**params)


def test_curve_cardinality_and_shared_base(base_checkpoint: Checkpoint) -> None:
    config = base_checkpoint.model_config
    pool = tiny_clips(config, n_clips=6, seed=10)
    test = tiny_clips(config, n_clips=2, seed=20)
    points = adaptation_curve(base_checkpoint, pool, test, _tiny_active(), verbose=False)

    # One base row per criterion, then every positive (budget, seed) cell
    assert len(points) == 2 * (1 + 2 * 2)

    base_rows = [p for p in points if p.budget == 0]
    assert [p.criterion for p in base_rows] == [Criterion.EPISTEMIC, Criterion.RANDOM]
    assert all(p.seed == 1 for p in base_rows)
    assert len({(p.rpa, p.rca, p.oa) for p in base_rows}) == 1

    base_oa = evaluate_model(model_from_checkpoint(base_checkpoint), test)["oa"].iloc[-1]
    assert base_rows[0].oa == pytest.approx(base_oa)


def test_curve_reads_only_selected_labels(base_checkpoint: Checkpoint) -> None:
    config = base_checkpoint.model_config
    pool = [LabelTrackingClip(clip) for clip in tiny_clips(config, n_clips=6, seed=10)]
    test = tiny_clips(config, n_clips=2, seed=20)
    active_config = _tiny_active(criteria=(Criterion.EPISTEMIC,), budgets=(0, 2), seeds=(1,))
    adaptation_curve(
        base_checkpoint, pool, test, active_config, verbose=False  # type: ignore[arg-type]
    )

    ranked = score_samples(model_from_checkpoint(base_checkpoint), pool, Criterion.EPISTEMIC)
    selected = set(select_top_k(ranked, 2))
    for clip in pool:
        assert (clip.label_reads > 0) == (clip.source_id in selected)


def test_curve_is_deterministic(base_checkpoint: Checkpoint) -> None:
    config = base_checkpoint.model_config
    pool = tiny_clips(config, n_clips=6, seed=10)
    test = tiny_clips(config, n_clips=2, seed=20)
    active_config = _tiny_active(budgets=(0, 3))

    first = adaptation_curve(base_checkpoint, pool, test, active_config, verbose=False)
    second = adaptation_curve(base_checkpoint, pool, test, active_config, verbose=False)
    assert first == second


def test_curve_rejects_incompatible_criterion(base_checkpoint: Checkpoint) -> None:
    pool = tiny_clips(base_checkpoint.model_config, n_clips=2)
    active_config = _tiny_active(criteria=(Criterion.TCP_CONFIDENCE,))
    with pytest.raises(ConfigError):
        adaptation_curve(base_checkpoint, pool, pool, active_config, verbose=False)


def test_curve_budget_larger_than_pool_raises(base_checkpoint: Checkpoint) -> None:
    pool = tiny_clips(base_checkpoint.model_config, n_clips=2)
    with pytest.raises(ArgumentError):
        adaptation_curve(base_checkpoint, pool, pool, _tiny_active(budgets=(0, 3)), verbose=False)


@pytest.fixture
def curve_cache(request: pytest.FixtureRequest) -> None:
    TEST_DB.bind([db.CurveCellEntry], bind_refs=False, bind_backrefs=False)

    TEST_DB.connect()
    db.create_tables()

    def teardown() -> None:
        TEST_DB.drop_tables(db.CurveCellEntry)
        TEST_DB.close()
        db.cache_db.bind([db.CurveCellEntry], bind_refs=False, bind_backrefs=False)

    request.addfinalizer(teardown)


def test_curve_resumes_from_cache(
    base_checkpoint: Checkpoint, curve_cache: None, monkeypatch: pytest.MonkeyPatch
) -> None:
    config = base_checkpoint.model_config
    pool = tiny_clips(config, n_clips=6, seed=10)
    test = tiny_clips(config, n_clips=2, seed=20)
    digest = "c" * 64

    first = adaptation_curve(
        base_checkpoint, pool, test, _tiny_active(), cache_digest=digest, verbose=False
    )
    assert db.CurveCellEntry.select().count() == 2 * 2 * 2

    def _no_finetune(*args: object, **kwargs: object) -> Checkpoint:
        raise AssertionError("Cached cells should not be fine-tuned again")

    monkeypatch.setattr(active, "finetune", _no_finetune)
    second = adaptation_curve(
        base_checkpoint, pool, test, _tiny_active(), cache_digest=digest, verbose=False
    )
    assert second == first


def test_curve_csv(tmp_path: Path) -> None:
    points = [
        CurvePoint(Criterion.EPISTEMIC, 0, 1, 0.5, 0.6, 0.7),
        CurvePoint(Criterion.EPISTEMIC, 25, 1, 0.55, 0.65, 0.75),
    ]
    filepath = tmp_path / "curve.csv"
    active.write_curve_csv(points, filepath)

    lines = filepath.read_text().splitlines()
    assert lines[0] == "criterion,budget,seed,rpa,rca,oa"
    assert lines[1] == "epistemic,0,1,0.500000,0.600000,0.700000"


def test_plot_data_medians(tmp_path: Path) -> None:
    points = [
        CurvePoint(Criterion.EPISTEMIC, 0, 1, 0.5, 0.5, 0.5),
        *(CurvePoint(Criterion.EPISTEMIC, 10, seed, 0.0, 0.0, oa) for seed, oa in ((1, 0.6), (2, 0.9), (3, 0.7))),  # noqa: E501
        CurvePoint(Criterion.RANDOM, 0, 1, 0.5, 0.5, 0.5),
        CurvePoint(Criterion.RANDOM, 10, 1, 0.0, 0.0, 0.55),
    ]
    filepath = tmp_path / "curve.dat"
    active.write_plot_data(points, filepath)

    truth = "# epistemic\nbudget median_oa\n0 0.500000\n10 0.700000\n\n# random\nbudget median_oa\n0 0.500000\n10 0.550000\n"  # noqa: E501
    assert filepath.read_text() == truth


def _median_oa(points: list[CurvePoint], criterion: Criterion, budget: int) -> float:
    cell = [p.oa for p in points if p.criterion is criterion and p.budget == budget]
    return float(np.median(cell))


@pytest.mark.slow
def test_epistemic_selection_dominates() -> None:
    config = ModelConfig.desk(task=Task.M2)
    grid = config.grid()
    mode = config.task.target_mode

    source = synthetic_corpus(
        SyntheticSpec.source_domain(), 64, 0, grid, mode, (0.70, 0.15, 0.15), config.n_freq, "src"
    )
    target = synthetic_corpus(
        SyntheticSpec.target_domain(), 300, 1, grid, mode, (0.8, 0.2), config.n_freq, "tgt"
    )

    model = FrameNetwork.build(config)
    base = train(
        model,
        source[Split.TRAIN],
        source[Split.VALIDATION],
        TrainConfig(),
        AdamState(),
        verbose=False,
    ).checkpoint

    active_config = ActiveConfig(budgets=(0, 25, 50, 100, 200))
    points = adaptation_curve(
        base, target[Split.TRAIN], target[Split.TEST], active_config, verbose=False
    )

    base_rows = {(p.rpa, p.rca, p.oa) for p in points if p.budget == 0}
    assert len(base_rows) == 1

    for budget in (50, 100, 200):
        epistemic = _median_oa(points, Criterion.EPISTEMIC, budget)
        assert epistemic >= _median_oa(points, Criterion.ALEATORIC, budget)
        assert epistemic >= _median_oa(points, Criterion.RANDOM, budget)

    gain = _median_oa(points, Criterion.EPISTEMIC, 200) - _median_oa(points, Criterion.EPISTEMIC, 0)
    assert gain >= 0.10
