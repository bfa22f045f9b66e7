import json
import typing as t
from contextlib import contextmanager
from functools import partial
from pathlib import Path

import click
import pandas as pd
import typer

from evi_melody import active, dataio, db
from evi_melody.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from evi_melody.cli_cache import cache_cli
from evi_melody.config import (
    DEFAULT_OUT_DIR,
    ExperimentConfig,
    ModelConfig,
    SyntheticSpec,
    Task,
    config_digest,
    load_json_model,
    validated,
)
from evi_melody.dataio import Split
from evi_melody.exceptions import (
    ArgumentError,
    AudioFormatError,
    ConfigError,
    DomainError,
    GridRangeError,
    LabelFormatError,
    LabelParseError,
    NumericError,
    TrainingDivergedError,
)
from evi_melody.network import (
    BestCheckpoint,
    FrameNetwork,
    evaluate_model,
    model_from_checkpoint,
    rescore_checkpoint,
    train,
)

evimelody_cli = typer.Typer(add_completion=False)
evimelody_cli.add_typer(cache_cli, name="cache", help="Manage the adaptation curve job cache.")

CONFIG_FILENAME = "config.json"
CHECKPOINT_FILENAME = "checkpoint.bin"
LATEST_CHECKPOINT_FILENAME = "checkpoint_latest.bin"
TRAIN_LOG_FILENAME = "training_log.csv"
METRICS_FILENAME = "metrics.csv"
METRICS_SIDECAR_FILENAME = "metrics.json"
CURVE_FILENAME = "curve.csv"
PLOT_DATA_FILENAME = "plot_data.txt"
FLOAT_FORMAT = "%.6f"


class ConfigFailure(click.ClickException):  # noqa: D101
    exit_code = 2


class IOFailure(click.ClickException):  # noqa: D101
    exit_code = 3


class NumericFailure(click.ClickException):  # noqa: D101
    exit_code = 4


@contextmanager
def _exit_codes() -> t.Iterator[None]:
    """Map package errors onto the CLI's exit codes."""
    try:
        yield
    except (ConfigError, ArgumentError, DomainError, GridRangeError) as e:
        raise ConfigFailure(str(e)) from e
    except (OSError, AudioFormatError, LabelFormatError, LabelParseError) as e:
        raise IOFailure(str(e)) from e
    except NumericError as e:
        raise NumericFailure(str(e)) from e


def _load_config(
    config_path: Path | None, task: Task | None, seed: int | None, out: Path | None
) -> ExperimentConfig:
    """Load the experiment config & apply the command line overrides on top of it."""
    raw: dict[str, t.Any] = {}
    if config_path is not None:
        try:
            raw = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Could not decode JSON config '{config_path}': {e}") from e

    if task is not None:
        raw["task"] = task.value
    if seed is not None:
        model = raw.setdefault("model", ModelConfig.desk().model_dump(mode="json"))
        model["seed"] = seed
        raw.setdefault("train", {})["seed"] = seed
    if out is not None:
        raw["out_dir"] = str(out)

    return validated(ExperimentConfig, raw)


def _echo_config(config: ExperimentConfig, out_dir: Path, resume: bool) -> str:
    """
    Write the fully resolved config & its digest into `out_dir`, returning the digest.

    When resuming, a previously echoed config with a different digest aborts the run.
    """
    digest = config_digest(config)
    echo_path = out_dir / CONFIG_FILENAME
    if resume and echo_path.exists():
        previous = json.loads(echo_path.read_text()).get("config_digest")
        if previous != digest:
            raise ConfigError(
                f"Config digest {digest[:12]} does not match the run in '{out_dir}' "
                f"({str(previous)[:12]}), refusing to resume."
            )

    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config_digest": digest, "config": config.model_dump(mode="json")}
    echo_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return digest


def _write_csv(df: pd.DataFrame, filepath: Path) -> None:
    filepath.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(filepath, index=False, float_format=FLOAT_FORMAT)


def _persist_epoch(
    out_dir: Path,
    prior_log: list[dict[str, float]],
    latest: Checkpoint,
    kept: Checkpoint,
    log: list[dict[str, float]],
) -> None:
    """
    Write the training log, the kept checkpoint & the latest checkpoint after an epoch.

    The latest checkpoint goes last, so a run interrupted mid-write resumes from the epoch before.
    """
    _write_csv(pd.DataFrame(prior_log + log), out_dir / TRAIN_LOG_FILENAME)
    save_checkpoint(kept, out_dir / CHECKPOINT_FILENAME)
    save_checkpoint(latest, out_dir / LATEST_CHECKPOINT_FILENAME)


@evimelody_cli.command()
def synth(
    spec_file: Path = typer.Option(None, "--config", dir_okay=False),
    count: int = typer.Option(10, min=1),
    seed: int = typer.Option(0),
    out: Path = typer.Option(DEFAULT_OUT_DIR / "synth", file_okay=False, dir_okay=True),
    target_domain: bool = typer.Option(False, help="Use the shifted target-domain defaults."),
    domain_tag: str = typer.Option("synthetic"),
) -> None:
    """Generate a labeled synthetic corpus (WAV + label CSV pairs & a manifest)."""
    with _exit_codes():
        if spec_file is not None:
            spec = load_json_model(SyntheticSpec, spec_file)
        elif target_domain:
            spec = SyntheticSpec.target_domain()
        else:
            spec = SyntheticSpec.source_domain()

        manifest_path = dataio.write_synthetic_corpus(
            spec, count, seed, out, domain_tag=domain_tag
        )
        payload = {"config_digest": config_digest(spec), "config": spec.model_dump(mode="json")}
        (out / CONFIG_FILENAME).write_text(json.dumps(payload, indent=2, sort_keys=True))

    print(f"Wrote {count} clips & manifest to '{manifest_path}'")


@evimelody_cli.command(name="train")
def train_cmd(
    config_path: Path = typer.Option(None, "--config", dir_okay=False),
    task: Task = typer.Option(None, "--task"),
    seed: int = typer.Option(None, "--seed"),
    out: Path = typer.Option(None, "--out", file_okay=False, dir_okay=True),
    resume: bool = typer.Option(False, "--resume"),
    verbose: bool = typer.Option(True),
) -> None:
    """Train a base model on the configured source corpus."""
    with _exit_codes():
        config = _load_config(config_path, task, seed, out)
        digest = _echo_config(config, config.out_dir, resume)
        checkpoint_path = config.out_dir / CHECKPOINT_FILENAME
        log_path = config.out_dir / TRAIN_LOG_FILENAME

        grid = config.model.grid()
        corpus = dataio.load_source(
            config.source, grid, config.task.target_mode, config.model.n_freq, "source", verbose
        )

        model = FrameNetwork.build(config.model)
        val_clips = corpus.get(Split.VALIDATION)
        train_config = config.train
        optimizer = None
        start_epoch = 0
        best: BestCheckpoint | None = None
        prior_log: list[dict[str, float]] = []
        latest_path = config.out_dir / LATEST_CHECKPOINT_FILENAME
        if resume and latest_path.exists():
            latest = load_checkpoint(latest_path, expected_digest=digest)
            if latest.epoch >= config.train.epochs:
                print(f"Training already finished at epoch {latest.epoch}, nothing to resume")
                return

            model.load_state(latest.weights)
            optimizer, start_epoch = latest.optimizer, latest.epoch
            remaining = config.train.epochs - start_epoch
            train_config = train_config.model_copy(update={"epochs": remaining})
            if log_path.exists():
                previous = pd.read_csv(log_path)
                prior_log = previous[previous["epoch"] <= start_epoch].to_dict("records")
            if val_clips and checkpoint_path.exists():
                kept = load_checkpoint(checkpoint_path, expected_digest=digest)
                best = rescore_checkpoint(kept, val_clips, train_config)
            if verbose:
                print(f"Resuming from epoch {start_epoch}, {remaining} epoch(s) remaining")

        try:
            result = train(
                model,
                corpus[Split.TRAIN],
                val_clips,
                config=train_config,
                optimizer=optimizer,
                start_epoch=start_epoch,
                digest=digest,
                verbose=verbose,
                best=best,
                on_epoch=partial(_persist_epoch, config.out_dir, prior_log),
            )
        except TrainingDivergedError as e:
            _write_csv(pd.DataFrame(prior_log + e.log), log_path)
            if e.last_good is not None:
                save_checkpoint(e.last_good, checkpoint_path)
            raise

        save_checkpoint(result.checkpoint, checkpoint_path)
        _write_csv(pd.DataFrame(prior_log + result.log), log_path)

    print(f"Checkpoint written to '{checkpoint_path}'")


@evimelody_cli.command(name="eval")
def eval_cmd(
    checkpoint: Path = typer.Option(..., dir_okay=False),
    manifest: Path = typer.Option(None, dir_okay=False, help="Evaluate every entry of a manifest."),
    config_path: Path = typer.Option(None, "--config", dir_okay=False),
    out: Path = typer.Option(None, "--out", file_okay=False, dir_okay=True),
    verbose: bool = typer.Option(True),
) -> None:
    """
    Score a checkpoint, writing per-track & mean RPA/RCA/OA.

    Clips come from `--manifest` if provided, otherwise from the test split of the configured source
    corpus.
    """
    with _exit_codes():
        ckpt = load_checkpoint(checkpoint)
        model = model_from_checkpoint(ckpt)
        grid = ckpt.model_config.grid()
        mode = ckpt.model_config.task.target_mode
        n_freq = ckpt.model_config.n_freq

        if manifest is not None:
            clips = dataio.load_entries(
                dataio.DatasetManifest.from_file(manifest), grid, mode, n_freq=n_freq
            )
            out_dir = out or DEFAULT_OUT_DIR
        else:
            config = _load_config(config_path, ckpt.model_config.task, None, out)
            corpus = dataio.load_source(config.source, grid, mode, n_freq, "source", verbose)
            clips = corpus[Split.TEST]
            out_dir = config.out_dir

        scores = evaluate_model(model, clips)
        _write_csv(scores, out_dir / METRICS_FILENAME)
        sidecar = {"config_digest": ckpt.config_digest, "checkpoint": str(checkpoint)}
        (out_dir / METRICS_SIDECAR_FILENAME).write_text(json.dumps(sidecar, indent=2))

    mean_row = scores.iloc[-1]
    print(
        f"{len(clips)} clips: RPA {mean_row['rpa']:.3f}, RCA {mean_row['rca']:.3f}, "
        f"OA {mean_row['oa']:.3f}"
    )


@evimelody_cli.command()
def curve(
    config_path: Path = typer.Option(None, "--config", dir_okay=False),
    task: Task = typer.Option(None, "--task"),
    seed: int = typer.Option(None, "--seed"),
    out: Path = typer.Option(None, "--out", file_okay=False, dir_okay=True),
    resume: bool = typer.Option(False, "--resume"),
    verbose: bool = typer.Option(True),
) -> None:
    """
    Build active-learning adaptation curves from the base checkpoint in the output directory.

    With `--resume`, cells already finished under the same config are read from the job cache.
    """
    with _exit_codes():
        config = _load_config(config_path, task, seed, out)
        if config.target is None:
            raise ConfigError("An adaptation curve requires a 'target' data source.")

        digest = _echo_config(config, config.out_dir, resume=True)
        base = load_checkpoint(config.out_dir / CHECKPOINT_FILENAME, expected_digest=digest)

        grid = config.model.grid()
        corpus = dataio.load_source(
            config.target, grid, config.task.target_mode, config.model.n_freq, "target", verbose
        )

        db.init_cache(db.cache_path(config.out_dir))
        if not resume:
            db.clear_cells(digest)

        points = active.adaptation_curve(
            base,
            corpus[Split.TRAIN],
            corpus[Split.TEST],
            config.active,
            base_train=config.train,
            cache_digest=digest,
            verbose=verbose,
        )
        active.write_curve_csv(points, config.out_dir / CURVE_FILENAME)
        active.write_plot_data(points, config.out_dir / PLOT_DATA_FILENAME)

    print(f"Wrote {len(points)} curve rows to '{config.out_dir / CURVE_FILENAME}'")


if __name__ == "__main__":  # pragma: no cover
    evimelody_cli()
