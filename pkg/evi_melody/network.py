"""
Frame-wise residual network with a voicing head & a task head.

The trunk is a stack of bottleneck residual blocks, each max-pooling along frequency only so the
time axis, and therefore the frame alignment with the labels, is preserved. Per-frame features
are read out either by averaging over the remaining frequency positions or by flattening them.
"""

from __future__ import annotations

import datetime as dt
import math
import time
import typing as t
from copy import deepcopy
from dataclasses import dataclass
from functools import partial

import humanize
import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy import special

from evi_melody import autograd as ag
from evi_melody import evidential as ev
from evi_melody.autograd import Tensor
from evi_melody.checkpoint import Checkpoint
from evi_melody.config import ModelConfig, Task, TrainConfig
from evi_melody.dataio import LabeledClip
from evi_melody.dsp import FeatureClip
from evi_melody.exceptions import ConfigError, NumericError, TrainingDivergedError
from evi_melody.metrics import score_track
from evi_melody.optim import AdamHyper, AdamState, adam_step
from evi_melody.pitchgrid import PitchGrid, TargetMode, TargetScaler, bins_to_hz, cents_to_hz

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
Features = t.Union[FeatureClip, t.Sequence[FeatureClip], FloatArray]

VOICING_THRESHOLD = 0.5
CONFIDENCE_PREFIX = "confidence."

HUMANIZED_DELTA = partial(humanize.precisedelta, minimum_unit="seconds", format="%d")


@dataclass(eq=False)
class FrameNetwork:
    """
    Parameters, batch-norm buffers & dropout RNG of one network instance.

    Parameter names are dotted paths, e.g. `block0.reduce.w`; every name ending in `.w` is a weight
    subject to the L2 penalty.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    buffers: dict[str, FloatArray]
    dropout_rng: np.random.Generator

    @classmethod
    def build(cls, config: ModelConfig) -> FrameNetwork:
        """Freshly initialize a network, He-uniform weights drawn from `config.seed`."""
        rng = np.random.default_rng(config.seed)
        params: dict[str, Tensor] = {}
        buffers: dict[str, FloatArray] = {}
        he_gain = math.sqrt(2 / (1 + config.leaky_slope**2))

        def _weight(name: str, shape: tuple[int, int], gain: float = he_gain) -> None:
            bound = gain * math.sqrt(3 / shape[0])
            params[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)

        def _bias(name: str, width: int) -> None:
            params[name] = Tensor(np.zeros(width), requires_grad=True, name=name)

        def _norm(name: str, width: int) -> None:
            for suffix, init in (("gamma", np.ones(width)), ("beta", np.zeros(width))):
                full_name = f"{name}.{suffix}"
                params[full_name] = Tensor(init, requires_grad=True, name=full_name)
            buffers[f"{name}.running_mean"] = np.zeros(width)
            buffers[f"{name}.running_var"] = np.ones(width)

        c_in = 1
        for idx, c_out in enumerate(config.block_filters):
            mid = max(c_out // config.bottleneck_ratio, 1)
            _weight(f"block{idx}.reduce.w", (c_in, mid))
            _norm(f"block{idx}.bn1", mid)
            _weight(f"block{idx}.conv.w", (mid * 9, mid))
            _norm(f"block{idx}.bn2", mid)
            _weight(f"block{idx}.expand.w", (mid, c_out))
            _norm(f"block{idx}.bn3", c_out)
            if c_in != c_out:
                _weight(f"block{idx}.skip.w", (c_in, c_out))
            c_in = c_out

        width = readout_width(config)
        _weight("voicing.w", (width, 1), gain=1.0)
        _bias("voicing.b", 1)
        _weight("head.w", (width, config.head_width), gain=1.0)
        _bias("head.b", config.head_width)
        if config.task is Task.TCP:
            _weight(f"{CONFIDENCE_PREFIX}w", (width, 1), gain=1.0)
            _bias(f"{CONFIDENCE_PREFIX}b", 1)

        return cls(
            config=config,
            params=params,
            buffers=buffers,
            dropout_rng=np.random.default_rng([config.seed, 1]),
        )

    @property
    def weight_names(self) -> list[str]:  # noqa: D102
        return [name for name in self.params if name.endswith(".w")]

    @property
    def trunk_params(self) -> dict[str, Tensor]:
        """Every parameter except the auxiliary confidence head."""
        return {k: v for k, v in self.params.items() if not k.startswith(CONFIDENCE_PREFIX)}

    @property
    def confidence_params(self) -> dict[str, Tensor]:  # noqa: D102
        return {k: v for k, v in self.params.items() if k.startswith(CONFIDENCE_PREFIX)}

    def state_dict(self) -> dict[str, FloatArray]:
        """Copies of every parameter & buffer."""
        state = {name: param.data.copy() for name, param in self.params.items()}
        state.update({name: buf.copy() for name, buf in self.buffers.items()})
        return state

    def load_state(self, weights: t.Mapping[str, FloatArray]) -> None:
        """Overwrite parameters & buffers in place; names and shapes must match exactly."""
        expected = set(self.params) | set(self.buffers)
        if set(weights) != expected:
            diff = sorted(set(weights) ^ expected)
            raise ConfigError(f"Checkpoint tensors do not match the model: {', '.join(diff)}")

        for name, values in weights.items():
            current = self.params[name].data if name in self.params else self.buffers[name]
            if current.shape != values.shape:
                raise ConfigError(f"Shape mismatch for '{name}': {values.shape} != {current.shape}")

            if name in self.params:
                self.params[name].assign(values.copy())
            else:
                self.buffers[name][...] = values

    def snapshot(self, optimizer: AdamState, epoch: int, digest: str = "") -> Checkpoint:
        return Checkpoint(
            model_config=self.config,
            weights=self.state_dict(),
            optimizer=deepcopy(optimizer),
            config_digest=digest,
            epoch=epoch,
        )


def readout_width(config: ModelConfig) -> int:
    """Per-frame feature width seen by the heads."""
    n_channels = config.block_filters[-1]
    if config.readout == "mean":
        return n_channels

    n_freq = config.n_freq // config.pooling ** len(config.block_filters)
    return n_freq * n_channels


def model_from_checkpoint(ckpt: Checkpoint) -> FrameNetwork:  # noqa: D103
    model = FrameNetwork.build(ckpt.model_config)
    model.load_state(ckpt.weights)
    return model


@dataclass(frozen=True, slots=True, eq=False)
class NetworkOutputs:
    """Graph nodes of one forward pass; `readout` is the per-frame feature before dropout."""

    voicing: Tensor  # (N, T) logits
    head: Tensor  # (N, T, head_width)
    readout: Tensor  # (N, T, D)
    confidence: Tensor | None = None  # (N, T) logits


def as_batch(features: Features) -> FloatArray:
    """Stack clip feature matrices into an `(N, T, F)` array."""
    if isinstance(features, FeatureClip):
        return features.matrix[np.newaxis]
    if isinstance(features, np.ndarray):
        return features[np.newaxis] if features.ndim == 2 else features

    return np.stack([clip.matrix for clip in features])


def _conv_bn(
    model: FrameNetwork, x: Tensor, conv: str, norm: str, training: bool, spatial: bool = False
) -> Tensor:
    w = model.params[f"{conv}.w"]
    y = ag.conv3x3(x, w) if spatial else ag.matmul(x, w)
    return ag.batch_norm(
        y,
        model.params[f"{norm}.gamma"],
        model.params[f"{norm}.beta"],
        model.buffers[f"{norm}.running_mean"],
        model.buffers[f"{norm}.running_var"],
        training=training,
    )


def _bottleneck(model: FrameNetwork, idx: int, x: Tensor, training: bool) -> Tensor:
    slope = model.config.leaky_slope
    prefix = f"block{idx}"

    h = ag.leaky_relu(_conv_bn(model, x, f"{prefix}.reduce", f"{prefix}.bn1", training), slope)
    h = ag.leaky_relu(
        _conv_bn(model, h, f"{prefix}.conv", f"{prefix}.bn2", training, spatial=True), slope
    )
    h = _conv_bn(model, h, f"{prefix}.expand", f"{prefix}.bn3", training)

    skip_name = f"{prefix}.skip.w"
    skip = ag.matmul(x, model.params[skip_name]) if skip_name in model.params else x
    return ag.max_pool_freq(ag.leaky_relu(ag.add(h, skip), slope), model.config.pooling)


def forward(
    model: FrameNetwork,
    features: Features,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> NetworkOutputs:
    """
    Run the network over one clip or a batch of clips.

    Dropout is only active when `training`, drawing from `rng` or the model's own dropout RNG.
    """
    x = as_batch(features)
    if x.ndim != 3 or x.shape[-1] != model.config.n_freq:
        raise ConfigError(
            f"Expected (batch, frames, {model.config.n_freq}) features, received: {x.shape}"
        )

    h = Tensor(x[..., np.newaxis])
    for idx in range(len(model.config.block_filters)):
        h = _bottleneck(model, idx, h, training)

    readout = ag.mean_axis(h, axis=2) if model.config.readout == "mean" else ag.merge_last(h)
    feats = ag.dropout(readout, model.config.dropout_rate, rng or model.dropout_rng, training)

    p = model.params
    confidence = None
    if f"{CONFIDENCE_PREFIX}w" in p:
        confidence = ag.squeeze_last(
            ag.linear(feats, p[f"{CONFIDENCE_PREFIX}w"], p[f"{CONFIDENCE_PREFIX}b"])
        )

    return NetworkOutputs(
        voicing=ag.squeeze_last(ag.linear(feats, p["voicing.w"], p["voicing.b"])),
        head=ag.linear(feats, p["head.w"], p["head.b"]),
        readout=readout,
        confidence=confidence,
    )


@dataclass(frozen=True, slots=True, eq=False)
class BatchTargets:
    """Flattened per-frame targets for a batch of clips."""

    voiced: FloatArray  # 0/1
    mask: FloatArray  # frames covered by the task loss
    bins: IntArray  # -1 where unvoiced
    onehot: FloatArray | None  # class tasks only
    y: FloatArray  # regression target in the normalized model space


def encode_targets(clips: t.Sequence[LabeledClip], task: Task, grid: PitchGrid) -> BatchTargets:
    """
    Flatten the clips' frame targets into the arrays consumed by the task loss.

    R1 & R2 regress every frame, unvoiced frames onto the sentinel value below the grid.
    """
    frames = [target for clip in clips for target in clip.targets]
    voiced = np.array([target.voiced for target in frames], dtype=np.float64)
    bins = np.array([target.bin_index if target.voiced else -1 for target in frames], dtype=int)
    scaler = TargetScaler.for_mode(grid, task.target_mode)

    onehot = None
    values = np.full(voiced.shape, scaler.unvoiced_value)
    match task.target_mode:
        case TargetMode.CLASS:
            onehot = np.zeros((voiced.size, grid.n_bins))
            voiced_idx = np.flatnonzero(voiced)
            onehot[voiced_idx, bins[voiced_idx]] = 1.0
        case TargetMode.CENTS:
            for idx, target in enumerate(frames):
                if target.voiced:
                    values[idx] = target.bin_index * grid.cents_per_bin
        case TargetMode.HZ:
            for idx, target in enumerate(frames):
                if target.voiced:
                    values[idx] = target.hz_value

    return BatchTargets(
        voiced=voiced,
        mask=voiced if task.trains_voicing else np.ones_like(voiced),
        bins=bins,
        onehot=onehot,
        y=scaler.to_model(values),
    )


def task_loss(
    task: Task, outputs: NetworkOutputs, targets: BatchTargets, config: TrainConfig, lam: float
) -> Tensor:
    """
    Assemble `bce + w * task_loss` as a single graph node.

    `lam` is the annealed KL coefficient, used by M1 only; the NIG tasks use the fixed
    `config.nig_coupling`.
    """
    raw = outputs.head.data.reshape(targets.voiced.size, -1)
    match task:
        case Task.M1:
            head_value, head_grad = ev.loss_m1(
                ev.dirichlet_from_logits(raw).alpha, targets.onehot, targets.mask, lam
            )
            head_grad = head_grad * ev.dirichlet_from_logits_grad(raw)
        case Task.TCP:
            head_value, head_grad = ev.softmax_cross_entropy(raw, targets.onehot, targets.mask)
        case Task.BETA_NLL:
            head_value, head_grad = ev.loss_beta_nll(
                raw[:, 0], raw[:, 1], targets.y, targets.mask, config.beta_nll_beta
            )
        case _:
            head_value, head_grad = ev.loss_m2(
                ev.nig_from_raw(raw), targets.y, targets.mask, config.nig_coupling
            )
            head_grad = head_grad * ev.nig_from_raw_grad(raw)

    w = config.evidential_weight
    inputs = [outputs.head]
    grads = [w * head_grad.reshape(outputs.head.shape)]
    bce_value = 0.0
    if task.trains_voicing:
        bce = ev.bce_with_logits(outputs.voicing.data.reshape(-1), targets.voiced)
        bce_value = bce.value
        inputs.append(outputs.voicing)
        grads.append(bce.grad.reshape(outputs.voicing.shape))

    return ag.loss_node(ev.total_loss(task, bce_value, head_value, w), inputs, grads)


def parameter_gradients(
    model: FrameNetwork, loss: Tensor, names: t.Iterable[str] | None = None
) -> dict[str, FloatArray]:
    """Backpropagate `loss` & map gradients onto parameter names; unreached parameters get 0."""
    leaves = ag.backward(loss)
    selected = model.params if names is None else names
    return {
        name: leaves.get(model.params[name], np.zeros_like(model.params[name].data))
        for name in selected
    }


@dataclass(frozen=True, slots=True, eq=False)
class ClipPrediction:
    """
    Per-frame predictions for one clip.

    `aleatoric` & `epistemic` are only produced by the evidential tasks, in cents² for the NIG
    tasks (Hz² for R1) & nats/mutual information for M1. `confidence` is the TCP head output and
    `variance` the β-NLL predicted variance in cents².
    """

    voicing_prob: FloatArray
    f0_hz: FloatArray
    aleatoric: FloatArray | None = None
    epistemic: FloatArray | None = None
    confidence: FloatArray | None = None
    variance: FloatArray | None = None

    @property
    def uncertainty(self) -> ev.UncertaintyPair | None:  # noqa: D102
        if self.aleatoric is None or self.epistemic is None:
            return None
        return ev.UncertaintyPair(aleatoric=self.aleatoric, epistemic=self.epistemic)


def decode_frames(
    config: ModelConfig,
    voicing_logits: FloatArray,
    head_raw: FloatArray,
    confidence_logits: FloatArray | None = None,
) -> ClipPrediction:
    """
    Turn raw per-frame network outputs into f0 estimates & uncertainties.

    Frames with a voicing probability below 0.5 emit an f0 of 0 but keep their uncertainties. R1 &
    R2 have no trained voicing head; a frame is voiced when its regressed value lies above the
    midpoint between the unvoiced sentinel & the bottom of the grid.
    """
    task = config.task
    grid = config.grid()
    scaler = TargetScaler.for_mode(grid, task.target_mode)
    voicing_prob = special.expit(voicing_logits)

    match task:
        case Task.M1:
            dirichlet = ev.dirichlet_from_logits(head_raw)
            pair = ev.dirichlet_uncertainties(dirichlet)
            pitch = bins_to_hz(grid, np.argmax(dirichlet.mean, axis=-1))
            return ClipPrediction(
                voicing_prob=voicing_prob,
                f0_hz=np.where(voicing_prob >= VOICING_THRESHOLD, pitch, 0.0),
                aleatoric=pair.aleatoric,
                epistemic=pair.epistemic,
            )
        case Task.TCP:
            pitch = bins_to_hz(grid, np.argmax(head_raw, axis=-1))
            confidence = None if confidence_logits is None else special.expit(confidence_logits)
            return ClipPrediction(
                voicing_prob=voicing_prob,
                f0_hz=np.where(voicing_prob >= VOICING_THRESHOLD, pitch, 0.0),
                confidence=confidence,
            )
        case Task.BETA_NLL:
            pitch = cents_to_hz(grid, scaler.from_model(head_raw[..., 0]))
            return ClipPrediction(
                voicing_prob=voicing_prob,
                f0_hz=np.where(voicing_prob >= VOICING_THRESHOLD, pitch, 0.0),
                variance=scaler.variance_from_model(np.exp(head_raw[..., 1])),
            )

    nig = ev.nig_from_raw(head_raw)
    pair = ev.nig_uncertainties(nig)
    value = scaler.from_model(nig.gamma)
    pitch = value if task.target_mode is TargetMode.HZ else cents_to_hz(grid, value)
    if not task.trains_voicing:
        voicing_prob = (value > scaler.voicing_threshold).astype(np.float64)

    return ClipPrediction(
        voicing_prob=voicing_prob,
        f0_hz=np.where(voicing_prob >= VOICING_THRESHOLD, pitch, 0.0),
        aleatoric=scaler.variance_from_model(pair.aleatoric),
        epistemic=scaler.variance_from_model(pair.epistemic),
    )


def predict_batch(
    model: FrameNetwork, clips: t.Sequence[FeatureClip], batch_size: int = 16
) -> list[ClipPrediction]:
    """Evaluation-mode predictions for every clip, in input order."""
    predictions = []
    for lo in range(0, len(clips), batch_size):
        outputs = forward(model, clips[lo : lo + batch_size], training=False)
        for idx in range(outputs.voicing.shape[0]):
            confidence = None if outputs.confidence is None else outputs.confidence.data[idx]
            predictions.append(
                decode_frames(
                    model.config, outputs.voicing.data[idx], outputs.head.data[idx], confidence
                )
            )

    return predictions


def predict(model: FrameNetwork, clip: FeatureClip) -> ClipPrediction:  # noqa: D103
    return predict_batch(model, [clip])[0]


def reference_f0(clip: LabeledClip) -> FloatArray:
    """Ground-truth f0 per frame in Hz, 0 where unvoiced."""
    return np.array([target.hz_value if target.voiced else 0.0 for target in clip.targets])


def evaluate_model(model: FrameNetwork, clips: t.Sequence[LabeledClip]) -> pd.DataFrame:
    """Per-track RPA/RCA/OA, followed by a `mean` row over all tracks."""
    if not clips:
        raise ConfigError("Cannot evaluate an empty set of clips.")

    predictions = predict_batch(model, [clip.features for clip in clips])
    rows = [
        {"track": clip.source_id, **score_track(reference_f0(clip), pred.f0_hz)}
        for clip, pred in zip(clips, predictions)
    ]
    scores = pd.DataFrame(rows, columns=["track", "rpa", "rca", "oa"])
    mean_row = {"track": "mean", **scores[["rpa", "rca", "oa"]].mean().to_dict()}
    return pd.concat([scores, pd.DataFrame([mean_row])], ignore_index=True)


def _batches(
    clips: t.Sequence[LabeledClip], batch_size: int, order: t.Sequence[int] | None = None
) -> t.Iterator[list[LabeledClip]]:
    idx = range(len(clips)) if order is None else order
    for lo in range(0, len(idx), batch_size):
        yield [clips[i] for i in idx[lo : lo + batch_size]]


def validation_loss(
    model: FrameNetwork, clips: t.Sequence[LabeledClip], config: TrainConfig, lam: float
) -> float:
    """Evaluation-mode task loss, averaged over batches weighted by clip count."""
    grid = model.config.grid()
    total = 0.0
    for batch in _batches(clips, config.batch_size):
        outputs = forward(model, [clip.features for clip in batch], training=False)
        targets = encode_targets(batch, model.config.task, grid)
        loss = task_loss(model.config.task, outputs, targets, config, lam)
        total += float(loss.data) * len(batch)

    return total / len(clips)


class TrainResult(t.NamedTuple):  # noqa: D101
    checkpoint: Checkpoint
    log: list[dict[str, float]]


class BestCheckpoint(t.NamedTuple):
    """Best validation checkpoint so far & the validation scores it was kept for."""

    checkpoint: Checkpoint
    val_oa: float
    val_loss: float

    @property
    def key(self) -> tuple[float, float]:
        """Higher OA wins, ties going to the lower loss."""
        return (self.val_oa, -self.val_loss)


EpochHook = t.Callable[[Checkpoint, Checkpoint, list[dict[str, float]]], None]


def rescore_checkpoint(
    ckpt: Checkpoint, val_clips: t.Sequence[LabeledClip], config: TrainConfig
) -> BestCheckpoint:
    """
    Recompute the validation scores a checkpoint was kept for.

    Evaluation is deterministic, so the scores match those seen when the checkpoint was taken.
    """
    model = model_from_checkpoint(ckpt)
    lam = ev.AnnealSchedule(config.warmup_epochs)(ckpt.epoch - 1)
    val_loss = validation_loss(model, val_clips, config, lam)
    val_oa = float(evaluate_model(model, val_clips)["oa"].iloc[-1])
    return BestCheckpoint(ckpt, val_oa, val_loss)


def train(
    model: FrameNetwork,
    train_clips: t.Sequence[LabeledClip],
    val_clips: t.Sequence[LabeledClip] | None = None,
    config: TrainConfig = TrainConfig(),
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    digest: str = "",
    verbose: bool = True,
    best: BestCheckpoint | None = None,
    on_epoch: EpochHook | None = None,
) -> TrainResult:
    """
    Train `model` in place for `config.epochs` epochs, starting after epoch `start_epoch`.

    Mini-batch order & dropout are seeded from `(config.seed, epoch)` at the start of every epoch,
    so resuming from a checkpoint of epoch `start_epoch` (with its optimizer state & the `best`
    checkpoint so far) reproduces an uninterrupted run exactly. When validation clips are provided,
    the checkpoint with the best validation OA (ties broken by the lower validation loss) is
    retained and loaded back into `model`; otherwise the final epoch is kept. TCP models then fit
    their confidence head with the rest of the network frozen.

    After every epoch `on_epoch(latest, kept, log)` receives the latest checkpoint, the checkpoint
    that would be returned if training stopped there & the log so far. For TCP models the final
    epoch is reported only once the confidence head is fit.

    A non-finite loss or gradient aborts with `TrainingDivergedError`, carrying the last good
    checkpoint & the log so far.
    """
    if not train_clips:
        raise ConfigError("The training split is empty.")

    task = model.config.task
    grid = model.config.grid()
    schedule = ev.AnnealSchedule(config.warmup_epochs)
    hyper = AdamHyper(beta1=config.adam_betas[0], beta2=config.adam_betas[1], eps=config.adam_eps)
    state = AdamState() if optimizer is None else optimizer
    trunk = model.trunk_params
    decayed = [name for name in model.weight_names if name in trunk]

    log: list[dict[str, float]] = []
    last_good = model.snapshot(state, start_epoch, digest)
    final_epoch = start_epoch + config.epochs
    fits_confidence = task is Task.TCP and config.confidence_epochs > 0
    started = time.perf_counter()
    for epoch_idx in range(start_epoch, final_epoch):
        lam = schedule(epoch_idx)
        order = np.random.default_rng([config.seed, epoch_idx]).permutation(len(train_clips))
        model.dropout_rng = np.random.default_rng([config.seed, epoch_idx, 1])
        running = 0.0
        try:
            for batch in _batches(train_clips, config.batch_size, order):
                outputs = forward(model, [clip.features for clip in batch], training=True)
                loss = task_loss(task, outputs, encode_targets(batch, task, grid), config, lam)
                if not math.isfinite(float(loss.data)):
                    raise NumericError(f"Loss is {float(loss.data)}")

                grads = parameter_gradients(model, loss, trunk)
                adam_step(trunk, grads, state, config.lr, hyper, model.config.weight_decay, decayed)
                running += float(loss.data) * len(batch)
        except NumericError as e:
            raise TrainingDivergedError(
                f"Training diverged during epoch {epoch_idx + 1}: {e}",
                last_good=best.checkpoint if best else last_good,
                log=log,
            ) from e

        row = {
            "epoch": epoch_idx + 1,
            "train_loss": running / len(train_clips),
            "val_loss": math.nan,
            "val_oa": math.nan,
            "lambda_t": lam,
        }
        if val_clips:
            row["val_loss"] = validation_loss(model, val_clips, config, lam)
            row["val_oa"] = float(evaluate_model(model, val_clips)["oa"].iloc[-1])
        log.append(row)

        last_good = model.snapshot(state, epoch_idx + 1, digest)
        if val_clips:
            candidate = BestCheckpoint(last_good, row["val_oa"], row["val_loss"])
            if best is None or candidate.key > best.key:
                best = candidate
        if on_epoch is not None and not (fits_confidence and epoch_idx + 1 == final_epoch):
            on_epoch(last_good, best.checkpoint if best else last_good, log)

        if verbose:
            print(
                f"Epoch {epoch_idx + 1}/{final_epoch}: train loss {row['train_loss']:.4f}, "
                f"val loss {row['val_loss']:.4f}, val OA {row['val_oa']:.3f}"
            )

    result = best.checkpoint if best else last_good
    model.load_state(result.weights)
    if fits_confidence:
        train_confidence_head(model, train_clips, config, state, verbose=verbose)
        result = model.snapshot(state, result.epoch, digest)
        if on_epoch is not None and config.epochs > 0:
            on_epoch(last_good, result, log)

    if verbose:
        elapsed = dt.timedelta(seconds=time.perf_counter() - started)
        print(f"Trained {config.epochs} epochs in {HUMANIZED_DELTA(elapsed)}")
        print(f"Kept the checkpoint from epoch {result.epoch}")

    return TrainResult(result, log)


def train_confidence_head(
    model: FrameNetwork,
    clips: t.Sequence[LabeledClip],
    config: TrainConfig,
    optimizer: AdamState | None = None,
    verbose: bool = True,
) -> list[dict[str, float]]:
    """
    Fit the auxiliary confidence head to the classifier's true class probability.

    The trunk runs in evaluation mode and every parameter outside of the confidence head is left
    untouched. Targets are the max-normalized probability of the true bin on voiced frames.
    """
    if model.config.task is not Task.TCP:
        raise ConfigError(
            f"Confidence head training requires a TCP model, not {model.config.task.value}"
        )

    grid = model.config.grid()
    head = model.confidence_params
    head_w, head_b = head[f"{CONFIDENCE_PREFIX}w"], head[f"{CONFIDENCE_PREFIX}b"]
    state = AdamState() if optimizer is None else optimizer
    hyper = AdamHyper(beta1=config.adam_betas[0], beta2=config.adam_betas[1], eps=config.adam_eps)

    # The frozen trunk's features & targets don't change, compute them once
    cached = []
    for batch in _batches(clips, config.batch_size):
        outputs = forward(model, [clip.features for clip in batch], training=False)
        targets = encode_targets(batch, Task.TCP, grid)
        probs = special.softmax(outputs.head.data, axis=-1).reshape(targets.voiced.size, -1)
        tcp = np.zeros(targets.voiced.size)
        voiced_idx = np.flatnonzero(targets.voiced)
        tcp[voiced_idx] = ev.tcp_targets(probs[voiced_idx], targets.bins[voiced_idx])
        cached.append((outputs.readout.data, tcp, targets.voiced))

    rng = np.random.default_rng([config.seed, 2])
    log = []
    for epoch_idx in range(config.confidence_epochs):
        running = 0.0
        for batch_idx in rng.permutation(len(cached)):
            readout, tcp, voiced = cached[batch_idx]
            logits = ag.squeeze_last(ag.linear(Tensor(readout), head_w, head_b))
            conf = special.expit(logits.data.reshape(-1))
            value, grad = ev.confidence_mse(conf, tcp, voiced)
            grad = (grad * conf * (1 - conf)).reshape(logits.shape)
            loss = ag.loss_node(value, [logits], [grad])

            grads = parameter_gradients(model, loss, head)
            adam_step(
                head, grads, state, config.lr, hyper, model.config.weight_decay, [head_w.name]
            )
            running += value

        log.append({"epoch": epoch_idx + 1, "confidence_loss": running / len(cached)})
        if verbose:
            print(
                f"Confidence epoch {epoch_idx + 1}/{config.confidence_epochs}: "
                f"loss {log[-1]['confidence_loss']:.4f}"
            )

    return log
