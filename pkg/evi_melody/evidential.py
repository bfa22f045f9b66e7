"""
Closed-form probability math for the evidential heads & the baselines.

Every loss comes with its analytic gradient so the network can splice it into the autograd graph
as a single node. Arrays are float64; the class axis, where present, is last.
"""

from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import special

from evi_melody.config import Task
from evi_melody.exceptions import ArgumentError, ConfigError, NumericError

FloatArray = npt.NDArray[np.float64]

NIG_EPS = 1e-6
UE_SLACK = 1e-12


class LossValue(t.NamedTuple):
    """Reduced loss value plus its gradient w.r.t. the loss inputs."""

    value: float
    grad: FloatArray


@dataclass(frozen=True, slots=True, eq=False)
class DirichletParams:  # noqa: D101
    alpha: FloatArray

    @property
    def strength(self) -> FloatArray:
        """Total evidence `S`."""
        return self.alpha.sum(axis=-1)

    @property
    def mean(self) -> FloatArray:
        """Expected class probabilities `alpha / S`."""
        return self.alpha / self.alpha.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, slots=True, eq=False)
class NIGParams:  # noqa: D101
    gamma: FloatArray
    nu: FloatArray
    alpha: FloatArray
    beta: FloatArray


@dataclass(frozen=True, slots=True, eq=False)
class UncertaintyPair:  # noqa: D101
    aleatoric: FloatArray
    epistemic: FloatArray


@dataclass(frozen=True, slots=True)
class AnnealSchedule:
    """KL coefficient ramp `min(1, epoch / warmup_epochs)`."""

    warmup_epochs: int = 10

    def __post_init__(self) -> None:
        if self.warmup_epochs < 1:
            raise ConfigError(f"warmup_epochs must be at least 1, received: {self.warmup_epochs}")

    def __call__(self, epoch: int) -> float:
        return min(1.0, max(epoch, 0) / self.warmup_epochs)


def _check_finite(values: FloatArray, name: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise NumericError(f"{name} contains {bad} non-finite value(s), shape {values.shape}")


def softplus(x: npt.ArrayLike) -> FloatArray:  # noqa: D103
    return np.logaddexp(0.0, x)


def _check_one_hot(y: FloatArray) -> None:
    is_binary = np.all((y == 0) | (y == 1))
    if not is_binary or not np.all(y.sum(axis=-1) == 1):
        raise ArgumentError("Labels must be one-hot along the last axis.")


# Dirichlet (classification)
def dirichlet_from_logits(raw: npt.ArrayLike) -> DirichletParams:
    """Evidence mapping `alpha = softplus(raw) + 1`, so every `alpha_k >= 1`."""
    raw = np.asarray(raw, dtype=np.float64)
    _check_finite(raw, "Dirichlet logits")
    return DirichletParams(alpha=softplus(raw) + 1)


def dirichlet_from_logits_grad(raw: npt.ArrayLike) -> FloatArray:
    """Elementwise `d alpha / d raw`."""
    return special.expit(np.asarray(raw, dtype=np.float64))


def dirichlet_uncertainties(d: DirichletParams) -> UncertaintyPair:
    """
    Entropy decomposition of the Dirichlet predictive.

    Aleatoric is the expected categorical entropy, epistemic is the remainder of the entropy of the
    mean; tiny negative epistemic values from round-off are clamped to 0.
    """
    strength = d.strength[..., np.newaxis]
    p = d.alpha / strength
    aleatoric = np.sum(p * (special.digamma(strength + 1) - special.digamma(d.alpha + 1)), axis=-1)
    total = -np.sum(special.xlogy(p, p), axis=-1)
    epistemic = total - aleatoric

    if np.any(epistemic < -UE_SLACK):  # pragma: no cover
        raise NumericError("Negative epistemic uncertainty beyond round-off.")

    return UncertaintyPair(aleatoric=aleatoric, epistemic=np.maximum(epistemic, 0.0))


def dirichlet_nll(d: DirichletParams, y: npt.ArrayLike) -> FloatArray:
    """Type-II maximum likelihood loss `psi(S) - psi(alpha_true)`."""
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y)
    return np.sum(y * (special.digamma(d.strength[..., np.newaxis]) - special.digamma(d.alpha)), -1)


def dirichlet_nll_grad(d: DirichletParams, y: npt.ArrayLike) -> FloatArray:
    """`d nll / d alpha_k = psi'(S) - y_k psi'(alpha_k)`."""
    y = np.asarray(y, dtype=np.float64)
    trigamma_s = special.polygamma(1, d.strength)[..., np.newaxis]
    return trigamma_s - y * special.polygamma(1, d.alpha)


def _evidence_removed(d: DirichletParams, y: FloatArray) -> FloatArray:
    return y + (1 - y) * d.alpha


def dirichlet_kl_uniform(d: DirichletParams, y: npt.ArrayLike) -> FloatArray:
    """
    `KL(Dir(alpha_tilde) || Dir(1, ..., 1))` with the true class evidence removed.

    `alpha_tilde = y + (1 - y) * alpha`, so only evidence for the wrong classes is penalized.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y)

    alpha_t = _evidence_removed(d, y)
    n_classes = alpha_t.shape[-1]
    strength_t = alpha_t.sum(axis=-1, keepdims=True)
    return (
        special.gammaln(strength_t[..., 0])
        - special.gammaln(alpha_t).sum(axis=-1)
        - special.gammaln(n_classes)
        + np.sum((alpha_t - 1) * (special.digamma(alpha_t) - special.digamma(strength_t)), -1)
    )


def dirichlet_kl_uniform_grad(d: DirichletParams, y: npt.ArrayLike) -> FloatArray:
    """Gradient of `dirichlet_kl_uniform` w.r.t. the original `alpha`."""
    y = np.asarray(y, dtype=np.float64)
    alpha_t = _evidence_removed(d, y)
    n_classes = alpha_t.shape[-1]
    strength_t = alpha_t.sum(axis=-1, keepdims=True)

    grad_t = (alpha_t - 1) * special.polygamma(1, alpha_t) - (strength_t - n_classes) * (
        special.polygamma(1, strength_t)
    )
    return (1 - y) * grad_t


def _voiced_weights(voiced: npt.ArrayLike) -> tuple[FloatArray, float]:
    weights = np.asarray(voiced, dtype=np.float64)
    return weights, float(weights.sum())


def loss_m1(alpha: FloatArray, y: FloatArray, voiced: npt.ArrayLike, lam: float) -> LossValue:
    """
    Voiced-masked mean of `nll + lam * kl` over a batch of frames.

    `alpha` & `y` are `(n_frames, K)`; rows of `y` for unvoiced frames may be all zero. The gradient
    is w.r.t. `alpha`. A batch without voiced frames has zero loss.
    """
    weights, n_voiced = _voiced_weights(voiced)
    if n_voiced == 0:
        return LossValue(0.0, np.zeros_like(alpha))

    mask = weights > 0
    d = DirichletParams(alpha[mask])
    per_frame = dirichlet_nll(d, y[mask]) + lam * dirichlet_kl_uniform(d, y[mask])
    frame_grad = dirichlet_nll_grad(d, y[mask]) + lam * dirichlet_kl_uniform_grad(d, y[mask])

    grad = np.zeros_like(alpha)
    grad[mask] = frame_grad * (weights[mask] / n_voiced)[:, np.newaxis]
    return LossValue(float(np.sum(weights[mask] * per_frame) / n_voiced), grad)


# Normal-Inverse-Gamma (regression)
def nig_from_raw(raw: npt.ArrayLike) -> NIGParams:
    """Constraint mapping `(gamma, nu, alpha, beta)` from 4 unconstrained outputs (last axis)."""
    raw = np.asarray(raw, dtype=np.float64)
    _check_finite(raw, "NIG outputs")
    return NIGParams(
        gamma=raw[..., 0].copy(),
        nu=softplus(raw[..., 1]) + NIG_EPS,
        alpha=softplus(raw[..., 2]) + 1 + NIG_EPS,
        beta=softplus(raw[..., 3]) + NIG_EPS,
    )


def nig_from_raw_grad(raw: npt.ArrayLike) -> FloatArray:
    """Elementwise derivative of each constrained parameter w.r.t. its raw output."""
    raw = np.asarray(raw, dtype=np.float64)
    grad = special.expit(raw)
    grad[..., 0] = 1.0
    return grad


def nig_uncertainties(p: NIGParams) -> UncertaintyPair:
    """Aleatoric `beta / (alpha - 1)` & epistemic `beta / (nu (alpha - 1))`."""
    aleatoric = p.beta / (p.alpha - 1)
    return UncertaintyPair(aleatoric=aleatoric, epistemic=aleatoric / p.nu)


def nig_nll(p: NIGParams, y: npt.ArrayLike) -> FloatArray:
    """Negative log of the Student-t marginal likelihood of `y` under the NIG."""
    y = np.asarray(y, dtype=np.float64)
    omega = 2 * p.beta * (1 + p.nu)
    return (
        0.5 * np.log(np.pi / p.nu)
        - p.alpha * np.log(omega)
        + (p.alpha + 0.5) * np.log(p.nu * (y - p.gamma) ** 2 + omega)
        + special.gammaln(p.alpha)
        - special.gammaln(p.alpha + 0.5)
    )


def nig_nll_grad(p: NIGParams, y: npt.ArrayLike) -> FloatArray:
    """Gradient of `nig_nll` w.r.t. `(gamma, nu, alpha, beta)`, stacked on the last axis."""
    y = np.asarray(y, dtype=np.float64)
    resid = y - p.gamma
    omega = 2 * p.beta * (1 + p.nu)
    denom = p.nu * resid**2 + omega

    d_gamma = -(p.alpha + 0.5) * 2 * p.nu * resid / denom
    d_nu = (
        -0.5 / p.nu
        - p.alpha * 2 * p.beta / omega
        + (p.alpha + 0.5) * (resid**2 + 2 * p.beta) / denom
    )
    d_alpha = (
        np.log(denom) - np.log(omega) + special.digamma(p.alpha) - special.digamma(p.alpha + 0.5)
    )
    d_beta = -p.alpha / p.beta + (p.alpha + 0.5) * 2 * (1 + p.nu) / denom
    return np.stack([d_gamma, d_nu, d_alpha, d_beta], axis=-1)


def nig_regularizer(p: NIGParams, y: npt.ArrayLike) -> FloatArray:
    """Evidence regularizer `|y - gamma| (2 nu + alpha)`."""
    y = np.asarray(y, dtype=np.float64)
    return np.abs(y - p.gamma) * (2 * p.nu + p.alpha)


def nig_regularizer_grad(p: NIGParams, y: npt.ArrayLike) -> FloatArray:
    """Subgradient of `nig_regularizer`, taking 0 for gamma at `y == gamma`."""
    y = np.asarray(y, dtype=np.float64)
    resid = y - p.gamma
    abs_resid = np.abs(resid)
    return np.stack(
        [-np.sign(resid) * (2 * p.nu + p.alpha), 2 * abs_resid, abs_resid, np.zeros_like(resid)],
        axis=-1,
    )


def loss_m2(p: NIGParams, y: FloatArray, voiced: npt.ArrayLike, lam: float) -> LossValue:
    """
    Masked mean of `nig_nll + lam * nig_regularizer`.

    The gradient is w.r.t. `(gamma, nu, alpha, beta)`, shape `(n_frames, 4)`. For R1/R2 the caller
    passes an all-ones mask so every frame contributes.
    """
    weights, n_voiced = _voiced_weights(voiced)
    grad = np.zeros((*weights.shape, 4))
    if n_voiced == 0:
        return LossValue(0.0, grad)

    per_frame = nig_nll(p, y) + lam * nig_regularizer(p, y)
    mask = weights > 0
    value = float(np.sum(weights[mask] * per_frame[mask]) / n_voiced)

    frame_grad = nig_nll_grad(p, y) + lam * nig_regularizer_grad(p, y)
    grad[mask] = frame_grad[mask] * (weights[mask] / n_voiced)[:, np.newaxis]
    return LossValue(value, grad)


# Voicing & totals
def bce_with_logits(logits: FloatArray, voiced: npt.ArrayLike) -> LossValue:
    """Mean binary cross-entropy of voicing logits against 0/1 labels; gradient w.r.t. logits."""
    target = np.asarray(voiced, dtype=np.float64)
    n_frames = max(logits.size, 1)
    per_frame = np.logaddexp(0.0, logits) - target * logits
    grad = (special.expit(logits) - target) / n_frames
    return LossValue(float(per_frame.sum() / n_frames), grad)


def total_loss(task: Task, bce: float, evidential_loss: float, w: float) -> float:
    """
    Combine the voicing & head losses as `bce + w * evidential_loss`.

    Tasks without a voicing head (`R1`, `R2`) drop the BCE term, leaving `w * evidential_loss`.
    """
    if w < 0:
        raise ConfigError(f"Evidential weight must be non-negative for {task.value}, received: {w}")

    if not task.trains_voicing:
        return w * evidential_loss

    return bce + w * evidential_loss


# Baselines
def beta_nll_loss(
    mu: npt.ArrayLike, log_var: npt.ArrayLike, y: npt.ArrayLike, beta_coef: float
) -> FloatArray:
    """
    Heteroscedastic Gaussian NLL weighted by `var ** beta_coef`.

    The weight is a constant as far as `beta_nll_grad` is concerned.
    """
    mu, log_var, y = (np.asarray(a, dtype=np.float64) for a in (mu, log_var, y))
    var = np.exp(log_var)
    weight = np.exp(beta_coef * log_var)
    return weight * ((y - mu) ** 2 / (2 * var) + 0.5 * log_var)


def beta_nll_grad(
    mu: npt.ArrayLike, log_var: npt.ArrayLike, y: npt.ArrayLike, beta_coef: float
) -> FloatArray:
    """Gradient w.r.t. `(mu, log_var)` with the variance weight held fixed, stacked last."""
    mu, log_var, y = (np.asarray(a, dtype=np.float64) for a in (mu, log_var, y))
    inv_var = np.exp(-log_var)
    weight = np.exp(beta_coef * log_var)
    resid = y - mu
    return np.stack(
        [-weight * resid * inv_var, weight * (0.5 - 0.5 * resid**2 * inv_var)], axis=-1
    )


def loss_beta_nll(
    mu: FloatArray, log_var: FloatArray, y: FloatArray, voiced: npt.ArrayLike, beta_coef: float
) -> LossValue:
    """Voiced-masked mean of `beta_nll_loss`; gradient w.r.t. `(mu, log_var)`."""
    weights, n_voiced = _voiced_weights(voiced)
    grad = np.zeros((*weights.shape, 2))
    if n_voiced == 0:
        return LossValue(0.0, grad)

    mask = weights > 0
    per_frame = beta_nll_loss(mu[mask], log_var[mask], y[mask], beta_coef)
    grad[mask] = beta_nll_grad(mu[mask], log_var[mask], y[mask], beta_coef) * (
        weights[mask] / n_voiced
    )[:, np.newaxis]
    return LossValue(float(np.sum(weights[mask] * per_frame) / n_voiced), grad)


def softmax_cross_entropy(logits: FloatArray, y: FloatArray, voiced: npt.ArrayLike) -> LossValue:
    """Voiced-masked mean categorical cross-entropy; gradient w.r.t. the logits."""
    weights, n_voiced = _voiced_weights(voiced)
    if n_voiced == 0:
        return LossValue(0.0, np.zeros_like(logits))

    mask = weights > 0
    log_probs = special.log_softmax(logits[mask], axis=-1)
    per_frame = -np.sum(y[mask] * log_probs, axis=-1)

    grad = np.zeros_like(logits)
    grad[mask] = (np.exp(log_probs) - y[mask]) * (weights[mask] / n_voiced)[:, np.newaxis]
    return LossValue(float(np.sum(weights[mask] * per_frame) / n_voiced), grad)


def tcp_target(probs: npt.ArrayLike, true_class: int) -> float:
    """Normalized true class probability `p_true / max_k p_k`; 1 iff the argmax is correct."""
    probs = np.asarray(probs, dtype=np.float64)
    p_max = probs.max()
    if not p_max > 0:
        raise NumericError("Cannot normalize TCP for an all-zero probability vector.")

    return float(probs[true_class] / p_max)


def tcp_targets(probs: FloatArray, true_class: npt.ArrayLike) -> FloatArray:
    """Vectorized `tcp_target` over the rows of `probs`."""
    p_max = probs.max(axis=-1)
    if np.any(p_max <= 0):
        raise NumericError("Cannot normalize TCP for an all-zero probability vector.")

    idx = np.asarray(true_class, dtype=int)
    return np.take_along_axis(probs, idx[..., np.newaxis], axis=-1)[..., 0] / p_max


def confidence_mse(pred: FloatArray, target: FloatArray, voiced: npt.ArrayLike) -> LossValue:
    """Voiced-masked mean squared error of the auxiliary confidence head."""
    weights, n_voiced = _voiced_weights(voiced)
    if n_voiced == 0:
        return LossValue(0.0, np.zeros_like(pred))

    resid = pred - target
    return LossValue(
        float(np.sum(weights * resid**2) / n_voiced), 2 * weights * resid / n_voiced
    )
