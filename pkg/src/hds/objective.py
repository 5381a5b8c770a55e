"""Gaussian likelihood, importance-weighted bound and the DReG surrogate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .posterior import LOG_2PI, VariationalParams, log_prior, log_q, sample_latents
from .solver import SolverError, unchecked

ESTIMATORS = ("dreg", "iwae")


def gaussian_loglik(Y, M, var) -> ad.Node:
    """Sum over signals and times (the first two axes) of log N(y; m, var).

    Trailing axes of ``M`` are batch axes.  ``var`` broadcasts against ``M``:
    a (4, 1, ...) array gives one variance per signal, a (4, T, ...) array a
    time-varying one.
    """
    var = ad.constant(var)
    if np.any(var.value <= 0):
        raise ValueError("variances must be strictly positive")
    resid = ad.constant(Y) - M
    terms = -0.5 * (LOG_2PI + ad.log(var) + ad.square(resid) / var)
    return ad.sum(terms, axis=(0, 1))


def iwae_bound(logw, axis: int = -1) -> ad.Node:
    """log of the mean importance weight along ``axis``."""
    logw = ad.constant(logw)
    return ad.logsumexp(logw, axis=axis) - math.log(logw.shape[axis])


def normalized_weights(logw: np.ndarray, axis: int = -1) -> np.ndarray:
    logw = np.asarray(logw, dtype=np.float64)
    shifted = np.exp(logw - logw.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def dreg_surrogate(logw: ad.Node, path_scale: ad.Node) -> ad.Node:
    """Surrogate whose gradient is the doubly reparameterised IWAE estimator.

    ``logw`` is (B, K) and must have been computed with the variational
    parameters stopped inside log q.  ``path_scale`` is the :func:`scale_grad`
    handle placed on the reparameterised samples (one row per sample, ordered
    instance-major); it is set here to the normalised weights, so gradients
    reaching the encoder carry weight ``w~^2`` while decoder gradients carry
    ``w~``.  The surrogate averages over instances.
    """
    w = normalized_weights(logw.value, axis=1)
    path_scale.value = w.reshape(-1, 1)
    # rejected samples (log-weight -inf) carry zero weight and contribute nothing
    finite = ad.where(np.isfinite(logw.value), logw, 0.0)
    return ad.sum(ad.stop_gradient(w) * finite) * (1.0 / logw.shape[0])


@dataclass
class ImportanceSampleSet:
    """Per-sample terms for B instances and K samples each, all (B, K)."""

    z: np.ndarray
    loglik: np.ndarray
    logprior: np.ndarray
    logq: np.ndarray

    @property
    def logw(self) -> np.ndarray:
        return self.loglik + self.logprior - self.logq


@dataclass
class ObjectiveResult:
    bounds: np.ndarray          # (B,) per-instance bound in nats
    surrogate: ad.Node          # scalar to maximise
    samples: ImportanceSampleSet
    means: np.ndarray           # (4, T, B, K) predicted signal means
    variances: np.ndarray       # broadcastable to means
    rejected: np.ndarray = field(default=None)   # (B, K) samples whose simulation diverged

    @property
    def n_rejected(self) -> int:
        return 0 if self.rejected is None else int(self.rejected.sum())


def diverging_samples(model, params, z: np.ndarray, batch) -> np.ndarray:
    """Boolean mask over the rows of ``z`` whose simulation is non-finite.

    Runs the decoder once more without the solver's finite check and without
    recording gradients.
    """
    values = {k: ad.constant(np.asarray(getattr(v, "value", v))) for k, v in params.items()}
    with unchecked():
        M, var = model.decode(values, ad.constant(z), batch)
        M, var = M.value, np.broadcast_to(var.value, M.shape)
        ok = np.isfinite(M).all(axis=(0, 1)) & np.isfinite(var).all(axis=(0, 1)) & (var > 0).all(axis=(0, 1))
    return ~ok


def _reference_point(layout) -> np.ndarray:
    """Prior medians in latent space: a stand-in for rejected samples."""
    return np.where(layout.positive, np.exp(layout.prior_mean), layout.prior_mean)


def instance_objective(model, params, batch, K: int, rng: np.random.Generator,
                       estimator: str = "dreg", l2: float = 0.0) -> ObjectiveResult:
    """Encode, sample, condition, simulate, observe and score a batch.

    ``params`` maps names to nodes (recorded on the active tape when training)
    or to plain arrays (evaluation).  Returns per-instance IWAE bounds and a
    scalar surrogate: the DReG surrogate or the plain mean bound (``iwae``),
    minus the L2 penalty on encoder weights.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    if K < 1:
        raise ValueError("K must be >= 1")
    params = {k: ad.constant(v) for k, v in params.items()}
    B = batch.size
    q = model.variational(params, batch)
    d = model.layout.size()
    eps = rng.standard_normal((B * K, d))
    rows = np.repeat(np.arange(B), K)
    mean, log_std = q.mean[rows], q.log_std[rows]

    z = sample_latents(VariationalParams(mean, log_std, q.positive), eps)
    if estimator == "dreg":
        scale = ad.constant(np.ones((B * K, 1)))
        z = ad.scale_grad(z, scale)
        lq = log_q(z, VariationalParams(ad.stop_gradient(mean), ad.stop_gradient(log_std), q.positive))
    else:
        lq = log_q(z, VariationalParams(mean, log_std, q.positive))
    lp = log_prior(z, model.layout)
    repeated = batch.repeat(K)
    try:
        M, var = model.decode(params, z, repeated)
        rejected = np.zeros(B * K, dtype=bool)
    except SolverError:
        # a far-tail sample can make the explicit solver diverge; such a sample
        # gets zero importance weight.  The decoder is re-run with it replaced by
        # the prior median so that every value on the tape stays finite.
        rejected = diverging_samples(model, params, z.value, repeated)
        if not rejected.any():
            raise
        keep = (~rejected)[:, None].astype(np.float64)
        stand_in = ad.constant((1.0 - keep) * _reference_point(model.layout)[None, :])
        M, var = model.decode(params, z * keep + stand_in, repeated)
    ll = gaussian_loglik(batch.Y_columns(K), M, var)

    logw = (ll + lp - lq).reshape((B, K))
    if rejected.any():
        logw = logw + ad.constant(np.where(rejected, -np.inf, 0.0).reshape(B, K))
    bounds = iwae_bound(logw, axis=1)
    if estimator == "dreg":
        surrogate = dreg_surrogate(logw, scale)
    else:
        surrogate = ad.mean(bounds)
    if l2 > 0:
        penalty = ad.constant(0.0)
        for name in model.l2_weight_names():
            penalty = penalty + ad.sum(ad.square(params[name]))
        surrogate = surrogate - l2 * penalty

    loglik = np.where(rejected, -np.inf, ll.value).reshape(B, K)
    samples = ImportanceSampleSet(
        z=z.value.reshape(B, K, d), loglik=loglik,
        logprior=lp.value.reshape(B, K), logq=lq.value.reshape(B, K),
    )
    Mv = M.value.reshape(M.shape[:2] + (B, K))
    vv = var.value.reshape(var.shape[:2] + (B, K))
    return ObjectiveResult(np.asarray(bounds.value), surrogate, samples, Mv, vv, rejected.reshape(B, K))
