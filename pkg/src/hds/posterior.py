"""Block-conditional variational posterior and priors.

The approximate posterior factorises into a population block (free
parameters), a group block (sums of per-component parameters selected by the
multi-hot group code) and an individual block (a convolutional encoder of the
observed series).  Latent values are Gaussian in a base space; dimensions
flagged positive are the exponential of their base value (log-normal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

BLOCKS = ("P", "G", "I")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LatentSpec:
    """One latent dimension and its prior.

    For log-normal dimensions ``mean`` and ``std`` describe the logarithm.
    """

    name: str
    block: str
    kind: str = "normal"
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ValueError(f"latent {self.name}: block must be one of {BLOCKS}, got {self.block!r}")
        if self.kind not in ("normal", "lognormal"):
            raise ValueError(f"latent {self.name}: kind must be normal or lognormal, got {self.kind!r}")
        if not self.std > 0:
            raise ValueError(f"latent {self.name}: prior std must be positive")

    @property
    def positive(self) -> bool:
        return self.kind == "lognormal"


class LatentLayout:
    """Ordered latent dimensions, grouped P | G | I along the last axis."""

    def __init__(self, specs: Sequence[LatentSpec]):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError("duplicate latent names")
        self.specs = tuple(sorted(specs, key=lambda s: BLOCKS.index(s.block)))
        self.names = tuple(s.name for s in self.specs)
        self.index = {n: i for i, n in enumerate(self.names)}
        self.positive = np.array([s.positive for s in self.specs])
        self.prior_mean = np.array([s.mean for s in self.specs])
        self.prior_std = np.array([s.std for s in self.specs])

    def block(self, tag: str) -> tuple[LatentSpec, ...]:
        return tuple(s for s in self.specs if s.block == tag)

    def size(self, tag: str | None = None) -> int:
        return len(self.specs) if tag is None else len(self.block(tag))

    def slice(self, tag: str) -> slice:
        start = sum(self.size(b) for b in BLOCKS[: BLOCKS.index(tag)])
        return slice(start, start + self.size(tag))

    @classmethod
    def from_priors(cls, required: Mapping[str, str], priors: Mapping[str, LatentSpec]) -> "LatentLayout":
        """Build a layout for ``required`` (name -> block), failing on any missing prior."""
        missing = [n for n in required if n not in priors]
        if missing:
            raise KeyError(f"no prior given for latents: {missing}")
        specs = []
        for name, block in required.items():
            spec = priors[name]
            if spec.block != block:
                raise ValueError(f"latent {name} belongs to block {block}, prior says {spec.block}")
            specs.append(spec)
        return cls(specs)


@dataclass
class VariationalParams:
    """Means and log standard deviations of a factorised Gaussian (base space).

    ``mean`` and ``log_std`` have the latent dimension last; ``positive`` marks
    log-normal dimensions.
    """

    mean: ad.Node
    log_std: ad.Node
    positive: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(ad.constant(self.log_std).value)


# ---------------------------------------------------------------------------
# the three blocks


def population_params(r, v, positive) -> VariationalParams:
    """Population block: free means ``r`` and log standard deviations ``v``."""
    return VariationalParams(ad.constant(r), ad.constant(v), np.asarray(positive, dtype=bool))


def validate_group_code(g: np.ndarray, block_sizes: Sequence[int]) -> None:
    g = np.asarray(g)
    width = int(np.sum(block_sizes))
    if g.shape[-1] != width:
        raise ValueError(f"group code has length {g.shape[-1]}, expected {width}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("group code entries must be 0 or 1")
    start = 0
    for s, k in enumerate(block_sizes):
        counts = g[..., start:start + k].sum(axis=-1)
        if not np.all(counts == 1):
            raise ValueError(f"group code block {s} must contain exactly one 1")
        start += k


def group_params(g, nu, eta, positive, block_sizes: Sequence[int] | None = None) -> VariationalParams:
    """Group block: each dimension's mean and log-std are sums of per-component scalars.

    ``g`` is (..., C) multi-hot; ``nu`` and ``eta`` are (C, n_G).
    """
    g = np.asarray(g, dtype=np.float64)
    if block_sizes is not None:
        validate_group_code(g, block_sizes)
    return VariationalParams(ad.matmul(g, nu), ad.matmul(g, eta), np.asarray(positive, dtype=bool))


@dataclass(frozen=True)
class EncoderConfig:
    filters: int = 10
    width: int = 5
    stride: int = 2
    pool: int = 2
    hidden: int = 50
    l2: float = 1e-4


class IndividualEncoder:
    """Strided 1-D convolution over the signals, average pooling, and a bias-free tanh layer.

    Pipeline: conv (4 -> filters channels) -> relu -> avg-pool -> flatten,
    concatenated with ``[log1p(u); g]``; a bias-free linear map to ``hidden``
    tanh units; two affine heads give means and log-stds of the individual
    latents.  The flattened feature length depends on the series length, so an
    encoder is sized for one T.
    """

    PREFIX = "phi.enc"
    WEIGHTS = ("conv", "W_hidden", "W_mean", "W_log_std")

    def __init__(self, config: EncoderConfig, n_times: int, n_signals: int, n_cond: int, n_out: int):
        self.config = config
        self.n_times, self.n_signals, self.n_cond, self.n_out = n_times, n_signals, n_cond, n_out
        if n_times < config.width:
            raise ValueError(f"series length {n_times} shorter than the encoder filter width {config.width}")
        n_conv = (n_times - config.width) // config.stride + 1
        if n_conv < config.pool:
            raise ValueError(f"series length {n_times} too short for stride {config.stride} and pool {config.pool}")
        self.n_features = config.filters * (n_conv // config.pool)

    def init(self, rng: np.random.Generator, mean_bias, log_std_bias, head_scale: float = 0.01) -> dict:
        c = self.config
        fan_conv = self.n_signals * c.width
        n_in = self.n_features + self.n_cond
        p = self.PREFIX
        return {
            f"{p}.conv": rng.standard_normal((c.filters, self.n_signals, c.width)) / math.sqrt(fan_conv),
            f"{p}.W_hidden": rng.standard_normal((c.hidden, n_in)) / math.sqrt(n_in),
            f"{p}.W_mean": head_scale * rng.standard_normal((self.n_out, c.hidden)),
            f"{p}.b_mean": np.array(mean_bias, dtype=np.float64).reshape(self.n_out),
            f"{p}.W_log_std": head_scale * rng.standard_normal((self.n_out, c.hidden)),
            f"{p}.b_log_std": np.array(log_std_bias, dtype=np.float64).reshape(self.n_out),
        }

    def weight_names(self) -> list[str]:
        return [f"{self.PREFIX}.{w}" for w in self.WEIGHTS]

    def __call__(self, params: Mapping[str, ad.Node], Y_scaled, u, g):
        """Encode a batch: ``Y_scaled`` (B, 4, T), ``u`` (B, 2), ``g`` (B, C) -> (mean, log_std), each (B, n_I)."""
        c, p = self.config, self.PREFIX
        Y_scaled = ad.constant(Y_scaled)
        if Y_scaled.ndim != 3 or Y_scaled.shape[2] != self.n_times:
            raise ValueError(f"encoder built for series length {self.n_times}, got input shape {Y_scaled.shape}")
        h = ad.relu(ad.conv1d(Y_scaled, params[f"{p}.conv"], stride=c.stride))
        h = ad.avg_pool1d(h, c.pool)
        feats = h.reshape((h.shape[0], -1))
        cond = np.concatenate([np.log1p(np.asarray(u, dtype=np.float64)), np.asarray(g, dtype=np.float64)], axis=1)
        x = ad.concat([feats, ad.constant(cond)], axis=1)
        hidden = ad.tanh(x @ params[f"{p}.W_hidden"].T)
        mean = hidden @ params[f"{p}.W_mean"].T + params[f"{p}.b_mean"]
        log_std = hidden @ params[f"{p}.W_log_std"].T + params[f"{p}.b_log_std"]
        return mean, log_std


def encode_individual(encoder: IndividualEncoder, params, Y_scaled, u, g, positive) -> VariationalParams:
    mean, log_std = encoder(params, Y_scaled, u, g)
    return VariationalParams(mean, log_std, np.asarray(positive, dtype=bool))


# ---------------------------------------------------------------------------
# sampling and densities


def sample_latents(params: VariationalParams, noise) -> ad.Node:
    """Reparameterised draw: ``mean + std * noise``, exponentiated on positive dims."""
    base = params.mean + ad.exp(params.log_std) * ad.constant(noise)
    if not params.positive.any():
        return base
    if params.positive.all():
        return ad.exp(base)
    mask = params.positive.astype(np.float64)
    # exp only where positive; the normal dims pass through untouched
    return mask * ad.exp(mask * base) + (1.0 - mask) * base


def to_base(z, positive: np.ndarray) -> ad.Node:
    """Invert the positivity transform; raises on non-positive values of log-normal dims."""
    z = ad.constant(z)
    positive = np.asarray(positive, dtype=bool)
    if not positive.any():
        return z
    if np.any(z.value[..., positive] <= 0):
        raise ValueError("log-normal latent must be strictly positive")
    if positive.all():
        return ad.log(z)
    mask = positive.astype(np.float64)
    safe = mask * z + (1.0 - mask)
    return mask * ad.log(safe) + (1.0 - mask) * z


def gaussian_log_density(x, mean, log_std) -> ad.Node:
    """Elementwise log N(x; mean, exp(log_std)^2)."""
    log_std = ad.constant(log_std)
    diff = (ad.constant(x) - mean) * ad.exp(-log_std)
    return -0.5 * LOG_2PI - log_std - 0.5 * ad.square(diff)


def _log_density(z, mean, log_std, positive) -> ad.Node:
    positive = np.asarray(positive, dtype=bool)
    base = to_base(z, positive)
    dens = gaussian_log_density(base, mean, log_std)
    if positive.any():
        dens = dens - positive.astype(np.float64) * base
    return ad.sum(dens, axis=-1)


def log_q(z, params: VariationalParams) -> ad.Node:
    """Log-density of ``z`` under q, summed over the last (latent) axis."""
    return _log_density(z, params.mean, params.log_std, params.positive)


def log_prior(z, layout: LatentLayout) -> ad.Node:
    """Log-density of ``z`` under the fixed prior of every latent in ``layout``."""
    return _log_density(z, layout.prior_mean, np.log(layout.prior_std), layout.positive)


def condition_group_latents(z_G, g, w_scale, w_shift, positive) -> ad.Node:
    """Group-dependent scale and shift of the group latents.

    ``z' = z * exp(g @ w_scale) + g @ w_shift`` per dimension; positive
    dimensions are transformed in log space, making ``z'`` a group-dependent
    log-normal.  ``z_G`` is (..., n_G), ``g`` (..., C), weights (C, n_G).
    """
    g = np.asarray(g, dtype=np.float64)
    scale = ad.exp(ad.matmul(g, w_scale))
    shift = ad.matmul(g, w_shift)
    positive = np.asarray(positive, dtype=bool)
    if not positive.any():
        return z_G * scale + shift
    base = to_base(z_G, positive)
    moved = base * scale + shift
    if positive.all():
        return ad.exp(moved)
    mask = positive.astype(np.float64)
    return mask * ad.exp(mask * moved) + (1.0 - mask) * moved
