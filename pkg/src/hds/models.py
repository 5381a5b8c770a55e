"""White-box and black-box hierarchical models: latent layout, posterior and decoder.

A model owns the latent layout (with priors), the individual encoder and
the decoder that turns latent samples into signal means and variances.
Parameter names are prefixed ``phi.`` (variational) or ``theta.``
(generative) and live in a flat dict of arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import dynamics
from .data import Batch, CassetteCatalog
from .dynamics import BlackBoxConfig, SoftplusNet, WhiteBoxParams
from .posterior import (
    EncoderConfig, IndividualEncoder, LatentLayout, LatentSpec, VariationalParams,
    condition_group_latents, group_params,
)
from .solver import TimeGrid, simulate, simulate_with_noise

MODEL_KINDS = ("whitebox", "blackbox")
# variational stds start at this fraction of the prior std
INIT_STD_FRACTION = 0.1


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "whitebox"
    substeps: int = 4
    infer_hill: bool = True
    fixed_hill: Mapping[str, float] = field(default_factory=lambda: {"n_R": 1.5, "n_S": 1.5})
    initial_density_window: int = 1
    group_conditioning: bool = True
    blackbox: BlackBoxConfig = field(default_factory=BlackBoxConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.initial_density_window < 1:
            raise ValueError("initial_density_window must be >= 1")
        for name in ("n_R", "n_S"):
            if not self.infer_hill and float(self.fixed_hill.get(name, 0.0)) < 1.0:
                raise ValueError(f"fixed Hill coefficient {name} must be >= 1")


# ---------------------------------------------------------------------------
# latent catalogues and default priors


def required_latents(config: ModelConfig) -> dict[str, str]:
    """Latent name -> block tag for the chosen model kind."""
    if config.kind == "whitebox":
        pop = [n for n in dynamics.WHITEBOX_POPULATION if config.infer_hill or n not in ("n_R", "n_S")]
        out = {n: "P" for n in pop}
        out.update({n: "G" for n in dynamics.WHITEBOX_GROUP})
        out.update({n: "I" for n in dynamics.WHITEBOX_INDIVIDUAL})
        return out
    bb = config.blackbox
    out = {f"zP_{i}": "P" for i in range(bb.n_P)}
    out.update({f"zG_{i}": "G" for i in range(bb.n_G)})
    out.update({f"zI_{i}": "I" for i in range(bb.n_I)})
    return out


def _ln(name, block, median, std):
    return LatentSpec(name, block, "lognormal", math.log(median), std)


def default_priors(config: ModelConfig) -> dict[str, LatentSpec]:
    """Placeholder priors.

    White-box values are centred on the default synthetic ground truth; they
    are not laboratory values.  ``n_R``/``n_S`` are priors on the excess
    ``n - 1`` and ``eps76``/``eps81`` on the logit of the leak fraction.
    Black-box latents are standard normal.
    """
    if config.kind == "blackbox":
        return {n: LatentSpec(n, b) for n, b in required_latents(config).items()}
    pop_truth = {
        "d_RFP": 0.1, "d_CFP": 0.2, "d_YFP": 0.2, "d_R": 0.3, "d_S": 0.3,
        "a_CFP": 2.0, "a_YFP": 2.0, "a_480": 0.05, "a_530": 0.05,
        "K_R6": 0.1, "K_R12": 0.002, "K_S6": 0.002, "K_S12": 0.1,
        "K_GR76": 0.05, "K_GS76": 0.002, "K_GR81": 0.002, "K_GS81": 0.05,
    }
    priors = {n: _ln(n, "P", v, 0.2) for n, v in pop_truth.items()}
    priors["n_R"] = _ln("n_R", "P", 0.5, 0.3)
    priors["n_S"] = _ln("n_S", "P", 0.5, 0.3)
    logit = math.log(0.05 / 0.95)
    priors["eps76"] = LatentSpec("eps76", "P", "normal", logit, 0.5)
    priors["eps81"] = LatentSpec("eps81", "P", "normal", logit, 0.5)
    for s, v in (("OD", 0.05), ("RFP", 0.5), ("YFP", 0.5), ("CFP", 0.5)):
        priors[f"sigma_{s}"] = _ln(f"sigma_{s}", "P", v, 1.0)
    priors["a_R"] = _ln("a_R", "G", 1.0, 1.0)
    priors["a_S"] = _ln("a_S", "G", 1.0, 1.0)
    priors["r"] = _ln("r", "I", 1.0, 0.25)
    priors["K"] = _ln("K", "I", 1.0, 0.25)
    priors["t_lag"] = _ln("t_lag", "I", 3.0, 0.25)
    priors["r_c"] = _ln("r_c", "I", 1.0, 0.25)
    return priors


def build_layout(config: ModelConfig, overrides: Mapping[str, LatentSpec] | None = None) -> LatentLayout:
    """Layout from default priors updated with ``overrides``; unknown names are rejected."""
    required = required_latents(config)
    priors = dict(default_priors(config))
    for name, spec in (overrides or {}).items():
        if name not in required:
            raise KeyError(f"prior given for unknown latent {name!r} (model kind {config.kind})")
        priors[name] = spec
    return LatentLayout.from_priors(required, priors)


# ---------------------------------------------------------------------------
# models


class HierarchicalModel:
    """Shared posterior machinery; subclasses supply the decoder."""

    kind = ""

    def __init__(self, config: ModelConfig, layout: LatentLayout, catalog: CassetteCatalog,
                 n_times: int, scales, encoder: EncoderConfig | None = None):
        self.config = config
        self.layout = layout
        self.catalog = catalog
        self.n_times = int(n_times)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(len(dynamics.SIGNALS))
        self.encoder = IndividualEncoder(encoder or EncoderConfig(), self.n_times, len(dynamics.SIGNALS),
                                         2 + catalog.width, layout.size("I"))
        self.n_blocks = len(catalog.blocks)

    # -- parameters ------------------------------------------------------
    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        lay = self.layout
        init_log_std = np.log(lay.prior_std * INIT_STD_FRACTION)
        p = {}
        sP, sG, sI = lay.slice("P"), lay.slice("G"), lay.slice("I")
        p["phi.pop.mean"] = lay.prior_mean[sP].copy()
        p["phi.pop.log_std"] = init_log_std[sP].copy()
        C = self.catalog.width
        # each device code has one entry per block, so g @ nu starts at the prior
        p["phi.group.mean"] = np.tile(lay.prior_mean[sG] / self.n_blocks, (C, 1))
        p["phi.group.log_std"] = np.tile(init_log_std[sG] / self.n_blocks, (C, 1))
        if self.config.group_conditioning:
            p["theta.group.w_scale"] = np.zeros((C, lay.size("G")))
            p["theta.group.w_shift"] = np.zeros((C, lay.size("G")))
        p.update(self.encoder.init(rng, lay.prior_mean[sI], init_log_std[sI]))
        return p

    def l2_weight_names(self) -> list[str]:
        return self.encoder.weight_names()

    # -- posterior -------------------------------------------------------
    def variational(self, params: Mapping[str, ad.Node], batch: Batch) -> VariationalParams:
        lay, B = self.layout, batch.size
        means, log_stds = [], []
        if lay.size("P"):
            n = lay.size("P")
            means.append(ad.broadcast_to(ad.reshape(params["phi.pop.mean"], (1, n)), (B, n)))
            log_stds.append(ad.broadcast_to(ad.reshape(params["phi.pop.log_std"], (1, n)), (B, n)))
        if lay.size("G"):
            q = group_params(batch.g, params["phi.group.mean"], params["phi.group.log_std"],
                             lay.positive[lay.slice("G")], self.catalog.sizes)
            means.append(q.mean)
            log_stds.append(q.log_std)
        if lay.size("I"):
            scaled = batch.Y / self.scales[None, :, None]
            m, s = self.encoder(params, scaled, batch.u, batch.g)
            means.append(m)
            log_stds.append(s)
        return VariationalParams(ad.concat(means, axis=1), ad.concat(log_stds, axis=1), lay.positive)

    def blocks(self, params, z, batch: Batch):
        """Split samples (N, d) into P, G and I blocks, conditioning the group block."""
        lay = self.layout
        z = ad.constant(z)
        zP, zG, zI = z[:, lay.slice("P")], z[:, lay.slice("G")], z[:, lay.slice("I")]
        if self.config.group_conditioning and lay.size("G"):
            zG = condition_group_latents(zG, batch.g, params["theta.group.w_scale"], params["theta.group.w_shift"],
                                         lay.positive[lay.slice("G")])
        return zP, zG, zI

    def group_summary(self, params: Mapping[str, np.ndarray], g) -> dict[str, dict[str, float]]:
        """Posterior of each group latent for device code ``g`` after conditioning.

        Returns ``{name: {"mean", "median", "base_mean", "base_std"}}``; for
        log-normal dims ``base_*`` refer to the logarithm.
        """
        lay = self.layout
        g = np.asarray(g, dtype=np.float64)
        sG = lay.slice("G")
        m = g @ np.asarray(params["phi.group.mean"])
        s = np.exp(g @ np.asarray(params["phi.group.log_std"]))
        if self.config.group_conditioning:
            a = np.exp(g @ np.asarray(params["theta.group.w_scale"]))
            b = g @ np.asarray(params["theta.group.w_shift"])
            m, s = m * a + b, s * a
        out = {}
        for j, spec in enumerate(lay.specs[sG]):
            if spec.positive:
                out[spec.name] = {"mean": float(np.exp(m[j] + 0.5 * s[j] ** 2)), "median": float(np.exp(m[j])),
                                  "base_mean": float(m[j]), "base_std": float(s[j])}
            else:
                out[spec.name] = {"mean": float(m[j]), "median": float(m[j]),
                                  "base_mean": float(m[j]), "base_std": float(s[j])}
        return out

    def grid(self, batch: Batch) -> TimeGrid:
        return TimeGrid(batch.times, self.config.substeps)

    def decode(self, params, z, batch: Batch):
        raise NotImplementedError


class WhiteBoxModel(HierarchicalModel):
    """Mechanistic double-receiver model with constant per-signal noise."""

    kind = "whitebox"

    def parameter_values(self, params, z, batch: Batch) -> WhiteBoxParams:
        """Map latent samples (N, d) to white-box parameter nodes of shape (N,)."""
        zP, zG, zI = self.blocks(params, z, batch)
        values = {}
        for block, zb in (("P", zP), ("G", zG), ("I", zI)):
            for j, spec in enumerate(self.layout.block(block)):
                values[spec.name] = zb[:, j]
        for name in ("n_R", "n_S"):
            if name in values:
                values[name] = 1.0 + values[name]
            else:
                values[name] = float(self.config.fixed_hill[name])
        for name in ("eps76", "eps81"):
            values[name] = ad.sigmoid(values[name])
        return WhiteBoxParams(values)

    def decode(self, params, z, batch: Batch):
        p = self.parameter_values(params, z, batch)
        rhs = dynamics.make_whitebox_rhs(p, (batch.u[:, 0], batch.u[:, 1]))
        x0 = dynamics.whitebox_initial_state(batch.first_od(self.config.initial_density_window))
        X = simulate(rhs, x0, self.grid(batch))
        M = dynamics.observe(X, "whitebox")
        sig = ad.stack([p.sigma_OD, p.sigma_RFP, p.sigma_YFP, p.sigma_CFP])
        var = ad.reshape(ad.square(sig), (len(dynamics.SIGNALS), 1, batch.size))
        return M, var

    def trajectories(self, params, z, batch: Batch) -> np.ndarray:
        """State trajectories (8, T, N) for inspection."""
        p = self.parameter_values(params, z, batch)
        rhs = dynamics.make_whitebox_rhs(p, (batch.u[:, 0], batch.u[:, 1]))
        x0 = dynamics.whitebox_initial_state(batch.first_od(self.config.initial_density_window))
        return simulate(rhs, x0, self.grid(batch)).value


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class BlackBoxModel(HierarchicalModel):
    """Softplus production/degradation networks with a learned variance process."""

    kind = "blackbox"
    X0_INIT = 0.01
    V0_INIT = 0.1

    @property
    def n_context(self) -> int:
        return self.layout.size() + 2 + self.catalog.width

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        p = super().init_params(rng)
        bb = self.config.blackbox
        nx, nv, nc = bb.n_states, len(dynamics.SIGNALS), self.n_context
        for prefix, n_in, n_out in (("theta.dyn.grow", nx, nx), ("theta.dyn.decay", nx, nx),
                                    ("theta.noise.grow", nv + nx, nv), ("theta.noise.decay", nv + nx, nv)):
            for k, v in SoftplusNet.init(rng, n_in, nc, n_out, bb.hidden).items():
                p[f"{prefix}.{k}"] = v
        p["theta.x0"] = np.full((nx - 1, 1), _inv_softplus(self.X0_INIT))
        p["theta.v0"] = np.full((nv, 1), _inv_softplus(self.V0_INIT))
        return p

    def _simulate(self, params, z, batch: Batch):
        zP, zG, zI = self.blocks(params, z, batch)
        N = batch.size
        ctx = dynamics.context_vector(zP.T, zG.T, zI.T, batch.u.T, batch.g.T)
        od = batch.first_od(self.config.initial_density_window).reshape(1, N)
        nx = self.config.blackbox.n_states
        x0 = ad.concat([ad.constant(od), ad.broadcast_to(ad.softplus(params["theta.x0"]), (nx - 1, N))], axis=0)
        v0 = ad.broadcast_to(ad.softplus(params["theta.v0"]), (len(dynamics.SIGNALS), N))
        return simulate_with_noise(dynamics.make_blackbox_rhs(params, ctx), dynamics.make_noise_rhs(params, ctx),
                                   x0, v0, self.grid(batch))

    def decode(self, params, z, batch: Batch):
        X, V = self._simulate(params, z, batch)
        return dynamics.observe(X, "blackbox"), V

    def trajectories(self, params, z, batch: Batch) -> np.ndarray:
        return self._simulate(params, z, batch)[0].value


def build_model(config: ModelConfig, catalog: CassetteCatalog, n_times: int, scales,
                encoder: EncoderConfig | None = None,
                priors: Mapping[str, LatentSpec] | None = None) -> HierarchicalModel:
    layout = build_layout(config, priors)
    cls = WhiteBoxModel if config.kind == "whitebox" else BlackBoxModel
    return cls(config, layout, catalog, n_times, scales, encoder)
