"""Right-hand sides, observers and noise processes for the two model families.

White-box: lag-logistic culture growth driving seven intracellular species of
a double-receiver device.  Black-box: production-minus-degradation dynamics
built from softplus networks, optionally with a learned variance process.

All functions operate on :class:`hds.autodiff.Node` values (plain arrays and
floats are accepted and wrapped), so they can be differentiated end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import _kernels, autodiff as ad

WHITEBOX_STATES = ("c", "RFP", "CFP", "YFP", "R", "S", "F480", "F530")
SIGNALS = ("OD", "RFP", "YFP", "CFP")
N_SIGNALS = len(SIGNALS)

WHITEBOX_INDIVIDUAL = ("r", "K", "t_lag", "r_c")
WHITEBOX_GROUP = ("a_R", "a_S")
WHITEBOX_POPULATION = (
    "d_RFP", "d_CFP", "d_YFP", "d_R", "d_S",
    "a_CFP", "a_YFP", "a_480", "a_530",
    "K_R6", "K_R12", "K_S6", "K_S12", "n_R", "n_S",
    "K_GR76", "K_GS76", "K_GR81", "K_GS81", "eps76", "eps81",
    "sigma_OD", "sigma_RFP", "sigma_YFP", "sigma_CFP",
)
WHITEBOX_PARAMS = WHITEBOX_INDIVIDUAL + WHITEBOX_GROUP + WHITEBOX_POPULATION


def growth_rate(c, t, r, K, t_lag):
    """Lag-logistic specific growth rate: zero before ``t_lag``, logistic after."""
    return r * (1.0 - c / K) * ad.sigmoid(4.0 * (t - ad.constant(t_lag)))


def binding_fractions(C6, C12, K_R6, K_R12, K_S6, K_S12, n_R, n_S):
    """Fractions of the two receiver proteins bound by either signal."""
    C6, C12 = ad.constant(C6), ad.constant(C12)
    r6, r12 = K_R6 * C6, K_R12 * C12
    s6, s12 = K_S6 * C6, K_S12 * C12
    B_R = (r6 ** n_R + r12 ** n_R) / (1.0 + r6 + r12) ** n_R
    B_S = (s6 ** n_S + s12 ** n_S) / (1.0 + s6 + s12) ** n_S
    return B_R, B_S


def response(R, S, B_R, B_S, K_GR, K_GS, eps):
    """Promoter activity between the leak ``eps`` and full induction."""
    act = K_GR * ad.square(R) * B_R + K_GS * ad.square(S) * B_S
    return (eps + act) / (1.0 + act)


@dataclass
class WhiteBoxParams:
    """Values of every white-box parameter, each a scalar or per-sample node.

    ``n_R`` and ``n_S`` are Hill coefficients (already >= 1) and ``eps76`` /
    ``eps81`` are leak fractions in (0, 1): the latent-to-value transforms have
    been applied by the time a ``WhiteBoxParams`` exists.
    """

    values: Mapping[str, object]

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def validate(self) -> None:
        missing = [n for n in WHITEBOX_PARAMS if n not in self.values]
        if missing:
            raise ValueError(f"missing white-box parameters: {missing}")
        for name in WHITEBOX_PARAMS:
            v = ad.constant(self.values[name]).value
            if name in ("eps76", "eps81"):
                ok = np.all((v > 0) & (v < 1))
            elif name in ("n_R", "n_S"):
                ok = np.all(v >= 1)
            elif name == "t_lag":
                ok = np.all(np.isfinite(v))
            else:
                ok = np.all(v > 0)
            if not ok:
                raise ValueError(f"white-box parameter {name} out of range: {v}")


def make_whitebox_rhs(p: WhiteBoxParams, u, fused: bool = True):
    """Build ``rhs(x, t)`` for the eight white-box states.

    ``x`` has shape (8, *batch); ``u`` is ``(C6, C12)``, each a scalar or an
    array matching the batch.  Time-independent quantities (binding fractions,
    lumped synthesis rates) are computed once here.  With ``fused`` the
    per-step work for a (8, N) state runs as one compiled primitive; otherwise
    the derivative is composed from elementary tape operations.
    """
    C6, C12 = u
    B_R, B_S = binding_fractions(C6, C12, p.K_R6, p.K_R12, p.K_S6, p.K_S12, p.n_R, p.n_S)
    kr76, ks76 = p.K_GR76 * B_R, p.K_GS76 * B_S
    kr81, ks81 = p.K_GR81 * B_R, p.K_GS81 * B_S
    r_over_K = p.r / p.K
    rc = p.r_c
    cfp_rate, yfp_rate = p.a_CFP * rc, p.a_YFP * rc
    r_rate, s_rate = p.a_R * rc, p.a_S * rc
    f480_rate, f530_rate = p.a_480 * rc, p.a_530 * rc
    t_lag = ad.constant(p.t_lag)

    def composed(x, t):
        c, rfp, cfp, yfp, R, S, f480, f530 = (x[i] for i in range(8))
        gamma = (p.r - r_over_K * c) * ad.sigmoid(4.0 * (t - t_lag))
        R2, S2 = ad.square(R), ad.square(S)
        act76 = kr76 * R2 + ks76 * S2
        act81 = kr81 * R2 + ks81 * S2
        f76 = (p.eps76 + act76) / (1.0 + act76)
        f81 = (p.eps81 + act81) / (1.0 + act81)
        return ad.stack([
            gamma * c,
            rc - (p.d_RFP + gamma) * rfp,
            cfp_rate * f76 - (p.d_CFP + gamma) * cfp,
            yfp_rate * f81 - (p.d_YFP + gamma) * yfp,
            r_rate - (p.d_R + gamma) * R,
            s_rate - (p.d_S + gamma) * S,
            f480_rate - gamma * f480,
            f530_rate - gamma * f530,
        ])

    if not fused:
        return composed

    coefficients = (
        p.r, r_over_K, t_lag, rc, cfp_rate, yfp_rate, r_rate, s_rate, f480_rate, f530_rate,
        p.d_RFP, p.d_CFP, p.d_YFP, p.d_R, p.d_S, p.eps76, p.eps81, kr76, ks76, kr81, ks81,
    )
    stacked = {}

    def rhs(x, t):
        x = ad.constant(x)
        if x.ndim != 2:
            return composed(x, t)
        n = x.shape[1]
        if n not in stacked:
            stacked[n] = ad.stack([ad.broadcast_to(ad.constant(v), (n,)) for v in coefficients])
        return _whitebox_fused(x, stacked[n], float(t))
    return rhs


def _whitebox_fused(x: ad.Node, coef: ad.Node, t: float) -> ad.Node:
    xv, pv = x.value, coef.value
    out = _kernels.whitebox_forward(xv, pv, t)

    def vjp(g):
        gx, gp = _kernels.whitebox_vjp(xv, pv, t, np.ascontiguousarray(g))
        return gx, gp
    return ad.make_node(out, "whitebox_rhs", (x, coef), vjp)


def whitebox_rhs(state, t, p: WhiteBoxParams, u):
    """d(state)/dt for a single evaluation; see :func:`make_whitebox_rhs`."""
    return make_whitebox_rhs(p, u)(ad.constant(state), t)


def whitebox_initial_state(first_od):
    """Density anchored to the first OD observation; every other species at zero."""
    od = np.asarray(first_od, dtype=np.float64)
    x0 = np.zeros((len(WHITEBOX_STATES),) + od.shape)
    x0[0] = od
    return x0


def observe(X, model_kind: str):
    """Map a state trajectory (n_states, T, ...) to mean signals (4, T, ...)."""
    X = ad.constant(X)
    if model_kind == "whitebox":
        if X.shape[0] != len(WHITEBOX_STATES):
            raise ValueError(f"white-box observer needs {len(WHITEBOX_STATES)} states, got {X.shape[0]}")
        c = X[0]
        return ad.stack([c, c * X[1], c * (X[3] + X[7]), c * (X[2] + X[6])])
    if model_kind == "blackbox":
        if X.shape[0] < 4:
            raise ValueError(f"black-box observer needs at least 4 states, got {X.shape[0]}")
        x0 = X[0]
        return ad.stack([x0, x0 * X[1], x0 * X[2], x0 * X[3]])
    raise ValueError(f"unknown model kind {model_kind!r}")


# ---------------------------------------------------------------------------
# black-box dynamics


@dataclass(frozen=True)
class BlackBoxConfig:
    n_states: int = 5
    hidden: int = 25
    n_P: int = 5
    n_G: int = 2
    n_I: int = 5

    def __post_init__(self):
        if self.n_states < 4:
            raise ValueError(f"black-box needs n_states >= 4 (observer uses x0..x3), got {self.n_states}")
        if min(self.hidden, self.n_P + self.n_G + self.n_I) < 1:
            raise ValueError("black-box needs at least one hidden unit and one latent")


def context_vector(z_P, z_G, z_I, u, g):
    """Stack the conditioning inputs [z_P; z_G; z_I; log1p(u); g] along axis 0.

    Each latent block has shape (n_block, *batch); ``u`` is (2, *batch) and
    ``g`` is (n_components, *batch).
    """
    parts = [p for p in (z_P, z_G, z_I) if p is not None and p.shape[0] > 0]
    parts.append(ad.log1p(ad.constant(u)))
    parts.append(ad.constant(g))
    return ad.concat(parts, axis=0)


class SoftplusNet:
    """One tanh hidden layer with a softplus output: omega^+(inputs, context).

    Weight names under ``prefix``: ``W_in`` (hidden, n_in), ``W_ctx`` (hidden,
    n_ctx), ``b1`` (hidden, 1), ``W_out`` (n_out, hidden), ``b2`` (n_out, 1).
    """

    def __init__(self, prefix: str):
        self.prefix = prefix

    @staticmethod
    def init(rng: np.random.Generator, n_in: int, n_ctx: int, n_out: int, hidden: int, scale: float = 0.1):
        return {
            "W_in": scale * rng.standard_normal((hidden, n_in)),
            "W_ctx": scale * rng.standard_normal((hidden, n_ctx)),
            "b1": np.zeros((hidden, 1)),
            "W_out": scale * rng.standard_normal((n_out, hidden)),
            "b2": np.zeros((n_out, 1)),
        }

    def bind(self, params: Mapping[str, ad.Node], context):
        """Return ``f(inputs)``; the context contribution is computed once."""
        w = {k: params[f"{self.prefix}.{k}"] for k in ("W_in", "W_ctx", "b1", "W_out", "b2")}
        pre = w["W_ctx"] @ context + w["b1"]

        def f(inputs):
            h = ad.tanh(w["W_in"] @ inputs + pre)
            return ad.softplus(w["W_out"] @ h + w["b2"])
        return f


def make_blackbox_rhs(params, context, prefix: str = "theta.dyn"):
    """``dx/dt = omega1(x) - x * omega2(x)`` with both nets conditioned on ``context``."""
    grow = SoftplusNet(f"{prefix}.grow").bind(params, context)
    decay = SoftplusNet(f"{prefix}.decay").bind(params, context)

    def rhs(x, t):
        return grow(x) - x * decay(x)
    return rhs


def make_noise_rhs(params, context, prefix: str = "theta.noise"):
    """``dv/dt = omega3(v, x) - v * omega4(v, x)``; returns ``rhs(v, x, t)``."""
    grow = SoftplusNet(f"{prefix}.grow").bind(params, context)
    decay = SoftplusNet(f"{prefix}.decay").bind(params, context)

    def rhs(v, x, t):
        inputs = ad.concat([v, x], axis=0)
        return grow(inputs) - v * decay(inputs)
    return rhs


def blackbox_rhs(x, psi, params, prefix: str = "theta.dyn"):
    """Single evaluation of the black-box state derivative."""
    return make_blackbox_rhs(params, ad.constant(psi), prefix)(ad.constant(x), 0.0)


def noise_rhs(v, x, psi, params, prefix: str = "theta.noise"):
    """Single evaluation of the black-box variance derivative."""
    return make_noise_rhs(params, ad.constant(psi), prefix)(ad.constant(v), ad.constant(x), 0.0)
