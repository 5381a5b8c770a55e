import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hds import autodiff as ad
from hds import dynamics as dyn
from hds.solver import VARIANCE_FLOOR, TimeGrid, simulate, simulate_with_noise
from gradcheck import max_grad_error

LN2 = math.log(2.0)


def random_whitebox(rng, n=None):
    """Parameter values in their valid ranges; scalars or arrays of length n."""
    size = n
    v = {name: rng.lognormal(math.log(0.3), 0.8, size) for name in dyn.WHITEBOX_PARAMS}
    v["t_lag"] = rng.uniform(0.0, 6.0, size)
    v["n_R"] = 1.0 + rng.uniform(0.0, 2.0, size)
    v["n_S"] = 1.0 + rng.uniform(0.0, 2.0, size)
    v["eps76"] = rng.uniform(0.01, 0.5, size)
    v["eps81"] = rng.uniform(0.01, 0.5, size)
    return dyn.WhiteBoxParams(v)


def zero_net(prefix, n_in, n_ctx, n_out, hidden=4):
    return {f"{prefix}.{k}": np.zeros_like(w)
            for k, w in dyn.SoftplusNet.init(np.random.default_rng(0), n_in, n_ctx, n_out, hidden).items()}


def random_nets(rng, nx, n_ctx, hidden=6, scale=0.5):
    p = {}
    for prefix, n_in, n_out in (("theta.dyn.grow", nx, nx), ("theta.dyn.decay", nx, nx),
                                ("theta.noise.grow", 4 + nx, 4), ("theta.noise.decay", 4 + nx, 4)):
        for k, w in dyn.SoftplusNet.init(rng, n_in, n_ctx, n_out, hidden, scale).items():
            p[f"{prefix}.{k}"] = w + (scale * rng.standard_normal(w.shape) if k.startswith("b") else 0.0)
    return p


class TestGrowthRate:
    def test_zero_at_capacity(self):
        assert dyn.growth_rate(2.0, 7.0, 1.3, 2.0, 3.0).value == 0.0

    def test_half_at_lag(self):
        assert dyn.growth_rate(0.0, 3.0, 1.0, 2.0, 3.0).value == pytest.approx(0.5, rel=1e-15)

    def test_saturates_after_lag(self):
        assert dyn.growth_rate(0.0, 13.0, 1.0, 2.0, 3.0).value == pytest.approx(1 / (1 + math.exp(-40)), rel=1e-15)


class TestBindingFractions:
    def test_no_signal_is_unbound(self):
        B_R, B_S = dyn.binding_fractions(0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 1.5, 2.0)
        assert B_R.value == 0.0 and B_S.value == 0.0

    def test_half_bound(self):
        B_R, _ = dyn.binding_fractions(1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        assert B_R.value == pytest.approx(0.5, rel=1e-15)

    def test_two_signals_hill_two(self):
        B_R, _ = dyn.binding_fractions(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0)
        assert B_R.value == pytest.approx(2 / 9, rel=1e-15)

    @given(st.floats(0, 1e4), st.floats(0, 1e4), st.floats(1e-4, 10), st.floats(1e-4, 10), st.floats(1, 4))
    @settings(max_examples=200, deadline=None)
    def test_in_unit_interval(self, C6, C12, k6, k12, n):
        B_R, _ = dyn.binding_fractions(C6, C12, k6, k12, 1.0, 1.0, n, 1.0)
        assert 0.0 <= B_R.value <= 1.0 + 1e-12


class TestResponse:
    def test_no_receivers_gives_leak(self):
        assert dyn.response(0.0, 0.0, 0.7, 0.4, 2.0, 3.0, 0.05).value == 0.05

    def test_saturation(self):
        assert dyn.response(1e8, 0.0, 1.0, 0.0, 1.0, 1.0, 0.05).value == pytest.approx(1.0, abs=1e-12)

    def test_substitution(self):
        assert dyn.response(1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.1).value == pytest.approx(0.55, rel=1e-15)

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.99))
    @settings(max_examples=200, deadline=None)
    def test_bounded_and_monotone(self, R, S, B_R, B_S, eps):
        f = dyn.response(R, S, B_R, B_S, 0.5, 0.2, eps).value
        assert eps - 1e-12 <= f <= 1.0
        assert dyn.response(R, S, min(B_R + 0.1, 1.0), B_S, 0.5, 0.2, eps).value >= f - 1e-12


class TestWhiteBoxRhs:
    def test_rfp_before_lag(self):
        p = random_whitebox(np.random.default_rng(0))
        p.values.update(t_lag=1e3, d_RFP=1e-300)
        x = np.array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        dx = dyn.whitebox_rhs(x, 0.0, p, (0.0, 0.0)).value
        assert dx[1] == pytest.approx(p.r_c, rel=1e-12)

    def test_leaky_cfp_production(self):
        p = random_whitebox(np.random.default_rng(1))
        dx = dyn.whitebox_rhs(np.zeros(8), 2.0, p, (0.0, 0.0)).value
        assert dx[2] == pytest.approx(p.a_CFP * p.r_c * p.eps76, rel=1e-14)

    def test_receiver_steady_state(self):
        """With gamma pinned at r, [R] relaxes to a_R r_c / (d_R + r)."""
        p = random_whitebox(np.random.default_rng(2))
        p.values.update(K=1e9, t_lag=-100.0, r=0.1, d_R=0.5)
        X = simulate(dyn.make_whitebox_rhs(p, (0.0, 0.0), fused=False), dyn.whitebox_initial_state(0.01),
                     TimeGrid(np.linspace(0, 60, 61), 4)).value
        expected = p.a_R * p.r_c / (p.d_R + p.r)
        assert X[4, -1] == pytest.approx(expected, rel=1e-3)

    def test_boundary_never_points_outward(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = random_whitebox(rng)
            x = rng.uniform(0, 3, 8)
            x[rng.random(8) < 0.5] = 0.0
            dx = dyn.whitebox_rhs(x, rng.uniform(0, 24), p, rng.uniform(0, 100, 2)).value
            assert np.all(dx[x == 0.0] >= 0.0)

    def test_fused_matches_composed(self):
        rng = np.random.default_rng(4)
        p = random_whitebox(rng, 6)
        u = (rng.uniform(0, 50, 6), rng.uniform(0, 50, 6))
        x = rng.uniform(0, 2, (8, 6))
        fused = dyn.make_whitebox_rhs(p, u)(x, 2.5).value
        composed = dyn.make_whitebox_rhs(p, u, fused=False)(x, 2.5).value
        np.testing.assert_allclose(fused, composed, rtol=1e-13, atol=1e-15)

    @pytest.mark.parametrize("fused", [True, False])
    def test_gradients_match_finite_differences(self, fused):
        rng = np.random.default_rng(5)
        weights = rng.normal(size=(8, 3))
        names = ("r", "K", "t_lag", "a_R", "K_R6", "n_R", "K_GR76", "eps76", "d_CFP")
        for _ in range(20):
            base = random_whitebox(rng, 3).values
            u = (rng.uniform(0, 50, 3), rng.uniform(0, 50, 3))

            def f(x, **theta):
                p = dyn.WhiteBoxParams({**base, **theta})
                return ad.sum(dyn.make_whitebox_rhs(p, u, fused=fused)(x, 2.0) * weights)

            inputs = {"x": rng.uniform(0.1, 2, (8, 3)), **{n: base[n] for n in names}}
            assert max_grad_error(f, inputs) < 1e-5

    def test_validate_rejects_bad_values(self):
        p = random_whitebox(np.random.default_rng(6))
        p.values["eps81"] = 1.2
        with pytest.raises(ValueError, match="eps81"):
            p.validate()
        p.values.pop("eps81")
        with pytest.raises(ValueError, match="missing"):
            p.validate()


class TestObserve:
    def test_whitebox_zero_density(self):
        X = np.random.default_rng(0).uniform(size=(8, 5))
        X[0] = 0.0
        np.testing.assert_array_equal(dyn.observe(X, "whitebox").value, np.zeros((4, 5)))

    def test_whitebox_yfp_includes_autofluorescence(self):
        X = np.zeros((8, 1))
        X[0], X[3], X[7] = 2.0, 1.0, 0.5
        assert dyn.observe(X, "whitebox").value[2, 0] == 3.0

    def test_blackbox(self):
        X = np.arange(1.0, 6.0).reshape(5, 1)
        np.testing.assert_array_equal(dyn.observe(X, "blackbox").value[:, 0], [1, 2, 3, 4])

    @pytest.mark.parametrize("kind,n", [("whitebox", 5), ("blackbox", 3)])
    def test_too_few_states(self, kind, n):
        with pytest.raises(ValueError, match="states"):
            dyn.observe(np.zeros((n, 2)), kind)


class TestBlackBox:
    nx, n_ctx = 5, 7

    def test_zero_weights_give_ln2(self):
        params = {**zero_net("theta.dyn.grow", self.nx, self.n_ctx, self.nx),
                  **zero_net("theta.dyn.decay", self.nx, self.n_ctx, self.nx)}
        x = np.random.default_rng(0).normal(size=(self.nx, 3))
        out = dyn.blackbox_rhs(x, np.ones((self.n_ctx, 3)), params).value
        np.testing.assert_allclose(out, LN2 - x * LN2, rtol=1e-15)

    def test_zero_weights_noise(self):
        params = {**zero_net("theta.noise.grow", 4 + self.nx, self.n_ctx, 4),
                  **zero_net("theta.noise.decay", 4 + self.nx, self.n_ctx, 4)}
        v = np.abs(np.random.default_rng(1).normal(size=(4, 2)))
        out = dyn.noise_rhs(v, np.ones((self.nx, 2)), np.ones((self.n_ctx, 2)), params).value
        np.testing.assert_allclose(out, LN2 * (1 - v), rtol=1e-15)

    def test_nonnegative_flux_at_origin(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            params = random_nets(rng, self.nx, self.n_ctx)
            psi = rng.normal(size=(self.n_ctx, 4))
            assert np.all(dyn.blackbox_rhs(np.zeros((self.nx, 4)), psi, params).value >= 0)
            assert np.all(dyn.noise_rhs(np.zeros((4, 4)), rng.normal(size=(self.nx, 4)), psi, params).value >= 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        weights = rng.normal(size=(self.nx, 2))
        for _ in range(20):
            params = random_nets(rng, self.nx, self.n_ctx)
            dyn_names = [k for k in params if k.startswith("theta.dyn")]
            x, psi = rng.normal(size=(self.nx, 2)), rng.normal(size=(self.n_ctx, 2))

            def f(x, psi, **theta):
                return ad.sum(dyn.blackbox_rhs(x, psi, theta) * weights)

            inputs = {"x": x, "psi": psi, **{k: params[k] for k in dyn_names}}
            assert max_grad_error(f, inputs) < 1e-4

    def test_variance_stays_nonnegative(self):
        rng = np.random.default_rng(4)
        grid = TimeGrid(np.linspace(0, 24, 25), 2)
        for _ in range(100):
            params = random_nets(rng, self.nx, self.n_ctx, scale=1.0)
            ctx = ad.constant(rng.normal(size=(self.n_ctx, 3)))
            X, V = simulate_with_noise(dyn.make_blackbox_rhs(params, ctx), dyn.make_noise_rhs(params, ctx),
                                       rng.uniform(0, 1, (self.nx, 3)), rng.uniform(0, 1, (4, 3)), grid)
            assert V.value.min() >= VARIANCE_FLOOR

    def test_context_layout(self):
        ctx = dyn.context_vector(np.ones((2, 3)), np.ones((1, 3)) * 2, np.zeros((0, 3)),
                                 np.full((2, 3), math.e - 1), np.ones((4, 3)))
        assert ctx.shape == (9, 3)
        np.testing.assert_allclose(ctx.value[3:5], 1.0)

    def test_config_requires_observer_states(self):
        with pytest.raises(ValueError, match="n_states"):
            dyn.BlackBoxConfig(n_states=3)
