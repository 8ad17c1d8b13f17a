import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mltcn.ecm as ecm
from mltcn._math import jaakkola_b, logit
from mltcn.criteria import bic, count_parameters
from mltcn.ecm import (EXTREME, NORMAL, Bound, FitConfig, aitken_converged, e_step, fit,
                       initialize, lower_bound, posterior_moments, update_eta, update_loadings,
                       update_mixing, update_tau, update_xi)
from mltcn.exceptions import EmptyComponent, FitFailed, NumericalBreakdown
from mltcn.model import MltcnParams, design_params, sample_mltcn, true_log_likelihood_oracle

from oracles import eta_by_search, lt_loadings, lt_posterior, lt_sweep


def one_component(alpha, loadings, tau=0.8, eta=2.5):
    alpha = np.asarray(alpha, dtype=float).reshape(1, -1)
    loadings = np.asarray(loadings, dtype=float).reshape(1, alpha.shape[1], -1)
    return MltcnParams(pi=[1.0], alpha=alpha, loadings=loadings, tau=[tau], eta=[eta])


def random_problem(seed, n=30, M=5, G=2, D=2):
    rng = np.random.default_rng(seed)
    pi = rng.dirichlet(np.ones(G) * 3)
    params = MltcnParams(pi=pi, alpha=rng.normal(0, 1, (G, M)), loadings=rng.normal(0, 1, (G, M, D)),
                         tau=rng.uniform(0.55, 0.95, G), eta=rng.uniform(1.5, 5, G))
    x = (rng.random((n, M)) < 0.5).astype(float)
    xi = rng.uniform(0.1, 3, (G, 2, n, M))
    return x, params, xi


class TestPosteriorMoments:
    def test_scalar_example(self):
        p = one_component([0.0], [1.0])
        mom = posterior_moments(np.array([[1.0]]), p, np.ones((1, 2, 1, 1)))
        b1 = (0.5 - 1.0 / (1.0 + math.exp(-1.0))) / 2.0
        sigma = 1.0 / (1.0 - 2.0 * b1)
        assert mom.sigma[0, NORMAL, 0, 0, 0] == pytest.approx(sigma, abs=1e-14)
        assert mom.mu[0, NORMAL, 0, 0] == pytest.approx(0.5 * sigma, abs=1e-14)
        assert sigma == pytest.approx(0.8123090300974, abs=1e-12)
        assert 0.5 * sigma == pytest.approx(0.4061545150487, abs=1e-12)

    def test_zero_slopes_give_prior(self):
        p = one_component(np.zeros(3), np.zeros((3, 2)), eta=3.0)
        mom = posterior_moments(np.array([[1, 0, 1.0]]), p, np.ones((1, 2, 1, 3)))
        assert np.allclose(mom.sigma[0, NORMAL, 0], np.eye(2))
        assert np.allclose(mom.sigma[0, EXTREME, 0], 3.0 * np.eye(2))
        assert np.allclose(mom.mu, 0.0)

    def test_matches_loop_oracle(self):
        x, params, xi = random_problem(4, n=7, M=4, G=2, D=2)
        mom = posterior_moments(x, params, xi)
        for g in range(2):
            for i in range(7):
                mean, cov = lt_posterior(x[i], params.alpha[g], params.loadings[g], xi[g, NORMAL, i])
                assert np.allclose(mom.mu[g, NORMAL, i], mean, atol=1e-12)
                assert np.allclose(mom.sigma[g, NORMAL, i], cov, atol=1e-12)
        assert np.allclose(mom.logdet_sigma, np.linalg.slogdet(mom.sigma)[1])

    def test_covariances_positive_definite(self):
        x, params, xi = random_problem(5)
        sig = posterior_moments(x, params, xi).sigma
        assert np.all(np.linalg.eigvalsh(sig) > 0)
        assert np.allclose(sig, sig.swapaxes(-1, -2))


class TestXiUpdate:
    def test_zero_slopes(self):
        p = one_component([-1.5, 2.0], np.zeros((2, 1)))
        xi = update_xi(p, np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1, 1)))
        assert np.allclose(xi, [1.5, 2.0])

    def test_centred_posterior(self):
        p = one_component([0.0], [[3.0, 4.0]])
        xi = update_xi(p, np.zeros((1, 2, 1, 2)), np.broadcast_to(np.eye(2), (1, 2, 1, 2, 2)))
        assert np.allclose(xi, 5.0)

    def test_direct_arithmetic(self):
        p = one_component([1.0], [1.0])
        xi = update_xi(p, np.ones((1, 2, 1, 1)), np.zeros((1, 2, 1, 1, 1)))
        assert np.allclose(xi, 2.0)

    def test_nonnegative(self):
        x, params, xi = random_problem(6)
        mom = posterior_moments(x, params, xi)
        assert np.all(update_xi(params, mom.mu, mom.sigma) >= 0)


class TestEStep:
    def test_single_component(self):
        x, params, xi = random_problem(1, G=1)
        resp, _ = e_step(params, lower_bound(params, xi, x))
        assert np.all(resp == 1.0)

    def test_equal_branches_give_prior(self):
        p = design_params(m=3, g=2, d=1, tau=[0.7, 0.9])
        branch = np.full((4, 2, 2), -3.0)
        _, normal_prob = e_step(p, Bound(branch, np.full((4, 2), -3.0), 0.0))
        assert np.allclose(normal_prob, [0.7, 0.9])

    def test_odds_ratio(self):
        p = design_params(m=3, g=2, d=1)
        comp = np.array([[-2.0 + math.log(3.0), -2.0]])
        resp, _ = e_step(p, Bound(np.zeros((1, 2, 2)), comp, 0.0))
        assert resp[0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_non_finite_raises(self):
        p = design_params(m=3, g=2, d=1)
        branch = np.zeros((2, 2, 2))
        branch[1, 0, 1] = np.nan
        with pytest.raises(NumericalBreakdown):
            e_step(p, Bound(branch, np.zeros((2, 2)), 0.0))


class TestMixingAndTau:
    def test_hard_split(self):
        resp = np.zeros((10, 2))
        resp[:4, 0] = resp[4:, 1] = 1
        assert np.allclose(update_mixing(resp), [0.4, 0.6])

    def test_uniform_and_single_row(self):
        assert np.allclose(update_mixing(np.full((5, 3), 1 / 3)), 1 / 3)
        assert np.allclose(update_mixing([[0.2, 0.8]]), [0.2, 0.8])

    def test_tau_clamps_high(self):
        assert update_tau(np.ones((4, 1)), np.ones((4, 1)))[0] == pytest.approx(1 - 1e-6)

    def test_tau_interior(self):
        assert update_tau(np.ones((4, 1)), np.full((4, 1), 0.9))[0] == pytest.approx(0.9, abs=1e-15)

    def test_tau_clamps_to_floor(self):
        assert update_tau(np.ones((4, 1)), np.full((4, 1), 0.3))[0] == pytest.approx(0.500001, abs=1e-15)

    def test_tau_empty_component(self):
        with pytest.raises(EmptyComponent):
            update_tau(np.array([[1.0, 0.0]]), np.ones((1, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_tau_maximises_objective(self, seed):
        rng = np.random.default_rng(seed)
        resp = rng.dirichlet(np.ones(2), size=12)
        normal_prob = rng.random((12, 2))
        tau = update_tau(resp, normal_prob)
        grid = np.linspace(0.500001, 1 - 1e-6, 2001)
        for g in range(2):
            share = normal_prob[:, g]
            obj = lambda t: np.sum(resp[:, g] * (share * np.log(t) + (1 - share) * np.log1p(-t)))
            assert obj(tau[g]) >= max(obj(t) for t in grid) - 1e-9


class TestEtaUpdate:
    def test_stationary_point(self):
        mu = np.zeros((1, 2, 1, 2))
        sigma = np.zeros((1, 2, 1, 2, 2))
        sigma[0, EXTREME, 0] = np.diag([2.0, 3.0])
        eta = update_eta(np.ones((1, 1)), np.zeros((1, 1)), mu, sigma, 2)
        assert eta[0] == pytest.approx(2.5, abs=1e-15)

    def test_unit_second_moment_clamps(self):
        mu = np.zeros((1, 2, 3, 2))
        sigma = np.broadcast_to(np.eye(2), (1, 2, 3, 2, 2))
        eta = update_eta(np.ones((3, 1)), np.full((3, 1), 0.4), mu, sigma, 2)
        assert eta[0] == pytest.approx(1 + 1e-6, abs=1e-15)

    def test_no_extreme_mass_keeps_previous(self):
        mu = np.ones((1, 2, 2, 1))
        sigma = np.ones((1, 2, 2, 1, 1))
        eta = update_eta(np.ones((2, 1)), np.ones((2, 1)), mu, sigma, 1, eta_prev=np.array([3.3]))
        assert eta[0] == 3.3

    def test_against_bounded_search(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n, D = 9, 2
            resp = rng.dirichlet(np.ones(2), size=n)
            normal_prob = rng.random((n, 2))
            mu = rng.normal(0, 2, (2, 2, n, D))
            a = rng.normal(size=(2, 2, n, D, D))
            sigma = a @ a.swapaxes(-1, -2) + 0.1 * np.eye(D)
            eta = update_eta(resp, normal_prob, mu, sigma, D)
            for g in range(2):
                second = np.trace(sigma[g, EXTREME], axis1=-2, axis2=-1) + np.sum(mu[g, EXTREME] ** 2, -1)
                ref = eta_by_search(resp[:, g] * (1 - normal_prob[:, g]), second, D)
                assert eta[g] == pytest.approx(ref, abs=1e-6)


class TestLoadings:
    def test_zero_right_hand_side(self):
        x = np.array([[1.0], [0.0]])
        mu = np.zeros((1, 2, 2, 1))
        sigma = np.broadcast_to(np.eye(1), (1, 2, 2, 1, 1))
        ones = np.ones((2, 1))
        alpha, loadings = update_loadings(x, ones, ones, np.ones((1, 2, 2, 1)), mu, sigma)
        assert np.allclose(alpha, 0) and np.allclose(loadings, 0)

    def test_single_observation_by_hand(self):
        xi_val = 0.7
        jj_coef = (0.5 - 1 / (1 + math.exp(-xi_val))) / (2 * xi_val)
        mu_val, s_val = 0.3, 0.8
        H = -2 * jj_coef * np.array([[s_val + mu_val ** 2, mu_val], [mu_val, 1.0]])
        rhs = 0.5 * np.array([mu_val, 1.0])
        w_ref, a_ref = np.linalg.solve(H, rhs)
        mu = np.full((1, 2, 1, 1), mu_val)
        sigma = np.full((1, 2, 1, 1, 1), s_val)
        alpha, loadings = update_loadings(np.array([[1.0]]), np.ones((1, 1)), np.ones((1, 1)),
                                   np.full((1, 2, 1, 1), xi_val), mu, sigma)
        assert alpha[0, 0] == pytest.approx(a_ref, abs=1e-12)
        assert loadings[0, 0, 0] == pytest.approx(w_ref, abs=1e-12)

    def test_intercept_only_reaches_logistic_maximum(self):
        # with a centred posterior the slope decouples and the intercept follows
        # the scalar bound; iterating xi = |alpha| converges to logit(mean x)
        x = np.array([[1.0], [1.0], [0.0], [1.0], [0.0], [1.0], [1.0]])
        n = x.shape[0]
        mu = np.zeros((1, 2, n, 1))
        sigma = np.full((1, 2, n, 1, 1), 0.5)
        alpha = 0.0
        for _ in range(200):
            xi = np.full((1, 2, n, 1), abs(alpha))
            a, loadings = update_loadings(x, np.ones((n, 1)), np.ones((n, 1)), xi, mu, sigma)
            assert loadings[0, 0, 0] == pytest.approx(0.0, abs=1e-14)
            # scalar maximiser of sum (x - 1/2) a + B(xi) a^2
            expected = np.sum(x - 0.5) / (-2.0 * np.sum(jaakkola_b(xi[0, 1])))
            assert a[0, 0] == pytest.approx(expected, rel=1e-12)
            alpha = a[0, 0]
        assert alpha == pytest.approx(logit(5 / 7), abs=1e-8)

    def test_reduces_to_plain_latent_trait(self):
        x, params, xi = random_problem(8, n=15, M=4, G=1, D=2)
        resp = np.ones((15, 1))
        normal_prob = np.ones((15, 1))
        mom = posterior_moments(x, params, xi)
        alpha, loadings = update_loadings(x, resp, normal_prob, xi, mom.mu, mom.sigma)
        a_ref, w_ref = lt_loadings(x, resp[:, 0], xi[0, NORMAL], mom.mu[0, NORMAL], mom.sigma[0, NORMAL])
        assert np.allclose(alpha[0], a_ref, atol=1e-10)
        assert np.allclose(loadings[0], w_ref, atol=1e-10)


class TestBound:
    def test_tight_single_bernoulli(self):
        p = one_component([0.0], [0.0])
        for xv in (0.0, 1.0):
            bnd = lower_bound(p, np.zeros((1, 2, 1, 1)), np.array([[xv]]))
            assert np.allclose(bnd.branch, math.log(0.5), atol=1e-14)
            assert bnd.total == pytest.approx(math.log(0.5), abs=1e-14)

    def test_tight_with_intercept(self):
        p = one_component([1.7], [0.0])
        bnd = lower_bound(p, np.full((1, 2, 2, 1), 1.7), np.array([[1.0], [0.0]]))
        s = 1 / (1 + math.exp(-1.7))
        assert bnd.total == pytest.approx(math.log(s) + math.log(1 - s), abs=1e-12)

    def test_below_likelihood_on_small_instance(self):
        p = design_params(m=4, g=1, d=1)
        data, _ = sample_mltcn(p, 20, seed=0)
        xi = np.ones((1, 2, 20, 4))
        for _ in range(30):
            xi = update_xi(p, *posterior_moments(data, p, xi)[:2])
        bnd = lower_bound(p, xi, data)
        exact = true_log_likelihood_oracle(data, p, resolution=100).value
        assert bnd.total <= exact
        assert exact - bnd.total < 0.5 * data.n

    def test_permutation_invariance(self):
        x, params, xi = random_problem(3, G=3)
        order = [2, 0, 1]
        a = lower_bound(params, xi, x).total
        b = lower_bound(params.permuted(order), xi[order], x).total
        assert a == pytest.approx(b, rel=1e-13)

    def test_xi_update_raises_bound(self):
        x, params, xi = random_problem(9)
        before = lower_bound(params, xi, x).total
        mom = posterior_moments(x, params, xi)
        after = lower_bound(params, update_xi(params, mom.mu, mom.sigma), x).total
        assert after >= before - 1e-10


class TestAitken:
    def test_worked_sequence(self):
        check = aitken_converged(10.0, 20.0, 25.0)
        assert check.acceleration == 0.5 and check.l_inf == 30.0
        assert not check.converged

    def test_plateau(self):
        assert aitken_converged(5.0, 5.0, 5.0).converged

    def test_geometric_tail(self):
        seq = [100 - 2.0 ** -t for t in range(1, 8)]
        first = aitken_converged(*seq[0:3])
        assert first.l_inf == pytest.approx(100.0, abs=1e-12)
        second = aitken_converged(*seq[1:4], l_inf_prev=first.l_inf)
        assert second.converged

    def test_default_epsilon(self):
        assert FitConfig().aitken_epsilon == 0.01
        assert aitken_converged.__defaults__[0] == 0.01


class TestInitialize:
    def test_single_component(self):
        x = np.array([[1, 0, 0], [1, 1, 0], [0, 1, 0], [1, 1, 0.0]])
        params, state = initialize(x, FitConfig(G=1, D=1))
        assert np.all(state.resp == 1)
        expected = logit(np.clip(x.mean(axis=0), 1e-3, 1 - 1e-3))
        assert np.allclose(params.alpha[0], expected)
        assert params.alpha[0, 2] == pytest.approx(logit(1e-3))

    def test_deterministic(self):
        x, _, _ = random_problem(2)
        cfg = FitConfig(G=2, D=2, seed=4)
        first, _ = initialize(x, cfg, 3)
        again, _ = initialize(x, cfg, 3)
        other, _ = initialize(x, cfg, 2)
        assert np.array_equal(first.loadings, again.loadings)
        assert not np.array_equal(first.loadings, other.loadings)


def monotone(trace):
    diffs = np.diff(trace)
    return np.all(diffs >= -1e-8 * (1 + np.abs(trace[1:])))


@pytest.fixture(scope="module")
def small():
    return sample_mltcn(design_params(m=8, g=2, d=1), 80, seed=3)[0]


class TestFit:
    def test_trace_monotone_and_bic(self, small):
        res = fit(small, FitConfig(G=2, D=1, restarts=2))
        assert monotone(res.bound_trace)
        k = count_parameters(2, 1, 8)
        assert res.bic == pytest.approx(bic(res.bound_trace[-1], k, 80))
        resp, normal_prob = res.state.resp, res.state.normal_prob
        assert np.allclose(resp.sum(axis=1), 1) and np.all((normal_prob >= 0) & (normal_prob <= 1))
        assert np.all(res.state.xi >= 0)

    def test_extreme_flags_follow_map(self, small):
        res = fit(small, FitConfig(G=2, D=1, restarts=1))
        rows = np.arange(small.n)
        assert np.array_equal(res.extreme_flags, res.state.normal_prob[rows, res.map_labels] < 0.5)

    def test_single_component(self, small):
        res = fit(small, FitConfig(G=1, D=1, restarts=1))
        assert res.converged and monotone(res.bound_trace)
        assert res.params.tau.shape == (1,) and np.all(res.state.resp == 1)

    def test_threads_do_not_change_result(self, small):
        a = fit(small, FitConfig(G=2, D=1, restarts=3, threads=1))
        b = fit(small, FitConfig(G=2, D=1, restarts=3, threads=3))
        assert np.array_equal(a.bound_trace, b.bound_trace)
        assert np.array_equal(a.params.loadings, b.params.loadings)

    def test_warm_start(self, small):
        first = fit(small, FitConfig(G=2, D=1, restarts=1))
        again = fit(small, FitConfig(G=2, D=1, restarts=1), start=first.params)
        assert again.bound >= first.bound - 1e-6

    def test_all_restarts_failing(self, small, monkeypatch):
        def broken(*args, **kwargs):
            raise NumericalBreakdown("forced", iteration=1)
        monkeypatch.setattr(ecm, "_run_restart", broken)
        with pytest.raises(FitFailed) as err:
            fit(small, FitConfig(G=2, D=1, restarts=3))
        assert len(err.value.errors) == 3

    def test_some_restarts_failing(self, small, monkeypatch):
        real = ecm._run_restart

        def flaky(x, config, r, start=None):
            if r == 0:
                raise EmptyComponent(1)
            return real(x, config, r, start)
        monkeypatch.setattr(ecm, "_run_restart", flaky)
        res = fit(small, FitConfig(G=2, D=1, restarts=2))
        assert len(res.restart_errors) == 1 and res.restart_bounds[0] == -np.inf

    def test_not_converged_flag(self, small):
        res = fit(small, FitConfig(G=2, D=1, restarts=1, max_iter=2))
        assert not res.converged and res.iterations == 2

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            FitConfig(tau_floor=0.4)
        with pytest.raises(ValueError):
            FitConfig(G=0)


class TestPlainLatentTraitReduction:
    def test_sweeps_track_reference(self):
        rng = np.random.default_rng(21)
        n, M, D = 25, 5, 2
        x = (rng.random((n, M)) < 0.4).astype(float)
        alpha = rng.normal(0, 1, M)
        loadings = rng.normal(0, 1, (M, D))
        xi = np.ones((n, M))
        params = MltcnParams(pi=[1.0], alpha=alpha[None], loadings=loadings[None], tau=[0.8], eta=[2.0])
        pxi = np.ones((1, 2, n, M))
        ones = np.ones((n, 1))
        for _ in range(5):
            alpha, loadings, xi = lt_sweep(x, ones[:, 0], alpha, loadings, xi)
            mom = posterior_moments(x, params, pxi)
            pxi = update_xi(params, mom.mu, mom.sigma)
            mom = posterior_moments(x, params, pxi)
            a, b = update_loadings(x, ones, ones, pxi, mom.mu, mom.sigma)
            params = MltcnParams(pi=[1.0], alpha=a, loadings=b, tau=[0.8], eta=[2.0])
            assert np.allclose(params.alpha[0], alpha, atol=1e-6)
            assert np.allclose(params.loadings[0], loadings, atol=1e-6)
