"""Doubly robust reward tables and the value estimators averaged from them."""

import numpy as np
import pytest

from coda.data import AuxiliarySample, Config, Leaf, PrimarySample, TreeRule
from coda.nuisance import NuisancePredictions, crossfit_predictions
from coda.rewards import (Actions, RewardTable, build_rewards, delta_hat, take, value_VE, value_W0, value_W1,
                          value_WE, value_WU)
from coda.simulation import generate, mc_true_value, scenario

from helpers import small_pair

ALWAYS = TreeRule(Leaf(1), 0)


def preds_for(e, u, piE=0.5, piU=0.5, pi=0.5, muE=None, thetaE=None, thetaU=None, r=None):
    """Hand-set nuisance values (constants broadcast to the right shapes)."""
    n = e.n + u.n
    return NuisancePredictions(
        piE=np.full(e.n, piE) if np.isscalar(piE) else piE,
        piU=np.full(u.n, piU) if np.isscalar(piU) else piU,
        pi=np.full(n, pi) if np.isscalar(pi) else pi,
        muE=np.zeros((e.n, 2)) if muE is None else muE,
        thetaE=np.zeros((e.n, 2, e.s)) if thetaE is None else thetaE,
        thetaU=np.zeros((u.n, 2, u.s)) if thetaU is None else thetaU,
        r=np.full((n, 2), e.n / n) if r is None else r,
    )


class TestBuildRewards:
    def test_ipw_degeneracy(self):
        """pi = 0.5 and mu = 0: a treated row with Y = 3 earns 6 under treatment, 0 otherwise."""
        e = PrimarySample([[0.0]], [1], [[0.0]], [3.0])
        u = AuxiliarySample([[0.0], [1.0]], [0, 1], [[0.0], [0.0]])
        tbl = build_rewards(e, u, preds_for(e, u))
        assert tbl.v[0].tolist() == [0.0, 6.0]

    def test_noiseless_outcome_with_exact_mean(self, s1_pair):
        spec = scenario(1)
        e, u = s1_pair
        exact = PrimarySample(e.X, e.A, e.M, spec.mean_Y(e.X, e.A))
        mu = np.column_stack([spec.mean_Y(e.X, a) for a in (0, 1)])
        tbl = build_rewards(exact, u, preds_for(exact, u, piE=0.3, muE=mu))
        assert np.allclose(tbl.v, mu, rtol=0, atol=1e-12)

    def test_counterfactual_arm_is_regression_only(self, s1_pair):
        e, u = s1_pair
        p = crossfit_predictions(e, u, Config(mode="HO"))
        tbl = build_rewards(e, u, p)
        rows = np.arange(e.n)
        other = 1 - e.A
        assert np.array_equal(tbl.v[rows, other], p.muE[rows, other])
        assert np.array_equal(tbl.wE[rows, other], p.thetaE[rows, other])
        assert np.array_equal(tbl.wU[np.arange(u.n), 1 - u.A], p.thetaU[np.arange(u.n), 1 - u.A])

    def test_constant_sampling_probability_identity(self, s1_pair):
        """With r = N_E/n, primary w1 is the wE-type reward with pi_joint and the residual scaled by n/N_E."""
        e, u = s1_pair
        p = crossfit_predictions(e, u, Config(mode="HO"))
        const = NuisancePredictions(p.piE, p.piU, p.pi, p.muE, p.thetaE, p.thetaU,
                                    np.full((e.n + u.n, 2), e.n / (e.n + u.n)))
        tbl = build_rewards(e, u, const)
        I = (e.A[:, None] == [0, 1]).astype(float)
        den = np.where(e.A == 1, p.pi[: e.n], 1 - p.pi[: e.n])[:, None]
        expect = (e.n + u.n) / e.n * (I / den)[:, :, None] * (e.M[:, None, :] - p.thetaE) + p.thetaE
        assert np.allclose(tbl.w1[: e.n], expect, rtol=1e-12, atol=1e-12)
        assert np.array_equal(tbl.w0[: e.n], p.thetaE), "R = 1 rows carry only theta in w0"
        assert np.array_equal(tbl.w1[e.n:], p.thetaU), "R = 0 rows carry only theta in w1"

    def test_nan_rejected(self, rng):
        e, u = small_pair(rng)
        Y = np.array(e.Y)
        Y[3] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            build_rewards(PrimarySample(e.X, e.A, e.M, Y), u, preds_for(e, u))

    def test_read_only(self, rng):
        e, u = small_pair(rng)
        tbl = build_rewards(e, u, preds_for(e, u))
        with pytest.raises(ValueError):
            tbl.v[0, 0] = 1.0


class TestValueEstimators:
    def test_always_treat_ipw(self, rng):
        e, u = small_pair(rng)
        tbl = build_rewards(e, u, preds_for(e, u))
        assert value_VE(tbl, ALWAYS) == pytest.approx(2 / e.n * e.Y[e.A == 1].sum(), rel=1e-12)

    def test_averages_of_selected_column(self, s1_pair):
        e, u = s1_pair
        tbl = build_rewards(e, u, crossfit_predictions(e, u, Config(mode="HO")))
        rule = scenario(1).optimal_rule
        dE = np.where(e.X[:, 0] * e.X[:, 1] > 0, 1, 0)
        dU = np.where(u.X[:, 0] * u.X[:, 1] > 0, 1, 0)
        assert value_VE(tbl, rule) == pytest.approx(np.mean(tbl.v[np.arange(e.n), dE]), rel=1e-12)
        assert np.allclose(value_WE(tbl, rule), take(tbl.wE, dE).mean(axis=0), rtol=1e-12)
        assert np.allclose(value_WU(tbl, rule), take(tbl.wU, dU).mean(axis=0), rtol=1e-12)
        dj = np.r_[dE, dU]
        assert np.allclose(value_W1(tbl, rule), take(tbl.w1, dj).mean(axis=0), rtol=1e-12)
        assert np.allclose(value_W0(tbl, rule), take(tbl.w0, dj).mean(axis=0), rtol=1e-12)
        assert value_VE(tbl, Actions(dE, dU)) == value_VE(tbl, rule)

    def test_rebalanced_difference_vanishes_under_homogeneity(self):
        """W1 - W0 is within 3 standard errors of zero at N_E = N_U = 5000."""
        e, u = generate(scenario(1), 5000, 5000, seed=41)
        tbl = build_rewards(e, u, crossfit_predictions(e, u, Config(mode="HE")))
        act = Actions((e.X[:, 0] * e.X[:, 1] > 0).astype(int), (u.X[:, 0] * u.X[:, 1] > 0).astype(int))
        diff = value_W1(tbl, act) - value_W0(tbl, act)
        per_row = take(tbl.w1, act.joint) - take(tbl.w0, act.joint)
        se = per_row.std(axis=0) / np.sqrt(tbl.n)
        assert np.all(np.abs(diff) < 3 * se), (diff, se)


class TestDeltaHat:
    def test_empty_auxiliary(self):
        z2 = np.zeros((0, 2, 1))
        tbl = RewardTable(v=np.zeros((3, 2)), wE=np.zeros((3, 2, 1)), wU=z2, w1=np.ones((3, 2, 1)),
                          w0=np.zeros((3, 2, 1)), psi=np.zeros((3, 2, 1)), XE=np.zeros((3, 1)),
                          XU=np.zeros((0, 1)))
        assert np.array_equal(delta_hat(tbl, 1), [0.0])

    def test_equal_rewards_on_auxiliary_rows(self, rng):
        e, u = small_pair(rng)
        tbl = build_rewards(e, u, preds_for(e, u, r=np.full((e.n + u.n, 2), 0.5)))
        w = np.array(tbl.w1)
        w[e.n:] = tbl.w0[e.n:]
        same = RewardTable(tbl.v, tbl.wE, tbl.wU, w, tbl.w0, tbl.psi, tbl.XE, tbl.XU)
        assert np.array_equal(delta_hat(same, 0), np.zeros(1))

    @pytest.mark.parametrize("a", [0, 1])
    def test_decomposition(self, s1_he_pair, a):
        """Primary-row part plus delta_hat reproduces the all-row average of w1 - w0."""
        e, u = s1_he_pair
        tbl = build_rewards(e, u, crossfit_predictions(e, u, Config(mode="HE")))
        diff = tbl.w1[:, a] - tbl.w0[:, a]
        primary = diff[: e.n].sum(axis=0) / tbl.n
        assert np.allclose(primary + delta_hat(tbl, a), diff.mean(axis=0), rtol=1e-12, atol=1e-14)


@pytest.fixture(scope="module")
def truth():
    return mc_true_value(scenario(1), scenario(1).optimal_rule, 2_000_000, seed=3).value


class TestDoubleRobustness:
    """Monte Carlo checks that each nuisance alone keeps the value estimator unbiased."""

    REPS, N = 2000, 200

    def _estimates(self, which):
        spec = scenario(1)
        rule = spec.optimal_rule
        ss = np.random.SeedSequence(77).spawn(self.REPS)
        out = np.empty(self.REPS)
        for k, child in enumerate(ss):
            e, u = generate(spec, self.N, 5, seed=child)
            if which == "propensity":
                p = preds_for(e, u, piE=spec.propensity_score(e.X))
            else:
                mu = np.column_stack([spec.mean_Y(e.X, a) for a in (0, 1)])
                p = preds_for(e, u, muE=mu)
            out[k] = value_VE(build_rewards(e, u, p), rule)
        return out

    @pytest.mark.parametrize("which", ["propensity", "outcome"])
    def test_unbiased(self, truth, which):
        est = self._estimates(which)
        se = est.std(ddof=1) / np.sqrt(self.REPS)
        assert abs(est.mean() - truth) < 3 * se, (est.mean(), truth, se)
