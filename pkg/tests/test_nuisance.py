"""Logistic and least-squares nuisance fits, the pooled fit bundle and the CIO diagnostic."""

import numpy as np
import pytest
from scipy.special import expit, logit

from coda.data import AuxiliarySample, BasisSpec, Config
from coda.nuisance import (BinaryModel, SingleClassError, cio_diagnostic, crossfit_predictions, fit_all,
                           fit_binary, fit_mean, predict_all, sampling_features)
from coda.simulation import generate, scenario

from helpers import small_pair

PLAIN_R = ("covariates", "treatment", "intermediate")


class TestFitBinary:
    def test_recovers_propensity_coefficients(self):
        """At n=1e5 the MLE standard errors are below 0.01, so +-0.05 is a wide band."""
        rng = np.random.default_rng(1)
        X = rng.uniform(-2, 2, (100_000, 2))
        A = rng.random(100_000) < expit(0.4 + 0.2 * X[:, 0] - 0.2 * X[:, 1])
        m = fit_binary(X, A)
        assert m.converged and not m.separated
        assert np.allclose(m.coef, [0.4, 0.2, -0.2], atol=0.05), m.coef

    def test_null_model(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(20_000, 2))
        A = np.r_[np.zeros(10_000), np.ones(10_000)]
        rng.shuffle(A)
        assert np.allclose(fit_binary(X, A).coef, 0.0, atol=0.05)

    def test_clipping(self):
        m = BinaryModel(coef=np.array([logit(0.999), 0.0]), clip=(0.01, 0.99))
        assert m.predict_raw(np.zeros((1, 1)))[0] == pytest.approx(0.999)
        assert m.predict(np.zeros((1, 1)))[0] == 0.99

    def test_single_class(self):
        with pytest.raises(SingleClassError, match="single-class labels"):
            fit_binary(np.zeros((10, 1)), np.ones(10))

    def test_separation_is_flagged_not_raised(self):
        x = np.linspace(-1, 1, 40)
        m = fit_binary(x, x > 0)
        assert m.separated
        p = m.predict(x)
        assert p.min() >= 0.01 and p.max() <= 0.99

    def test_too_few_rows(self):
        with pytest.raises(ValueError, match="more rows"):
            fit_binary(np.zeros((2, 3)), [0, 1])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(500, 3))
        A = rng.random(500) < expit(X @ [0.5, -1.0, 0.2])
        perm = rng.permutation(500)
        assert np.allclose(fit_binary(X, A).coef, fit_binary(X[perm], A[perm]).coef, rtol=1e-10, atol=1e-12)

    def test_predictions_within_clip(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(300, 2)) * 5
        m = fit_binary(X, rng.random(300) < expit(3 * X[:, 0]), clip=(0.05, 0.9))
        p = m.predict(rng.normal(size=(1000, 2)) * 20)
        assert p.min() >= 0.05 and p.max() <= 0.9


class TestFitMean:
    def test_exact_representation(self):
        """Noiseless Scenario-1 intermediate means lie in the interaction basis span."""
        spec = scenario(1)
        rng = np.random.default_rng(5)
        X = rng.uniform(-2, 2, (100_000, 2))
        A = rng.integers(0, 2, 100_000)
        model = fit_mean(X, spec.mean_M(X, A), A)
        Xt = rng.uniform(-2, 2, (1000, 2))
        for a in (0, 1):
            assert np.mean((model.predict(Xt, a) - spec.mean_M(Xt, a)) ** 2) < 1e-20

    def test_constant_response(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(200, 3))
        model = fit_mean(X, np.full(200, 2.5), rng.integers(0, 2, 200))
        Xt = rng.normal(size=(10, 3)) * 4
        for a in (0, 1):
            assert np.allclose(model.predict(Xt, a), 2.5)

    def test_squares_coefficient(self):
        """With squared terms enabled the x1^2 coefficient of the Scenario-4 intermediate is 0.5."""
        spec = scenario(4)
        e, _ = generate(spec, 100_000, 10, seed=7)
        basis = BasisSpec(("linear", "pairwise", "squares"))
        model = fit_mean(e.X, e.M[:, 0], e.A, basis=basis)
        col = 1 + spec.r + spec.r * (spec.r - 1) // 2
        for a in (0, 1):
            assert model.coefs[a][col, 0] == pytest.approx(0.5, abs=0.05)

    def test_rank_deficient_falls_back_to_ridge(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=100)
        X = np.column_stack([x, x])
        model = fit_mean(X, x, rng.integers(0, 2, 100), basis=BasisSpec(("linear",)))
        assert model.ridged
        assert np.all(np.isfinite(model.predict(X, 1)))

    def test_needs_both_arms(self):
        with pytest.raises(ValueError):
            fit_mean(np.zeros((20, 1)), np.zeros(20), np.ones(20, dtype=int))

    def test_consistency(self):
        """Prediction error shrinks with n when the truth is in the span."""
        spec = scenario(1)
        Xt = np.random.default_rng(9).uniform(-2, 2, (5000, 2))

        def mse(n):
            e, _ = generate(spec, n, 10, seed=n)
            m = fit_mean(e.X, e.Y, e.A)
            return np.mean([(m.predict(Xt, a) - spec.mean_Y(Xt, a)) ** 2 for a in (0, 1)])

        assert mse(100_000) < 10 * mse(10_000)


class TestFitAll:
    def test_theta_uses_pooled_rows(self, s1_pair):
        nuis = fit_all(*s1_pair, Config(mode="HO"))
        assert nuis.provenance["theta_rows"] == 3000
        assert nuis.provenance["n_E"] == 1000 and nuis.provenance["n_U"] == 2000

    def test_single_class_auxiliary(self, rng):
        e, u = small_pair(rng)
        u1 = AuxiliarySample(u.X, np.ones(u.n, dtype=int), u.M)
        with pytest.raises(SingleClassError, match="single-class labels"):
            fit_all(e, u1)

    def test_sampling_probability_homogeneous(self):
        """Equal covariate laws leave the sampling probability at N_E / n for (x, a, m) features."""
        e, u = generate(scenario(1), 5000, 5000, seed=10)
        p = predict_all(fit_all(e, u, Config(sampling_terms=PLAIN_R)), e, u)
        assert np.mean(np.abs(p.r - 0.5)) < 0.05

    def test_prediction_shapes(self, rng):
        e, u = small_pair(rng, s=2)
        p = predict_all(fit_all(e, u), e, u)
        assert p.piE.shape == (e.n,) and p.piU.shape == (u.n,) and p.pi.shape == (e.n + u.n,)
        assert p.muE.shape == (e.n, 2) and p.thetaE.shape == (e.n, 2, 2) and p.thetaU.shape == (u.n, 2, 2)
        assert p.r.shape == (e.n + u.n, 2)

    def test_crossfit_shapes_and_range(self, s1_pair):
        e, u = s1_pair
        p = crossfit_predictions(e, u, Config(crossfit_folds=2))
        assert p.muE.shape == (e.n, 2) and np.all(np.isfinite(p.thetaU))
        assert p.r.min() >= 0.01 and p.r.max() <= 0.99

    def test_sampling_features_terms(self, rng):
        X, A, M = rng.normal(size=(5, 2)), np.array([0, 1, 0, 1, 1]), rng.normal(size=(5, 1))
        F = sampling_features(X, A, M, M, ("covariates", "treatment", "residual_sq"))
        assert F.shape == (5, 4) and np.allclose(F[:, 3], M[:, 0] ** 2)
        with pytest.raises(ValueError):
            sampling_features(X, A, M, None, ("residual_sq",))
        with pytest.raises(ValueError):
            sampling_features(X, A, M, None, ("nonsense",))


class TestCIODiagnostic:
    def test_holds_by_construction(self):
        e, u = generate(scenario(1), 5000, 5000, seed=11)
        assert np.all(cio_diagnostic(e, u) < 0.05)

    def test_detects_shift(self):
        e, u = generate(scenario(1), 5000, 5000, seed=12)
        shifted = AuxiliarySample(u.X, u.A, u.M + 10.0)
        assert np.all(cio_diagnostic(e, shifted) > 0.5)

    def test_identical_samples(self, s1_pair):
        e, _ = s1_pair
        same = AuxiliarySample(e.X, e.A, e.M)
        assert np.all(cio_diagnostic(e, same) < 1e-20)

    def test_one_value_per_intermediate(self):
        e, u = generate(scenario(3), 2000, 2000, seed=13)
        assert cio_diagnostic(e, u).shape == (2,)

