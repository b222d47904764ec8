"""Nuisance models: propensities, conditional means and the sampling probability.

Defaults are parametric (logistic regression fitted by IRLS, per-arm least
squares on a basis expansion).  Other estimators can be plugged into
:func:`fit_all` as long as they expose the same ``predict`` signatures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import SAMPLING_TERMS, AuxiliarySample, BasisSpec, Config, PrimarySample

log = logging.getLogger(__name__)


class SingleClassError(ValueError):
    pass


def _add_intercept(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    return np.column_stack([np.ones(F.shape[0]), F])


@dataclass(frozen=True, eq=False)
class BinaryModel:
    """Logistic-link linear model; ``coef[0]`` is the intercept."""

    coef: np.ndarray
    clip: tuple = (0.01, 0.99)
    converged: bool = True
    separated: bool = False
    n_iter: int = 0

    def predict_raw(self, features) -> np.ndarray:
        return expit(_add_intercept(features) @ self.coef)

    def predict(self, features) -> np.ndarray:
        return np.clip(self.predict_raw(features), *self.clip)


def fit_binary(features, labels, clip=(0.01, 0.99), max_iter: int = 100,
               tol: float = 1e-8) -> BinaryModel:
    """Maximum-likelihood logistic regression by Newton/IRLS with step halving.

    Stops when the largest coefficient update is below ``tol``.  Perfect
    separation does not raise: the returned model carries ``separated=True``
    and its predictions are still clipped.
    """
    F = _add_intercept(features)
    y = np.asarray(labels, dtype=float).ravel()
    n, p = F.shape
    if y.shape[0] != n:
        raise ValueError(f"{n} feature rows but {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise SingleClassError("single-class labels: cannot fit a binary model")
    if n <= p:
        raise ValueError(f"need more rows ({n}) than parameters ({p})")

    def loglik(b):
        eta = F @ b
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(p)
    ll = loglik(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(F @ beta)
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        H = F.T @ (F * w[:, None])
        g = F.T @ (y - mu)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll) or t < 1e-6:
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(t * step)) < tol:
            converged = True
            break
    eta = F @ beta
    separated = bool(np.max(np.abs(eta)) > 30.0 or not converged)
    if separated:
        log.debug("logistic fit did not converge cleanly (possible separation); predictions are clipped")
    return BinaryModel(coef=beta, clip=tuple(clip), converged=converged, separated=separated, n_iter=it)


@dataclass(frozen=True, eq=False)
class MeanModel:
    """Per-arm least-squares fits; ``coefs[a]`` has shape ``(basis size, dim)``."""

    coefs: tuple
    basis: BasisSpec
    scalar: bool = False
    ridged: bool = False

    @property
    def dim(self) -> int:
        return self.coefs[0].shape[1]

    def predict(self, X, a: int) -> np.ndarray:
        out = self.basis.expand(X) @ self.coefs[int(a)]
        return out[:, 0] if self.scalar else out


def _ols(Phi: np.ndarray, Z: np.ndarray, ridge: float):
    G = Phi.T @ Phi
    rank = np.linalg.matrix_rank(Phi)
    if rank == Phi.shape[1]:
        return np.linalg.lstsq(Phi, Z, rcond=None)[0], False
    lam = max(ridge, 1e-12) * max(np.trace(G), 1.0) / Phi.shape[1]
    return np.linalg.solve(G + lam * np.eye(G.shape[0]), Phi.T @ Z), True


def fit_mean(X, responses, arms, basis: BasisSpec = BasisSpec(("linear", "pairwise")),
             ridge: float = 1e-8) -> MeanModel:
    """Separate least-squares regressions of ``responses`` on ``basis(X)`` for each arm."""
    X = np.asarray(X, dtype=float)
    arms = np.asarray(arms).ravel()
    Z = np.asarray(responses, dtype=float)
    scalar = Z.ndim == 1
    if scalar:
        Z = Z[:, None]
    Phi = basis.expand(X)
    coefs, ridged = [], False
    for a in (0, 1):
        rows = arms == a
        if not rows.any():
            raise SingleClassError(f"arm {a} has no rows; cannot fit a per-arm mean model")
        if rows.sum() <= Phi.shape[1]:
            raise ValueError(f"arm {a} has {rows.sum()} rows for {Phi.shape[1]} basis terms")
        coef, rd = _ols(Phi[rows], Z[rows], ridge)
        coefs.append(coef)
        ridged |= rd
    if ridged:
        log.warning("rank-deficient design in mean model; ridge fallback applied")
    return MeanModel(coefs=tuple(coefs), basis=basis, scalar=scalar, ridged=ridged)


def sampling_features(X, A, M, resid=None,
                      terms=("covariates", "treatment", "intermediate")) -> np.ndarray:
    """Design for the sampling probability model, built from the blocks named in ``terms``.

    ``covariates`` is ``x``, ``treatment`` is ``a``, ``intermediate`` is ``m``
    and ``residual_sq`` is ``(m - theta(x, a))**2`` per intermediate.  The
    squared residual lets a logistic model separate intermediate-noise laws
    that differ between the samples while staying symmetric in the residual.
    """
    bad = [t for t in terms if t not in SAMPLING_TERMS]
    if bad:
        raise ValueError(f"unknown sampling terms {bad}; choose from {SAMPLING_TERMS}")
    X = np.asarray(X, float)
    M = np.asarray(M, float)
    cols = []
    if "covariates" in terms:
        cols.append(X)
    if "treatment" in terms:
        cols.append(np.asarray(A, float)[:, None])
    if "intermediate" in terms:
        cols.append(M.reshape(M.shape[0], -1))
    if "residual_sq" in terms:
        if resid is None:
            raise ValueError("residual_sq needs the residuals m - theta(x, a)")
        resid = np.asarray(resid, float)
        cols.append(resid.reshape(resid.shape[0], -1) ** 2)
    if not cols:
        raise ValueError("sampling model needs at least one feature block")
    return np.column_stack(cols)


def _theta_at(theta, X, A) -> np.ndarray:
    """``theta(x_i, a_i)`` at each row's own arm."""
    out = np.empty((X.shape[0], theta.dim))
    for a in (0, 1):
        rows = A == a
        if rows.any():
            out[rows] = theta.predict(X[rows], a)
    return out


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    pi_E: BinaryModel
    pi_U: BinaryModel
    pi_joint: BinaryModel
    sampling_r: BinaryModel
    mu_E: MeanModel
    theta: MeanModel
    provenance: dict = field(default_factory=dict)


def fit_all(e: PrimarySample, u: AuxiliarySample, cfg: Config = Config(),
            binary_fitter: Callable = fit_binary, mean_fitter: Callable = fit_mean) -> NuisanceSet:
    """Fit every nuisance function on the full samples.

    ``theta`` is trained on the pooled rows of both samples and ``sampling_r``
    on the stacked ``(x, a, m) -> R`` problem.
    """
    basis = cfg.basis_spec
    Xj = np.vstack([e.X, u.X])
    Aj = np.concatenate([e.A, u.A])
    Mj = np.vstack([e.M, u.M])
    Rj = np.r_[np.ones(e.n), np.zeros(u.n)]
    pi_E = binary_fitter(e.X, e.A, clip=cfg.clip)
    pi_U = binary_fitter(u.X, u.A, clip=cfg.clip)
    pi_joint = binary_fitter(Xj, Aj, clip=cfg.clip)
    mu_E = mean_fitter(e.X, e.Y, e.A, basis=basis, ridge=cfg.ridge)
    theta = mean_fitter(Xj, Mj, Aj, basis=basis, ridge=cfg.ridge)
    resid = Mj - _theta_at(theta, Xj, Aj)
    sampling_r = binary_fitter(sampling_features(Xj, Aj, Mj, resid, cfg.sampling_terms), Rj, clip=cfg.clip)
    warnings = [name for name, m in (("pi_E", pi_E), ("pi_U", pi_U), ("pi_joint", pi_joint),
                                     ("sampling_r", sampling_r)) if getattr(m, "separated", False)]
    warnings += [name for name, m in (("mu_E", mu_E), ("theta", theta)) if getattr(m, "ridged", False)]
    provenance = {
        "n_E": e.n, "n_U": u.n, "theta_rows": int(Xj.shape[0]), "sampling_rows": int(Xj.shape[0]),
        "basis": list(basis.terms), "sampling_terms": list(cfg.sampling_terms),
        "estimator": "parametric (logistic IRLS + per-arm OLS)",
        "warnings": warnings,
    }
    return NuisanceSet(pi_E, pi_U, pi_joint, sampling_r, mu_E, theta, provenance)


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Nuisance values evaluated at the sample rows, indexed by arm where relevant.

    Shapes: ``piE (N_E,)``, ``piU (N_U,)``, ``pi (n,)``, ``muE (N_E, 2)``,
    ``thetaE (N_E, 2, s)``, ``thetaU (N_U, 2, s)``, ``r (n, 2)`` where
    ``r[i, a]`` is the sampling probability at ``(x_i, a, m_i)``.
    """

    piE: np.ndarray
    piU: np.ndarray
    pi: np.ndarray
    muE: np.ndarray
    thetaE: np.ndarray
    thetaU: np.ndarray
    r: np.ndarray
    clip_counts: dict = field(default_factory=dict)


def _clip_counts(raw: dict, clip) -> dict:
    lo, hi = clip
    return {k: int(np.sum((v < lo) | (v > hi))) for k, v in raw.items()}


def predict_all(nuis: NuisanceSet, e: PrimarySample, u: AuxiliarySample) -> NuisancePredictions:
    Xj = np.vstack([e.X, u.X])
    Aj = np.concatenate([e.A, u.A])
    Mj = np.vstack([e.M, u.M])
    terms = tuple(nuis.provenance.get("sampling_terms", ("covariates", "treatment", "intermediate")))
    r = np.column_stack([
        nuis.sampling_r.predict(sampling_features(Xj, np.full(len(Aj), a), Mj, Mj - nuis.theta.predict(Xj, a), terms))
        for a in (0, 1)])
    raw = {}
    for name, model, F in (("pi_E", nuis.pi_E, e.X), ("pi_U", nuis.pi_U, u.X), ("pi_joint", nuis.pi_joint, Xj)):
        if hasattr(model, "predict_raw"):
            raw[name] = model.predict_raw(F)
    clip = getattr(nuis.pi_E, "clip", (0.0, 1.0))
    return NuisancePredictions(
        piE=nuis.pi_E.predict(e.X),
        piU=nuis.pi_U.predict(u.X),
        pi=nuis.pi_joint.predict(Xj),
        muE=np.column_stack([nuis.mu_E.predict(e.X, a) for a in (0, 1)]),
        thetaE=np.stack([nuis.theta.predict(e.X, a) for a in (0, 1)], axis=1),
        thetaU=np.stack([nuis.theta.predict(u.X, a) for a in (0, 1)], axis=1),
        r=r,
        clip_counts=_clip_counts(raw, clip),
    )


def crossfit_predictions(e: PrimarySample, u: AuxiliarySample, cfg: Config,
                         binary_fitter: Callable = fit_binary,
                         mean_fitter: Callable = fit_mean) -> NuisancePredictions:
    """Out-of-fold nuisance predictions with ``cfg.crossfit_folds`` folds per sample."""
    k = cfg.crossfit_folds
    if k == 1:
        return predict_all(fit_all(e, u, cfg, binary_fitter, mean_fitter), e, u)
    rng = np.random.default_rng(cfg.seed)
    fe = rng.permutation(e.n) % k
    fu = rng.permutation(u.n) % k
    s = e.s
    out = {
        "piE": np.empty(e.n), "piU": np.empty(u.n), "pi": np.empty(e.n + u.n),
        "muE": np.empty((e.n, 2)), "thetaE": np.empty((e.n, 2, s)), "thetaU": np.empty((u.n, 2, s)),
        "r": np.empty((e.n + u.n, 2)),
    }
    for fold in range(k):
        tr_e, te_e = fe != fold, fe == fold
        tr_u, te_u = fu != fold, fu == fold
        nuis = fit_all(PrimarySample(e.X[tr_e], e.A[tr_e], e.M[tr_e], e.Y[tr_e]),
                       AuxiliarySample(u.X[tr_u], u.A[tr_u], u.M[tr_u]), cfg, binary_fitter, mean_fitter)
        pe = PrimarySample(e.X[te_e], e.A[te_e], e.M[te_e], e.Y[te_e])
        pu = AuxiliarySample(u.X[te_u], u.A[te_u], u.M[te_u])
        p = predict_all(nuis, pe, pu)
        joint_idx = np.r_[np.flatnonzero(te_e), e.n + np.flatnonzero(te_u)]
        out["piE"][te_e], out["piU"][te_u] = p.piE, p.piU
        out["pi"][joint_idx], out["r"][joint_idx] = p.pi, p.r
        out["muE"][te_e], out["thetaE"][te_e], out["thetaU"][te_u] = p.muE, p.thetaE, p.thetaU
    return NuisancePredictions(**out)


def cio_diagnostic(e: PrimarySample, u: AuxiliarySample, cfg: Config = Config(),
                   mean_fitter: Callable = fit_mean) -> np.ndarray:
    """Relative MSE between per-sample fits of ``E[M | x, a]``, one value per intermediate.

    Both fits are evaluated at every observed ``(x, a)`` pair of the pooled
    sample; the squared difference is averaged and divided by the variance of
    the pooled-fit conditional means at the same points.
    """
    basis = cfg.basis_spec
    th_e = mean_fitter(e.X, e.M, e.A, basis=basis, ridge=cfg.ridge)
    th_u = mean_fitter(u.X, u.M, u.A, basis=basis, ridge=cfg.ridge)
    Xj = np.vstack([e.X, u.X])
    Aj = np.concatenate([e.A, u.A])
    th_j = mean_fitter(Xj, np.vstack([e.M, u.M]), Aj, basis=basis, ridge=cfg.ridge)

    def at_observed(model):
        out = np.empty((Xj.shape[0], e.s))
        for a in (0, 1):
            rows = Aj == a
            out[rows] = model.predict(Xj[rows], a)
        return out

    diff = at_observed(th_e) - at_observed(th_u)
    scale = at_observed(th_j).var(axis=0)
    return np.mean(diff ** 2, axis=0) / np.where(scale > 0, scale, np.nan)
