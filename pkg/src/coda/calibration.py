"""Calibration statistics, calibrated value estimates, plug-in variances and confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .data import LinearRule, TreeRule, rule_to_dict
from .rewards import RewardTable, RuleLike, actions_for, take

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class CalibStats:
    """Moments needed to calibrate the primary value estimate at one rule.

    For ``mode == "HO"`` the pair (``rho``, ``SigmaM``) is filled, for ``"HE"``
    the pair (``rhoR``, ``SigmaR``).  ``diff`` is the mean-zero statistic that
    is projected out and ``scale`` its multiplier in the calibrated value
    (1 for HO, ``sqrt(n / N_E)`` for HE).
    """

    mode: str
    sigmaY2: float
    value_E: float
    diff: np.ndarray
    scale: float
    n_E: int
    n_U: int
    rho: Optional[np.ndarray] = None
    SigmaM: Optional[np.ndarray] = None
    rhoR: Optional[np.ndarray] = None
    SigmaR: Optional[np.ndarray] = None
    rule: object = None

    @property
    def cross(self) -> np.ndarray:
        return self.rho if self.mode != "HE" else self.rhoR

    @property
    def cov(self) -> np.ndarray:
        return self.SigmaM if self.mode != "HE" else self.SigmaR

    def with_cross(self, cross: np.ndarray) -> "CalibStats":
        """Copy with the covariance vector replaced (e.g. forced to zero)."""
        key = "rhoR" if self.mode == "HE" else "rho"
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d[key] = np.asarray(cross, dtype=float)
        return CalibStats(**d)


def _check_s(tbl: RewardTable) -> None:
    if tbl.s == 0:
        raise ValueError("calibration needs at least one intermediate outcome (s >= 1)")


def calib_stats_ho(tbl: RewardTable, rule: RuleLike, t: Optional[float] = None) -> CalibStats:
    """Moment estimates (divide-by-N) at the rule's actions, homogeneous covariates."""
    _check_s(tbl)
    act = actions_for(tbl, rule)
    t = tbl.t if t is None else t
    v = take(tbl.v, act.primary)
    wE = take(tbl.wE, act.primary)
    wU = take(tbl.wU, act.auxiliary)
    VE, WE, WU = v.mean(), wE.mean(axis=0), wU.mean(axis=0)
    cv, cE, cU = v - VE, wE - WE, wU - WU
    SigmaM = cE.T @ cE / tbl.n_E + t * (cU.T @ cU) / tbl.n_U
    return CalibStats(
        mode="HO", sigmaY2=float(np.mean(cv ** 2)), value_E=float(VE), diff=WE - WU, scale=1.0,
        n_E=tbl.n_E, n_U=tbl.n_U, rho=cE.T @ cv / tbl.n_E, SigmaM=0.5 * (SigmaM + SigmaM.T),
        rule=None if isinstance(rule, tuple) else rule,
    )


def calib_stats_he(tbl: RewardTable, rule: RuleLike, n: Optional[int] = None,
                   N_E: Optional[int] = None) -> CalibStats:
    """Moment estimates at the rule's actions using the rebalanced joint-sample rewards.

    The covariance of the rebalanced difference is left uncentered.
    """
    _check_s(tbl)
    act = actions_for(tbl, rule)
    n = tbl.n if n is None else n
    N_E = tbl.n_E if N_E is None else N_E
    v = take(tbl.v, act.primary)
    VE = v.mean()
    psi = take(tbl.psi, act.primary)
    diff = take(tbl.w1, act.joint) - take(tbl.w0, act.joint)
    rhoR = np.sqrt(N_E / n) * (psi.T @ (v - VE)) / N_E
    SigmaR = diff.T @ diff / n
    return CalibStats(
        mode="HE", sigmaY2=float(np.mean((v - VE) ** 2)), value_E=float(VE), diff=diff.mean(axis=0),
        scale=float(np.sqrt(n / N_E)), n_E=tbl.n_E, n_U=tbl.n_U, rhoR=rhoR, SigmaR=SigmaR,
        rule=None if isinstance(rule, tuple) else rule,
    )


def calib_stats(tbl: RewardTable, rule: RuleLike, mode: str) -> CalibStats:
    if mode == "HE":
        return calib_stats_he(tbl, rule)
    if mode == "HO":
        return calib_stats_ho(tbl, rule)
    raise ValueError(f"mode must be HO or HE, got {mode!r}")


def projection_coefficient(stats: CalibStats, ridge: float = 1e-8) -> tuple[np.ndarray, bool]:
    """``Sigma^{-1} rho`` by symmetric solve; ridge ``ridge * trace / s`` when ill-conditioned.

    Returns the coefficient and whether the ridge was applied.  A zero
    covariance matrix yields a zero coefficient (nothing to calibrate against).
    """
    S = np.atleast_2d(np.asarray(stats.cov, dtype=float))
    rho = np.atleast_1d(np.asarray(stats.cross, dtype=float))
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(rho))):
        raise ValueError("non-finite calibration statistics")
    s = S.shape[0]
    tr = float(np.trace(S))
    if tr <= 0:
        return np.zeros(s), True
    ridged = False
    if np.linalg.cond(S) > COND_LIMIT:
        S = S + ridge * tr / s * np.eye(s)
        ridged = True
        if np.linalg.cond(S) > 1 / np.finfo(float).eps:
            return np.linalg.pinv(S) @ rho, True
    return linalg.solve(S, rho, assume_a="sym"), ridged


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    value: float
    variance: float
    ci: tuple
    stats: CalibStats
    rule: object = None
    n_E: int = 0
    n_U: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return float(np.sqrt(max(self.variance, 0.0) / self.n_E))

    def to_dict(self) -> dict:
        st = self.stats
        cross = st.cross if st.cross is not None else np.zeros(0)
        cov = st.cov if st.cov is not None else np.zeros((0, 0))
        out = {
            "value": float(self.value),
            "variance": float(self.variance),
            "se": self.se,
            "ci_lo": float(self.ci[0]),
            "ci_hi": float(self.ci[1]),
            "sigma_y2": float(st.sigmaY2),
            "rho": np.asarray(cross, dtype=float).tolist(),
            "sigma_m": np.asarray(cov, dtype=float).tolist(),
            "mode": st.mode,
            "n_E": int(self.n_E),
            "n_U": int(self.n_U),
            "diagnostics": dict(self.diagnostics),
        }
        if isinstance(self.rule, (TreeRule, LinearRule)):
            out["rule"] = rule_to_dict(self.rule)
        return out


def _ci(value: float, variance: float, n_E: int, alpha: float) -> tuple:
    half = norm.ppf(1 - alpha / 2) * np.sqrt(max(variance, 0.0) / n_E)
    return (value - half, value + half)


def calibrated_value(tbl: RewardTable, rule: RuleLike, stats: CalibStats, alpha: float = 0.05,
                     ridge: float = 1e-8) -> CalibrationReport:
    """Calibrated value, its plug-in variance and a two-sided ``1 - alpha`` interval.

    ``stats`` must have been computed at the same rule.
    """
    coef, ridged = projection_coefficient(stats, ridge)
    value = stats.value_E - stats.scale * float(coef @ stats.diff)
    reduction = float(np.atleast_1d(stats.cross) @ coef)
    variance = stats.sigmaY2 - reduction
    tol = 1e-10 * max(1.0, stats.sigmaY2)
    diag = {
        "ridge_applied": bool(ridged),
        "variance_exceeds_sigma_y2": bool(variance > stats.sigmaY2 + tol),
        "negative_variance": bool(variance < -tol),
        "coefficient": coef.tolist(),
    }
    diag.update(tbl.diagnostics)
    return CalibrationReport(value=value, variance=variance, ci=_ci(value, variance, tbl.n_E, alpha),
                             stats=stats, rule=stats.rule if stats.rule is not None else rule,
                             n_E=tbl.n_E, n_U=tbl.n_U, diagnostics=diag)


def baseline_report(tbl: RewardTable, rule: RuleLike, alpha: float = 0.05) -> CalibrationReport:
    """Uncalibrated primary-sample estimate with its plug-in variance."""
    act = actions_for(tbl, rule)
    v = take(tbl.v, act.primary)
    VE = float(v.mean())
    s2 = float(np.mean((v - VE) ** 2))
    stats = CalibStats(mode="baseline", sigmaY2=s2, value_E=VE, diff=np.zeros(tbl.s), scale=1.0,
                       n_E=tbl.n_E, n_U=tbl.n_U, rho=np.zeros(tbl.s), SigmaM=np.zeros((tbl.s, tbl.s)))
    return CalibrationReport(value=VE, variance=s2, ci=_ci(VE, s2, tbl.n_E, alpha), stats=stats,
                             rule=None if isinstance(rule, tuple) else rule, n_E=tbl.n_E, n_U=tbl.n_U,
                             diagnostics=dict(tbl.diagnostics))


def improved_efficiency(coda_sd: float, baseline_sd: float) -> float:
    """Percentage reduction of ``coda_sd`` relative to ``baseline_sd``."""
    if coda_sd <= 0 or baseline_sd <= 0:
        raise ValueError("standard deviations must be positive")
    return 100.0 * (baseline_sd - coda_sd) / baseline_sd
