"""Per-individual doubly robust rewards for both arms, and the value estimators built on them.

Every estimator is an average of one column-selected reward per row, so a
rule is evaluated by picking, row by row, the arm it assigns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from .data import AuxiliarySample, Config, DecisionRule, PrimarySample, rule_actions
from .nuisance import NuisancePredictions, NuisanceSet, predict_all


class Actions(NamedTuple):
    """Arms assigned to the primary rows and to the auxiliary rows."""

    primary: np.ndarray
    auxiliary: np.ndarray

    @property
    def joint(self) -> np.ndarray:
        return np.concatenate([self.primary, self.auxiliary])


RuleLike = Union[DecisionRule, Actions]


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Rewards indexed ``[row, arm]`` (scalars) or ``[row, arm, :]`` (s-vectors).

    ``v``, ``wE``, ``psi`` cover primary rows; ``wU`` auxiliary rows; ``w1``,
    ``w0`` the stacked joint sample (primary rows first).
    """

    v: np.ndarray
    wE: np.ndarray
    wU: np.ndarray
    w1: np.ndarray
    w0: np.ndarray
    psi: np.ndarray
    XE: np.ndarray
    XU: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_E(self) -> int:
        return self.v.shape[0]

    @property
    def n_U(self) -> int:
        return self.wU.shape[0]

    @property
    def n(self) -> int:
        return self.n_E + self.n_U

    @property
    def s(self) -> int:
        return self.wE.shape[2]

    @property
    def t(self) -> float:
        return self.n_E / self.n_U


def _freeze(**arrays):
    for a in arrays.values():
        a.setflags(write=False)
    return arrays


def _dr(indicator, outcome, fitted, den):
    """``I{A=a}(outcome - fitted)/den + fitted`` with broadcasting over trailing dims."""
    if fitted.ndim == 3:
        return (indicator / den)[:, :, None] * (outcome[:, None, :] - fitted) + fitted
    return indicator / den * (outcome[:, None] - fitted) + fitted


def build_rewards(e: PrimarySample, u: AuxiliarySample,
                  nuis: Union[NuisanceSet, NuisancePredictions], cfg: Config = Config()) -> RewardTable:
    """Rewards under both arms for every row, from fitted nuisances or precomputed predictions."""
    for name, arr in (("X_E", e.X), ("M_E", e.M), ("Y_E", e.Y), ("X_U", u.X), ("M_U", u.M)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains NaN or infinite values")
    p = predict_all(nuis, e, u) if isinstance(nuis, NuisanceSet) else nuis
    arms = np.array([0, 1])

    IE = (e.A[:, None] == arms).astype(float)
    IU = (u.A[:, None] == arms).astype(float)
    denE = np.where(e.A == 1, p.piE, 1 - p.piE)[:, None]
    denU = np.where(u.A == 1, p.piU, 1 - p.piU)[:, None]
    v = _dr(IE, e.Y, p.muE, denE)
    wE = _dr(IE, e.M, p.thetaE, denE)
    wU = _dr(IU, u.M, p.thetaU, denU)

    A = np.concatenate([e.A, u.A])
    M = np.vstack([e.M, u.M])
    R = np.r_[np.ones(e.n), np.zeros(u.n)][:, None]
    theta = np.concatenate([p.thetaE, p.thetaU])
    Ij = (A[:, None] == arms).astype(float)
    den = np.where(A == 1, p.pi, 1 - p.pi)[:, None]
    resid = (Ij / den)[:, :, None] * (M[:, None, :] - theta)
    w1 = (R / p.r)[:, :, None] * resid + theta
    w0 = ((1 - R) / (1 - p.r))[:, :, None] * resid + theta
    psi = resid[: e.n] / p.r[: e.n, :, None]

    diag = {"clip_counts": dict(p.clip_counts),
            "min_denominator": float(min(denE.min(), denU.min(), den.min()))}
    return RewardTable(**_freeze(v=v, wE=wE, wU=wU, w1=w1, w0=w0, psi=psi),
                       XE=e.X, XU=u.X, diagnostics=diag)


def actions_for(tbl: RewardTable, rule: RuleLike) -> Actions:
    if isinstance(rule, Actions):
        return rule
    return Actions(rule_actions(rule, tbl.XE), rule_actions(rule, tbl.XU))


def take(arr: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Row-wise arm selection: ``arr[i, d[i]]`` (keeps trailing dimensions)."""
    return arr[np.arange(arr.shape[0]), d]


def value_VE(tbl: RewardTable, rule: RuleLike) -> float:
    return float(take(tbl.v, actions_for(tbl, rule).primary).mean())


def value_WE(tbl: RewardTable, rule: RuleLike) -> np.ndarray:
    return take(tbl.wE, actions_for(tbl, rule).primary).mean(axis=0)


def value_WU(tbl: RewardTable, rule: RuleLike) -> np.ndarray:
    return take(tbl.wU, actions_for(tbl, rule).auxiliary).mean(axis=0)


def value_W1(tbl: RewardTable, rule: RuleLike) -> np.ndarray:
    return take(tbl.w1, actions_for(tbl, rule).joint).mean(axis=0)


def value_W0(tbl: RewardTable, rule: RuleLike) -> np.ndarray:
    return take(tbl.w0, actions_for(tbl, rule).joint).mean(axis=0)


def delta_hat(tbl: RewardTable, a: int) -> np.ndarray:
    """Auxiliary-row part of the rebalanced difference under the constant arm ``a``, divided by n."""
    diff = tbl.w1[tbl.n_E:, a] - tbl.w0[tbl.n_E:, a]
    if tbl.n == 0:
        return np.zeros(tbl.s)
    return diff.sum(axis=0) / tbl.n
