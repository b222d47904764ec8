"""Synthetic scenarios with known truth, Monte Carlo true values and replication studies.

Replication ``k`` of a study draws from ``SeedSequence(seed).spawn(reps)[k]``;
that child is split once more into a data stream and a stream for the Monte
Carlo evaluation of learned rules.  Results therefore do not depend on the
number of worker processes or on scheduling order.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from joblib import Parallel, delayed

from .calibration import baseline_report, calib_stats, calibrated_value, improved_efficiency
from .data import (AuxiliarySample, BasisSpec, Config, DecisionRule, Leaf, LinearRule, Node,
                   PrimarySample, TreeRule, rule_actions, rule_to_dict)
from .nuisance import crossfit_predictions
from .policy_search import coda_search, exact_tree_search
from .rewards import build_rewards

log = logging.getLogger(__name__)

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]

# ---------------------------------------------------------------------------
# Scenario building blocks (module level so that specs pickle for workers)
# ---------------------------------------------------------------------------


def _lin12(X):
    return X[:, 0] + 2 * X[:, 1]


def _lin21(X):
    return 2 * X[:, 0] + X[:, 1]


def _prod(X):
    return X[:, 0] * X[:, 1]


def _prod2(X):
    return 2 * X[:, 0] * X[:, 1]


def _sq12(X):
    return 0.5 * X[:, 0] ** 2 + 2 * X[:, 1]


def _diff12(X):
    return X[:, 0] - X[:, 1]


def _diff21x2(X):
    return 2 * (X[:, 1] - X[:, 0])


def _cos21(X):
    return 2 * np.cos(X[:, 0]) + X[:, 1]


def _zero(X):
    return np.zeros(X.shape[0])


class _Stacked:
    """Picklable column stack of scalar component functions."""

    def __init__(self, *fs):
        self.fs = fs

    def __call__(self, X):
        return np.column_stack([g(X) for g in self.fs])

    def __eq__(self, other):
        return isinstance(other, _Stacked) and self.fs == other.fs

    def __hash__(self):
        return hash(self.fs)

    def __repr__(self):
        return "[" + ", ".join(g.__name__.lstrip("_") for g in self.fs) + "]"


def _xor_tree() -> TreeRule:
    """``I{x1 x2 > 0}`` as a depth-2 tree on 0-based features 0 and 1."""
    return TreeRule(Node(0, 0.0, Node(1, 0.0, Leaf(1), Leaf(0)), Node(1, 0.0, Leaf(0), Leaf(1))), 2)


def _diagonal_rule(r: int) -> LinearRule:
    """``I{x2 - x1 > 0}`` as a linear rule."""
    beta = np.zeros(r + 1)
    beta[1], beta[2] = -1.0, 1.0
    return LinearRule(beta, BasisSpec(("linear",)))


@dataclass(frozen=True)
class ScenarioSpec:
    """One data-generating process with known conditional means.

    ``M = UM(X) + A CM(X) + eps`` and ``Y = UY(X) + A CY(X) + eps_Y``.
    ``noise_scale`` says how the primary noise magnitudes ``(2, 1.5)`` are
    read: ``"sd"`` as standard deviations, ``"variance"`` as variances.  With
    ``s > 1`` only the first intermediate's noise is correlated with ``eps_Y``;
    the others are independent with the same magnitude as the first.
    """

    id: int
    r: int
    s: int
    UM: Callable
    CM: Callable
    UY: Callable
    CY: Callable
    optimal_rule: DecisionRule
    noise_E: float = 2.0
    noise_Y: float = 1.5
    corr: float = 0.7
    noise_scale: str = "sd"
    aux_noise_halfwidth: float = 1.0
    propensity: tuple = (0.4, 0.2, -0.2)
    primary_range: tuple = (-2.0, 2.0)
    shifted_range: tuple = (-1.0, 1.5)

    def __post_init__(self):
        if self.noise_scale not in ("sd", "variance"):
            raise ValueError("noise_scale must be 'sd' or 'variance'")
        if not -1 < self.corr < 1:
            raise ValueError("corr must lie in (-1, 1)")

    @property
    def sd_E(self) -> float:
        return self.noise_E if self.noise_scale == "sd" else math.sqrt(self.noise_E)

    @property
    def sd_Y(self) -> float:
        return self.noise_Y if self.noise_scale == "sd" else math.sqrt(self.noise_Y)

    def propensity_score(self, X: np.ndarray) -> np.ndarray:
        b0, b1, b2 = self.propensity
        return 1.0 / (1.0 + np.exp(-(b0 + b1 * X[:, 0] + b2 * X[:, 1])))

    def mean_M(self, X: np.ndarray, a) -> np.ndarray:
        a = np.broadcast_to(np.asarray(a, float), (X.shape[0],))
        return _as_cols(self.UM(X)) + a[:, None] * _as_cols(self.CM(X))

    def mean_Y(self, X: np.ndarray, a) -> np.ndarray:
        a = np.broadcast_to(np.asarray(a, float), (X.shape[0],))
        return self.UY(X) + a * self.CY(X)

    def metadata(self) -> dict:
        return {
            "scenario": self.id, "r": self.r, "s": self.s, "noise_scale": self.noise_scale,
            "noise_E": self.noise_E, "noise_Y": self.noise_Y, "corr": self.corr,
            "noise_coupling": "eps_Y correlated with the first intermediate only",
            "aux_noise": f"Uniform[-{self.aux_noise_halfwidth}, {self.aux_noise_halfwidth}]",
            "optimal_rule": rule_to_dict(self.optimal_rule),
        }


def _as_cols(a: np.ndarray) -> np.ndarray:
    return a[:, None] if a.ndim == 1 else a


def scenario(sid: int, noise_scale: str = "sd") -> ScenarioSpec:
    """The five built-in scenarios (ids 1 to 5)."""
    xor = _xor_tree()
    if sid == 1:
        return ScenarioSpec(1, 2, 1, _lin12, _prod, _lin21, _prod2, xor, noise_scale=noise_scale)
    if sid == 2:
        return ScenarioSpec(2, 2, 1, _lin12, _diff12, _lin21, _diff21x2, _diagonal_rule(2),
                            noise_scale=noise_scale)
    if sid == 3:
        return ScenarioSpec(3, 10, 2, _Stacked(_lin12, _zero), _Stacked(_prod, _zero), _lin21, _prod2, xor,
                            noise_scale=noise_scale)
    if sid == 4:
        return ScenarioSpec(4, 10, 2, _Stacked(_sq12, _zero), _Stacked(_prod, _zero), _lin21, _prod2, xor,
                            noise_scale=noise_scale)
    if sid == 5:
        return ScenarioSpec(5, 10, 2, _Stacked(_lin12, _sq12), _Stacked(_prod, _prod), _cos21, _prod2, xor,
                            noise_scale=noise_scale)
    raise ValueError(f"unknown scenario {sid}; choose 1 to 5")


SCENARIOS = {k: scenario(k) for k in range(1, 6)}


def study_config(spec: ScenarioSpec, hetero: bool = False, **overrides) -> Config:
    """Default study settings: interaction basis, squared terms added for Scenarios 4 and 5."""
    basis = ("linear", "pairwise", "squares") if spec.id in (4, 5) else ("linear", "pairwise")
    kw = {"basis": basis, "mode": "HE" if hetero else "HO"}
    kw.update(overrides)
    return Config(**kw)


# ---------------------------------------------------------------------------
# Data generation and true values
# ---------------------------------------------------------------------------


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def generate(spec: ScenarioSpec, N_E: int, N_U: int, seed: SeedLike = 0,
             hetero: bool = False) -> tuple[PrimarySample, AuxiliarySample]:
    """Draw a primary and an auxiliary sample.

    With ``hetero`` the auxiliary covariates come from ``spec.shifted_range``
    instead of ``spec.primary_range``.
    """
    rng = _rng(seed)
    lo, hi = spec.primary_range
    XE = rng.uniform(lo, hi, (N_E, spec.r))
    lo_u, hi_u = spec.shifted_range if hetero else spec.primary_range
    XU = rng.uniform(lo_u, hi_u, (N_U, spec.r))
    AE = (rng.random(N_E) < spec.propensity_score(XE)).astype(np.int64)
    AU = (rng.random(N_U) < spec.propensity_score(XU)).astype(np.int64)

    cov = spec.corr * spec.sd_E * spec.sd_Y
    pair = rng.multivariate_normal([0.0, 0.0], [[spec.sd_E ** 2, cov], [cov, spec.sd_Y ** 2]], N_E)
    epsE = np.empty((N_E, spec.s))
    epsE[:, 0] = pair[:, 0]
    if spec.s > 1:
        epsE[:, 1:] = rng.normal(0.0, spec.sd_E, (N_E, spec.s - 1))
    h = spec.aux_noise_halfwidth
    epsU = rng.uniform(-h, h, (N_U, spec.s))

    e = PrimarySample(XE, AE, spec.mean_M(XE, AE) + epsE, spec.mean_Y(XE, AE) + pair[:, 1])
    u = AuxiliarySample(XU, AU, spec.mean_M(XU, AU) + epsU)
    return e, u


@dataclass(frozen=True)
class MCValue:
    value: float
    se: float
    n_mc: int


RuleOrFn = Union[DecisionRule, Callable[[np.ndarray], np.ndarray]]


def _actions(rule: RuleOrFn, X: np.ndarray) -> np.ndarray:
    if isinstance(rule, (TreeRule, LinearRule)):
        return rule_actions(rule, X)
    return np.asarray(rule(X)).astype(np.int64)


def mc_true_value(spec: ScenarioSpec, rule: RuleOrFn, n_mc: int = 10 ** 6, seed: SeedLike = 0,
                  chunk: int = 200_000) -> MCValue:
    """Mean of ``UY(X) + d(X) CY(X)`` over fresh primary-law covariates, with its MC standard error.

    Outcome noise has mean zero and is left out.
    """
    rng = _rng(seed)
    lo, hi = spec.primary_range
    parts, sq = [], []
    left = n_mc
    while left > 0:
        m = min(chunk, left)
        X = rng.uniform(lo, hi, (m, spec.r))
        g = spec.mean_Y(X, _actions(rule, X))
        parts.append(math.fsum(g))
        sq.append(math.fsum(g * g))
        left -= m
    mean = math.fsum(parts) / n_mc
    var = max(math.fsum(sq) / n_mc - mean ** 2, 0.0)
    return MCValue(mean, math.sqrt(var / n_mc), n_mc)


@dataclass(frozen=True)
class BestTree:
    rule: TreeRule
    value: float
    se: float


def best_tree_value(spec: ScenarioSpec, depth: int = 2, seed: SeedLike = 0, n_search: int = 20_000,
                    n_mc: int = 10 ** 6) -> BestTree:
    """Best depth-``depth`` tree found on a noiseless reward sample, re-valued on fresh draws."""
    if depth > 2:
        raise ValueError("best_tree_value is limited to depth <= 2")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    s_search, s_eval = ss.spawn(2)
    rng = np.random.default_rng(s_search)
    lo, hi = spec.primary_range
    X = rng.uniform(lo, hi, (n_search, spec.r))
    R = np.column_stack([spec.mean_Y(X, 0), spec.mean_Y(X, 1)])
    rule = exact_tree_search(R, X, depth).rule
    mc = mc_true_value(spec, rule, n_mc, np.random.default_rng(s_eval))
    return BestTree(rule, mc.value, mc.se)


# ---------------------------------------------------------------------------
# Replication studies
# ---------------------------------------------------------------------------

CELLS = ("coda_opt", "coda_hat", "odr_opt", "odr_hat")
CELL_LABELS = {"coda_opt": "CODA (d_opt)", "coda_hat": "CODA (d_hat)",
               "odr_opt": "ODR (d_opt)", "odr_hat": "ODR (d_hat_E)"}


def _cell(report, true_value: float, target: float) -> dict:
    st = report.stats
    lo, hi = report.ci
    return {
        "value": float(report.value),
        "se": report.se,
        "variance": float(report.variance),
        "sigma_y2": float(st.sigmaY2),
        "rho": None if st.mode == "baseline" else np.atleast_1d(st.cross).tolist(),
        "sigma": None if st.mode == "baseline" else np.atleast_2d(st.cov).tolist(),
        "true_value": float(true_value),
        "covers": bool(lo <= target <= hi),
        "covers_rule": bool(lo <= true_value <= hi),
        "variance_violation": bool(report.diagnostics.get("variance_exceeds_sigma_y2", False)
                                   or report.variance > st.sigmaY2 * (1 + 1e-10)),
    }


def replicate(spec: ScenarioSpec, N_E: int, N_U: int, cfg: Config, seed: np.random.SeedSequence,
              hetero: bool = False, fixed_only: bool = False, truth: Optional[float] = None,
              n_mc: int = 100_000) -> dict:
    """One replication: all four method/rule cells (only the ``d_opt`` cells with ``fixed_only``)."""
    s_data, s_mc = seed.spawn(2)
    mode = cfg.mode if cfg.mode != "auto" else ("HE" if hetero else "HO")
    cfg = cfg.replace(mode=mode)
    e, u = generate(spec, N_E, N_U, np.random.default_rng(s_data), hetero)
    preds = crossfit_predictions(e, u, cfg)
    tbl = build_rewards(e, u, preds, cfg)
    d_opt = spec.optimal_rule
    target = truth if truth is not None else mc_true_value(spec, d_opt, n_mc, np.random.default_rng(s_mc)).value
    out = {
        "coda_opt": _cell(calibrated_value(tbl, d_opt, calib_stats(tbl, d_opt, mode), cfg.alpha, cfg.ridge),
                          target, target),
        "odr_opt": _cell(baseline_report(tbl, d_opt, cfg.alpha), target, target),
    }
    if fixed_only:
        return out
    base = exact_tree_search(tbl.v, tbl.XE, cfg.depth, cfg.max_depth_cap)
    res, rep = coda_search(e, u, preds, cfg, tbl=tbl, initial=base)
    mc_rng = np.random.default_rng(s_mc)
    v_hat_E = mc_true_value(spec, base.rule, n_mc, mc_rng).value
    v_hat = v_hat_E if res.rule == base.rule else mc_true_value(spec, res.rule, n_mc, mc_rng).value
    out["odr_hat"] = _cell(baseline_report(tbl, base.rule, cfg.alpha), v_hat_E, target)
    out["coda_hat"] = _cell(rep, v_hat, target)
    out["coda_hat"]["iterations"] = res.iterations_used
    out["coda_hat"]["rule_changed"] = res.rule != base.rule
    return out


def _safe_replicate(k: int, *args, **kwargs) -> dict:
    try:
        return {"index": k, "ok": True, "cells": replicate(*args, **kwargs)}
    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("replication %d failed: %s", k, exc)
        return {"index": k, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _mean(xs) -> float:
    return math.fsum(xs) / len(xs)


def _sd(xs) -> Optional[float]:
    if len(xs) < 2:
        return None
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


@dataclass
class CellSummary:
    true_value: float
    estimate: float
    sd: Optional[float]
    mean_sigma: float
    coverage: float
    coverage_rule: float
    variance_violations: int
    efficiency: Optional[float] = None
    rho: Optional[list] = None
    sigma: Optional[list] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _summarise_cell(rows: list) -> CellSummary:
    est = [r["value"] for r in rows]
    out = CellSummary(
        true_value=_mean([r["true_value"] for r in rows]),
        estimate=_mean(est),
        sd=_sd(est),
        mean_sigma=_mean([r["se"] for r in rows]),
        coverage=_mean([float(r["covers"]) for r in rows]),
        coverage_rule=_mean([float(r["covers_rule"]) for r in rows]),
        variance_violations=sum(r["variance_violation"] for r in rows),
    )
    if rows[0]["rho"] is not None:
        out.rho = np.mean([r["rho"] for r in rows], axis=0).tolist()
        out.sigma = np.mean([r["sigma"] for r in rows], axis=0).tolist()
    return out


@dataclass
class StudySummary:
    """Aggregated replication results, one :class:`CellSummary` per method/rule cell."""

    scenario: int
    mode: str
    N_E: int
    N_U: int
    reps: int
    n_failed: int
    seed: int
    true_value: float
    cells: dict
    metadata: dict = field(default_factory=dict)
    replications: list = field(default_factory=list, repr=False)

    def efficiency(self, rule: str = "hat") -> Optional[float]:
        return self.cells[f"coda_{rule}"].efficiency if f"coda_{rule}" in self.cells else None

    @property
    def variance_violations(self) -> int:
        return sum(c.variance_violations for c in self.cells.values())

    def to_dict(self, include_replications: bool = False) -> dict:
        d = {
            "scenario": self.scenario, "mode": self.mode, "N_E": self.N_E, "N_U": self.N_U,
            "reps": self.reps, "n_failed": self.n_failed, "seed": self.seed,
            "seed_scheme": "numpy SeedSequence(seed).spawn(reps); child k -> (data, mc) via spawn(2)",
            "true_value": self.true_value,
            "cells": {k: c.to_dict() for k, c in self.cells.items()},
            "metadata": dict(self.metadata),
        }
        if include_replications:
            d["replications"] = list(self.replications)
        return d

    def table_rows(self) -> list:
        """Rows of ``(statistic, value per cell)`` in the layout of a results table."""
        def fmt(x, pct=False):
            if x is None:
                return ""
            if isinstance(x, list):
                return ";".join(fmt(v) for v in np.ravel(x))
            return f"{100 * x:.1f}%" if pct else f"{x:.4f}"

        stats = [("True Value", "true_value", False), ("Estimated Value", "estimate", False),
                 ("SD", "sd", False), ("E(sigma)", "mean_sigma", False),
                 ("Coverage Probability", "coverage", True), ("Improved Efficiency", "efficiency", False),
                 ("rho", "rho", False), ("Sigma", "sigma", False)]
        cells = [k for k in CELLS if k in self.cells]
        rows = [["statistic"] + [CELL_LABELS[k] for k in cells]]
        for label, attr, pct in stats:
            vals = []
            for k in cells:
                v = getattr(self.cells[k], attr)
                vals.append(f"{v:.1f}%" if attr == "efficiency" and v is not None else fmt(v, pct))
            rows.append([label] + vals)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.table_rows())
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.table_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def run_study(spec: ScenarioSpec, N_E: int = 1000, N_U: int = 2000, reps: int = 500,
              cfg: Optional[Config] = None, seed: int = 0, hetero: bool = False,
              threads: int = 1, fixed_only: bool = False, n_mc: int = 100_000,
              truth_n_mc: int = 10 ** 6) -> StudySummary:
    """Replicate generate, fit, search and report ``reps`` times and aggregate.

    Coverage is judged against ``V(d_opt)``; ``coverage_rule`` against the
    true value of the rule each cell evaluated.  Failed replications are
    counted in ``n_failed`` and left out of every aggregate.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cfg = study_config(spec, hetero) if cfg is None else cfg
    mode = cfg.mode if cfg.mode != "auto" else ("HE" if hetero else "HO")
    truth = mc_true_value(spec, spec.optimal_rule, truth_n_mc, np.random.SeedSequence([seed, 2 ** 31])).value
    children = np.random.SeedSequence(seed).spawn(reps)
    job = delayed(_safe_replicate)
    args = dict(hetero=hetero, fixed_only=fixed_only, truth=truth, n_mc=n_mc)
    if threads == 1:
        results = [_safe_replicate(k, spec, N_E, N_U, cfg, ch, **args) for k, ch in enumerate(children)]
    else:
        results = Parallel(n_jobs=threads)(job(k, spec, N_E, N_U, cfg, ch, **args)
                                           for k, ch in enumerate(children))
    results.sort(key=lambda r: r["index"])
    good = [r["cells"] for r in results if r["ok"]]
    if not good:
        raise RuntimeError("every replication failed: " + results[0].get("error", ""))
    cells = {k: _summarise_cell([g[k] for g in good]) for k in CELLS if k in good[0]}
    for rule in ("opt", "hat"):
        c, b = cells.get(f"coda_{rule}"), cells.get(f"odr_{rule}")
        if c is not None and b is not None and c.sd and b.sd:
            c.efficiency = improved_efficiency(c.sd, b.sd)
    meta = spec.metadata()
    meta.update({"basis": list(cfg.basis), "depth": cfg.depth, "max_iter": cfg.max_iter,
                 "hetero": hetero, "fixed_only": fixed_only,
                 "errors": [r["error"] for r in results if not r["ok"]]})
    return StudySummary(scenario=spec.id, mode=mode, N_E=N_E, N_U=N_U, reps=len(good),
                        n_failed=len(results) - len(good), seed=seed, true_value=truth, cells=cells,
                        metadata=meta, replications=good)
