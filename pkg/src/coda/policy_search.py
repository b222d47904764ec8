"""Exact policy-tree search over reward matrices and the iterative calibrated searches.

Trees split on midpoints between consecutive distinct covariate values of the
rows reaching a node.  Equal objectives are broken deterministically: a leaf
beats any split, then lower feature index, then lower threshold; a leaf
prefers action 0 on a tie.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.optimize import minimize

from .calibration import (CalibrationReport, baseline_report, calib_stats, calibrated_value,
                          projection_coefficient)
from .data import (AuxiliarySample, BasisSpec, Config, DecisionRule, Leaf, LinearRule, Node,
                   PrimarySample, TreeRule, validate_pair)
from .nuisance import NuisancePredictions, NuisanceSet
from .rewards import Actions, RewardTable, build_rewards, delta_hat, take

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SearchResult:
    rule: DecisionRule
    objective: float
    iterations_used: int = 0
    converged: bool = True
    trace: tuple = field(default_factory=tuple)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _cut_threshold(lo, hi):
    t = 0.5 * (lo + hi)
    if t >= hi:
        t = lo
    return t


@numba.njit(cache=True)
def _best_depth1(R0, R1, X, orders, member, want, tol):
    """Best depth-<=1 tree on rows with ``member == want``.

    Returns (value, kind, feature, threshold, left_action, right_action);
    kind 0 is a leaf whose action is stored in ``left_action``.
    """
    n = R0.shape[0]
    r = X.shape[1]
    T0 = 0.0
    T1 = 0.0
    cnt = 0
    for p in range(n):
        if member[p] == want:
            T0 += R0[p]
            T1 += R1[p]
            cnt += 1
    a = 1 if T1 > T0 else 0
    best = T1 if a == 1 else T0
    kind, bf, bt, ba, bb = 0, -1, 0.0, a, a
    if cnt < 2:
        return best, kind, bf, bt, ba, bb
    for k in range(r):
        P0 = 0.0
        P1 = 0.0
        seen = 0
        lastx = 0.0
        for q in range(n):
            p = orders[k, q]
            if member[p] != want:
                continue
            xv = X[p, k]
            if seen > 0 and xv > lastx:
                la = 1 if P1 > P0 else 0
                lv = P1 if la == 1 else P0
                r0 = T0 - P0
                r1 = T1 - P1
                ra = 1 if r1 > r0 else 0
                rv = r1 if ra == 1 else r0
                val = lv + rv
                if val > best + tol:
                    best = val
                    kind, bf, bt, ba, bb = 1, k, _cut_threshold(lastx, xv), la, ra
            P0 += R0[p]
            P1 += R1[p]
            lastx = xv
            seen += 1
    return best, kind, bf, bt, ba, bb


@numba.njit(cache=True)
def _best_depth2(R0, R1, X, orders, tol):
    """Exact best depth-<=2 tree over all rows.

    Returns the objective and a flat description:
    (value, top_kind, j, thr, leaf_action,
     Lkind, Lf, Lt, La, Lb, Rkind, Rf, Rt, Ra, Rb).
    """
    n = R0.shape[0]
    r = X.shape[1]
    # per-feature sorted copies so the inner scans are contiguous
    Xs = np.empty((r, n))
    S0 = np.empty((r, n))
    S1 = np.empty((r, n))
    rank = np.empty((r, n), dtype=np.int64)
    for k in range(r):
        for q in range(n):
            p = orders[k, q]
            Xs[k, q] = X[p, k]
            S0[k, q] = R0[p]
            S1[k, q] = R1[p]
            rank[k, p] = q
    inl = np.zeros((r, n), dtype=np.int8)

    T0 = R0.sum()
    T1 = R1.sum()
    a = 1 if T1 > T0 else 0
    best = T1 if a == 1 else T0
    top_kind, bj, bthr = 0, -1, 0.0
    Lk, Lf, Lt, La, Lb = 0, -1, 0.0, a, a
    Rk, Rf, Rt, Ra, Rb = 0, -1, 0.0, a, a
    for j in range(r):
        inl[:, :] = 0
        oj = orders[j]
        TL0 = 0.0
        TL1 = 0.0
        for i in range(n - 1):
            p = oj[i]
            for k in range(r):
                inl[k, rank[k, p]] = 1
            TL0 += R0[p]
            TL1 += R1[p]
            x_here = X[p, j]
            x_next = X[oj[i + 1], j]
            if not (x_next > x_here):
                continue
            TR0 = T0 - TL0
            TR1 = T1 - TL1
            la0 = 1 if TL1 > TL0 else 0
            lbest = TL1 if la0 == 1 else TL0
            lk, lf, lt, la, lb = 0, -1, 0.0, la0, la0
            ra0 = 1 if TR1 > TR0 else 0
            rbest = TR1 if ra0 == 1 else TR0
            rk, rf, rt, ra, rb = 0, -1, 0.0, ra0, ra0
            for k in range(r):
                PL0 = 0.0
                PL1 = 0.0
                PR0 = 0.0
                PR1 = 0.0
                seenL = False
                seenR = False
                lastL = 0.0
                lastR = 0.0
                xk = Xs[k]
                s0 = S0[k]
                s1 = S1[k]
                ink = inl[k]
                for q in range(n):
                    xv = xk[q]
                    if ink[q] == 1:
                        if seenL and xv > lastL:
                            r0 = TL0 - PL0
                            r1 = TL1 - PL1
                            v = max(PL0, PL1) + max(r0, r1)
                            if v > lbest + tol:
                                lbest = v
                                lk, lf, lt = 1, k, _cut_threshold(lastL, xv)
                                la = 1 if PL1 > PL0 else 0
                                lb = 1 if r1 > r0 else 0
                        PL0 += s0[q]
                        PL1 += s1[q]
                        lastL = xv
                        seenL = True
                    else:
                        if seenR and xv > lastR:
                            r0 = TR0 - PR0
                            r1 = TR1 - PR1
                            v = max(PR0, PR1) + max(r0, r1)
                            if v > rbest + tol:
                                rbest = v
                                rk, rf, rt = 1, k, _cut_threshold(lastR, xv)
                                ra = 1 if PR1 > PR0 else 0
                                rb = 1 if r1 > r0 else 0
                        PR0 += s0[q]
                        PR1 += s1[q]
                        lastR = xv
                        seenR = True
            val = lbest + rbest
            if val > best + tol:
                best = val
                top_kind, bj, bthr = 1, j, _cut_threshold(x_here, x_next)
                Lk, Lf, Lt, La, Lb = lk, lf, lt, la, lb
                Rk, Rf, Rt, Ra, Rb = rk, rf, rt, ra, rb
    return (best, top_kind, bj, bthr, a, Lk, Lf, Lt, La, Lb, Rk, Rf, Rt, Ra, Rb)


def _orders(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


def _d1_node(kind, f, t, a, b) -> "Leaf | Node":
    if kind == 0:
        return Leaf(int(a))
    return Node(int(f), float(t), Leaf(int(a)), Leaf(int(b)))


def _solve(R0: np.ndarray, R1: np.ndarray, X: np.ndarray, depth: int, tol: float):
    """(objective, root node) of the best tree of depth <= ``depth`` on these rows."""
    n = R0.shape[0]
    if depth == 0 or n == 0:
        T0, T1 = R0.sum(), R1.sum()
        return (T1, Leaf(1)) if T1 > T0 else (T0, Leaf(0))
    orders = _orders(X)
    if depth == 1:
        v, kind, f, t, a, b = _best_depth1(R0, R1, X, orders, np.ones(n, dtype=np.int8), 1, tol)
        return v, _d1_node(kind, f, t, a, b)
    if depth == 2:
        (v, top, j, thr, a, lk, lf, lt, la, lb, rk, rf, rt, ra, rb) = _best_depth2(R0, R1, X, orders, tol)
        if top == 0:
            return v, Leaf(int(a))
        return v, Node(int(j), float(thr), _d1_node(lk, lf, lt, la, lb), _d1_node(rk, rf, rt, ra, rb))
    best, node = _solve(R0, R1, X, 0, tol)
    for j in range(X.shape[1]):
        oj = orders[j]
        xs = X[oj, j]
        for i in range(n - 1):
            if not xs[i + 1] > xs[i]:
                continue
            left, right = oj[: i + 1], oj[i + 1:]
            lv, ln = _solve(R0[left], R1[left], X[left], depth - 1, tol)
            rv, rn = _solve(R0[right], R1[right], X[right], depth - 1, tol)
            if lv + rv > best + tol:
                best = lv + rv
                node = Node(j, float(_cut_threshold(xs[i], xs[i + 1])), ln, rn)
    return best, node


def exact_tree_search(rewards: np.ndarray, X: np.ndarray, depth: int = 2,
                      max_depth: int = 4) -> SearchResult:
    """Tree of depth <= ``depth`` maximising ``sum_i rewards[i, d(x_i)]`` exactly.

    Cost grows like ``(N r)^(2^depth - 1)`` for depth >= 3; ``max_depth`` guards it.
    """
    rewards = np.asarray(rewards, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if rewards.ndim != 2 or rewards.shape[1] != 2:
        raise ValueError("rewards must have shape (N, 2)")
    N = rewards.shape[0]
    if N == 0:
        raise ValueError("cannot search a tree on zero rows")
    if X.shape[0] != N:
        raise ValueError(f"{N} reward rows but {X.shape[0]} covariate rows")
    if depth < 0 or depth > max_depth:
        raise ValueError(f"depth must lie in [0, {max_depth}]")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("rewards must be finite")
    R0 = np.ascontiguousarray(rewards[:, 0])
    R1 = np.ascontiguousarray(rewards[:, 1])
    tol = 1e-12 * (np.abs(rewards).sum() + 1.0)
    obj, root = _solve(R0, R1, np.ascontiguousarray(X), depth, tol)
    rule = TreeRule(root, depth)
    return SearchResult(rule=rule, objective=float(obj), trace=(float(obj),))


def tree_objective(rewards: np.ndarray, X: np.ndarray, rule: DecisionRule) -> float:
    from .data import rule_actions
    return float(take(np.asarray(rewards, float), rule_actions(rule, X)).sum())


# ---------------------------------------------------------------------------
# Calibrated searches
# ---------------------------------------------------------------------------


def resolve_mode(e: PrimarySample, u: AuxiliarySample, cfg: Config) -> str:
    if cfg.mode != "auto":
        return cfg.mode
    return validate_pair(e, u).suggested_mode


def calibrated_rewards(tbl: RewardTable, coef: np.ndarray, mode: str) -> np.ndarray:
    """Per-arm calibrated rewards for the primary rows with a frozen projection coefficient."""
    coef = np.atleast_1d(np.asarray(coef, dtype=float))
    out = np.empty((tbl.n_E, 2))
    for a in (0, 1):
        if mode == "HO":
            centred = tbl.wE[:, a] - tbl.wU[:, a].mean(axis=0)
            out[:, a] = tbl.v[:, a] - centred @ coef
        elif mode == "HE":
            nE, n = tbl.n_E, tbl.n
            part = (nE / n) * (tbl.w1[:nE, a] - tbl.w0[:nE, a]) + delta_hat(tbl, a)
            out[:, a] = tbl.v[:, a] - np.sqrt(n / nE) * (part @ coef)
        else:
            raise ValueError(f"mode must be HO or HE, got {mode!r}")
    return out


def coda_search(e: PrimarySample, u: AuxiliarySample, nuis, cfg: Config = Config(),
                tbl: Optional[RewardTable] = None,
                initial: Optional[SearchResult] = None) -> tuple[SearchResult, CalibrationReport]:
    """Iterative calibrated tree search.

    Starts from the primary-only tree, then alternately freezes the
    calibration statistics at the current tree and re-solves the tree on
    calibrated rewards, for at most ``cfg.max_iter`` rounds or until the tree
    stops changing.  With ``max_iter == 0`` the primary-only tree and its
    uncalibrated report are returned.
    """
    tbl = build_rewards(e, u, nuis, cfg) if tbl is None else tbl
    mode = resolve_mode(e, u, cfg)
    base = initial or exact_tree_search(tbl.v, tbl.XE, cfg.depth, cfg.max_depth_cap)
    if cfg.max_iter == 0:
        return base, baseline_report(tbl, base.rule, cfg.alpha)
    current, objective = base.rule, base.objective
    trace = [base.objective]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        coef, _ = projection_coefficient(calib_stats(tbl, current, mode), cfg.ridge)
        res = exact_tree_search(calibrated_rewards(tbl, coef, mode), tbl.XE, cfg.depth, cfg.max_depth_cap)
        trace.append(res.objective)
        objective = res.objective
        converged = res.rule == current
        current = res.rule
        if converged:
            break
    report = calibrated_value(tbl, current, calib_stats(tbl, current, mode), cfg.alpha, cfg.ridge)
    return SearchResult(current, objective, it, converged, tuple(trace)), report


def _unit(b: np.ndarray) -> np.ndarray:
    nb = np.linalg.norm(b)
    return b / nb if nb > 0 else b


def _maximise_direction(objective, dim: int, rng: np.random.Generator, n_starts: int,
                        extra_starts=(), n_refine: int = 5) -> np.ndarray:
    """Multi-start search on the unit sphere with Nelder-Mead polishing of the best starts."""
    starts = [_unit(s) for s in rng.standard_normal((n_starts, dim))]
    eye = np.eye(dim)
    starts += [eye[i] for i in range(dim)] + [-eye[i] for i in range(dim)]
    starts += [_unit(np.asarray(s, float)) for s in extra_starts]
    scores = np.array([objective(s) for s in starts])
    order = np.argsort(-scores, kind="stable")[:n_refine]
    best_b, best_v = starts[order[0]], scores[order[0]]
    for idx in order:
        res = minimize(lambda b: -objective(_unit(b)), starts[idx], method="Nelder-Mead",
                       options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 400 * dim,
                                "initial_simplex": starts[idx] + 0.25 * np.vstack([np.zeros(dim), eye])})
        cand = _unit(res.x)
        val = objective(cand)
        if val > best_v:
            best_b, best_v = cand, val
    return best_b


def parametric_search(e: PrimarySample, u: AuxiliarySample, nuis, basis: BasisSpec,
                      cfg: Config = Config(),
                      tbl: Optional[RewardTable] = None) -> tuple[SearchResult, CalibrationReport]:
    """Calibrated search over linear rules ``I{basis(x) @ beta > 0}`` with unit-norm ``beta``."""
    tbl = build_rewards(e, u, nuis, cfg) if tbl is None else tbl
    mode = resolve_mode(e, u, cfg)
    PhiE, PhiU = basis.expand(e.X), basis.expand(u.X)
    dim = PhiE.shape[1]
    if dim > e.n:
        raise ValueError(f"basis has {dim} terms but the primary sample has only {e.n} rows")
    rng = np.random.default_rng(cfg.seed)

    def acts(b):
        return Actions((PhiE @ b > 0).astype(np.int64), (PhiU @ b > 0).astype(np.int64))

    def value_E(b):
        return float(take(tbl.v, acts(b).primary).mean())

    beta = _maximise_direction(value_E, dim, rng, cfg.n_starts)
    trace = [value_E(beta)]
    if cfg.max_iter == 0:
        rule = LinearRule(beta, basis)
        return (SearchResult(rule, trace[0], 0, True, tuple(trace)),
                baseline_report(tbl, acts(beta), cfg.alpha))
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        stats = calib_stats(tbl, acts(beta), mode)
        coef, _ = projection_coefficient(stats, cfg.ridge)

        def value_cal(b, coef=coef, scale=stats.scale):
            d = acts(b)
            if mode == "HE":
                diff = (take(tbl.w1, d.joint) - take(tbl.w0, d.joint)).mean(axis=0)
            else:
                diff = take(tbl.wE, d.primary).mean(axis=0) - take(tbl.wU, d.auxiliary).mean(axis=0)
            return float(take(tbl.v, d.primary).mean() - scale * (coef @ diff))

        new = _maximise_direction(value_cal, dim, rng, cfg.n_starts, extra_starts=[beta])
        trace.append(value_cal(new))
        step = np.linalg.norm(new - beta)
        beta = new
        if step < cfg.tol:
            converged = True
            break
    rule = LinearRule(beta, basis)
    report = calibrated_value(tbl, acts(beta), calib_stats(tbl, acts(beta), mode), cfg.alpha, cfg.ridge)
    report = CalibrationReport(report.value, report.variance, report.ci, report.stats, rule,
                               report.n_E, report.n_U, report.diagnostics)
    return SearchResult(rule, trace[-1], it, converged, tuple(trace)), report
