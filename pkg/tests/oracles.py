"""Independent reference implementations used by the tests."""

import numpy as np


def candidate_thresholds(X):
    """Per feature: midpoints of consecutive unique values plus a +inf sentinel (everything left)."""
    out = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        out.append(list((u[:-1] + u[1:]) / 2) + [np.inf])
    return out


def _subtree_objectives(rewards, X, rows, depth, cands):
    """Objective of every depth-<=``depth`` tree restricted to ``rows`` (enumerated, not optimised)."""
    leaf = [rewards[rows, 0].sum(), rewards[rows, 1].sum()]
    if depth == 0:
        return np.array(leaf)
    objs = [np.array(leaf)]
    for j, ts in enumerate(cands):
        for t in ts:
            left = rows & (X[:, j] <= t)
            right = rows & ~(X[:, j] <= t)
            lo = _subtree_objectives(rewards, X, left, depth - 1, cands)
            ro = _subtree_objectives(rewards, X, right, depth - 1, cands)
            objs.append((lo[:, None] + ro[None, :]).ravel())
    return np.concatenate(objs)


def brute_force_tree(rewards, X, depth):
    """Maximum objective over every axis-aligned tree of depth <= ``depth`` on the candidate thresholds."""
    rewards = np.asarray(rewards, float)
    X = np.asarray(X, float)
    return float(_subtree_objectives(rewards, X, np.ones(len(X), bool), depth, candidate_thresholds(X)).max())


def random_instance(rng):
    """Small instance with frequent ties in covariates and rewards."""
    N = int(rng.integers(1, 13))
    r = int(rng.integers(1, 3))
    L = int(rng.integers(0, 3))
    if rng.random() < 0.5:
        X = rng.integers(-2, 3, (N, r)).astype(float)
    else:
        X = rng.normal(size=(N, r))
    if rng.random() < 0.3:
        rewards = rng.integers(-2, 3, (N, 2)).astype(float)
    else:
        rewards = rng.normal(size=(N, 2))
    return rewards, X, L


def recursive_best_tree(rewards, X, depth):
    """Same maximum as ``brute_force_tree`` via per-split recursion; memory stays small for depth 3."""
    rewards = np.asarray(rewards, float)
    X = np.asarray(X, float)
    cands = candidate_thresholds(X)

    def best(rows, d):
        val = max(rewards[rows, 0].sum(), rewards[rows, 1].sum())
        if d == 0:
            return val
        for j, ts in enumerate(cands):
            for t in ts:
                left = rows & (X[:, j] <= t)
                val = max(val, best(left, d - 1) + best(rows & ~left, d - 1))
        return val

    return float(best(np.ones(len(X), bool), depth))
