"""Samples, decision rules and run configuration.

Feature indices are 0-based throughout (column ``x1`` in a CSV is feature 0).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np
from scipy import stats

BASIS_TERMS = ("linear", "pairwise", "squares")
SAMPLING_TERMS = ("covariates", "treatment", "intermediate", "residual_sq")


class StructuralError(ValueError):
    """A rule or sample does not fit the shape it is used with."""


class CSVFormatError(ValueError):
    """Malformed sample file; the message names the offending row and column."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(frozen=True, eq=False)
class PrimarySample:
    """Rows with covariates ``X``, treatment ``A``, intermediates ``M`` and outcome ``Y``."""

    X: np.ndarray
    A: np.ndarray
    M: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(_as_matrix(self.X)))
        object.__setattr__(self, "A", _frozen(np.asarray(self.A).ravel(), dtype=np.int64))
        object.__setattr__(self, "M", _frozen(_as_matrix(self.M)))
        object.__setattr__(self, "Y", _frozen(np.asarray(self.Y, dtype=float).ravel()))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def r(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return self.M.shape[1]


@dataclass(frozen=True, eq=False)
class AuxiliarySample:
    """Rows with covariates, treatment and intermediates; no outcome."""

    X: np.ndarray
    A: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(_as_matrix(self.X)))
        object.__setattr__(self, "A", _frozen(np.asarray(self.A).ravel(), dtype=np.int64))
        object.__setattr__(self, "M", _frozen(_as_matrix(self.M)))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def r(self) -> int:
        return self.X.shape[1]

    @property
    def s(self) -> int:
        return self.M.shape[1]


@dataclass(frozen=True, eq=False)
class JointSample:
    """Primary rows stacked on top of auxiliary rows, with ``R = 1`` marking primary rows.

    The primary-first ordering is relied upon by the heterogeneous reward code.
    ``Y`` is NaN on auxiliary rows.
    """

    X: np.ndarray
    A: np.ndarray
    M: np.ndarray
    R: np.ndarray
    Y: np.ndarray
    n_primary: int

    @classmethod
    def stack(cls, e: PrimarySample, u: AuxiliarySample) -> "JointSample":
        return cls(
            X=_frozen(np.vstack([e.X, u.X])),
            A=_frozen(np.concatenate([e.A, u.A]), dtype=np.int64),
            M=_frozen(np.vstack([e.M, u.M])),
            R=_frozen(np.r_[np.ones(e.n), np.zeros(u.n)], dtype=np.int64),
            Y=_frozen(np.r_[e.Y, np.full(u.n, np.nan)]),
            n_primary=e.n,
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]


# ---------------------------------------------------------------------------
# Decision rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    action: int

    @property
    def depth(self) -> int:
        return 0


@dataclass(frozen=True)
class Node:
    """Internal split: rows with ``x[feature] <= threshold`` go left."""

    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"

    @property
    def depth(self) -> int:
        return 1 + max(self.left.depth, self.right.depth)


TreeNode = Union[Leaf, Node]


@dataclass(frozen=True)
class BasisSpec:
    """Feature expansion ``1, [x_j], [x_j x_k (j<k)], [x_j^2]`` chosen by ``terms``."""

    terms: tuple = ("linear",)

    def __post_init__(self):
        terms = tuple(self.terms)
        bad = [t for t in terms if t not in BASIS_TERMS]
        if bad:
            raise ValueError(f"unknown basis terms {bad}; choose from {BASIS_TERMS}")
        object.__setattr__(self, "terms", terms)

    def expand(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        cols = [np.ones(X.shape[0])]
        r = X.shape[1]
        if "linear" in self.terms:
            cols.extend(X.T)
        if "pairwise" in self.terms:
            cols.extend(X[:, j] * X[:, k] for j in range(r) for k in range(j + 1, r))
        if "squares" in self.terms:
            cols.extend(X.T ** 2)
        return np.column_stack(cols)

    def size(self, r: int) -> int:
        return self.expand(np.zeros((1, r))).shape[1]


@dataclass(frozen=True)
class TreeRule:
    root: TreeNode
    depth: int

    def __post_init__(self):
        if self.root.depth > self.depth:
            raise StructuralError(f"tree has depth {self.root.depth} > declared {self.depth}")


@dataclass(frozen=True, eq=False)
class LinearRule:
    """Treat iff ``basis(x) @ beta > 0`` (strictly)."""

    beta: np.ndarray
    basis: BasisSpec = field(default_factory=BasisSpec)

    def __post_init__(self):
        beta = _frozen(np.asarray(self.beta, dtype=float).ravel())
        if not np.all(np.isfinite(beta)):
            raise StructuralError("linear rule coefficients must be finite")
        object.__setattr__(self, "beta", beta)

    def __eq__(self, other):
        return (isinstance(other, LinearRule) and self.basis == other.basis
                and np.array_equal(self.beta, other.beta))

    def __hash__(self):
        return hash((self.basis, self.beta.tobytes()))


DecisionRule = Union[TreeRule, LinearRule]


def _descend(node: TreeNode, x: np.ndarray) -> int:
    while isinstance(node, Node):
        if not 0 <= node.feature < x.shape[0]:
            raise StructuralError(f"feature index {node.feature} out of range for r={x.shape[0]}")
        node = node.left if x[node.feature] <= node.threshold else node.right
    return int(node.action)


def apply_rule(rule: DecisionRule, x: Sequence[float]) -> int:
    """Action (0 or 1) that ``rule`` assigns to a single covariate vector."""
    x = np.asarray(x, dtype=float).ravel()
    if isinstance(rule, TreeRule):
        return _descend(rule.root, x)
    phi = rule.basis.expand(x[None, :])[0]
    if phi.shape[0] != rule.beta.shape[0]:
        raise StructuralError(f"basis has {phi.shape[0]} terms, beta has {rule.beta.shape[0]}")
    return int(phi @ rule.beta > 0)


def _tree_actions(node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if isinstance(node, Leaf):
        out[rows] = node.action
        return
    if not 0 <= node.feature < X.shape[1]:
        raise StructuralError(f"feature index {node.feature} out of range for r={X.shape[1]}")
    go_left = X[rows, node.feature] <= node.threshold
    _tree_actions(node.left, X, rows[go_left], out)
    _tree_actions(node.right, X, rows[~go_left], out)


def rule_actions(rule: DecisionRule, X: np.ndarray) -> np.ndarray:
    """Vectorised :func:`apply_rule` over the rows of ``X``."""
    X = _as_matrix(X)
    if isinstance(rule, TreeRule):
        out = np.zeros(X.shape[0], dtype=np.int64)
        _tree_actions(rule.root, X, np.arange(X.shape[0]), out)
        return out
    phi = rule.basis.expand(X)
    if phi.shape[1] != rule.beta.shape[0]:
        raise StructuralError(f"basis has {phi.shape[1]} terms, beta has {rule.beta.shape[0]}")
    return (phi @ rule.beta > 0).astype(np.int64)


def tree_leaf_ids(node: TreeNode, X: np.ndarray) -> np.ndarray:
    """Index of the leaf (left-to-right order) each row of ``X`` falls into."""
    X = _as_matrix(X)
    out = np.zeros(X.shape[0], dtype=np.int64)
    counter = [0]

    def walk(nd, rows):
        if isinstance(nd, Leaf):
            out[rows] = counter[0]
            counter[0] += 1
            return
        go_left = X[rows, nd.feature] <= nd.threshold
        walk(nd.left, rows[go_left])
        walk(nd.right, rows[~go_left])

    walk(node, np.arange(X.shape[0]))
    return out


def _node_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"action": int(node.action)}
    return {
        "feature": int(node.feature),
        "threshold": float(node.threshold),
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d: dict) -> TreeNode:
    if "action" in d:
        return Leaf(int(d["action"]))
    return Node(int(d["feature"]), float(d["threshold"]),
                _node_from_dict(d["left"]), _node_from_dict(d["right"]))


def rule_to_dict(rule: DecisionRule) -> dict:
    if isinstance(rule, TreeRule):
        return {"type": "tree", "depth": rule.depth, "root": _node_to_dict(rule.root)}
    return {"type": "linear", "beta": rule.beta.tolist(), "basis": list(rule.basis.terms)}


def rule_from_dict(d: dict) -> DecisionRule:
    kind = d.get("type", "tree")
    if kind == "tree":
        root = _node_from_dict(d["root"])
        return TreeRule(root, int(d.get("depth", root.depth)))
    if kind == "linear":
        return LinearRule(np.asarray(d["beta"], dtype=float), BasisSpec(tuple(d.get("basis", ("linear",)))))
    raise StructuralError(f"unknown rule type {kind!r}")


def save_rule(rule: DecisionRule, path) -> None:
    Path(path).write_text(json.dumps(rule_to_dict(rule), indent=2))


def load_rule(path) -> DecisionRule:
    return rule_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Config:
    depth: int = 2
    max_iter: int = 1
    tol: float = 1e-4
    clip: tuple = (0.01, 0.99)
    ridge: float = 1e-8
    alpha: float = 0.05
    mode: str = "auto"
    seed: int = 0
    basis: tuple = ("linear", "pairwise")
    crossfit_folds: int = 1
    max_depth_cap: int = 4
    n_starts: int = 50
    threads: int = 1
    sampling_terms: tuple = ("covariates", "treatment", "residual_sq")

    def __post_init__(self):
        lo, hi = self.clip
        object.__setattr__(self, "clip", (float(lo), float(hi)))
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "sampling_terms", tuple(self.sampling_terms))
        if not 0 < lo < hi < 1:
            raise ValueError(f"clip bounds must satisfy 0 < lo < hi < 1, got {self.clip}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mode not in ("HO", "HE", "auto"):
            raise ValueError(f"mode must be HO, HE or auto, got {self.mode!r}")
        if self.depth < 0 or self.depth > self.max_depth_cap:
            raise ValueError(f"depth must lie in [0, {self.max_depth_cap}]")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")
        if self.crossfit_folds < 1:
            raise ValueError("crossfit_folds must be >= 1")
        BasisSpec(self.basis)
        bad = [t for t in self.sampling_terms if t not in SAMPLING_TERMS]
        if bad or not self.sampling_terms:
            raise ValueError(f"sampling_terms must be a non-empty subset of {SAMPLING_TERMS}")

    @property
    def basis_spec(self) -> BasisSpec:
        return BasisSpec(self.basis)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    def replace(self, **changes) -> "Config":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return Config(**d)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    ok: bool
    errors: list
    ks_pvalues: list
    suggested_mode: str

    def to_dict(self) -> dict:
        return {"ok": self.ok, "errors": list(self.errors),
                "ks_pvalues": [float(p) for p in self.ks_pvalues],
                "suggested_mode": self.suggested_mode}


def _check_sample(name: str, s: Any, errors: list) -> None:
    if s.n == 0:
        errors.append(f"{name} sample is empty")
        return
    arrays = [("X", s.X), ("M", s.M)] + ([("Y", s.Y)] if isinstance(s, PrimarySample) else [])
    for label, arr in arrays:
        if not np.all(np.isfinite(arr)):
            errors.append(f"{name} {label} contains non-finite entries")
    if not np.all(np.isin(s.A, (0, 1))):
        errors.append(f"{name} treatment is not binary")
    for label, arr in (("M", s.M), ("A", s.A)):
        if arr.shape[0] != s.n:
            errors.append(f"{name} {label} has {arr.shape[0]} rows, X has {s.n}")
    if isinstance(s, PrimarySample) and s.Y.shape[0] != s.n:
        errors.append(f"{name} Y has {s.Y.shape[0]} rows, X has {s.n}")


def validate_pair(e: PrimarySample, u: AuxiliarySample, ks_level: float = 0.01) -> ValidationReport:
    """Shape/finite/binary checks plus per-column KS tests suggesting HO vs HE.

    Never raises; problems are listed in ``errors``.
    """
    errors: list = []
    _check_sample("primary", e, errors)
    _check_sample("auxiliary", u, errors)
    if e.r != u.r:
        errors.append(f"covariate dimension mismatch: r_E={e.r}, r_U={u.r}")
    if e.s != u.s:
        errors.append(f"intermediate dimension mismatch: s_E={e.s}, s_U={u.s}")
    if e.r < 1:
        errors.append("no covariates")
    if e.s < 1:
        errors.append("no intermediate outcomes")
    pvalues = []
    if not errors:
        pvalues = [stats.ks_2samp(e.X[:, j], u.X[:, j]).pvalue for j in range(e.r)]
    mode = "HE" if any(p < ks_level for p in pvalues) else "HO"
    return ValidationReport(ok=not errors, errors=errors, ks_pvalues=pvalues, suggested_mode=mode)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _read_numeric_csv(path) -> tuple[list, np.ndarray]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file, header row required") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CSVFormatError(
                        f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r} as a number") from None
            rows.append(vals)
    return header, np.array(rows, dtype=float).reshape(len(rows), len(header))


def _split_columns(path, header: list, data: np.ndarray, need_y: bool):
    def numbered(prefix):
        cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
        cols.sort(key=lambda h: int(h[len(prefix):]))
        expected = [f"{prefix}{i}" for i in range(1, len(cols) + 1)]
        if cols != expected:
            raise CSVFormatError(f"{path}: columns {prefix}1..{prefix}k must be contiguous, got {cols}")
        return [header.index(c) for c in cols]

    xi, mi = numbered("x"), numbered("m")
    if not xi:
        raise CSVFormatError(f"{path}: no covariate columns x1..xr")
    if "a" not in header:
        raise CSVFormatError(f"{path}: missing treatment column 'a'")
    if need_y and "y" not in header:
        raise CSVFormatError(f"{path}: missing outcome column 'y'")
    ai = header.index("a")
    out = [data[:, xi], data[:, ai], data[:, mi]]
    if need_y:
        out.append(data[:, header.index("y")])
    return out


def read_primary_csv(path) -> PrimarySample:
    header, data = _read_numeric_csv(path)
    X, A, M, Y = _split_columns(path, header, data, need_y=True)
    if not np.all(np.isin(A, (0, 1))):
        raise CSVFormatError(f"{path}: column 'a' must be 0/1")
    return PrimarySample(X, A, M, Y)


def read_auxiliary_csv(path) -> AuxiliarySample:
    header, data = _read_numeric_csv(path)
    X, A, M = _split_columns(path, header, data, need_y=False)
    if not np.all(np.isin(A, (0, 1))):
        raise CSVFormatError(f"{path}: column 'a' must be 0/1")
    return AuxiliarySample(X, A, M)


def write_sample_csv(sample, path) -> None:
    header = [f"x{j + 1}" for j in range(sample.r)] + ["a"] + [f"m{k + 1}" for k in range(sample.s)]
    cols = [sample.X, sample.A[:, None], sample.M]
    if isinstance(sample, PrimarySample):
        header.append("y")
        cols.append(sample.Y[:, None])
    data = np.hstack(cols)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) if j != sample.r else str(int(v)) for j, v in enumerate(row)])
