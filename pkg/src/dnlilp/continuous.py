"""Trainable boundary predicates turning numeric features into fuzzy atoms.

For a (standardized) feature value ``x`` and boundaries ``u_i``, ``l_i``::

    gt_i = sigmoid(c (x - u_i))      lt_i = sigmoid(-c (x - l_i))
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .dnl import sigmoid
from .logic import Constant, ILPProblem, Network, PredicateSig, PredKind, RuleSpec, Shape


@dataclass
class FeatureTable:
    names: list[str]
    X: np.ndarray  # (rows, features)
    labels: list[str]
    ids: list[str]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise ValueError("feature count does not match the header")
        if len(self.labels) != len(self.X) or len(self.ids) != len(self.X):
            raise ValueError("labels/ids do not match the number of rows")

    @property
    def classes(self) -> list[str]:
        return sorted(set(self.labels))

    def subset(self, rows) -> "FeatureTable":
        rows = list(rows)
        return FeatureTable(self.names, self.X[rows], [self.labels[i] for i in rows], [self.ids[i] for i in rows])


def load_feature_csv(path, label: str = "class") -> FeatureTable:
    """Header row of feature names plus a ``class`` column; one row per example."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if label not in header:
            raise ValueError(f"no {label!r} column in {path}")
        li = header.index(label)
        names = [h for i, h in enumerate(header) if i != li]
        X, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            labels.append(row[li].strip())
            X.append([float(v) for i, v in enumerate(row) if i != li])
    return FeatureTable(names, np.array(X).reshape(len(X), len(names)), labels, [f"r{i}" for i in range(len(X))])


def boundary_forward(x, lower, upper, sharpness: float = 20.0):
    """(gt, lt) memberships of value(s) ``x`` against each boundary."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature value")
    x = x[..., None]
    return sigmoid(sharpness * (x - upper)), sigmoid(-sharpness * (x - lower))


@dataclass
class BoundarySet:
    features: list[str]
    lower: np.ndarray  # (F, k), standardized units
    upper: np.ndarray  # (F, k)
    mean: np.ndarray
    scale: np.ndarray
    sharpness: float = 20.0

    @property
    def k(self) -> int:
        return self.lower.shape[1]

    @classmethod
    def from_data(cls, table: FeatureTable, k: int = 6, sharpness: float = 20.0) -> "BoundarySet":
        """Boundaries start at evenly spaced quantiles of the standardized data."""
        mean = table.X.mean(axis=0)
        scale = table.X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        z = (table.X - mean) / scale
        q = np.quantile(z, np.arange(1, k + 1) / (k + 1), axis=0).T.reshape(len(table.names), k)
        return cls(list(table.names), q.copy(), q.copy(), mean, scale, sharpness)

    def params(self) -> dict[str, np.ndarray]:
        return {"lower": self.lower, "upper": self.upper}

    def predicate_names(self) -> list[str]:
        """Per feature: k gt predicates then k lt predicates."""
        out = []
        for j, _ in enumerate(self.features):
            out += [f"gt_{j}_{i}" for i in range(self.k)]
            out += [f"lt_{j}_{i}" for i in range(self.k)]
        return out

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def forward(self, X) -> tuple[np.ndarray, tuple]:
        """Fuzzy values (rows, F, 2k): gt_1..gt_k then lt_1..lt_k per feature."""
        z = self.standardize(X)
        gt, lt = boundary_forward(z, self.lower, self.upper, self.sharpness)
        return np.concatenate([gt, lt], axis=-1), (gt, lt)

    def backward(self, cache, grad) -> dict[str, np.ndarray]:
        gt, lt = cache
        k = self.k
        g_gt, g_lt = grad[..., :k], grad[..., k:]
        c = self.sharpness
        return {
            "upper": (-c * g_gt * gt * (1 - gt)).sum(axis=0),
            "lower": (c * g_lt * lt * (1 - lt)).sum(axis=0),
        }

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundarySet":
        return cls(d["features"], *(np.array(d[k], dtype=float) for k in ("lower", "upper", "mean", "scale")),
                   d["sharpness"])


def attach(problem: ILPProblem, table: FeatureTable, boundaries: BoundarySet) -> ILPProblem:
    """Add one continuous predicate per boundary as body candidates of every
    target predicate; rows of ``table`` become constants if missing."""
    if len(table.names) != len(boundaries.features):
        raise ValueError("feature count differs between table and boundaries")
    if not table.names:
        return problem
    constants = list(problem.constants)
    known = {c.name for c in constants}
    for rid in table.ids:
        if rid not in known:
            constants.append(Constant(len(constants), rid))
    new_sigs = [PredicateSig(n, 1, PredKind.CONTINUOUS) for n in boundaries.predicate_names()]
    names = [s.name for s in new_sigs]
    rules = {}
    for pred, specs in problem.rules.items():
        if problem.signature(pred).target:
            specs = [replace(r, allowed_body=None if r.allowed_body is None else r.allowed_body + tuple(names))
                     for r in specs]
        rules[pred] = specs
    return replace(problem, constants=constants, signatures=list(problem.signatures) + new_sigs, rules=rules)


def classification_problem(table: FeatureTable, boundaries: BoundarySet, terms: int = 4,
                           classes: list[str] | None = None) -> ILPProblem:
    """One DNF-defined intensional predicate per class over the boundary atoms."""
    from .logic import GroundAtom

    classes = classes or table.classes
    constants = [Constant(i, rid) for i, rid in enumerate(table.ids)]
    sigs = [PredicateSig(f"class_{_safe(c)}", 1, PredKind.INTENSIONAL, True) for c in classes]
    body = tuple(boundaries.predicate_names())
    rules = {s.name: [RuleSpec(s, 1, Network(Shape.DNF, terms), allowed_body=body, include_self=False)] for s in sigs}
    pos, neg = set(), set()
    for i, lab in enumerate(table.labels):
        for c, s in zip(classes, sigs):
            (pos if lab == c else neg).add(GroundAtom(s.name, (i,)))
    base = ILPProblem(constants, sigs, rules, positives=frozenset(pos), negatives=frozenset(neg), t_max=1)
    return attach(base, table, boundaries)


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch == "_" else "_" for ch in label)


class BoundaryInputs:
    """Feeds boundary predicate values into a ground space and routes their
    gradients back to the boundary parameters."""

    def __init__(self, problem: ILPProblem, space, table: FeatureTable):
        self.space = space
        self.table = table
        row_of = {rid: i for i, rid in enumerate(table.ids)}
        const_row = np.array([row_of.get(c.name, -1) for c in problem.constants])
        self.names = [s.name for s in problem.signatures if s.kind is PredKind.CONTINUOUS]
        first = space[self.names[0]] if self.names else None
        self.rows = const_row[first.atoms[:, 0]] if first is not None else np.zeros(0, dtype=int)
        for n in self.names:
            if not np.array_equal(const_row[space[n].atoms[:, 0]], self.rows):
                raise ValueError("continuous predicates must share one ground layout")

    def values(self, boundaries: BoundarySet):
        present = self.rows >= 0
        X = self.table.X[np.where(present, self.rows, 0)]
        vals, cache = boundaries.forward(X)
        vals = vals * present[:, None, None]
        flat = vals.reshape(len(X), -1)
        return {n: flat[:, j] for j, n in enumerate(self.names)}, (cache, present)

    def backward(self, boundaries: BoundarySet, cache, grad_x0: np.ndarray) -> dict[str, np.ndarray]:
        inner, present = cache
        F, k2 = len(boundaries.features), 2 * boundaries.k
        g = np.stack([grad_x0[self.space[n].slice] for n in self.names], axis=1)
        g = (g * present[:, None]).reshape(len(present), F, k2)
        return boundaries.backward(inner, g)
