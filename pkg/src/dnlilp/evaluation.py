"""Cross-validation, AUPR and dataset ingestion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .continuous import BoundarySet, FeatureTable, classification_problem, load_feature_csv
from .logic import GroundAtom, ILPProblem
from .parser import parse_problem
from .trainer import Session, TrainConfig, train

FEATURE_DATASETS = ("wine", "sonar")
FEATURE_INIT_MEAN = -4.0


class EmptyFoldError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int = 5
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("cross-validation needs at least 2 folds")


def make_folds(labels, plan: FoldPlan) -> list[np.ndarray]:
    """Test-index arrays, one per fold.  Stratified plans deal each class's
    shuffled members round-robin, continuing where the previous class
    stopped, so every fold gets its share of each class to within one."""
    labels = list(labels)
    n = len(labels)
    if n < plan.k:
        raise ValueError(f"{n} examples cannot fill {plan.k} folds")
    rng = np.random.default_rng(plan.seed)
    groups = [np.flatnonzero([l == c for l in labels]) for c in sorted(set(labels), key=str)] \
        if plan.stratified else [np.arange(n)]
    folds: list[list[int]] = [[] for _ in range(plan.k)]
    slot = 0
    for members in groups:
        for i in rng.permutation(members):
            folds[slot % plan.k].append(int(i))
            slot += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


@dataclass
class PRCurve:
    thresholds: np.ndarray  # distinct scores, descending
    recall: np.ndarray
    precision: np.ndarray
    aupr: float

    def rows(self):
        return zip(self.thresholds.tolist(), self.recall.tolist(), self.precision.tolist())


def aupr(scores) -> PRCurve:
    """Step-wise area under the precision-recall curve.

    ``scores`` is a sequence of (score, label) pairs.  One curve point per
    distinct score (ties share a threshold); the area adds each point's
    precision times its recall increment.
    """
    pairs = list(scores)
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([bool(p[1]) for p in pairs])
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPR is undefined without positive examples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # final index of each tie group
    recall = tp[last] / n_pos
    precision = tp[last] / (tp[last] + fp[last])
    area = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PRCurve(s[last], recall, precision, area)


# ---------------------------------------------------------------------------
# feature datasets


def load_dataset(name: str) -> FeatureTable:
    """A bundled feature dataset (``wine`` or ``sonar``)."""
    if name not in FEATURE_DATASETS:
        raise KeyError(name)
    with resources.as_file(resources.files("dnlilp") / "data" / f"{name}.csv") as path:
        return load_feature_csv(path)


@dataclass
class FoldResult:
    accuracy: float
    aupr: float
    loss: float
    train_loss: float
    epochs: int
    curve: PRCurve | None = None

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "aupr": self.aupr, "loss": self.loss,
                "train_loss": self.train_loss, "epochs": self.epochs}


@dataclass
class CVReport:
    dataset: str
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def mean_aupr(self) -> float:
        return float(np.mean([f.aupr for f in self.folds]))

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "folds": [f.to_dict() for f in self.folds],
                "mean_aupr": self.mean_aupr, "mean_accuracy": self.mean_accuracy}

    def write(self, out_dir) -> Path:
        """Metrics JSON plus one PR-curve CSV per fold."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.dataset}-metrics.json"
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        for i, f in enumerate(self.folds):
            if f.curve is None:
                continue
            with open(out / f"{self.dataset}-pr-fold{i}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["threshold", "recall", "precision"])
                w.writerows(f.curve.rows())
        return path


def class_scores(session: Session, model, problem: ILPProblem) -> np.ndarray:
    """(rows, classes) final values of each class predicate."""
    values = session.evaluate(model).values
    cols = []
    for sig in problem.targets:
        sp = session.space[sig.name]
        cols.append(values[sp.slice][np.argsort(sp.atoms[:, 0], kind="stable")])
    return np.stack(cols, axis=1)


def cross_validate_features(table: FeatureTable, plan: FoldPlan, config: TrainConfig, *, name: str = "dataset",
                            boundaries: int = 6, terms: int = 8, sharpness: float = 20.0,
                            progress=None) -> CVReport:
    """k-fold accuracy for a numeric dataset: one DNF class predicate per
    label over boundary predicates; prediction is the argmax class (lowest
    index on ties).

    Unless ``config.init_mean`` is set, the class layers start at
    ``FEATURE_INIT_MEAN``: with hundreds of boundary inputs the generic wide
    default leaves every conjunction product at 0 in floating point.
    """
    if config.init_mean is None:
        config = replace(config, init_mean=FEATURE_INIT_MEAN)
    classes = table.classes
    report = CVReport(name)
    for i, test_idx in enumerate(make_folds(table.labels, plan)):
        train_idx = np.setdiff1d(np.arange(len(table.labels)), test_idx)
        tr, te = table.subset(train_idx), table.subset(test_idx)
        bset = BoundarySet.from_data(tr, boundaries, sharpness)
        problem = classification_problem(tr, bset, terms, classes)
        session = Session(problem, tr)
        model = train(session, replace(config, seed=config.seed + i), session.new_model(config, bset))
        test_problem = classification_problem(te, model.boundaries, terms, classes)
        test_session = Session(test_problem, te)
        scores = class_scores(test_session, model, test_problem)
        truth = np.array([classes.index(l) for l in te.labels])
        acc = float(np.mean(np.argmax(scores, axis=1) == truth))
        curves = [aupr(zip(scores[:, c], truth == c)) for c in range(len(classes)) if np.any(truth == c)]
        fold = FoldResult(acc, float(np.mean([c.aupr for c in curves])), test_session.loss(model),
                          model.loss, model.epochs_run, curves[-1] if len(classes) == 2 else curves[0])
        report.folds.append(fold)
        if progress is not None:
            progress(i, fold)
    return report


# ---------------------------------------------------------------------------
# relational datasets


def without_recursion(problem: ILPProblem) -> ILPProblem:
    """Exclude every predicate's own atoms from its rule bodies."""
    rules = {p: [replace(r, include_self=False) for r in specs] for p, specs in problem.rules.items()}
    return replace(problem, rules=rules)


def cross_validate_relational(problem: ILPProblem, plan: FoldPlan, config: TrainConfig, *, name: str = "dataset",
                              negative_ratio: float | None = None, progress=None) -> CVReport:
    """k-fold AUPR over the target examples.  Held-out examples are removed
    from training and scored by their final valuation."""
    examples = problem.examples()
    labels = [y for _, y in examples]
    report = CVReport(name)
    rng = np.random.default_rng([plan.seed, 7])
    for i, test_idx in enumerate(make_folds(labels, plan)):
        test = [examples[j] for j in test_idx]
        if not any(y for _, y in test):
            raise EmptyFoldError(f"fold {i} has no positive examples")
        held = {a for a, _ in test}
        pos = frozenset(a for a in problem.positives if a not in held)
        neg = [a for a in sorted(problem.negatives) if a not in held]
        if negative_ratio is not None:
            keep = min(len(neg), int(np.ceil(negative_ratio * len(pos))))
            neg = [neg[j] for j in sorted(rng.choice(len(neg), size=keep, replace=False))]
        train_problem = replace(problem, positives=pos, negatives=frozenset(neg))
        session = Session(train_problem, extra_atoms=held)
        model = train(session, replace(config, seed=config.seed + i))
        values = session.evaluate(model).values
        scores = [(values[session.space.position(a)], y) for a, y in test]
        curve = aupr(scores)
        acc = float(np.mean([(s >= 0.5) == bool(y) for s, y in scores]))
        s = np.clip([v for v, _ in scores], config.clip, 1 - config.clip)
        yv = np.array([y for _, y in scores])
        test_loss = float(np.mean(-(yv * np.log(s) + (1 - yv) * np.log(1 - s))))
        fold = FoldResult(acc, curve.aupr, test_loss, model.loss, model.epochs_run, curve)
        report.folds.append(fold)
        if progress is not None:
            progress(i, fold)
    return report


@dataclass
class Fragment:
    """Facts and examples read from one file."""

    atoms: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)  # (kind, pred, args)
    text: str = ""  # problem-syntax declarations

    @property
    def constants(self) -> list[str]:
        return list(dict.fromkeys(c for _, _, args in self.atoms for c in args))


def read_fragment(path) -> Fragment:
    """Problem-syntax file, or CSV rows ``kind,pred,arg1,...,argk`` with
    ``kind`` one of fact/pos/neg (blank lines and ``#`` comments skipped)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() != ".csv":
        return Fragment([], text)
    frag = Fragment()
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        row = [c.strip() for c in row]
        if len(row) < 3 or row[0] not in ("fact", "pos", "neg") or not row[1] or not all(row[2:]):
            raise ValueError(f"{path}:{lineno}: expected 'fact|pos|neg,predicate,arg,...'")
        frag.atoms.append((row[0], row[1], tuple(row[2:])))
    return frag


def load_relational(paths, declarations: str = "") -> ILPProblem:
    """Merge fragments with predicate declarations into one problem.

    Constants mentioned only by CSV rows are declared automatically.
    """
    frags = [read_fragment(p) for p in paths]
    text = declarations + "\n" + "\n".join(f.text for f in frags)
    probe = {line.split()[1] for line in text.splitlines() if line.strip().startswith("constant ")}
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("constants") and "{" in s:
            probe.update(s[s.index("{") + 1:s.index("}")].split())
    lines = [text]
    for f in frags:
        for c in f.constants:
            if c not in probe:
                lines.append(f"constant {c}")
                probe.add(c)
        lines += [f"{kind} {pred}({','.join(args)})." for kind, pred, args in f.atoms]
    return parse_problem("\n".join(lines))


def dataset_counts(problem: ILPProblem) -> dict:
    return {
        "constants": len(problem.constants),
        "predicates": len(problem.signatures),
        "targets": [s.name for s in problem.targets],
        "background": len(problem.background),
        "positives": len(problem.positives),
        "negatives": len(problem.negatives),
    }


def relational_examples(problem: ILPProblem) -> list[tuple[GroundAtom, float]]:
    return problem.examples()
