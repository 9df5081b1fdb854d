import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnlilp.continuous import FeatureTable
from dnlilp.evaluation import (
    CVReport,
    FoldPlan,
    FoldResult,
    aupr,
    cross_validate_features,
    cross_validate_relational,
    dataset_counts,
    load_dataset,
    load_relational,
    make_folds,
    read_fragment,
    without_recursion,
)
from dnlilp.parser import ParseError
from dnlilp.trainer import TrainConfig


def brute_aupr(pairs):
    """Exact rational step-wise area, recomputing the confusion counts at
    every distinct threshold from scratch."""
    n_pos = sum(1 for _, y in pairs if y)
    area, prev_recall = Fraction(0), Fraction(0)
    for t in sorted({s for s, _ in pairs}, reverse=True):
        tp = sum(1 for s, y in pairs if s >= t and y)
        fp = sum(1 for s, y in pairs if s >= t and not y)
        recall = Fraction(tp, n_pos)
        area += (recall - prev_recall) * Fraction(tp, tp + fp)
        prev_recall = recall
    return area


def test_hand_example():
    curve = aupr([(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 0)])
    assert curve.aupr == pytest.approx(0.8333, abs=1e-4)
    assert curve.aupr == pytest.approx(5 / 6)
    assert curve.recall.tolist() == [0.5, 0.5, 1.0, 1.0]


def test_perfect_and_constant_scores():
    assert aupr([(0.9, 1), (0.8, 1), (0.1, 0)]).aupr == 1.0
    pairs = [(0.5, y) for y in (1, 0, 0, 1, 0)]
    curve = aupr(pairs)
    assert curve.aupr == pytest.approx(0.4) and len(curve.thresholds) == 1


def test_no_positives():
    with pytest.raises(ValueError):
        aupr([(0.3, 0), (0.2, 0)])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20).map(lambda v: v / 20), st.booleans()), min_size=1, max_size=200)
       .filter(lambda ps: any(y for _, y in ps)))
def test_matches_brute_force(pairs):
    curve = aupr(pairs)
    assert curve.aupr == pytest.approx(float(brute_aupr(pairs)), abs=1e-12)
    assert np.all(np.diff(curve.recall) >= 0)
    assert 0 <= curve.aupr <= 1


def test_folds_partition_and_reproduce():
    labels = ["a"] * 13 + ["b"] * 7 + ["c"] * 5
    plan = FoldPlan(k=5, seed=3)
    folds = make_folds(labels, plan)
    flat = np.concatenate(folds)
    assert sorted(flat.tolist()) == list(range(25))
    assert all(np.array_equal(a, b) for a, b in zip(folds, make_folds(labels, plan)))
    for c in "abc":
        share = labels.count(c) / 5
        for f in folds:
            assert abs(sum(labels[i] == c for i in f) - share) <= 1
    other = make_folds(labels, FoldPlan(k=5, seed=4))
    assert any(not np.array_equal(a, b) for a, b in zip(folds, other))


def test_plan_validation():
    with pytest.raises(ValueError):
        FoldPlan(k=1)
    with pytest.raises(ValueError):
        make_folds(["a", "b"], FoldPlan(k=3))


def test_bundled_datasets():
    wine, sonar = load_dataset("wine"), load_dataset("sonar")
    assert wine.X.shape == (178, 13) and sonar.X.shape == (208, 60)
    with pytest.raises(KeyError):
        load_dataset("iris")


def test_report_files(tmp_path):
    curve = aupr([(0.9, 1), (0.2, 0)])
    report = CVReport("toy", [FoldResult(1.0, 1.0, 0.1, 0.05, 10, curve), FoldResult(0.5, 0.5, 0.7, 0.2, 10)])
    path = report.write(tmp_path)
    data = json.loads(path.read_text())
    assert data["dataset"] == "toy" and data["mean_accuracy"] == 0.75 and len(data["folds"]) == 2
    assert {"aupr", "accuracy", "loss"} <= set(data["folds"][0])
    assert not (tmp_path / "toy-pr-fold1.csv").exists()
    assert (tmp_path / "toy-pr-fold0.csv").read_text().splitlines()[0] == "threshold,recall,precision"


def test_feature_cross_validation_runs():
    rng = np.random.default_rng(0)
    X = np.r_[rng.normal(-2, 0.3, size=(10, 1)), rng.normal(2, 0.3, size=(10, 1))]
    table = FeatureTable(["x"], X, ["lo"] * 10 + ["hi"] * 10, [f"r{i}" for i in range(20)])
    report = cross_validate_features(table, FoldPlan(k=2), TrainConfig(learning_rate=0.05, epochs=150), boundaries=2,
                                     terms=1)
    assert len(report.folds) == 2
    assert report.mean_accuracy == 1.0


def test_empty_fragment(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    frag = read_fragment(path)
    assert frag.atoms == [] and frag.constants == []


def test_csv_fragments(tmp_path):
    decl = "pred edge/2 extensional\npred path/2 intensional vars=3 net=dnf:2\n"
    facts = tmp_path / "facts.csv"
    facts.write_text("# edges\nfact,edge,a,b\nfact,edge,b,c\n")
    ex = tmp_path / "ex.csv"
    ex.write_text("pos,path,a,c\nneg,path,c,a\n")
    p = load_relational([facts, ex], decl)
    counts = dataset_counts(p)
    assert counts == {"constants": 3, "predicates": 2, "targets": ["path"], "background": 2, "positives": 1,
                      "negatives": 1}


def test_malformed_and_unknown(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("fact,edge\n")
    with pytest.raises(ValueError, match="bad.csv:1"):
        read_fragment(bad)
    facts = tmp_path / "facts.csv"
    facts.write_text("fact,nope,a\n")
    with pytest.raises(ParseError):
        load_relational([facts], "pred edge/2 extensional\n")


def test_relational_cross_validation(lessthan):
    report = cross_validate_relational(lessthan, FoldPlan(k=2, stratified=True),
                                       TrainConfig(learning_rate=0.05, epochs=20))
    assert len(report.folds) == 2
    assert all(0 <= f.aupr <= 1 for f in report.folds)


def test_without_recursion(lessthan):
    p = without_recursion(lessthan)
    assert all(not r.include_self for r in p.rules["lt"])
    assert all("lt" not in {a.pred.name for a in c.atoms} for c in p.candidates("lt"))
