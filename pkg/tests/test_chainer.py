from dataclasses import replace

import numpy as np
import pytest

from conftest import lt_solution, random_binary_functions, random_program
from dnlilp.chainer import ForwardChainer, ShapeMismatchError, ValuationState, dump_trace, run_chain
from dnlilp.datalog import evaluate
from dnlilp.dnl import DNLFunction, numeric_gradient, relative_error
from dnlilp.grounder import build_space, compile_index
from dnlilp.logic import Amalgamate, GroundAtom, Shape
from dnlilp.trainer import extract_program, init_functions


def make_chainer(problem, **kw):
    space = build_space(problem, **kw)
    return ForwardChainer(problem, space, compile_index(problem, space))


def true_set(state, problem):
    names = {s.name for s in problem.intensional}
    return {a for a in state.true_atoms() if a.pred in names}


def model_of(functions):
    from dnlilp.trainer import TrainedModel

    return TrainedModel("", functions)


def test_initial_valuation(lessthan):
    ch = make_chainer(lessthan)
    s0 = ch.init_valuations()
    assert s0.vector("inc").sum() == 4
    assert not s0.vector("lt").any()
    assert s0.values[-1] == 0


def test_empty_background(lessthan):
    ch = make_chainer(replace(lessthan, background=frozenset()))
    assert not ch.init_valuations().values.any()


def test_lessthan_steps(lessthan):
    ch = make_chainer(lessthan)
    fs = lt_solution(lessthan, ch)
    s1 = ch.step(ch.init_valuations(), fs)
    assert true_set(s1, lessthan) == {GroundAtom("lt", (i, i + 1)) for i in range(4)}
    s4 = run_chain(ch, fs, 4)
    assert s4.value(GroundAtom("lt", (0, 4))) == 1.0
    assert all(s4.value(a) == 1.0 for a in lessthan.positives)
    assert all(s4.value(a) == 0.0 for a in lessthan.negatives)


def test_replace_with_false_rule_clears(lessthan):
    p = replace(lessthan, amalgamate={"lt": Amalgamate.REPLACE})
    ch = make_chainer(p)
    state = ch.init_valuations()
    state.values[ch.space["lt"].slice] = 1.0
    fs = {k: DNLFunction(Shape.DISJ, ch.input_width(k)) for k in ch.keys()}
    for f in fs.values():
        f.set_memberships(np.zeros_like(f.weights))
    assert not ch.step(state, fs).vector("lt").any()


def test_trajectory_and_single_step(lessthan):
    ch = make_chainer(lessthan)
    fs = lt_solution(lessthan, ch)
    states = run_chain(ch, fs, 3, trajectory=True)
    assert [s.t for s in states] == [0, 1, 2, 3]
    assert np.array_equal(states[1].values, ch.step(states[0], fs).values)
    with pytest.raises(ValueError):
        ch.run(fs, 0)


def test_shape_mismatch(lessthan):
    ch = make_chainer(lessthan)
    fs = lt_solution(lessthan, ch)
    with pytest.raises(ShapeMismatchError):
        ch.step(ValuationState(ch.space, np.zeros(3)), fs)
    fs["lt[0]"] = DNLFunction(Shape.CONJ, 3)
    with pytest.raises(ShapeMismatchError):
        ch.run(fs)


def test_monotone_under_or(lessthan):
    ch = make_chainer(lessthan)
    fs = init_functions(lessthan, ch, np.random.default_rng(0))
    states = run_chain(ch, fs, 5, trajectory=True)
    for a, b in zip(states, states[1:]):
        assert np.all(b.values >= a.values)
        assert np.all((b.values >= 0) & (b.values <= 1))
        assert np.array_equal(a.vector("inc"), b.vector("inc"))


def test_matches_datalog_on_random_programs():
    rng = np.random.default_rng(0)
    for _ in range(60):
        p = random_program(rng, with_functions=bool(rng.random() < 0.3))
        ch = make_chainer(p)
        fs = random_binary_functions(p, ch, rng)
        program = extract_program(model_of(fs), p)
        states = run_chain(ch, fs, 3, trajectory=True)
        history = evaluate(p, program, steps=3, trajectory=True)
        for state, interp in zip(states, history):
            assert set(np.unique(state.values)) <= {0.0, 1.0}
            assert true_set(state, p) == {a for a in interp if a.pred in {s.name for s in p.intensional}}


def test_chain_gradients_match_finite_differences(lessthan):
    rng = np.random.default_rng(1)
    p = replace(lessthan, t_max=3)
    ch = make_chainer(p)
    fs = init_functions(p, ch, rng)
    target = rng.normal(size=ch.space.flat_size)

    def objective(functions):
        return float(target @ ch.run(functions, 3).final.values)

    run = ch.run(fs, 3, record=True)
    grads, _ = ch.backward(run, target)
    for key, f in fs.items():
        def fw(w, f=f, key=key):
            trial = dict(fs)
            trial[key] = DNLFunction(f.shape, f.input_width, f.hidden, f.gain, w, f.out_weights)
            return objective(trial)

        assert relative_error(grads[key]["weights"], numeric_gradient(fw, f.weights.copy())) < 1e-3


@pytest.mark.parametrize("am", list(Amalgamate))
def test_gradients_for_every_amalgamate(am):
    rng = np.random.default_rng(4)
    for _ in range(3):
        p = random_program(rng)
        p = replace(p, amalgamate={s.name: am for s in p.intensional}, tmax_override={})
        ch = make_chainer(p)
        fs = init_functions(p, ch, rng)
        target = rng.normal(size=ch.space.flat_size)
        grads, _ = ch.backward(ch.run(fs, 2, record=True), target)
        for key, f in fs.items():
            for name in f.params():
                def fn(w, key=key, name=name):
                    trial = {k: v.copy() for k, v in fs.items()}
                    setattr(trial[key], name, w)
                    return float(target @ ch.run(trial, 2).final.values)

                num = numeric_gradient(fn, getattr(f, name).copy())
                # saturated random programs can have gradients below what differences resolve
                assert relative_error(grads[key][name], num, floor=1e-6) < 1e-3


def test_gradient_wrt_initial_values():
    rng = np.random.default_rng(9)
    p = random_program(rng)
    ch = make_chainer(p)
    fs = init_functions(p, ch, rng)
    target = rng.normal(size=ch.space.flat_size)
    x0 = ch.init_valuations().values.copy()
    # perturb only the intensional slots, which the chain reads dynamically
    mask = np.zeros_like(x0, dtype=bool)
    for s in p.intensional:
        mask[ch.space[s.name].slice] = True
    x0[mask] = rng.random(mask.sum())
    run = ch.run(fs, 2, ValuationState(ch.space, x0.copy()), record=True)
    _, g0 = ch.backward(run, target)

    def fn(x):
        return float(target @ ch.run(fs, 2, ValuationState(ch.space, x)).final.values)

    num = numeric_gradient(fn, x0.copy())
    assert relative_error(g0[mask], num[mask]) < 1e-3


def test_tmax_override_freezes_predicate(lessthan):
    p = replace(lessthan, tmax_override={"lt": 1})
    ch = make_chainer(p)
    fs = lt_solution(p, ch)
    s = run_chain(ch, fs, 4)
    assert true_set(s, p) == {GroundAtom("lt", (i, i + 1)) for i in range(4)}


def test_and_amalgamate_starts_true(lessthan):
    p = replace(lessthan, amalgamate={"lt": Amalgamate.AND})
    ch = make_chainer(p)
    assert ch.init_valuations().vector("lt").all()


def test_trace_dump(tmp_path, lessthan):
    ch = make_chainer(lessthan)
    states = run_chain(ch, lt_solution(lessthan, ch), 2, trajectory=True)
    dump_trace(states, tmp_path / "trace.csv", threshold=0.5)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,predicate,atom,value"
    assert "1,lt,\"lt(0,1)\",1.0" in lines
