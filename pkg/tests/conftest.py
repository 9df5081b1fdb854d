import itertools

import numpy as np
import pytest

from dnlilp.cli import resolve_problem_path
from dnlilp.dnl import DNLFunction
from dnlilp.logic import (
    Amalgamate,
    Constant,
    GroundAtom,
    ILPProblem,
    Network,
    PredicateSig,
    PredKind,
    RuleSpec,
    Shape,
)
from dnlilp.parser import load_problem


def bundled(name: str) -> ILPProblem:
    return load_problem(resolve_problem_path(name))


@pytest.fixture
def lessthan() -> ILPProblem:
    return bundled("lessthan")


def lt_solution(problem, chainer) -> dict[str, DNLFunction]:
    """Binarized networks encoding lt(A,B) <- inc(A,B) and
    lt(A,B) <- lt(A,C), inc(C,B)."""
    c1 = problem.candidates("lt")[0]
    c2 = problem.candidates("lt")[1]
    f1 = DNLFunction(Shape.CONJ, len(c1))
    f2 = DNLFunction(Shape.CONJ, len(c2))
    m1 = [str(a) == "inc(A,B)" for a in c1.atoms]
    m2 = [str(a) in ("lt(A,C)", "inc(C,B)") for a in c2.atoms]
    f1.set_memberships([m1])
    f2.set_memberships([m2])
    return {"lt[0]": f1, "lt[1]": f2}


def mul_solution(problem, extra=((), ())) -> dict[str, DNLFunction]:
    """Binarized DNF for mul(A,B,C) <- zero(B), zero(C) and
    mul(A,B,C) <- mul(A,D,E), inc(D,B), add(E,A,C), with ``extra`` atoms
    added to each of the two terms."""
    names = [str(a) for a in problem.candidates("mul")[0].atoms]
    terms = [("zero(B)", "zero(C)", *extra[0]), ("mul(A,D,E)", "inc(D,B)", "add(E,A,C)", *extra[1])]
    f = DNLFunction(Shape.DNF, len(names), 4)
    M = np.zeros((4, len(names)))
    for k, atoms in enumerate(terms):
        M[k, [names.index(a) for a in atoms]] = 1
    f.set_memberships(M, np.array([1.0, 1.0, 0.0, 0.0]))
    return {"mul[0]": f}


def random_program(rng: np.random.Generator, with_functions: bool = False) -> ILPProblem:
    """Small random problem: <= 4 constants, <= 3 predicates, arity <= 2,
    random facts and rule shapes.  Examples are arbitrary (one per target)."""
    n_const = int(rng.integers(1, 5))
    constants = [Constant(i, f"c{i}") for i in range(n_const)]
    n_pred = int(rng.integers(2, 4))
    n_int = int(rng.integers(1, n_pred))
    sigs = []
    for j in range(n_pred):
        kind = PredKind.EXTENSIONAL if j < n_pred - n_int else PredKind.INTENSIONAL
        # only the first intensional predicate carries examples
        sigs.append(PredicateSig(f"p{j}", int(rng.integers(1, 3)), kind, j == n_pred - n_int))
    rules = {}
    for s in sigs:
        if s.kind is not PredKind.INTENSIONAL:
            continue
        specs = []
        for _ in range(int(rng.integers(1, 3))):
            shape = Shape(rng.choice([x.value for x in Shape]))
            terms = 1 if shape in (Shape.CONJ, Shape.DISJ) else int(rng.integers(1, 4))
            specs.append(RuleSpec(s, s.arity + int(rng.integers(0, 2)), Network(shape, terms),
                                  use_negation=bool(rng.random() < 0.4), include_self=bool(rng.random() < 0.8)))
        rules[s.name] = specs
    background = set()
    for s in sigs:
        if s.kind is PredKind.EXTENSIONAL:
            for args in itertools.product(range(n_const), repeat=s.arity):
                if rng.random() < 0.4:
                    background.add(GroundAtom(s.name, args))
    amalgamate = {}
    overrides = {}
    for s in sigs:
        if s.kind is PredKind.INTENSIONAL:
            amalgamate[s.name] = Amalgamate(rng.choice([a.value for a in Amalgamate]))
            if rng.random() < 0.2:
                overrides[s.name] = int(rng.integers(1, 3))
    functions = []
    if with_functions and n_const > 1:
        from dnlilp.logic import TermFunction

        table = tuple((a, int(rng.integers(0, n_const))) for a in range(n_const) if rng.random() < 0.7)
        functions.append(TermFunction("F", table))
    target = next(s for s in sigs if s.kind is PredKind.INTENSIONAL)
    pos = frozenset({GroundAtom(target.name, (0,) * target.arity)})
    return ILPProblem(constants, sigs, rules, frozenset(background), pos, frozenset(), functions,
                      t_max=int(rng.integers(1, 4)), amalgamate=amalgamate, tmax_override=overrides)


def random_binary_functions(problem: ILPProblem, chainer, rng, density: float = 0.3) -> dict[str, DNLFunction]:
    functions = {}
    for sig in problem.intensional:
        for i, rule in enumerate(problem.rules[sig.name]):
            key = f"{sig.name}[{i}]"
            f = DNLFunction(rule.network.kind, chainer.input_width(key), rule.network.terms)
            hidden = rng.random(f.weights.shape) < density
            out = rng.random(f.hidden) < 0.7 if f.has_output else None
            f.set_memberships(hidden, out)
            functions[key] = f
    return functions


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
