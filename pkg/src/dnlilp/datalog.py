"""Symbolic clauses and a naive bottom-up evaluator.

The evaluator enumerates substitutions directly and checks atoms by set
membership, independently of the compiled gather indices, so it can serve
as a reference for the differentiable chainer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .logic import Amalgamate, Atom, FnApp, GroundAtom, ILPProblem, Variable, ground, iter_ground_atoms


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False

    def __str__(self) -> str:
        return ("not " if self.negated else "") + str(self.atom)


@dataclass(frozen=True)
class Clause:
    """``head ← body``; the body is a conjunction of disjunctive groups
    (singleton groups for ordinary Horn bodies).

    ``variables`` lists every rule variable that substitutions range over and
    ``guards`` the function terms that must be defined for a substitution to
    count; both default to what the clause itself mentions.
    """

    head: Atom
    body: tuple[tuple[Literal, ...], ...]
    variables: tuple[Variable, ...] = ()
    guards: tuple[FnApp, ...] = ()

    def __str__(self) -> str:
        if not self.body:
            return f"{self.head} ← true."
        parts = []
        for group in self.body:
            text = " ; ".join(str(l) for l in group) or "false"
            parts.append(f"({text})" if len(group) > 1 else text)
        return f"{self.head} ← {', '.join(parts)}."

    def all_variables(self) -> tuple[Variable, ...]:
        seen: dict[str, Variable] = {v.name: v for v in self.variables}
        atoms = [self.head] + [l.atom for g in self.body for l in g]
        for a in atoms:
            for t in a.args:
                v = t if isinstance(t, Variable) else t.var
                seen.setdefault(v.name, v)
        return tuple(seen.values())

    def all_guards(self) -> tuple[FnApp, ...]:
        seen = dict.fromkeys(self.guards)
        for g in self.body:
            for l in g:
                for t in l.atom.args:
                    if isinstance(t, FnApp):
                        seen.setdefault(t)
        for t in self.head.args:
            if isinstance(t, FnApp):
                seen.setdefault(t)
        return tuple(seen)


def consequences(problem: ILPProblem, clauses, interp: set[GroundAtom]) -> dict[str, set[GroundAtom]]:
    """One application of the immediate-consequence operator, per head predicate."""
    fmap = {f.name: f.mapping() for f in problem.functions}
    derived: dict[str, set[GroundAtom]] = {}
    for clause in clauses:
        variables = clause.all_variables()
        guards = clause.all_guards()
        out = derived.setdefault(clause.head.pred.name, set())
        for combo in itertools.product(*(problem.domain(v.sort) for v in variables)):
            theta = {v.name: c for v, c in zip(variables, combo)}
            if any(fmap[g.function].get(theta[g.var.name]) is None for g in guards):
                continue
            if all(any(_holds(l, theta, fmap, interp) for l in group) for group in clause.body):
                head = ground(clause.head, theta, fmap)
                if head is not None:
                    out.add(head)
    return derived


def _holds(lit: Literal, theta, fmap, interp) -> bool:
    g = ground(lit.atom, theta, fmap)
    present = g is not None and g in interp
    return not present if lit.negated else present


def initial_interpretation(problem: ILPProblem) -> set[GroundAtom]:
    interp = set(problem.background)
    for sig in problem.intensional:
        if problem.amalgamate_for(sig.name) is Amalgamate.AND:
            interp.update(iter_ground_atoms(problem, sig))
    return interp


def evaluate(problem: ILPProblem, clauses, steps: int | None = None, trajectory: bool = False):
    """Run ``steps`` synchronous inference steps (default: the problem's t_max)
    with each predicate's amalgamate rule; returns the final interpretation or
    every interpretation along the way."""
    steps = problem.t_max if steps is None else steps
    interp = initial_interpretation(problem)
    history = [set(interp)]
    for t in range(steps):
        derived = consequences(problem, clauses, interp)
        new = set(interp)
        for sig in problem.intensional:
            limit = problem.tmax_override.get(sig.name)
            if limit is not None and t >= limit:
                continue
            old = {a for a in interp if a.pred == sig.name}
            got = derived.get(sig.name, set())
            am = problem.amalgamate_for(sig.name)
            if am is Amalgamate.OR:
                upd = old | got
            elif am is Amalgamate.AND:
                upd = old & got
            else:
                upd = got
            new = (new - old) | upd
        interp = new
        history.append(set(interp))
    return history if trajectory else interp


def fixpoint(problem: ILPProblem, clauses, max_steps: int = 10_000) -> set[GroundAtom]:
    """Least fixpoint under OR amalgamation (naive iteration)."""
    interp = set(problem.background)
    for _ in range(max_steps):
        derived = consequences(problem, clauses, interp)
        new = interp.union(*derived.values())
        if new == interp:
            return interp
        interp = new
    raise RuntimeError("no fixpoint reached")


def classify(problem: ILPProblem, clauses, steps: int | None = None) -> dict[str, int]:
    """Counts of entailed positives and rejected negatives."""
    model = evaluate(problem, clauses, steps)
    return {
        "positives": len(problem.positives),
        "entailed": sum(a in model for a in problem.positives),
        "negatives": len(problem.negatives),
        "rejected": sum(a not in model for a in problem.negatives),
    }
