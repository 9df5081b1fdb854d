"""Symbolic vocabulary: constants, terms, predicates, atoms, rules and problems."""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class PredKind(str, Enum):
    EXTENSIONAL = "extensional"
    INTENSIONAL = "intensional"
    # valuation computed from feature values by trainable boundary predicates
    CONTINUOUS = "continuous"


class Shape(str, Enum):
    CONJ = "conj"
    DISJ = "disj"
    DNF = "dnf"
    CNF = "cnf"


class Amalgamate(str, Enum):
    OR = "or"
    AND = "and"
    REPLACE = "replace"


@dataclass(frozen=True)
class Constant:
    id: int
    name: str
    sort: str | None = None


@dataclass(frozen=True)
class PredicateSig:
    name: str
    arity: int
    kind: PredKind = PredKind.EXTENSIONAL
    target: bool = False
    # per-argument sort; a concrete sort name, or a "?x" placeholder shared by
    # arguments that must agree; None means unconstrained
    arg_sorts: tuple[str | None, ...] | None = None

    def __str__(self) -> str:
        return f"{self.name}/{self.arity}"

    @property
    def intensional(self) -> bool:
        return self.kind is PredKind.INTENSIONAL


@dataclass(frozen=True)
class Variable:
    name: str
    sort: str | None = None

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class FnApp:
    """A term function applied to a variable, e.g. the tail of a list."""

    function: str
    var: Variable
    sort: str | None = None

    def __str__(self) -> str:
        return f"{self.var.name}_{self.function}"


Term = Variable | FnApp


@dataclass(frozen=True)
class TermFunction:
    name: str
    table: tuple[tuple[int, int], ...]  # sorted (argument id, value id) pairs
    domain: str | None = None
    codomain: str | None = None

    def mapping(self) -> dict[int, int]:
        return dict(self.table)

    def lookup(self, n_constants: int):
        """Dense table over constant ids; -1 marks undefined entries."""
        import numpy as np

        out = np.full(n_constants, -1, dtype=np.int64)
        for a, b in self.table:
            out[a] = b
        return out


@dataclass(frozen=True)
class Atom:
    pred: PredicateSig
    args: tuple[Term, ...]

    def __post_init__(self):
        if len(self.args) != self.pred.arity:
            raise ValueError(f"{self.pred} applied to {len(self.args)} arguments")

    def __str__(self) -> str:
        return f"{self.pred.name}({','.join(str(a) for a in self.args)})"


@dataclass(frozen=True, order=True)
class GroundAtom:
    pred: str
    args: tuple[int, ...]


@dataclass(frozen=True)
class Network:
    kind: Shape
    terms: int = 1

    def __post_init__(self):
        if self.terms < 1:
            raise ValueError("network needs at least one term")
        if self.kind in (Shape.CONJ, Shape.DISJ) and self.terms != 1:
            raise ValueError(f"{self.kind.value} is a single neuron")

    def __str__(self) -> str:
        if self.kind in (Shape.CONJ, Shape.DISJ):
            return self.kind.value
        return f"{self.kind.value}:{self.terms}"


@dataclass(frozen=True)
class RuleSpec:
    predicate: PredicateSig
    num_var: int
    network: Network = Network(Shape.CONJ)
    use_negation: bool = False
    allowed_body: tuple[str, ...] | None = None
    include_self: bool = True
    extra_sorts: tuple[str | None, ...] | None = None
    gain: float = 1.0

    def __post_init__(self):
        if self.num_var < self.predicate.arity:
            raise ValueError(
                f"rule for {self.predicate} needs at least {self.predicate.arity} variables"
            )
        if self.extra_sorts is not None and len(self.extra_sorts) != self.num_var - self.predicate.arity:
            raise ValueError("extra variable sorts do not match the number of extra variables")

    def variables(self) -> tuple[Variable, ...]:
        """Head variables first (in argument order), then existential extras."""
        names = variable_names(self.num_var)
        sorts: list[str | None] = []
        head_sorts = self.predicate.arg_sorts or (None,) * self.predicate.arity
        sorts.extend(s if s is not None and not s.startswith("?") else None for s in head_sorts)
        sorts.extend(self.extra_sorts or (None,) * (self.num_var - self.predicate.arity))
        return tuple(Variable(n, s) for n, s in zip(names, sorts))


def variable_names(n: int) -> list[str]:
    letters = string.ascii_uppercase
    return [letters[i] if i < 26 else f"V{i}" for i in range(n)]


def perm(variables: Sequence, n: int) -> list[tuple]:
    """All length-n tuples over `variables` (with repetition), lexicographic."""
    if n < 0:
        raise ValueError("tuple length must be non-negative")
    return list(itertools.product(variables, repeat=n))


@dataclass(frozen=True)
class CandidateAtomSet:
    """Ordered body atoms allowed in one rule; fixes the rule network's input layout.

    With negation the layout is the positive atoms followed by their negated
    copies in the same order.
    """

    rule: RuleSpec
    variables: tuple[Variable, ...]
    atoms: tuple[Atom, ...]
    negation: bool = False

    def __len__(self) -> int:
        return len(self.atoms) * (2 if self.negation else 1)

    def literal(self, i: int) -> tuple[Atom, bool]:
        n = len(self.atoms)
        if not 0 <= i < len(self):
            raise IndexError(i)
        return (self.atoms[i - n], True) if i >= n else (self.atoms[i], False)

    def function_terms(self) -> tuple[FnApp, ...]:
        seen: dict[FnApp, None] = {}
        for atom in self.atoms:
            for t in atom.args:
                if isinstance(t, FnApp):
                    seen.setdefault(t)
        return tuple(seen)


def _sort_ok(term_sorts: Sequence[str | None], arg_sorts: Sequence[str | None] | None) -> bool:
    if arg_sorts is None:
        return True
    groups: dict[str, str | None] = {}
    for ts, s in zip(term_sorts, arg_sorts):
        if s is None:
            continue
        if s.startswith("?"):
            if s in groups and groups[s] != ts:
                return False
            groups[s] = ts
        elif ts is not None and ts != s:
            return False
    return True


def term_pool(variables: Sequence[Variable], functions: Sequence[TermFunction]) -> list[Term]:
    """Plain variables first, then function applications grouped by variable."""
    pool: list[Term] = list(variables)
    for v in variables:
        for f in functions:
            if f.domain is None or v.sort is None or f.domain == v.sort:
                pool.append(FnApp(f.name, v, f.codomain))
    return pool


def candidate_atoms(
    rule: RuleSpec,
    signatures: Sequence[PredicateSig],
    functions: Sequence[TermFunction] = (),
) -> CandidateAtomSet:
    variables = rule.variables()
    pool = term_pool(variables, functions)
    atoms: list[Atom] = []
    for sig in signatures:
        if rule.allowed_body is not None and sig.name not in rule.allowed_body:
            continue
        if sig.name == rule.predicate.name and not rule.include_self:
            continue
        for args in perm(pool, sig.arity):
            if _sort_ok([t.sort for t in args], sig.arg_sorts):
                atoms.append(Atom(sig, tuple(args)))
    return CandidateAtomSet(rule, variables, tuple(atoms), rule.use_negation)


@dataclass
class ILPProblem:
    constants: list[Constant]
    signatures: list[PredicateSig]
    rules: dict[str, list[RuleSpec]]
    background: frozenset[GroundAtom] = frozenset()
    positives: frozenset[GroundAtom] = frozenset()
    negatives: frozenset[GroundAtom] = frozenset()
    functions: list[TermFunction] = field(default_factory=list)
    t_max: int = 1
    amalgamate: dict[str, Amalgamate] = field(default_factory=dict)
    tmax_override: dict[str, int] = field(default_factory=dict)
    # intensional predicates whose ground atoms may appear in the background
    facts_allowed: frozenset[str] = frozenset()

    def __post_init__(self):
        # OR is the default; keep only explicit deviations so equal problems compare equal
        self.amalgamate = {k: Amalgamate(v) for k, v in self.amalgamate.items() if Amalgamate(v) is not Amalgamate.OR}
        self._by_name = {s.name: s for s in self.signatures}
        self._const_ids = {c.name: c.id for c in self.constants}

    def signature(self, name: str) -> PredicateSig:
        return self._by_name[name]

    def has_predicate(self, name: str) -> bool:
        return name in self._by_name

    def constant_id(self, name: str) -> int:
        return self._const_ids[name]

    @property
    def targets(self) -> list[PredicateSig]:
        return [s for s in self.signatures if s.target]

    @property
    def intensional(self) -> list[PredicateSig]:
        return [s for s in self.signatures if s.kind is PredKind.INTENSIONAL]

    def amalgamate_for(self, name: str) -> Amalgamate:
        return self.amalgamate.get(name, Amalgamate.OR)

    def domain(self, sort: str | None) -> list[int]:
        """Constant ids a term of the given sort may denote."""
        if sort is None or sort.startswith("?"):
            return [c.id for c in self.constants]
        ids = {c.id for c in self.constants if c.sort == sort}
        for f in self.functions:
            if f.codomain == sort:
                ids.update(b for _, b in f.table)
        return sorted(ids)

    def arg_domains(self, sig: PredicateSig) -> list[list[int]]:
        sorts = sig.arg_sorts or (None,) * sig.arity
        return [self.domain(s) for s in sorts]

    def candidates(self, name: str) -> list[CandidateAtomSet]:
        return [candidate_atoms(r, self.signatures, self.functions) for r in self.rules.get(name, [])]

    def format_atom(self, atom: GroundAtom) -> str:
        names = [self.constants[i].name if 0 <= i < len(self.constants) else str(i) for i in atom.args]
        return f"{atom.pred}({','.join(names)})"

    def examples(self, name: str | None = None) -> list[tuple[GroundAtom, float]]:
        """(atom, label) pairs in a fixed order."""
        pos = [(a, 1.0) for a in sorted(self.positives) if name is None or a.pred == name]
        neg = [(a, 0.0) for a in sorted(self.negatives) if name is None or a.pred == name]
        return sorted(pos + neg)

    def validate(self) -> None:
        names = [s.name for s in self.signatures]
        if len(set(names)) != len(names):
            raise ValueError("duplicate predicate names")
        for i, c in enumerate(self.constants):
            if c.id != i:
                raise ValueError("constant ids must be dense and ordered")
        if len(self._const_ids) != len(self.constants):
            raise ValueError("duplicate constant names")
        for s in self.signatures:
            if s.arity < 1:
                raise ValueError(f"predicate {s.name} has arity 0")
            if s.kind is not PredKind.INTENSIONAL and self.rules.get(s.name):
                raise ValueError(f"{s.kind.value} predicate {s.name} cannot have rules")
            if s.kind is PredKind.INTENSIONAL and not self.rules.get(s.name):
                raise ValueError(f"intensional predicate {s.name} has no rule")
        if not self.targets:
            raise ValueError("no target predicate")
        overlap = self.positives & self.negatives
        if overlap:
            raise ValueError(f"example is both positive and negative: {self.format_atom(min(overlap))}")
        n = len(self.constants)
        for group, what in ((self.background, "fact"), (self.positives, "pos"), (self.negatives, "neg")):
            for a in group:
                if a.pred not in self._by_name:
                    raise ValueError(f"unknown predicate {a.pred} in {what}")
                sig = self._by_name[a.pred]
                if len(a.args) != sig.arity:
                    raise ValueError(f"arity mismatch for {a.pred} in {what}")
                if any(not 0 <= c < n for c in a.args):
                    raise ValueError(f"unknown constant in {what} {a.pred}")
                if what == "fact" and sig.kind is not PredKind.EXTENSIONAL and a.pred not in self.facts_allowed:
                    raise ValueError(f"background atom of {sig.kind.value} predicate {a.pred}")
                if what != "fact" and not sig.target:
                    raise ValueError(f"example of non-target predicate {a.pred}")


def ground(atom: Atom, theta: dict[str, int], functions: dict[str, dict[int, int]]) -> GroundAtom | None:
    """Apply a substitution; None when a term function is undefined there."""
    args = []
    for t in atom.args:
        c = theta[t.name] if isinstance(t, Variable) else functions[t.function].get(theta[t.var.name])
        if c is None:
            return None
        args.append(c)
    return GroundAtom(atom.pred.name, tuple(args))


def iter_ground_atoms(problem: ILPProblem, sig: PredicateSig) -> Iterable[GroundAtom]:
    for args in itertools.product(*problem.arg_domains(sig)):
        yield GroundAtom(sig.name, args)
