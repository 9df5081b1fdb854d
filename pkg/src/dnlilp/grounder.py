"""Ground-atom spaces and compiled substitution indices.

All valuation vectors live in one flat array: each predicate owns a
contiguous slice (declaration order) and a final extra slot always holds 0.
Atoms outside a restricted space, and atoms read under a dropped
substitution, point at that slot.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .logic import (
    CandidateAtomSet,
    FnApp,
    GroundAtom,
    ILPProblem,
    PredicateSig,
    PredKind,
    RuleSpec,
    Variable,
    candidate_atoms,
)

DEFAULT_CAP = 10**7


class GroundingCapError(RuntimeError):
    pass


@dataclass
class PredicateSpace:
    sig: PredicateSig
    atoms: np.ndarray  # (|G_p|, arity) constant ids, row-major order
    offset: int
    restricted: bool
    _keys: np.ndarray
    _order: np.ndarray

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + len(self.atoms))

    def lookup(self, args: np.ndarray, n_constants: int) -> np.ndarray:
        """Local positions for an (..., arity) array of constant ids; -1 if absent."""
        args = np.asarray(args, dtype=np.int64)
        bad = (args < 0).any(axis=-1)
        keys = _encode(np.where(args < 0, 0, args), n_constants)
        if len(self._keys) == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        i = np.searchsorted(self._keys, keys)
        i = np.minimum(i, len(self._keys) - 1)
        found = (self._keys[i] == keys) & ~bad
        return np.where(found, self._order[i], -1)

    def index(self, atom: GroundAtom | tuple[int, ...], n_constants: int) -> int | None:
        args = atom.args if isinstance(atom, GroundAtom) else atom
        pos = int(self.lookup(np.array(args)[None, :], n_constants)[0])
        return None if pos < 0 else pos


def _encode(args: np.ndarray, base: int) -> np.ndarray:
    keys = np.zeros(args.shape[:-1], dtype=np.int64)
    for j in range(args.shape[-1]):
        keys = keys * base + args[..., j]
    return keys


class GroundAtomSpace:
    def __init__(self, problem: ILPProblem, preds: dict[str, PredicateSpace]):
        self.problem = problem
        self.preds = preds
        self.size = sum(len(s) for s in preds.values())
        self.zero = self.size
        self.flat_size = self.size + 1

    def __getitem__(self, name: str) -> PredicateSpace:
        return self.preds[name]

    def position(self, atom: GroundAtom) -> int | None:
        """Flat position of a ground atom, or None when outside the space."""
        sp = self.preds[atom.pred]
        i = sp.index(atom, len(self.problem.constants))
        return None if i is None else sp.offset + i

    def atom_at(self, pos: int) -> GroundAtom:
        for name, sp in self.preds.items():
            if sp.offset <= pos < sp.offset + len(sp):
                return GroundAtom(name, tuple(int(c) for c in sp.atoms[pos - sp.offset]))
        raise IndexError(pos)

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.preds.items()}


def build_space(
    problem: ILPProblem,
    restrict_extensional: bool = True,
    restrict_intensional: bool = False,
    extra_atoms=(),
    cap: int = DEFAULT_CAP,
) -> GroundAtomSpace:
    """Enumerate G_p for every predicate.

    Restricted extensional spaces hold only background atoms (others read 0);
    restricted intensional spaces hold background, example and ``extra_atoms``.
    """
    n = len(problem.constants)
    mentioned: dict[str, set[tuple[int, ...]]] = {}
    for a in itertools.chain(problem.background, problem.positives, problem.negatives, extra_atoms):
        mentioned.setdefault(a.pred, set()).add(a.args)
    bg: dict[str, set[tuple[int, ...]]] = {}
    for a in problem.background:
        bg.setdefault(a.pred, set()).add(a.args)
    preds: dict[str, PredicateSpace] = {}
    offset = 0
    for sig in problem.signatures:
        restricted = (sig.kind is PredKind.EXTENSIONAL and restrict_extensional) or (
            sig.kind is PredKind.INTENSIONAL and restrict_intensional
        )
        if restricted:
            src = bg if sig.kind is PredKind.EXTENSIONAL else mentioned
            tuples = sorted(src.get(sig.name, ()))
            atoms = np.array(tuples, dtype=np.int64).reshape(len(tuples), sig.arity)
        else:
            domains = problem.arg_domains(sig)
            total = math.prod(len(d) for d in domains)
            if total > cap:
                raise GroundingCapError(
                    f"|G_{sig.name}| = {total} exceeds the grounding cap {cap}"
                )
            atoms = np.array(list(itertools.product(*domains)), dtype=np.int64).reshape(total, sig.arity)
        if len(atoms) > cap:
            raise GroundingCapError(f"|G_{sig.name}| = {len(atoms)} exceeds the grounding cap {cap}")
        if n ** sig.arity >= 2**62:
            raise GroundingCapError(f"{sig.name}: atom keys overflow 64 bits")
        keys = _encode(atoms, n)
        order = np.argsort(keys, kind="stable")
        preds[sig.name] = PredicateSpace(sig, atoms, offset, restricted, keys[order], order)
        offset += len(atoms)
    return GroundAtomSpace(problem, preds)


def free_domains(problem: ILPProblem, rule: RuleSpec) -> list[list[int]]:
    variables = rule.variables()
    return [problem.domain(v.sort) for v in variables[rule.predicate.arity:]]


def substitutions(problem: ILPProblem, e: GroundAtom, rule: RuleSpec) -> list[dict[str, int]]:
    """All substitutions producing head ``e``: free variables in declaration
    order, constants in id order."""
    if e.pred != rule.predicate.name:
        raise ValueError(f"{e.pred} is not the head of this rule")
    variables = rule.variables()
    head = {v.name: c for v, c in zip(variables, e.args)}
    free = variables[rule.predicate.arity:]
    out = []
    for combo in itertools.product(*free_domains(problem, rule)):
        theta = dict(head)
        theta.update({v.name: c for v, c in zip(free, combo)})
        out.append(theta)
    return out


@dataclass
class RuleIndex:
    """Gather layout for one rule of one intensional predicate.

    ``positions[e, θ, a]`` is the flat valuation position read by candidate
    literal ``a`` under substitution ``θ`` of head atom ``e``; negated
    literals repeat their positive atom's position and are flagged in
    ``negated``.
    """

    pred: str
    rule_no: int
    candidates: CandidateAtomSet
    positions: np.ndarray  # (E, Θ, A) int64
    pred_ids: np.ndarray  # (A,) index of each literal's predicate in problem.signatures
    negated: np.ndarray  # (A,) bool
    valid: np.ndarray  # (E, Θ) bool

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.positions.shape

    def source(self, space: GroundAtomSpace, e: int, theta: int, a: int) -> tuple[str, int | None]:
        """(source predicate, local position) of one gathered entry."""
        name = space.problem.signatures[self.pred_ids[a]].name
        pos = int(self.positions[e, theta, a])
        return name, (None if pos == space.zero else pos - space[name].offset)


@dataclass
class GroundingIndex:
    rules: dict[tuple[str, int], RuleIndex]

    def for_pred(self, name: str) -> list[RuleIndex]:
        return [r for (p, _), r in sorted(self.rules.items()) if p == name]


def compile_rule(problem: ILPProblem, space: GroundAtomSpace, name: str, rule_no: int,
                 cap: int = DEFAULT_CAP) -> RuleIndex:
    rule = problem.rules[name][rule_no]
    cands = candidate_atoms(rule, problem.signatures, problem.functions)
    n = len(problem.constants)
    head = space[name].atoms  # (E, arity)
    E, arity = head.shape
    free = free_domains(problem, rule)
    tuples = list(itertools.product(*free))
    combos = np.array(tuples, dtype=np.int64).reshape(len(tuples), len(free))
    T = len(combos)
    A = len(cands.atoms)
    if E * T * max(len(cands), 1) > cap:
        raise GroundingCapError(
            f"index for {name} rule {rule_no + 1} needs {E}x{T}x{len(cands)} entries (cap {cap})"
        )
    V = np.empty((E, T, rule.num_var), dtype=np.int64)
    V[:, :, :arity] = head[:, None, :]
    V[:, :, arity:] = combos[None, :, :]
    var_col = {v.name: j for j, v in enumerate(cands.variables)}
    lookups = {f.name: f.lookup(n) for f in problem.functions}

    def values(term) -> np.ndarray:
        if isinstance(term, Variable):
            return V[:, :, var_col[term.name]]
        return lookups[term.function][V[:, :, var_col[term.var.name]]]

    term_vals = {t: values(t) for t in cands.function_terms()}
    valid = np.ones((E, T), dtype=bool)
    for vals in term_vals.values():
        valid &= vals >= 0
    sig_ids = {s.name: i for i, s in enumerate(problem.signatures)}
    positions = np.full((E, T, A), space.zero, dtype=np.int64)
    for a, atom in enumerate(cands.atoms):
        args = np.stack([term_vals[t] if isinstance(t, FnApp) else values(t) for t in atom.args], axis=-1)
        sp = space[atom.pred.name]
        local = sp.lookup(args, n)
        positions[:, :, a] = np.where((local >= 0) & valid, sp.offset + local, space.zero)
    pred_ids = np.array([sig_ids[a.pred.name] for a in cands.atoms], dtype=np.int64)
    negated = np.zeros(A, dtype=bool)
    if cands.negation:
        positions = np.concatenate([positions, positions], axis=-1)
        pred_ids = np.concatenate([pred_ids, pred_ids])
        negated = np.concatenate([negated, np.ones(A, dtype=bool)])
    return RuleIndex(name, rule_no, cands, positions, pred_ids, negated, valid)


def problem_digest(problem: ILPProblem, **options) -> str:
    from .parser import serialize_problem

    h = hashlib.sha256(serialize_problem(problem).encode())
    h.update(repr(sorted(options.items())).encode())
    return h.hexdigest()


def compile_index(problem: ILPProblem, space: GroundAtomSpace, cap: int = DEFAULT_CAP,
                  cache_dir: str | Path | None = None) -> GroundingIndex:
    cache = None
    if cache_dir is not None:
        sizes = tuple(sorted(space.sizes().items()))
        cache = Path(cache_dir) / f"index-{problem_digest(problem, sizes=sizes)[:24]}.npz"
        if cache.exists():
            return _load_index(problem, cache)
    rules = {}
    for sig in problem.intensional:
        for i in range(len(problem.rules[sig.name])):
            rules[(sig.name, i)] = compile_rule(problem, space, sig.name, i, cap)
    index = GroundingIndex(rules)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for (p, i), r in rules.items():
            for field in ("positions", "pred_ids", "negated", "valid"):
                arrays[f"{p}|{i}|{field}"] = getattr(r, field)
        np.savez(cache, **arrays)
    return index


def _load_index(problem: ILPProblem, path: Path) -> GroundingIndex:
    data = np.load(path)
    rules = {}
    for sig in problem.intensional:
        for i, rule in enumerate(problem.rules[sig.name]):
            cands = candidate_atoms(rule, problem.signatures, problem.functions)
            rules[(sig.name, i)] = RuleIndex(
                sig.name, i, cands,
                *(data[f"{sig.name}|{i}|{f}"] for f in ("positions", "pred_ids", "negated", "valid")),
            )
    return GroundingIndex(rules)
