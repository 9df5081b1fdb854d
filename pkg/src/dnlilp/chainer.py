"""Differentiable forward chaining over compiled grounding indices.

One step computes, for every intensional head atom ``e``::

    F(e) = OR_rules OR_θ  f_rule(inputs gathered under θ)
    X[e] <- amalgamate(X[e], F(e))

with fuzzy OR ``1 - prod(1 - v)``.  Extensional inputs are binary and fixed,
so their share of each hidden neuron's product is formed once per pass as
``exp(u @ log(1 - m).T)``; only intensional and continuous inputs go through
the per-step gated-product kernel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dnl import DNLFunction, softplus
from .grounder import GroundAtomSpace, GroundingIndex, RuleIndex
from .kernels import gated_product, gated_product_grad_scatter, prod_except
from .logic import Amalgamate, GroundAtom, ILPProblem, PredKind


def rule_key(pred: str, rule_no: int) -> str:
    return f"{pred}[{rule_no}]"


@dataclass
class ValuationState:
    space: GroundAtomSpace
    values: np.ndarray  # flat, last slot fixed at 0
    t: int = 0

    def vector(self, pred: str) -> np.ndarray:
        return self.values[self.space[pred].slice]

    def value(self, atom: GroundAtom) -> float:
        pos = self.space.position(atom)
        return 0.0 if pos is None else float(self.values[pos])

    def true_atoms(self, threshold: float = 0.5) -> set[GroundAtom]:
        out = set()
        for name, sp in self.space.preds.items():
            vec = self.values[sp.slice]
            for i in np.flatnonzero(vec >= threshold):
                out.add(GroundAtom(name, tuple(int(c) for c in sp.atoms[i])))
        return out


@dataclass
class _Rule:
    index: RuleIndex
    key: str
    E: int
    T: int
    static_cols: np.ndarray
    dyn_cols: np.ndarray
    x_static: np.ndarray  # (E*T, A_s) binary
    idx_dyn: np.ndarray  # (E*T, A_d)
    neg_dyn: np.ndarray  # (A_d,)
    valid: np.ndarray  # (E*T,) float


@dataclass
class _RuleCache:
    u_dyn: np.ndarray
    P_dyn: np.ndarray
    out: object
    factors: np.ndarray  # (E, T) = 1 - y
    v: np.ndarray  # (E,)


@dataclass
class _StepCache:
    rules: dict[str, _RuleCache] = field(default_factory=dict)
    combined: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class _Prepared:
    """Per-pass quantities that depend on weights only."""

    M: dict[str, np.ndarray]
    P_static: dict[str, np.ndarray]
    u_static: dict[str, np.ndarray]


@dataclass
class ChainRun:
    states: list[ValuationState]
    caches: list[_StepCache]
    prepared: _Prepared
    functions: dict[str, DNLFunction]

    @property
    def final(self) -> ValuationState:
        return self.states[-1]


class ShapeMismatchError(ValueError):
    pass


class ForwardChainer:
    def __init__(self, problem: ILPProblem, space: GroundAtomSpace, index: GroundingIndex):
        self.problem = problem
        self.space = space
        self.index = index
        kinds = np.array([s.kind is PredKind.EXTENSIONAL for s in problem.signatures])
        x0 = self._base_values()
        self.rules: dict[str, list[_Rule]] = {}
        for sig in problem.intensional:
            compiled = []
            for ri in index.for_pred(sig.name):
                E, T, A = ri.shape
                pos = ri.positions.reshape(E * T, A)
                static = np.flatnonzero(kinds[ri.pred_ids])
                dyn = np.flatnonzero(~kinds[ri.pred_ids])
                xs = x0[pos[:, static]]
                neg_s = ri.negated[static]
                xs[:, neg_s] = 1.0 - xs[:, neg_s]
                compiled.append(_Rule(
                    ri, rule_key(sig.name, ri.rule_no), E, T, static, dyn,
                    np.ascontiguousarray(xs), np.ascontiguousarray(pos[:, dyn]), ri.negated[dyn],
                    ri.valid.reshape(-1).astype(float),
                ))
            self.rules[sig.name] = compiled
        self.updated = [s.name for s in problem.intensional]

    def _base_values(self) -> np.ndarray:
        x = np.zeros(self.space.flat_size)
        for atom in self.problem.background:
            pos = self.space.position(atom)
            if pos is None:
                raise ValueError(f"background atom {self.problem.format_atom(atom)} is outside the ground space")
            x[pos] = 1.0
        return x

    def keys(self) -> list[str]:
        return [r.key for rules in self.rules.values() for r in rules]

    def input_width(self, key: str) -> int:
        for rules in self.rules.values():
            for r in rules:
                if r.key == key:
                    return r.index.shape[2]
        raise KeyError(key)

    def init_valuations(self, continuous: dict[str, np.ndarray] | None = None) -> ValuationState:
        """Background atoms 1, everything else 0.

        Intensional predicates amalgamated with AND start at 1 (AND-folding from
        0 could never become true).  Continuous predicates take their supplied
        vectors.
        """
        x = self._base_values()
        for name in self.updated:
            if self.problem.amalgamate_for(name) is Amalgamate.AND:
                x[self.space[name].slice] = 1.0
        for sig in self.problem.signatures:
            if sig.kind is PredKind.CONTINUOUS:
                if continuous is None or sig.name not in continuous:
                    raise ValueError(f"no values supplied for continuous predicate {sig.name}")
                x[self.space[sig.name].slice] = continuous[sig.name]
        return ValuationState(self.space, x, 0)

    def _check(self, functions: dict[str, DNLFunction]) -> None:
        for rules in self.rules.values():
            for r in rules:
                f = functions.get(r.key)
                if f is None:
                    raise ShapeMismatchError(f"no function for rule {r.key}")
                if f.input_width != r.index.shape[2]:
                    raise ShapeMismatchError(
                        f"{r.key}: function width {f.input_width} != {r.index.shape[2]} candidate literals"
                    )

    def prepare(self, functions: dict[str, DNLFunction]) -> _Prepared:
        self._check(functions)
        prep = _Prepared({}, {}, {})
        for rules in self.rules.values():
            for r in rules:
                f = functions[r.key]
                M, _ = f.memberships()
                prep.M[r.key] = M
                u = f.gate_inputs(r.x_static)
                prep.u_static[r.key] = u
                log1m = -softplus(f.gain * f.weights[:, r.static_cols])
                prep.P_static[r.key] = np.exp(u @ log1m.T) if len(r.static_cols) else np.ones((len(u), f.hidden))
        return prep

    def _active(self, name: str, t: int) -> bool:
        limit = self.problem.tmax_override.get(name)
        return limit is None or t < limit

    def _step(self, x: np.ndarray, t: int, functions, prep: _Prepared, cache: _StepCache | None) -> np.ndarray:
        new = x.copy()
        for name in self.updated:
            if not self._active(name, t):
                continue
            vs = []
            for r in self.rules[name]:
                f = functions[r.key]
                xd = x[r.idx_dyn]
                if r.neg_dyn.any():
                    xd[:, r.neg_dyn] = 1.0 - xd[:, r.neg_dyn]
                ud = np.ascontiguousarray(f.gate_inputs(xd))
                Pd = gated_product(ud, np.ascontiguousarray(prep.M[r.key][:, r.dyn_cols]))
                y, out = f.product_to_output(prep.P_static[r.key] * Pd)
                factors = (1.0 - y * r.valid).reshape(r.E, r.T)
                v = 1.0 - factors.prod(axis=1)
                vs.append(v)
                if cache is not None:
                    cache.rules[r.key] = _RuleCache(ud, Pd, out, factors, v)
            F = 1.0 - np.prod([1.0 - v for v in vs], axis=0)
            sl = self.space[name].slice
            old = x[sl]
            am = self.problem.amalgamate_for(name)
            if am is Amalgamate.OR:
                upd = 1.0 - (1.0 - old) * (1.0 - F)
            elif am is Amalgamate.AND:
                upd = old * F
            else:
                upd = F
            new[sl] = np.clip(upd, 0.0, 1.0)
            if cache is not None:
                cache.combined[name] = F
        return new

    def step(self, state: ValuationState, functions: dict[str, DNLFunction]) -> ValuationState:
        if state.values.shape != (self.space.flat_size,):
            raise ShapeMismatchError("state does not match the ground space")
        prep = self.prepare(functions)
        return ValuationState(self.space, self._step(state.values, state.t, functions, prep, None), state.t + 1)

    def run(self, functions: dict[str, DNLFunction], t_max: int | None = None,
            state: ValuationState | None = None, record: bool = False) -> ChainRun:
        """Apply ``t_max`` steps.  ``record`` keeps every state and the tapes
        needed by :meth:`backward`."""
        t_max = self.problem.t_max if t_max is None else t_max
        if t_max < 1:
            raise ValueError("t_max must be at least 1")
        state = self.init_valuations() if state is None else state
        if state.values.shape != (self.space.flat_size,):
            raise ShapeMismatchError("state does not match the ground space")
        prep = self.prepare(functions)
        states, caches = [state], []
        x = state.values
        for t in range(state.t, state.t + t_max):
            cache = _StepCache() if record else None
            x = self._step(x, t, functions, prep, cache)
            if record:
                caches.append(cache)
                states.append(ValuationState(self.space, x, t + 1))
        if not record:
            states.append(ValuationState(self.space, x, state.t + t_max))
        return ChainRun(states, caches, prep, functions)

    def backward(self, run: ChainRun, grad_final: np.ndarray) -> tuple[dict[str, dict[str, np.ndarray]], np.ndarray]:
        """Gradients of a scalar whose gradient w.r.t. the final flat valuation
        is ``grad_final``.  Returns raw-weight gradients per rule key and the
        gradient w.r.t. the initial valuation."""
        if not run.caches:
            raise ValueError("run was not recorded")
        functions, prep = run.functions, run.prepared
        grads = {k: {n: np.zeros_like(p) for n, p in functions[k].params().items()} for k in self.keys()}
        gPs = {k: np.zeros_like(prep.P_static[k]) for k in self.keys()}
        g = np.array(grad_final, dtype=float)
        for step in range(len(run.caches) - 1, -1, -1):
            cache = run.caches[step]
            x = run.states[step].values
            gold = g.copy()
            gFs = {}
            for name, F in cache.combined.items():
                sl = self.space[name].slice
                gnew, old = g[sl], x[sl]
                am = self.problem.amalgamate_for(name)
                if am is Amalgamate.OR:
                    gold[sl] = gnew * (1.0 - F)
                    gFs[name] = gnew * (1.0 - old)
                elif am is Amalgamate.AND:
                    gold[sl] = gnew * F
                    gFs[name] = gnew * old
                else:
                    gold[sl] = 0.0
                    gFs[name] = gnew
            for name, gF in gFs.items():
                rules = self.rules[name]
                vfac = np.stack([1.0 - cache.rules[r.key].v for r in rules])
                others = prod_except(vfac, axis=0)
                for j, r in enumerate(rules):
                    f, rc = functions[r.key], cache.rules[r.key]
                    gv = gF * others[j]
                    gy = (gv[:, None] * prod_except(rc.factors, axis=1)).reshape(-1) * r.valid
                    gP, gout = f.output_backward(rc.out, gy)
                    if gout is not None:
                        grads[r.key]["out_weights"] += gout
                    gPs[r.key] += gP * rc.P_dyn
                    if len(r.dyn_cols):
                        Md = np.ascontiguousarray(prep.M[r.key][:, r.dyn_cols])
                        sign = np.where(r.neg_dyn, -1.0, 1.0) * (-1.0 if f.hidden_conj else 1.0)
                        dMd = gated_product_grad_scatter(rc.u_dyn, Md, np.ascontiguousarray(gP * prep.P_static[r.key]),
                                                         r.idx_dyn, sign, gold)
                        grads[r.key]["weights"][:, r.dyn_cols] += dMd * f.gain * Md * (1.0 - Md)
            gold[self.space.zero] = 0.0
            g = gold
        for rules in self.rules.values():
            for r in rules:
                if not len(r.static_cols):
                    continue
                f = functions[r.key]
                gL = (gPs[r.key] * prep.P_static[r.key]).T @ prep.u_static[r.key]
                Ms = prep.M[r.key][:, r.static_cols]
                grads[r.key]["weights"][:, r.static_cols] += -gL * f.gain * Ms
        return grads, g


def run_chain(chainer: ForwardChainer, functions, t_max: int | None = None, state=None,
              trajectory: bool = False):
    """Final state, or the list of states when ``trajectory`` is set."""
    result = chainer.run(functions, t_max, state, record=trajectory)
    return result.states if trajectory else result.final


def dump_trace(states: list[ValuationState], path, threshold: float = 0.0) -> None:
    """CSV of (step, predicate, atom, value) for entries above ``threshold``."""
    problem = states[0].space.problem
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "predicate", "atom", "value"])
        for st in states:
            for name, sp in st.space.preds.items():
                vec = st.values[sp.slice]
                for i in np.flatnonzero(vec > threshold):
                    atom = GroundAtom(name, tuple(int(c) for c in sp.atoms[i]))
                    w.writerow([st.t, name, problem.format_atom(atom), repr(float(vec[i]))])
