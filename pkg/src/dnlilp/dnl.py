"""Differentiable neural logic (dNL) functions.

Conjunction neuron: ``prod_i (1 - m_i (1 - x_i))``.  Disjunction neuron:
``1 - prod_i (1 - m_i x_i)``.  Memberships are ``m = sigmoid(gain * w)`` over
raw trainable weights ``w``.  DNF cascades a conjunction layer into one
disjunction neuron; CNF cascades a disjunction layer into one conjunction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import gated_product, gated_product_grad, prod_except
from .logic import Shape

# raw weight magnitude that saturates the sigmoid to exactly 0.0 / 1.0
SATURATED = 1000.0
WIDE_INPUT = 64


def fuzzy_not(x):
    return 1.0 - x


def fuzzy_and(x, y):
    return x * y


def fuzzy_or(x, y):
    return 1.0 - (1.0 - x) * (1.0 - y)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class StaleTapeError(RuntimeError):
    pass


@dataclass
class Tape:
    """Intermediates recorded by a forward pass."""

    x: np.ndarray
    u: np.ndarray
    P: np.ndarray
    M: np.ndarray
    out: "OutputCache"
    version: int
    squeeze: bool


@dataclass
class OutputCache:
    P: np.ndarray
    mo: np.ndarray | None
    others: np.ndarray | None
    y: np.ndarray


@dataclass
class Gradients:
    weights: np.ndarray
    out_weights: np.ndarray | None
    inputs: np.ndarray


class DNLFunction:
    def __init__(
        self,
        shape: Shape,
        input_width: int,
        hidden: int = 1,
        gain: float = 1.0,
        weights: np.ndarray | None = None,
        out_weights: np.ndarray | None = None,
    ):
        shape = Shape(shape)
        if shape in (Shape.CONJ, Shape.DISJ) and hidden != 1:
            raise ValueError(f"{shape.value} has exactly one neuron")
        if hidden < 1 or input_width < 0:
            raise ValueError("bad layer size")
        if gain < 1:
            raise ValueError("sigmoid gain must be >= 1")
        self.shape = shape
        self.input_width = input_width
        self.hidden = hidden
        self.gain = float(gain)
        self.weights = np.zeros((hidden, input_width)) if weights is None else np.array(weights, dtype=float)
        if self.weights.shape != (hidden, input_width):
            raise ValueError(f"weights must have shape {(hidden, input_width)}")
        if self.has_output:
            self.out_weights = np.zeros(hidden) if out_weights is None else np.array(out_weights, dtype=float)
            if self.out_weights.shape != (hidden,):
                raise ValueError(f"output weights must have shape {(hidden,)}")
        else:
            self.out_weights = None
        self.version = 0

    @classmethod
    def random(cls, shape: Shape, input_width: int, hidden: int = 1, rng=None, gain: float = 1.0,
               std: float = 0.5, mean: float | None = None) -> "DNLFunction":
        """Normal init; wide layers start with mostly-off memberships."""
        rng = np.random.default_rng(rng)
        if mean is None:
            mean = 0.0 if input_width <= WIDE_INPUT else -2.0
        f = cls(shape, input_width, hidden, gain)
        f.weights = rng.normal(mean, std, size=(f.hidden, input_width))
        if f.has_output:
            f.out_weights = rng.normal(0.0, std, size=f.hidden)
        return f

    @property
    def has_output(self) -> bool:
        return self.shape in (Shape.DNF, Shape.CNF)

    @property
    def hidden_conj(self) -> bool:
        return self.shape in (Shape.CONJ, Shape.DNF)

    def params(self) -> dict[str, np.ndarray]:
        p = {"weights": self.weights}
        if self.has_output:
            p["out_weights"] = self.out_weights
        return p

    def touch(self) -> None:
        """Mark weights as modified; outstanding tapes become stale."""
        self.version += 1

    def memberships(self) -> tuple[np.ndarray, np.ndarray | None]:
        mo = sigmoid(self.gain * self.out_weights) if self.has_output else None
        return sigmoid(self.gain * self.weights), mo

    def set_memberships(self, hidden, out=None) -> None:
        """Install binary memberships (saturated raw weights)."""
        hidden = np.asarray(hidden, dtype=float).reshape(self.weights.shape)
        self.weights = np.where(hidden >= 0.5, SATURATED, -SATURATED)
        if self.has_output:
            out = np.ones(self.hidden) if out is None else np.asarray(out, dtype=float)
            self.out_weights = np.where(out >= 0.5, SATURATED, -SATURATED)
        self.touch()

    def copy(self) -> "DNLFunction":
        return DNLFunction(self.shape, self.input_width, self.hidden, self.gain,
                           self.weights.copy(), None if self.out_weights is None else self.out_weights.copy())

    def gate_inputs(self, x: np.ndarray) -> np.ndarray:
        return 1.0 - x if self.hidden_conj else x

    def product_to_output(self, P: np.ndarray) -> tuple[np.ndarray, OutputCache]:
        """Map the hidden-layer gated products (B, K) to the function output (B,)."""
        if not self.has_output:
            y = P[:, 0] if self.hidden_conj else 1.0 - P[:, 0]
            return np.clip(y, 0.0, 1.0), OutputCache(P, None, None, y)
        mo = sigmoid(self.gain * self.out_weights)
        factors = 1.0 - mo[None, :] * P
        Q = factors.prod(axis=1)
        y = 1.0 - Q if self.shape is Shape.DNF else Q
        return np.clip(y, 0.0, 1.0), OutputCache(P, mo, prod_except(factors, axis=1), y)

    def output_backward(self, cache: OutputCache, gy: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Returns (d/dP, d/d out_weights)."""
        if not self.has_output:
            gP = gy[:, None] if self.hidden_conj else -gy[:, None]
            return gP, None
        gQ = -gy if self.shape is Shape.DNF else gy
        gP = -(gQ[:, None] * cache.others) * cache.mo[None, :]
        gmo = -(gQ[:, None] * cache.others * cache.P).sum(axis=0)
        return gP, gmo * self.gain * cache.mo * (1.0 - cache.mo)

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[-1] != self.input_width:
            raise ValueError(f"input width {x2.shape[-1]} != {self.input_width}")
        M, _ = self.memberships()
        u = np.ascontiguousarray(self.gate_inputs(x2))
        P = gated_product(u, M)
        y, cache = self.product_to_output(P)
        tape = Tape(x2, u, P, M, cache, self.version, squeeze)
        return (y[0] if squeeze else y), tape

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape: Tape, upstream) -> Gradients:
        if tape.version != self.version:
            raise StaleTapeError("weights changed since the forward pass")
        gy = np.atleast_1d(np.asarray(upstream, dtype=float))
        gP, gout = self.output_backward(tape.out, gy)
        du, dM = gated_product_grad(tape.u, tape.M, np.ascontiguousarray(gP))
        gx = -du if self.hidden_conj else du
        gw = dM * self.gain * tape.M * (1.0 - tape.M)
        return Gradients(gw, gout, gx[0] if tape.squeeze else gx)

    def to_dict(self) -> dict:
        d = {
            "shape": self.shape.value,
            "input_width": self.input_width,
            "hidden": self.hidden,
            "gain": self.gain,
            "weights": self.weights.tolist(),
        }
        if self.has_output:
            d["out_weights"] = self.out_weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DNLFunction":
        w = np.array(d["weights"], dtype=float).reshape(d["hidden"], d["input_width"])
        return cls(Shape(d["shape"]), d["input_width"], d["hidden"], d["gain"], w, d.get("out_weights"))


def conj_forward(x, f: DNLFunction):
    if f.shape is not Shape.CONJ:
        raise ValueError("not a conjunction neuron")
    return f(x)


def disj_forward(x, f: DNLFunction):
    if f.shape is not Shape.DISJ:
        raise ValueError("not a disjunction neuron")
    return f(x)


@dataclass(frozen=True)
class Formula:
    """Boolean formula over input indices.

    ``dnf``: OR of AND-terms (an empty term is true, no terms is false).
    ``cnf``: AND of OR-clauses (an empty clause is false, no clauses is true).
    """

    kind: str
    terms: tuple[tuple[int, ...], ...]

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x)).astype(bool)
        if self.kind == "dnf":
            out = np.zeros(len(x), dtype=bool)
            for t in self.terms:
                out |= x[:, list(t)].all(axis=1)
        else:
            out = np.ones(len(x), dtype=bool)
            for t in self.terms:
                out &= x[:, list(t)].any(axis=1)
        return out

    def render(self, names=None) -> str:
        name = (lambda i: f"x{i}") if names is None else (lambda i: names[i])
        if self.kind == "dnf":
            if not self.terms:
                return "false"
            parts = [" & ".join(name(i) for i in t) or "true" for t in self.terms]
            return " | ".join(f"({p})" if len(self.terms) > 1 and " & " in p else p for p in parts)
        if not self.terms:
            return "true"
        parts = [" | ".join(name(i) for i in t) or "false" for t in self.terms]
        return " & ".join(f"({p})" if len(self.terms) > 1 and " | " in p else p for p in parts)

    def __str__(self) -> str:
        return self.render()


def extract_boolean(f: DNLFunction, threshold: float = 0.5) -> Formula:
    M, mo = f.memberships()
    rows = [tuple(int(i) for i in np.flatnonzero(M[k] >= threshold)) for k in range(f.hidden)]
    active = range(f.hidden) if mo is None else [k for k in range(f.hidden) if mo[k] >= threshold]
    kind = "dnf" if f.hidden_conj else "cnf"
    return Formula(kind, tuple(rows[k] for k in active))


def save_weights(path, functions: dict[str, DNLFunction]) -> None:
    """JSON map ``{function id: {shape, input_width, hidden, gain, weights, out_weights}}``."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: f.to_dict() for k, f in functions.items()}, fh)


def load_weights(path) -> dict[str, DNLFunction]:
    with open(path, encoding="utf-8") as fh:
        return {k: DNLFunction.from_dict(d) for k, d in json.load(fh).items()}


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; ``x`` is restored."""
    grad = np.zeros_like(x, dtype=float)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = fn(x)
        flat[i] = old - h
        lo = fn(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-based relative error.  ``floor`` bounds the scale from below:
    central differences at h=1e-5 cannot resolve gradients much smaller."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
