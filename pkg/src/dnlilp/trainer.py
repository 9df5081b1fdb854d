"""Loss, Adam training loop, pruning and rule extraction."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .chainer import ForwardChainer, ValuationState
from .continuous import BoundaryInputs, BoundarySet, FeatureTable
from .datalog import Clause, Literal
from .dnl import SATURATED, DNLFunction, sigmoid
from .grounder import DEFAULT_CAP, build_space, compile_index, problem_digest
from .logic import Atom, GroundAtom, ILPProblem, Shape


class TrainingDivergedError(RuntimeError):
    pass


class MissingExampleError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5000
    batch_size: int | None = None  # examples per epoch; None = full batch
    seed: int = 0
    clip: float = 1e-7
    threshold: float = 1e-3
    init_std: float = 0.5
    init_mean: float | None = None  # None: 0 for narrow layers, -2 for wide ones
    boundary_lr: float | None = None  # defaults to learning_rate
    t_max: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.clip < 0.1:
            raise ValueError("loss clip must lie in (0, 0.1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float | dict[str, float] = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            lr = self.lr[k] if isinstance(self.lr, dict) else self.lr
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------------------
# loss


@dataclass
class ExampleLayout:
    """Flat positions and labels of each target predicate's examples."""

    preds: list[str]
    positions: list[np.ndarray]
    labels: list[np.ndarray]
    atoms: list[list[GroundAtom]]

    @classmethod
    def build(cls, problem: ILPProblem, space) -> "ExampleLayout":
        preds, positions, labels, atoms = [], [], [], []
        for sig in problem.targets:
            ex = problem.examples(sig.name)
            if not ex:
                continue
            pos = []
            for atom, _ in ex:
                p = space.position(atom)
                if p is None:
                    raise MissingExampleError(f"example atom {problem.format_atom(atom)} is not in the ground space")
                pos.append(p)
            preds.append(sig.name)
            positions.append(np.array(pos, dtype=np.int64))
            labels.append(np.array([y for _, y in ex]))
            atoms.append([a for a, _ in ex])
        return cls(preds, positions, labels, atoms)


def cross_entropy(values: np.ndarray, layout: ExampleLayout, clip: float = 1e-7,
                  masks: list[np.ndarray] | None = None) -> tuple[float, np.ndarray]:
    """Mean CE per target predicate, averaged over predicates, and its
    gradient w.r.t. the flat valuation."""
    grad = np.zeros_like(values)
    total, n_preds = 0.0, 0
    for j, (pos, y) in enumerate(zip(layout.positions, layout.labels)):
        if masks is not None:
            pos, y = pos[masks[j]], y[masks[j]]
        if len(pos) == 0:
            continue
        n_preds += 1
        raw = values[pos]
        x = np.clip(raw, clip, 1 - clip)
        total += float(np.mean(-(y * np.log(x) + (1 - y) * np.log(1 - x))))
        # the clip bounds the loss value only; its derivative is passed
        # through so saturated predictions still receive a (tiny) gradient
        g = (-(y / x) + (1 - y) / (1 - x)) / len(pos)
        np.add.at(grad, pos, g)
    if n_preds == 0:
        return 0.0, grad
    return total / n_preds, grad / n_preds


def loss(state: ValuationState, problem: ILPProblem, clip: float = 1e-7) -> float:
    """Average cross-entropy of the target examples in a final valuation."""
    return cross_entropy(state.values, ExampleLayout.build(problem, state.space), clip)[0]


# ---------------------------------------------------------------------------
# models


@dataclass
class TrainedModel:
    problem_hash: str
    functions: dict[str, DNLFunction]
    boundaries: BoundarySet | None = None
    loss: float = float("nan")
    history: list[float] = field(default_factory=list)
    rules: list[str] = field(default_factory=list)
    epochs_run: int = 0

    @property
    def converged(self) -> bool:
        return bool(np.isfinite(self.loss))

    def copy(self) -> "TrainedModel":
        b = None if self.boundaries is None else BoundarySet.from_dict(self.boundaries.to_dict())
        return TrainedModel(self.problem_hash, {k: f.copy() for k, f in self.functions.items()}, b,
                            self.loss, list(self.history), list(self.rules), self.epochs_run)

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.json`` (metadata) and ``<path>.npz`` (weights)."""
        path = Path(path)
        meta = {
            "problem_hash": self.problem_hash,
            "loss": self.loss,
            "epochs_run": self.epochs_run,
            "history": self.history,
            "rules": self.rules,
            "functions": {k: {"shape": f.shape.value, "input_width": f.input_width, "hidden": f.hidden,
                              "gain": f.gain} for k, f in self.functions.items()},
            "boundaries": None,
        }
        arrays = {}
        for k, f in self.functions.items():
            arrays[f"{k}/weights"] = f.weights
            if f.has_output:
                arrays[f"{k}/out_weights"] = f.out_weights
        if self.boundaries is not None:
            b = self.boundaries
            meta["boundaries"] = {"features": b.features, "sharpness": b.sharpness}
            for name in ("lower", "upper", "mean", "scale"):
                arrays[f"boundaries/{name}"] = getattr(b, name)
        jpath, npath = path.with_suffix(".json"), path.with_suffix(".npz")
        jpath.parent.mkdir(parents=True, exist_ok=True)
        jpath.write_text(json.dumps(meta, indent=1), encoding="utf-8")
        with open(npath, "wb") as fh:
            np.savez(fh, **arrays)
        return jpath, npath

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        with np.load(path.with_suffix(".npz")) as data:
            functions = {}
            for k, d in meta["functions"].items():
                out = data[f"{k}/out_weights"] if f"{k}/out_weights" in data else None
                functions[k] = DNLFunction(Shape(d["shape"]), d["input_width"], d["hidden"], d["gain"],
                                           data[f"{k}/weights"], out)
            boundaries = None
            if meta["boundaries"] is not None:
                b = meta["boundaries"]
                boundaries = BoundarySet(b["features"], *(data[f"boundaries/{n}"] for n in
                                                          ("lower", "upper", "mean", "scale")), b["sharpness"])
        return cls(meta["problem_hash"], functions, boundaries, meta["loss"], meta["history"], meta["rules"],
                   meta["epochs_run"])


def init_functions(problem: ILPProblem, chainer: ForwardChainer, rng, std: float = 0.5,
                   mean: float | None = None) -> dict[str, DNLFunction]:
    """Random rule networks, drawn in chainer key order."""
    functions = {}
    for sig in problem.intensional:
        for i, rule in enumerate(problem.rules[sig.name]):
            key = f"{sig.name}[{i}]"
            functions[key] = DNLFunction.random(rule.network.kind, chainer.input_width(key), rule.network.terms,
                                                rng, rule.gain, std, mean)
    return functions


class Session:
    """A problem compiled for training: ground space, index, chainer and
    example layout, plus optional continuous feature inputs."""

    def __init__(self, problem: ILPProblem, features: FeatureTable | None = None, *,
                 restrict_extensional: bool = True, restrict_intensional: bool = False, extra_atoms=(),
                 cap: int = DEFAULT_CAP, cache_dir=None, clip: float = 1e-7, t_max: int | None = None):
        problem.validate()
        self.problem = problem
        self.space = build_space(problem, restrict_extensional, restrict_intensional, extra_atoms, cap)
        self.index = compile_index(problem, self.space, cap, cache_dir)
        self.chainer = ForwardChainer(problem, self.space, self.index)
        self.layout = ExampleLayout.build(problem, self.space)
        self.inputs = BoundaryInputs(problem, self.space, features) if features is not None else None
        if self.inputs is None and any(s.kind.value == "continuous" for s in problem.signatures):
            raise ValueError("problem has continuous predicates but no feature table was given")
        self.clip = clip
        self.t_max = problem.t_max if t_max is None else t_max
        self.digest = problem_digest(problem)

    def new_model(self, config: TrainConfig, boundaries: BoundarySet | None = None) -> TrainedModel:
        rng = np.random.default_rng(config.seed)
        functions = init_functions(self.problem, self.chainer, rng, config.init_std, config.init_mean)
        return TrainedModel(self.digest, functions, boundaries)

    def _initial(self, model: TrainedModel):
        if self.inputs is None:
            return self.chainer.init_valuations(), None
        if model.boundaries is None:
            raise ValueError("model has no boundary parameters")
        vals, cache = self.inputs.values(model.boundaries)
        return self.chainer.init_valuations(vals), cache

    def evaluate(self, model: TrainedModel) -> ValuationState:
        state, _ = self._initial(model)
        return self.chainer.run(model.functions, self.t_max, state).final

    def loss(self, model: TrainedModel) -> float:
        return cross_entropy(self.evaluate(model).values, self.layout, self.clip)[0]

    def loss_and_grad(self, model: TrainedModel, masks=None):
        """(loss, {param name: gradient}) with names ``key/weights``,
        ``key/out_weights`` and ``boundaries/lower|upper``."""
        state, bcache = self._initial(model)
        run = self.chainer.run(model.functions, self.t_max, state, record=True)
        value, gfinal = cross_entropy(run.final.values, self.layout, self.clip, masks)
        grads, g0 = self.chainer.backward(run, gfinal)
        flat = {f"{k}/{n}": g for k, d in grads.items() for n, g in d.items()}
        if self.inputs is not None:
            for n, g in self.inputs.backward(model.boundaries, bcache, g0).items():
                flat[f"boundaries/{n}"] = g
        return value, flat

    def predictions(self, model: TrainedModel) -> dict[GroundAtom, float]:
        values = self.evaluate(model).values
        return {a: float(values[p]) for pos, atoms in zip(self.layout.positions, self.layout.atoms)
                for a, p in zip(atoms, pos)}


def model_params(model: TrainedModel) -> dict[str, np.ndarray]:
    params = {f"{k}/{n}": p for k, f in model.functions.items() for n, p in f.params().items()}
    if model.boundaries is not None:
        for n, p in model.boundaries.params().items():
            params[f"boundaries/{n}"] = p
    return params


def train(session: Session, config: TrainConfig, model: TrainedModel | None = None, *,
          log_path=None, callback=None) -> TrainedModel:
    """Full-batch Adam on the averaged cross-entropy until the loss drops
    below ``config.threshold`` or the epoch cap is reached."""
    if config.t_max is not None:
        session.t_max = config.t_max
    model = session.new_model(config) if model is None else model
    params = model_params(model)
    blr = config.learning_rate if config.boundary_lr is None else config.boundary_lr
    lrs = {k: (blr if k.startswith("boundaries/") else config.learning_rate) for k in params}
    opt = Adam(params, lrs, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, 1])
    log = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log)
        writer.writerow(["epoch", "loss", "wall_time"])
    start = time.perf_counter()
    try:
        last_good = float("nan")
        for epoch in range(config.epochs):
            masks = None
            if config.batch_size is not None:
                masks = [_batch_mask(len(p), config.batch_size, rng) for p in session.layout.positions]
            value, grads = session.loss_and_grad(model, masks)
            if not np.isfinite(value) or any(not np.all(np.isfinite(g)) for g in grads.values()):
                bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch} (last finite loss {last_good:.6g}; "
                    f"affected parameters: {', '.join(bad) or 'loss only'})"
                )
            last_good = value
            model.history.append(value)
            if log is not None:
                writer.writerow([epoch, repr(value), f"{time.perf_counter() - start:.4f}"])
            if callback is not None:
                callback(epoch, value)
            if masks is None and value < config.threshold:
                break
            opt.step(grads)
            for f in model.functions.values():
                f.touch()
            model.epochs_run = epoch + 1
    finally:
        if log is not None:
            log.close()
    model.loss = session.loss(model)
    return model


def _batch_mask(n: int, size: int, rng) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=min(size, n), replace=False)] = True
    return mask


# ---------------------------------------------------------------------------
# post-processing


def binarize(model: TrainedModel, threshold: float = 0.5) -> TrainedModel:
    """Copy with every membership saturated to exactly 0 or 1."""
    out = model.copy()
    for f in out.functions.values():
        M, mo = f.memberships()
        f.set_memberships(M >= threshold, None if mo is None else mo >= threshold)
    return out


def prune(model: TrainedModel, session: Session, tolerance: float = 1e-4) -> TrainedModel:
    """Switch off memberships one at a time, in (predicate, rule, neuron,
    atom) order, keeping each removal unless the loss exceeds the starting
    loss by more than ``tolerance``.  Each neuron's output membership is
    tried after its atoms."""
    model = model.copy()
    base = session.loss(model)
    for key, f in model.functions.items():
        for k in range(f.hidden):
            slots = [("weights", (k, a)) for a in range(f.input_width)]
            if f.has_output:
                slots.append(("out_weights", (k,)))
            for name, idx in slots:
                arr = getattr(f, name)
                if sigmoid(f.gain * arr[idx]) < 0.5:
                    continue
                old = arr[idx]
                arr[idx] = -SATURATED
                f.touch()
                if session.loss(model) > base + tolerance:
                    arr[idx] = old
                    f.touch()
    model.loss = session.loss(model)
    model.rules = [str(c) for c in extract_program(model, session.problem)]
    return model


def extract_program(model: TrainedModel, problem: ILPProblem, threshold: float = 0.5) -> list[Clause]:
    """Read clauses off memberships at ``threshold``.

    A DNF or single conjunction gives one clause per active term; a
    disjunction gives one clause per included literal; a CNF gives one
    clause whose body is a conjunction of disjunctive groups.
    """
    clauses = []
    for sig in problem.intensional:
        for i, rule in enumerate(problem.rules[sig.name]):
            f = model.functions[f"{sig.name}[{i}]"]
            cands = problem.candidates(sig.name)[i]
            variables = cands.variables
            head = Atom(sig, variables[:sig.arity])
            guards = cands.function_terms()
            M, mo = f.memberships()
            active = [k for k in range(f.hidden) if mo is None or mo[k] >= threshold]

            def lits(k):
                return tuple(Literal(*cands.literal(a)) for a in np.flatnonzero(M[k] >= threshold))

            def make(body):
                return Clause(head, body, variables, guards)

            if f.shape in (Shape.CONJ, Shape.DNF):
                clauses += [make(tuple((l,) for l in lits(k))) for k in active]
            elif f.shape is Shape.DISJ:
                clauses += [make(((l,),)) for l in lits(0)]
            else:
                groups = tuple(lits(k) for k in active)
                if all(groups):
                    clauses.append(make(groups))
    return clauses


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
