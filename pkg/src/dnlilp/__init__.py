"""Differentiable neural-logic inductive logic programming."""

from .chainer import ForwardChainer, ValuationState, run_chain
from .continuous import BoundarySet, FeatureTable, attach, boundary_forward, classification_problem
from .datalog import Clause, Literal, evaluate
from .dnl import DNLFunction, Formula, extract_boolean
from .grounder import GroundingCapError, build_space, compile_index
from .logic import Amalgamate, ILPProblem, PredKind, RuleSpec, Shape, candidate_atoms, perm
from .parser import ParseError, load_problem, parse_problem, serialize_problem
from .trainer import Session, TrainConfig, TrainedModel, extract_program, prune, train

__version__ = "0.1.0"
