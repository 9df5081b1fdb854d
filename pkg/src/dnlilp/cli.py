"""Command-line interface: ``dnlilp learn | eval | check``.

Exit codes: 0 converged, 2 not converged, 3 parse error, 4 grounding cap
exceeded, 5 I/O error, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .evaluation import (
    FEATURE_DATASETS,
    FoldPlan,
    cross_validate_features,
    cross_validate_relational,
    dataset_counts,
    load_dataset,
    load_relational,
    without_recursion,
)
from .grounder import DEFAULT_CAP, GroundingCapError, build_space, free_domains
from .logic import Amalgamate, ILPProblem
from .parser import ParseError, parse_problem
from .trainer import Session, TrainConfig, TrainingDivergedError, extract_program, prune, train

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_PARSE, EXIT_CAP, EXIT_IO, EXIT_USAGE = 0, 2, 3, 4, 5, 64
RELATIONAL_DATASETS = ("imdb", "uw-cse", "cora", "mutagenesis")
BUNDLED = ("lessthan", "mul", "sort")

log = logging.getLogger("dnlilp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _add_training_flags(p: argparse.ArgumentParser, lr: float, epochs: int, init_note: str = "") -> None:
    g = p.add_argument_group("training")
    g.add_argument("--tmax", type=int, help="forward-chaining steps (default: the problem's param tmax)")
    g.add_argument("--lr", type=float, default=lr, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=epochs, help="epoch cap (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    g.add_argument("--init-mean", type=float,
                   help="mean of the initial membership weights (default: 0 for layers up to 64 inputs, -2 for "
                        f"wider ones{init_note})")
    g.add_argument("--threshold", type=float, default=1e-3,
                   help="stop when the loss drops below this (default: %(default)s)")
    g.add_argument("--threads", type=int, help="worker threads for the numeric kernels")
    g.add_argument("--recursion", type=_on_off, default=True, metavar="on|off",
                   help="allow a predicate's own atoms in its rule bodies (default: on)")
    g.add_argument("--amalgamate", choices=[a.value for a in Amalgamate],
                   help="override the amalgamate function of every intensional predicate")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dnlilp", description="Learn first-order rules by differentiable forward chaining.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more progress output")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    learn = sub.add_parser("learn", help="train on a problem file and print the learned program")
    learn.add_argument("problem", help=f"problem file, or a bundled name ({', '.join(BUNDLED)})")
    _add_training_flags(learn, lr=0.05, epochs=5000)
    learn.add_argument("--no-prune", action="store_true", help="skip post-training pruning")
    learn.add_argument("--out", default="out", help="output directory (default: %(default)s)")

    ev = sub.add_parser("eval", help="k-fold cross-validation on a dataset")
    ev.add_argument("--dataset", required=True,
                    help=f"bundled ({', '.join(FEATURE_DATASETS)}) or relational ({', '.join(RELATIONAL_DATASETS)})")
    ev.add_argument("--data", nargs="+", default=[], help="relational fact files (problem syntax or CSV)")
    ev.add_argument("--declarations", help="problem file with predicate declarations for --data")
    ev.add_argument("--folds", type=int, help="number of folds (default: 5; 10 for mutagenesis)")
    ev.add_argument("--boundaries", type=int, default=6,
                    help="boundary predicates per feature and side (default: %(default)s)")
    ev.add_argument("--terms", type=int, default=8, help="DNF terms per class predicate (default: %(default)s)")
    ev.add_argument("--negative-ratio", type=float, help="subsample negatives to this multiple of the positives")
    _add_training_flags(ev, lr=0.05, epochs=1000, init_note="; -4 on feature datasets")
    ev.add_argument("--out", default="out", help="output directory (default: %(default)s)")

    check = sub.add_parser("check", help="parse and size a problem without training")
    check.add_argument("problem", help=f"problem file, or a bundled name ({', '.join(BUNDLED)})")
    check.add_argument("--cap", type=int, default=DEFAULT_CAP, help="grounding cap (default: %(default)s)")
    return parser


def resolve_problem_path(arg: str) -> Path:
    path = Path(arg)
    if path.exists():
        return path
    stem = path.name[:-4] if path.name.endswith(".dnl") else path.name
    if stem in BUNDLED:
        with resources.as_file(resources.files("dnlilp") / "problems" / f"{stem}.dnl") as bundled:
            if bundled.exists():
                return bundled
    raise FileNotFoundError(f"no such problem file: {arg}")


def read_problem(arg: str) -> ILPProblem:
    path = resolve_problem_path(arg)
    text = path.read_text(encoding="utf-8")
    return parse_problem(text)


def apply_overrides(problem: ILPProblem, args) -> ILPProblem:
    if args.tmax is not None:
        if args.tmax < 1:
            raise UsageError("--tmax must be at least 1")
        problem = replace(problem, t_max=args.tmax)
    if args.amalgamate is not None:
        am = Amalgamate(args.amalgamate)
        problem = replace(problem, amalgamate={s.name: am for s in problem.intensional})
    if not args.recursion:
        problem = without_recursion(problem)
    return problem


def _config(args) -> TrainConfig:
    try:
        return TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed, threshold=args.threshold,
                           init_mean=args.init_mean)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be positive")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def cmd_learn(args) -> int:
    problem = apply_overrides(read_problem(args.problem), args)
    config = _config(args)
    session = Session(problem)
    out = Path(args.out)
    log_rows = []

    def progress(epoch, value):
        log_rows.append(value)
        if args.verbose and epoch % 100 == 0:
            print(f"epoch {epoch:5d}  loss {value:.6f}", file=sys.stderr)

    model = train(session, config, callback=progress)
    converged = model.loss < config.threshold
    if not args.no_prune:
        model = prune(model, session)
    program = extract_program(model, problem)
    model.rules = [str(c) for c in program]
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model")
    with open(out / "train_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(log_rows))
    (out / "program.txt").write_text("".join(f"{c}\n" for c in model.rules), encoding="utf-8")
    for line in model.rules:
        print(line)
    status = "converged" if converged else "not converged"
    print(f"% loss {model.loss:.6g} after {model.epochs_run} epochs ({status})", file=sys.stderr)
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def cmd_eval(args) -> int:
    name = args.dataset.lower()
    if name not in FEATURE_DATASETS + RELATIONAL_DATASETS:
        raise UsageError(f"unknown dataset {args.dataset!r}")
    folds = args.folds if args.folds is not None else (10 if name == "mutagenesis" else 5)
    try:
        plan = FoldPlan(folds, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    config = _config(args)

    def progress(i, fold):
        print(f"fold {i}: accuracy {fold.accuracy:.4f}  aupr {fold.aupr:.4f}  loss {fold.loss:.4f}", file=sys.stderr)

    if name in FEATURE_DATASETS:
        if args.boundaries < 1 or args.terms < 1:
            raise UsageError("--boundaries and --terms must be positive")
        report = cross_validate_features(load_dataset(name), plan, config, name=name, boundaries=args.boundaries,
                                         terms=args.terms, progress=progress)
    else:
        if not args.data:
            raise FileNotFoundError(f"dataset {name} needs local files via --data")
        decl = Path(args.declarations).read_text(encoding="utf-8") if args.declarations else ""
        problem = apply_overrides(load_relational(args.data, decl), args)
        print(json.dumps(dataset_counts(problem)), file=sys.stderr)
        report = cross_validate_relational(problem, plan, config, name=name, negative_ratio=args.negative_ratio,
                                           progress=progress)
    path = report.write(args.out)
    print(json.dumps({"dataset": name, "mean_accuracy": report.mean_accuracy, "mean_aupr": report.mean_aupr,
                      "report": str(path)}))
    return EXIT_OK


def cmd_check(args) -> int:
    problem = read_problem(args.problem)
    space = build_space(problem, cap=math.inf)
    print(f"constants: {len(problem.constants)}  predicates: {len(problem.signatures)}  t_max: {problem.t_max}")
    print(f"background: {len(problem.background)}  positives: {len(problem.positives)}  "
          f"negatives: {len(problem.negatives)}")
    for sig in problem.signatures:
        note = " (background only)" if space[sig.name].restricted else ""
        print(f"|G_{sig.name}| = {len(space[sig.name])}{note}")
    total = 0
    for sig in problem.intensional:
        for i, (rule, cands) in enumerate(zip(problem.rules[sig.name], problem.candidates(sig.name)), start=1):
            theta = math.prod(len(d) for d in free_domains(problem, rule))
            entries = len(space[sig.name]) * theta * len(cands)
            total += entries
            print(f"|I^{i}_{sig.name}| = {len(cands)}  |Theta| = {theta}  index entries = {entries}")
    mib = total * 8 / 2**20
    print(f"index memory ~ {mib:.1f} MiB")
    if total > args.cap:
        print(f"warning: the grounding index ({total} entries) exceeds the cap {args.cap}", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == EXIT_USAGE:
            return EXIT_USAGE
        raise
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.WARNING)
    handlers = {"learn": cmd_learn, "eval": cmd_eval, "check": cmd_check}
    try:
        _threads(getattr(args, "threads", None))
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"dnlilp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"dnlilp: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except GroundingCapError as exc:
        print(f"dnlilp: grounding cap exceeded: {exc}", file=sys.stderr)
        return EXIT_CAP
    except (OSError, UnicodeDecodeError) as exc:
        print(f"dnlilp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergedError as exc:
        print(f"dnlilp: training diverged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
