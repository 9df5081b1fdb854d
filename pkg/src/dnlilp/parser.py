"""Line-oriented problem files.

Grammar (``%`` starts a comment)::

    constant <name> [:<sort>]
    constants { n1 n2 ... } [:<sort>]
    function <fname> [:<dom>-><cod>] { c1 -> c2 , ... }
    pred <name>/<arity> extensional [sorts=s1,s2]
    pred <name>/<arity> intensional vars=<k> net=dnf:<N>|cnf:<N>|conj|disj neg=true|false
         [tmax_override=<t>] [body=p1,p2] [self=true|false] [gain=<c>]
         [sorts=s1,s2] [varsorts=s3,s4] [amalgamate=or|and|replace] [facts=true]
    rule <name> vars=<k> net=... neg=... [body=...] [self=...] [gain=...] [varsorts=...]
    fact <atom>.   pos <atom>.   neg <atom>.
    param tmax=<t> [amalgamate=or|and|replace]

``rule`` lines add further rules to an already declared intensional predicate.
Braced blocks may span several lines.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .logic import (
    Amalgamate,
    Constant,
    GroundAtom,
    ILPProblem,
    Network,
    PredicateSig,
    PredKind,
    RuleSpec,
    Shape,
    TermFunction,
)

_NAME = r"[A-Za-z0-9_\-\.\+\[\]']+"
_ATOM_RE = re.compile(rf"^\s*({_NAME})\s*\((.*)\)\s*\.?\s*$")
_PRED_RE = re.compile(rf"^({_NAME})/(\d+)$")


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message, self.line, self.col = message, line, col
        where = f"line {line}, col {col}: " if line else ""
        super().__init__(where + message)


@dataclass
class _Stmt:
    text: str
    line: int

    def col(self, token: str) -> int:
        i = self.text.find(token)
        return i + 1 if i >= 0 else 1

    def error(self, message: str, token: str = "") -> ParseError:
        return ParseError(message, self.line, self.col(token) if token else 1)


def _statements(text: str) -> list[_Stmt]:
    out: list[_Stmt] = []
    pending: _Stmt | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].rstrip()
        if pending is not None:
            pending.text += " " + line.strip()
            if "}" in line:
                out.append(pending)
                pending = None
            continue
        if not line.strip():
            continue
        stmt = _Stmt(line.strip(), lineno)
        if "{" in line and "}" not in line:
            pending = stmt
        else:
            out.append(stmt)
    if pending is not None:
        raise pending.error("unterminated '{' block", "{")
    return out


def _bool(stmt: _Stmt, value: str) -> bool:
    if value not in ("true", "false"):
        raise stmt.error(f"expected true or false, got {value!r}", value)
    return value == "true"


def _network(stmt: _Stmt, value: str) -> Network:
    kind, _, n = value.partition(":")
    try:
        shape = Shape(kind)
    except ValueError:
        raise stmt.error(f"unknown network {value!r}", value) from None
    if shape in (Shape.DNF, Shape.CNF):
        if not n.isdigit() or int(n) < 1:
            raise stmt.error(f"network {kind} needs a positive term count", value)
        return Network(shape, int(n))
    if n:
        raise stmt.error(f"network {kind} takes no term count", value)
    return Network(shape)


def _sorts(value: str) -> tuple[str | None, ...]:
    return tuple(None if s in ("", "_", "*") else s for s in value.split(","))


def _options(stmt: _Stmt, tokens: list[str], allowed: set[str]) -> dict[str, str]:
    opts: dict[str, str] = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq or key not in allowed:
            raise stmt.error(f"unexpected option {tok!r}", tok)
        if key in opts:
            raise stmt.error(f"duplicate option {key!r}", tok)
        opts[key] = value
    return opts


_RULE_OPTS = {"vars", "net", "neg", "body", "self", "gain", "varsorts"}
_PRED_OPTS = _RULE_OPTS | {"tmax_override", "sorts", "amalgamate", "facts"}


def parse_atom(stmt: _Stmt, text: str) -> tuple[str, list[str]]:
    m = _ATOM_RE.match(text)
    if not m:
        raise stmt.error(f"malformed atom {text!r}", text.strip()[:8])
    args = [a.strip() for a in m.group(2).split(",")] if m.group(2).strip() else []
    if any(not a for a in args):
        raise stmt.error(f"empty argument in {text!r}", text.strip()[:8])
    return m.group(1), args


def parse_problem(text: str) -> ILPProblem:
    constants: list[Constant] = []
    const_ids: dict[str, int] = {}
    functions: list[tuple[_Stmt, str, list[tuple[str, str]], str | None, str | None]] = []
    sigs: dict[str, PredicateSig] = {}
    sig_stmt: dict[str, _Stmt] = {}
    rule_opts: dict[str, list[tuple[_Stmt, dict[str, str]]]] = {}
    atoms: dict[str, list[tuple[_Stmt, str, list[str]]]] = {"fact": [], "pos": [], "neg": []}
    t_max = None
    default_am: Amalgamate | None = None
    amalgamate: dict[str, Amalgamate] = {}
    overrides: dict[str, int] = {}
    facts_allowed: set[str] = set()

    def add_constant(stmt: _Stmt, name: str, sort: str | None):
        if not re.fullmatch(_NAME, name):
            raise stmt.error(f"bad constant name {name!r}", name)
        if name in const_ids:
            raise stmt.error(f"duplicate constant {name!r}", name)
        const_ids[name] = len(constants)
        constants.append(Constant(len(constants), name, sort))

    for stmt in _statements(text):
        keyword, _, rest = stmt.text.partition(" ")
        rest = rest.strip()
        if keyword == "constant":
            name, _, sort = rest.partition(":")
            if not name.strip():
                raise stmt.error("constant needs a name")
            add_constant(stmt, name.strip(), sort.strip() or None)
        elif keyword == "constants":
            m = re.fullmatch(r"\{(.*)\}\s*(?::\s*(\S+))?", rest)
            if not m:
                raise stmt.error("expected 'constants { ... } [:sort]'")
            for name in m.group(1).split():
                add_constant(stmt, name, m.group(2))
        elif keyword == "function":
            m = re.fullmatch(rf"({_NAME})\s*(?::\s*(\S*)\s*->\s*(\S*))?\s*\{{(.*)\}}", rest)
            if not m:
                raise stmt.error("expected 'function <name> [:dom->cod] { a -> b, ... }'")
            pairs = []
            for item in m.group(4).split(","):
                if not item.strip():
                    continue
                a, arrow, b = item.partition("->")
                if not arrow:
                    raise stmt.error(f"bad mapping {item.strip()!r}", item.strip())
                pairs.append((a.strip(), b.strip()))
            functions.append((stmt, m.group(1), pairs, m.group(2) or None, m.group(3) or None))
        elif keyword == "pred":
            tokens = rest.split()
            if len(tokens) < 2:
                raise stmt.error("expected 'pred <name>/<arity> <kind> ...'")
            m = _PRED_RE.match(tokens[0])
            if not m:
                raise stmt.error(f"bad predicate {tokens[0]!r}", tokens[0])
            name, arity = m.group(1), int(m.group(2))
            if name in sigs:
                raise stmt.error(f"duplicate predicate {name!r}", tokens[0])
            if arity < 1:
                raise stmt.error(f"predicate {name} has arity 0", tokens[0])
            kind = tokens[1]
            if kind == "extensional":
                opts = _options(stmt, tokens[2:], {"sorts"})
                sorts = _sorts(opts["sorts"]) if "sorts" in opts else None
                if sorts is not None and len(sorts) != arity:
                    raise stmt.error("sorts do not match arity", "sorts=")
                sigs[name] = PredicateSig(name, arity, PredKind.EXTENSIONAL, arg_sorts=sorts)
            elif kind == "intensional":
                opts = _options(stmt, tokens[2:], _PRED_OPTS)
                sorts = _sorts(opts.pop("sorts")) if "sorts" in opts else None
                if sorts is not None and len(sorts) != arity:
                    raise stmt.error("sorts do not match arity", "sorts=")
                if "tmax_override" in opts:
                    v = opts.pop("tmax_override")
                    if not v.isdigit() or int(v) < 1:
                        raise stmt.error("tmax_override must be a positive integer", "tmax_override")
                    overrides[name] = int(v)
                if "amalgamate" in opts:
                    v = opts.pop("amalgamate")
                    try:
                        amalgamate[name] = Amalgamate(v)
                    except ValueError:
                        raise stmt.error(f"unknown amalgamate {v!r}", v) from None
                if _bool(stmt, opts.pop("facts", "false")):
                    facts_allowed.add(name)
                sigs[name] = PredicateSig(name, arity, PredKind.INTENSIONAL, arg_sorts=sorts)
                rule_opts.setdefault(name, []).insert(0, (stmt, opts))
            else:
                raise stmt.error(f"unknown predicate kind {kind!r}", kind)
            sig_stmt[name] = stmt
        elif keyword == "rule":
            tokens = rest.split()
            if not tokens:
                raise stmt.error("expected 'rule <name> ...'")
            rule_opts.setdefault(tokens[0], []).append((stmt, _options(stmt, tokens[1:], _RULE_OPTS)))
        elif keyword in atoms:
            if not rest.endswith("."):
                raise stmt.error("atom must end with '.'", rest[-1:] or keyword)
            name, args = parse_atom(stmt, rest)
            atoms[keyword].append((stmt, name, args))
        elif keyword == "param":
            opts = _options(stmt, rest.split(), {"tmax", "amalgamate"})
            if "tmax" in opts:
                if not opts["tmax"].isdigit() or int(opts["tmax"]) < 1:
                    raise stmt.error("tmax must be a positive integer", "tmax")
                t_max = int(opts["tmax"])
            if "amalgamate" in opts:
                try:
                    default_am = Amalgamate(opts["amalgamate"])
                except ValueError:
                    raise stmt.error(f"unknown amalgamate {opts['amalgamate']!r}", "amalgamate") from None
        else:
            raise stmt.error(f"unknown statement {keyword!r}", keyword)

    term_functions = []
    for stmt, fname, pairs, dom, cod in functions:
        table = []
        for a, b in pairs:
            for c in (a, b):
                if c not in const_ids:
                    raise stmt.error(f"unknown constant {c!r}", c)
            table.append((const_ids[a], const_ids[b]))
        if len({a for a, _ in table}) != len(table):
            raise stmt.error(f"function {fname} maps a constant twice", fname)
        dom = dom or _common_sort(constants, [a for a, _ in table])
        cod = cod or _common_sort(constants, [b for _, b in table])
        term_functions.append(TermFunction(fname, tuple(sorted(table)), dom, cod))

    ground: dict[str, set[GroundAtom]] = {}
    examples_for: set[str] = set()
    for kind, items in atoms.items():
        seen: set[GroundAtom] = set()
        for stmt, name, args in items:
            if name not in sigs:
                raise stmt.error(f"unknown predicate {name!r}", name)
            sig = sigs[name]
            if len(args) != sig.arity:
                raise stmt.error(f"arity mismatch: {name}/{sig.arity} given {len(args)} arguments", name)
            for a in args:
                if a not in const_ids:
                    raise stmt.error(f"unknown constant {a!r}", a)
            if kind == "fact" and sig.kind is PredKind.INTENSIONAL and name not in facts_allowed:
                raise stmt.error(f"fact for intensional predicate {name} (declare facts=true)", name)
            if kind != "fact":
                if sig.kind is not PredKind.INTENSIONAL:
                    raise stmt.error(f"examples must use an intensional predicate, not {name}", name)
                examples_for.add(name)
            seen.add(GroundAtom(name, tuple(const_ids[a] for a in args)))
        ground[kind] = seen
    both = ground["pos"] & ground["neg"]
    if both:
        dup = min(both)
        stmt = next(s for s, n, a in atoms["neg"] if GroundAtom(n, tuple(const_ids[x] for x in a)) == dup)
        raise stmt.error(f"example is both positive and negative", dup.pred)

    rules: dict[str, list[RuleSpec]] = {}
    for name, entries in rule_opts.items():
        if name not in sigs or sigs[name].kind is not PredKind.INTENSIONAL:
            raise entries[0][0].error(f"rule for undeclared intensional predicate {name!r}", name)
    signatures = []
    for name, sig in sigs.items():
        if sig.kind is PredKind.INTENSIONAL and name in examples_for:
            sig = PredicateSig(sig.name, sig.arity, sig.kind, True, sig.arg_sorts)
        signatures.append(sig)
    by_name = {s.name: s for s in signatures}
    for name, entries in rule_opts.items():
        rules[name] = [_rule(stmt, by_name[name], opts, by_name) for stmt, opts in entries]
    if not examples_for:
        raise ParseError("no target predicate")

    if default_am is not None:
        for s in signatures:
            if s.kind is PredKind.INTENSIONAL:
                amalgamate.setdefault(s.name, default_am)
    amalgamate = {k: v for k, v in amalgamate.items() if v is not Amalgamate.OR}

    problem = ILPProblem(
        constants=constants,
        signatures=signatures,
        rules=rules,
        background=frozenset(ground["fact"]),
        positives=frozenset(ground["pos"]),
        negatives=frozenset(ground["neg"]),
        functions=term_functions,
        t_max=t_max or 1,
        amalgamate=amalgamate,
        tmax_override=overrides,
        facts_allowed=frozenset(facts_allowed),
    )
    try:
        problem.validate()
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return problem


def _common_sort(constants: list[Constant], ids: list[int]) -> str | None:
    sorts = {constants[i].sort for i in ids}
    return sorts.pop() if len(sorts) == 1 else None


def _rule(stmt: _Stmt, sig: PredicateSig, opts: dict[str, str], sigs: dict[str, PredicateSig]) -> RuleSpec:
    for key in ("vars", "net"):
        if key not in opts:
            raise stmt.error(f"missing option {key}=")
    if not opts["vars"].isdigit():
        raise stmt.error("vars must be an integer", "vars=")
    num_var = int(opts["vars"])
    if num_var < sig.arity:
        raise stmt.error(f"vars={num_var} is less than the arity of {sig.name}", "vars=")
    body = None
    if "body" in opts:
        body = tuple(b for b in opts["body"].split(",") if b)
        for b in body:
            if b not in sigs:
                raise stmt.error(f"unknown predicate {b!r} in body", b)
    extra = _sorts(opts["varsorts"]) if "varsorts" in opts else None
    if extra is not None and len(extra) != num_var - sig.arity:
        raise stmt.error("varsorts must list one sort per extra variable", "varsorts=")
    try:
        gain = float(opts.get("gain", "1"))
    except ValueError:
        raise stmt.error("gain must be a number", "gain=") from None
    if gain < 1:
        raise stmt.error("gain must be at least 1", "gain=")
    return RuleSpec(
        predicate=sig,
        num_var=num_var,
        network=_network(stmt, opts["net"]),
        use_negation=_bool(stmt, opts.get("neg", "false")),
        allowed_body=body,
        include_self=_bool(stmt, opts.get("self", "true")),
        extra_sorts=extra,
        gain=gain,
    )


def _fmt_sorts(sorts) -> str:
    return ",".join("_" if s is None else s for s in sorts)


def _fmt_rule_opts(rule: RuleSpec) -> list[str]:
    out = [f"vars={rule.num_var}", f"net={rule.network}", f"neg={str(rule.use_negation).lower()}"]
    if rule.allowed_body is not None:
        out.append("body=" + ",".join(rule.allowed_body))
    if not rule.include_self:
        out.append("self=false")
    if rule.gain != 1.0:
        out.append(f"gain={rule.gain!r}")
    if rule.extra_sorts is not None:
        out.append("varsorts=" + _fmt_sorts(rule.extra_sorts))
    return out


def serialize_problem(problem: ILPProblem) -> str:
    """Canonical text form; parse_problem(serialize_problem(p)) == p."""
    lines: list[str] = []
    for c in problem.constants:
        lines.append(f"constant {c.name}" + (f" :{c.sort}" if c.sort else ""))
    names = [c.name for c in problem.constants]
    for f in problem.functions:
        sig = f" :{f.domain or ''}->{f.codomain or ''}" if (f.domain or f.codomain) else ""
        body = ", ".join(f"{names[a]} -> {names[b]}" for a, b in f.table)
        lines.append(f"function {f.name}{sig} {{ {body} }}")
    for s in problem.signatures:
        parts = [f"pred {s.name}/{s.arity} {s.kind.value}"]
        if s.kind is PredKind.INTENSIONAL:
            rules = problem.rules[s.name]
            parts += _fmt_rule_opts(rules[0])
            if s.name in problem.tmax_override:
                parts.append(f"tmax_override={problem.tmax_override[s.name]}")
            if problem.amalgamate_for(s.name) is not Amalgamate.OR:
                parts.append(f"amalgamate={problem.amalgamate_for(s.name).value}")
            if s.name in problem.facts_allowed:
                parts.append("facts=true")
        if s.arg_sorts is not None:
            parts.append("sorts=" + _fmt_sorts(s.arg_sorts))
        lines.append(" ".join(parts))
        if s.kind is PredKind.INTENSIONAL:
            for r in problem.rules[s.name][1:]:
                lines.append(" ".join([f"rule {s.name}"] + _fmt_rule_opts(r)))
    for kind, group in (("fact", problem.background), ("pos", problem.positives), ("neg", problem.negatives)):
        for a in sorted(group):
            lines.append(f"{kind} {problem.format_atom(a)}.")
    lines.append(f"param tmax={problem.t_max}")
    return "\n".join(lines) + "\n"


def load_problem(path) -> ILPProblem:
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read())
