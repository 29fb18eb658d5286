"""Lexer, parser and static checks for the loop-free probabilistic language.

Concrete syntax::

    x = gm([0.5, 0.5], [0., 1.], [0., 0.]);   # random assignment
    y = 2*x - _c + 1;                          # linear expression
    z = x * y;                                 # product of two variables
    if (x < _theta) { y = -1; } else { y = 1; }
    observe(y >= 0);
    skip;

Parameters are written with a leading underscore in source and declared in a
sidecar file with one ``name init lo hi`` record per line.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .diff import Domain, ParamStore, SimplexGroup
from .errors import ParseError, ValidationError

__all__ = [
    "Real",
    "Linear",
    "Product",
    "TrueP",
    "FalseP",
    "Cmp",
    "And",
    "Skip",
    "Assign",
    "RndAssign",
    "If",
    "Observe",
    "ParamDecl",
    "Ast",
    "parse",
    "pretty",
    "validate",
    "parse_params",
    "format_params",
    "make_store",
    "load_program",
]

KEYWORDS = {"skip", "if", "else", "observe", "gm", "true", "false"}
CMP_OPS = ("<", "<=", "==", ">=", ">")


# AST ------------------------------------------------------------------------

@dataclass(frozen=True)
class Real:
    """A literal, or ``scale * _param`` when ``param`` is set."""

    value: float
    param: str | None = None

    @property
    def is_literal(self) -> bool:
        return self.param is None

    def negate(self) -> "Real":
        return Real(-self.value, self.param)


@dataclass(frozen=True)
class Linear:
    terms: tuple[tuple[Real, str], ...]
    const: Real = Real(0.0)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.terms)


@dataclass(frozen=True)
class Product:
    a: str
    b: str

    @property
    def variables(self) -> tuple[str, ...]:
        return (self.a, self.b)


Expr = Union[Linear, Product]


@dataclass(frozen=True)
class TrueP:
    pass


@dataclass(frozen=True)
class FalseP:
    pass


@dataclass(frozen=True)
class Cmp:
    var: str
    op: str
    bound: Real


@dataclass(frozen=True)
class And:
    left: "Pred"
    right: "Pred"


Pred = Union[TrueP, FalseP, Cmp, And]


@dataclass(frozen=True)
class Skip:
    pass


@dataclass(frozen=True)
class Assign:
    var: str
    expr: Expr


@dataclass(frozen=True)
class RndAssign:
    var: str
    weights: tuple[Real, ...]
    means: tuple[Real, ...]
    stds: tuple[Real, ...]


@dataclass(frozen=True)
class If:
    pred: Pred
    then: tuple
    orelse: tuple = ()


@dataclass(frozen=True)
class Observe:
    pred: Pred


Stmt = Union[Skip, Assign, RndAssign, If, Observe]


@dataclass(frozen=True)
class ParamDecl:
    name: str
    init: float
    lo: float = -math.inf
    hi: float = math.inf


@dataclass(frozen=True)
class Ast:
    var_names: tuple[str, ...]
    body: tuple
    params: tuple[ParamDecl, ...] = ()
    param_refs: tuple[str, ...] = field(default=(), compare=False)

    def index(self, var: str) -> int:
        return self.var_names.index(var)


# lexer ----------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>(\#|//)[^\n]*)
  | (?P<number>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<param>_[A-Za-z0-9_]+)
  | (?P<ident>[A-Za-z][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|[-+*=<>;,()\[\]{}])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            if kind == "ident" and text in KEYWORDS:
                kind = text
            tokens.append(Token(kind, text, line, pos - line_start + 1))
        newlines = text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + text.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# parser ---------------------------------------------------------------------

class _Parser:
    def __init__(self, source: str, declared: Mapping[str, ParamDecl] | None):
        self.toks = tokenize(source)
        self.i = 0
        self.declared = declared
        self.vars: list[str] = []
        self.refs: list[str] = []

    # helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        return ParseError(message, tok.line, tok.col)

    def accept(self, text: str) -> Token | None:
        tok = self.tok
        if tok.text == text and tok.kind != "eof":
            self.i += 1
            return tok
        return None

    def expect(self, text: str) -> Token:
        tok = self.accept(text)
        if tok is None:
            found = self.tok.text or "end of input"
            raise self.error(f"expected {text!r}, found {found!r}")
        return tok

    def use_var(self, tok: Token) -> str:
        if tok.text not in self.vars:
            raise self.error(f"unknown identifier {tok.text!r}", tok)
        return tok.text

    def use_param(self, tok: Token) -> str:
        name = tok.text[1:]
        if self.declared is not None and name not in self.declared:
            raise self.error(f"unknown parameter {tok.text!r}", tok)
        if name not in self.refs:
            self.refs.append(name)
        return name

    # grammar
    def program(self) -> tuple:
        body = []
        while self.tok.kind != "eof":
            body.append(self.statement())
        return tuple(body)

    def block(self) -> tuple:
        self.expect("{")
        body = []
        while not self.accept("}"):
            if self.tok.kind == "eof":
                raise self.error("unterminated block")
            body.append(self.statement())
        return tuple(body)

    def statement(self) -> Stmt:
        tok = self.tok
        if self.accept("skip"):
            self.expect(";")
            return Skip()
        if self.accept("observe"):
            self.expect("(")
            pred = self.predicate(guard=False)
            self.expect(")")
            self.expect(";")
            return Observe(pred)
        if self.accept("if"):
            self.expect("(")
            pred = self.predicate(guard=True)
            self.expect(")")
            then = self.block()
            orelse = self.block() if self.accept("else") else ()
            self.accept(";")
            return If(pred, then, orelse)
        if tok.kind == "ident":
            self.i += 1
            self.expect("=")
            if self.tok.kind == "gm":
                stmt = self.gm(tok.text)
            else:
                stmt = Assign(tok.text, self.expression())
            self.expect(";")
            if tok.text not in self.vars:
                self.vars.append(tok.text)
            return stmt
        raise self.error(f"unexpected token {tok.text or 'end of input'!r}")

    def gm(self, target: str) -> RndAssign:
        self.expect("gm")
        self.expect("(")
        w = self.real_list()
        self.expect(",")
        m = self.real_list()
        self.expect(",")
        s = self.real_list()
        self.expect(")")
        if not (len(w) == len(m) == len(s)) or not w:
            raise self.error("gm lists must be non-empty and of equal length")
        return RndAssign(target, w, m, s)

    def real_list(self) -> tuple[Real, ...]:
        self.expect("[")
        items = [self.real()]
        while self.accept(","):
            items.append(self.real())
        self.expect("]")
        return tuple(items)

    def real(self) -> Real:
        """[sign] (number | param | number '*' param)"""
        sign = -1.0 if self.accept("-") else 1.0
        if not sign < 0:
            self.accept("+")
        tok = self.tok
        if tok.kind == "number":
            self.i += 1
            value = sign * float(tok.text)
            if self.tok.text == "*" and self.toks[self.i + 1].kind == "param":
                self.i += 1
                return Real(value, self.use_param(self.advance()))
            return Real(value)
        if tok.kind == "param":
            self.i += 1
            return Real(sign, self.use_param(tok))
        if tok.kind == "ident" and tok.text == "inf":
            self.i += 1
            return Real(sign * math.inf)
        raise self.error(f"expected a number or parameter, found {tok.text!r}")

    def advance(self) -> Token:
        tok = self.tok
        self.i += 1
        return tok

    def expression(self) -> Expr:
        start = self.tok
        terms: list[tuple[Real, str]] = []
        const = 0.0
        const_param: Real | None = None
        first = True
        n_terms = 0
        product: Product | None = None
        while True:
            if first:
                sign = -1.0 if self.accept("-") else 1.0
            elif self.accept("+"):
                sign = 1.0
            elif self.accept("-"):
                sign = -1.0
            else:
                break
            first = False
            n_terms += 1
            coef, var, prod = self.term()
            if prod is not None:
                if sign < 0:
                    raise self.error("a product of variables cannot be negated", start)
                product = prod
                continue
            coef = coef if sign > 0 else coef.negate()
            if var is not None:
                terms.append((coef, var))
            elif coef.param is None:
                const += coef.value
            elif const_param is None:
                const_param = coef
            else:
                raise self.error("at most one parameter constant per expression", start)
        if product is not None:
            if n_terms != 1:
                raise self.error("a product of two variables must be the whole expression", start)
            return product
        if const_param is not None:
            if const != 0.0:
                raise self.error("cannot combine a parameter constant with a literal constant", start)
            return Linear(tuple(terms), const_param)
        return Linear(tuple(terms), Real(const))

    def term(self) -> tuple[Real, str | None, Product | None]:
        """A product of factors: at most one coefficient and at most two variables."""
        factors = [self.factor()]
        while self.accept("*"):
            factors.append(self.factor())
        coefs = [f for f in factors if isinstance(f, Real)]
        names = [f for f in factors if isinstance(f, str)]
        if len(names) == 2 and not coefs:
            return Real(1.0), None, Product(names[0], names[1])
        if len(names) > 1:
            raise self.error("products of variables cannot carry coefficients")
        params = [c for c in coefs if c.param is not None]
        if len(params) > 1:
            raise self.error("products of parameters are not expressions of the language")
        scale = 1.0
        for c in coefs:
            scale *= c.value
        coef = Real(scale, params[0].param if params else None)
        return coef, (names[0] if names else None), None

    def factor(self):
        tok = self.tok
        if tok.kind == "number":
            self.i += 1
            return Real(float(tok.text))
        if tok.kind == "param":
            self.i += 1
            return Real(1.0, self.use_param(tok))
        if tok.kind == "ident":
            self.i += 1
            return self.use_var(tok)
        raise self.error(f"unexpected token {tok.text or 'end of input'!r} in expression")

    def predicate(self, guard: bool) -> Pred:
        if self.accept("true"):
            return TrueP()
        if self.accept("false"):
            return FalseP()
        tok = self.tok
        if tok.kind != "ident":
            raise self.error("expected a variable in predicate")
        self.i += 1
        var = self.use_var(tok)
        op_tok = self.tok
        if op_tok.text not in CMP_OPS:
            raise self.error(f"expected a comparison, found {op_tok.text!r}")
        self.i += 1
        if guard and op_tok.text == "==":
            raise self.error("equality not allowed in if guard", op_tok)
        return Cmp(var, op_tok.text, self.real())


def parse(source: str, params: Iterable[ParamDecl] | ParamStore | None = None) -> Ast:
    """Parse program text.

    When ``params`` is given, references to undeclared parameters are errors
    and the declarations are attached to the returned Ast.
    """
    declared = _decl_map(params) if params is not None else None
    p = _Parser(source, declared)
    body = p.program()
    decls: tuple[ParamDecl, ...] = ()
    if declared is not None:
        decls = tuple(declared.values())
    return Ast(tuple(p.vars), body, decls, tuple(p.refs))


def _decl_map(params) -> dict[str, ParamDecl]:
    if isinstance(params, ParamStore):
        return {
            n: ParamDecl(n, params.value(n), params.domains[n].lo, params.domains[n].hi)
            for n in params.names
        }
    out = {}
    for d in params:
        out[d.name.lstrip("_")] = ParamDecl(d.name.lstrip("_"), d.init, d.lo, d.hi)
    return out


# pretty printer -------------------------------------------------------------

def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _real(r: Real) -> str:
    if r.param is None:
        return _num(r.value)
    if r.value == 1.0:
        return f"_{r.param}"
    if r.value == -1.0:
        return f"-_{r.param}"
    return f"{_num(r.value)}*_{r.param}"


def _expr(e: Expr) -> str:
    if isinstance(e, Product):
        return f"{e.a}*{e.b}"
    items = [(c, f"*{v}") for c, v in e.terms]
    if not e.const.is_literal or e.const.value != 0.0 or not items:
        items.append((e.const, ""))
    out = ""
    for k, (c, tail) in enumerate(items):
        neg = c.value < 0 or (c.value == 0 and math.copysign(1.0, c.value) < 0)
        body = _real(c.negate() if neg else c) + tail
        if k == 0:
            out = ("-" if neg else "") + body
        else:
            out += (" - " if neg else " + ") + body
    return out


def _pred(p: Pred) -> str:
    if isinstance(p, TrueP):
        return "true"
    if isinstance(p, FalseP):
        return "false"
    if isinstance(p, Cmp):
        return f"{p.var} {p.op} {_real(p.bound)}"
    raise TypeError(f"cannot print {p!r}")


def _stmts(body, indent: int) -> list[str]:
    pad = "    " * indent
    lines = []
    for s in body:
        if isinstance(s, Skip):
            lines.append(f"{pad}skip;")
        elif isinstance(s, Assign):
            lines.append(f"{pad}{s.var} = {_expr(s.expr)};")
        elif isinstance(s, RndAssign):
            lists = [", ".join(_real(r) for r in xs) for xs in (s.weights, s.means, s.stds)]
            lines.append(f"{pad}{s.var} = gm([{lists[0]}], [{lists[1]}], [{lists[2]}]);")
        elif isinstance(s, Observe):
            lines.append(f"{pad}observe({_pred(s.pred)});")
        elif isinstance(s, If):
            lines.append(f"{pad}if ({_pred(s.pred)}) {{")
            lines += _stmts(s.then, indent + 1)
            lines.append(f"{pad}}} else {{")
            lines += _stmts(s.orelse, indent + 1)
            lines.append(f"{pad}}}")
    return lines


def pretty(ast: Ast) -> str:
    return "\n".join(_stmts(ast.body, 0)) + "\n"


# validation -----------------------------------------------------------------

def _walk(body):
    for s in body:
        yield s
        if isinstance(s, If):
            yield from _walk(s.then)
            yield from _walk(s.orelse)


def _reals(stmt) -> Iterable[Real]:
    if isinstance(stmt, Assign) and isinstance(stmt.expr, Linear):
        yield from (c for c, _ in stmt.expr.terms)
        yield stmt.expr.const
    elif isinstance(stmt, RndAssign):
        yield from stmt.weights + stmt.means + stmt.stds
    elif isinstance(stmt, (If, Observe)) and isinstance(stmt.pred, Cmp):
        yield stmt.pred.bound


def validate(ast: Ast, params: ParamStore) -> None:
    """Check static constraints; register parameterised weight vectors.

    Raises ValidationError listing every failed check.
    """
    problems: list[str] = []
    for name in ast.param_refs:
        if name not in params:
            problems.append(f"parameter _{name} is not declared")
    for name in params.names:
        v, dom = params.value(name), params.domains[name]
        if not math.isfinite(v):
            problems.append(f"parameter _{name} has non-finite value {v}")
        elif not (dom.lo <= v <= dom.hi):
            problems.append(f"parameter _{name}={v} outside its domain [{dom.lo}, {dom.hi}]")
        if dom.lo > dom.hi:
            problems.append(f"parameter _{name} has an empty domain")

    def val(r: Real) -> float:
        if r.param is None:
            return r.value
        return r.value * params.value(r.param) if r.param in params else math.nan

    groups: list[SimplexGroup] = []
    for stmt in _walk(ast.body):
        for r in _reals(stmt):
            if r.param is None and not math.isfinite(r.value):
                problems.append(f"non-finite literal {r.value} in {type(stmt).__name__}")
        if isinstance(stmt, (If,)) and isinstance(stmt.pred, Cmp) and stmt.pred.op == "==":
            problems.append("equality not allowed in if guard")
        if not isinstance(stmt, RndAssign):
            continue
        where = f"gm for {stmt.var}"
        for r in stmt.stds:
            if r.param is None and r.value < 0:
                problems.append(f"{where}: negative std {r.value}")
            elif r.param is not None:
                if r.value < 0:
                    problems.append(f"{where}: std parameter _{r.param} is negated")
                elif r.param in params and params.domains[r.param].lo < 0:
                    problems.append(f"{where}: std parameter _{r.param} domain allows negative values")
        for r in stmt.weights:
            if r.param is None and r.value < 0:
                problems.append(f"{where}: negative weight {r.value}")
            elif r.param is not None and r.value != 1.0:
                problems.append(f"{where}: weight parameter _{r.param} must appear unscaled")
        literal = sum(r.value for r in stmt.weights if r.param is None)
        names = tuple(r.param for r in stmt.weights if r.param is not None)
        if not names:
            if abs(literal - 1.0) > 1e-9:
                problems.append(f"{where}: weights sum to {literal:.12g}")
        else:
            if literal > 1.0 + 1e-9:
                problems.append(f"{where}: literal weights sum to {literal:.12g} > 1")
            total = sum(val(r) for r in stmt.weights)
            if math.isfinite(total) and abs(total - 1.0) > 1e-6:
                problems.append(f"{where}: weights sum to {total:.12g}")
            groups.append(SimplexGroup(names, literal))
    if problems:
        raise ValidationError(problems)
    params.simplex_groups = groups


# parameter files --------------------------------------------------------------

def _float(text: str) -> float:
    t = text.lower()
    if t in ("inf", "+inf", "infinity"):
        return math.inf
    if t in ("-inf", "-infinity"):
        return -math.inf
    return float(text)


def parse_params(text: str) -> list[ParamDecl]:
    decls = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError("expected 'name init lo hi'", lineno, 1)
        name = fields[0].lstrip("_")
        try:
            init, lo, hi = (_float(f) for f in fields[1:])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, 1) from None
        if name in seen:
            raise ParseError(f"duplicate parameter {name}", lineno, 1)
        seen.add(name)
        decls.append(ParamDecl(name, init, lo, hi))
    return decls


def format_params(store: ParamStore) -> str:
    lines = []
    for n in store.names:
        d = store.domains[n]
        lines.append(f"{n} {_num(store.value(n))} {_num(d.lo)} {_num(d.hi)}")
    return "\n".join(lines) + ("\n" if lines else "")


def make_store(decls: Sequence[ParamDecl]) -> ParamStore:
    return ParamStore((d.name, d.init, Domain(d.lo, d.hi)) for d in decls)


def load_program(source: str, param_text: str = "") -> tuple[Ast, ParamStore]:
    """Parse and validate a program together with its parameter file text."""
    decls = parse_params(param_text)
    ast = parse(source, decls)
    store = make_store(decls)
    validate(ast, store)
    return ast, store


def read_program(program_path: str | Path, params_path: str | Path | None = None):
    source = Path(program_path).read_text(encoding="utf-8")
    ptext = Path(params_path).read_text(encoding="utf-8") if params_path else ""
    return load_program(source, ptext)
