"""Declarative model specification: a line-oriented DSL, its parser and
printer, and the block-assignment pass that plans sampling kernels.

Syntax (one statement per line, `#` comments):

    model eight_schools
    data J : int = 8
    data y : real[J]
    param mu : real ~ normal(0, 5)
    param tau : real<lower=0> ~ half_cauchy(0, 5)
    param theta : real[J] ~ normal(mu, tau)
    latent z : int[N]<0..1> ~ categorical(w)
    det f = mu + tau * eta
    y ~ normal(theta, sigma)
    block tau : univariate_slice
    block (mu, tau) : joint_nuts
    order mu, tau, theta

Arguments are small expressions: numbers, names, literal vectors,
`a + b`, `a * b`, `sqrt(v)`, `inv_sqrt(v)`, `X @ beta`, and component
indexing `mu[z]` (or `mu[z[i]]` in an indexed statement). The parser is
total: malformed input produces positioned diagnostics, never a crash.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .exprs import Add, CompRef, Const, Expr, InvSqrt, MatMul, Mul, Ref, Sqrt
from .factors import FACTOR_CLASSES

DIST_ARITY = {
    "normal": 2, "laplace": 2, "cauchy": 2, "half_cauchy": 2,
    "inverse_gamma": 2, "gamma": 2, "beta": 2, "uniform": 2,
    "bernoulli": 1, "categorical": 1, "dirichlet": None,
    "markov_chain": 2, "stick_breaking": 1,
}

KERNEL_CATALOG = (
    "nuts", "joint_nuts", "univariate_slice", "categorical_gibbs", "ffbs",
    "stick_breaking", "normal_mean_gibbs", "inv_gamma_gibbs", "gamma_gibbs",
    "beta_gibbs", "dirichlet_gibbs",
)

CONJUGATE_KERNELS = ("normal_mean_gibbs", "inv_gamma_gibbs", "gamma_gibbs",
                     "beta_gibbs", "dirichlet_gibbs")


@dataclass
class Diagnostic:
    code: str
    line: int
    col: int
    message: str

    def __str__(self):
        return f"{self.code}:{self.line}:{self.col}: {self.message}"


class SpecError(Exception):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass
class DataDecl:
    name: str
    kind: str                  # "real" | "int"
    dims: tuple = ()           # ints or names of int scalar data
    values: object = None      # optional inline payload
    line: int = 0


@dataclass
class FactorStmt:
    child: str
    dist: str
    args: list
    line: int = 0
    col: int = 0


@dataclass
class ParamDecl:
    name: str
    dims: tuple
    support: tuple             # ("unbounded",) etc.
    prior: FactorStmt = None
    line: int = 0


@dataclass
class LatentDecl:
    name: str
    dims: tuple
    kind: str = "int"          # "int" | "real"
    lo: int = 0
    hi: int = 0
    prior: FactorStmt = None
    line: int = 0

    @property
    def support(self):
        if self.kind == "real":
            return ("unbounded",)
        return ("integer-range", self.lo, self.hi)


@dataclass
class DetDecl:
    name: str
    expr: Expr = None
    line: int = 0


@dataclass
class BlockStmt:
    params: tuple
    kernel: str
    line: int = 0


@dataclass
class ModelSpec:
    name: str = "model"
    data: list = field(default_factory=list)
    params: list = field(default_factory=list)
    latents: list = field(default_factory=list)
    dets: list = field(default_factory=list)
    likelihoods: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    order: tuple = None

    def declared(self):
        names = [d.name for d in self.data] + [p.name for p in self.params]
        names += [z.name for z in self.latents] + [d.name for d in self.dets]
        return names

    def find_param(self, name):
        for p in self.params:
            if p.name == name:
                return p
        return None

    def find_latent(self, name):
        for z in self.latents:
            if z.name == name:
                return z
        return None


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>\.\.|[@:~=<>,()\[\]+*])"
)


@dataclass
class Token:
    kind: str
    text: str
    col: int


def _tokenize(line_text, lineno, diags):
    tokens = []
    pos = 0
    text = line_text.split("#", 1)[0]
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if not m:
            diags.append(Diagnostic("E_LEX", lineno, pos + 1,
                                    f"unexpected character {text[pos]!r}"))
            return None
        kind = m.lastgroup
        tokens.append(Token(kind, m.group(), pos + 1))
        pos = m.end()
    return tokens


class _Cursor:
    def __init__(self, tokens, lineno):
        self.tokens = tokens
        self.lineno = lineno
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is not None:
            self.i += 1
        return tok

    def col(self):
        tok = self.peek()
        if tok is not None:
            return tok.col
        return self.tokens[-1].col + len(self.tokens[-1].text) if self.tokens else 1

    def expect(self, text):
        tok = self.peek()
        if tok is None or tok.text != text:
            raise _LineError(self.lineno, self.col(), f"expected {text!r}")
        return self.next()

    def expect_ident(self):
        tok = self.peek()
        if tok is None or tok.kind != "ident":
            raise _LineError(self.lineno, self.col(), "expected a name")
        return self.next()

    def expect_num(self):
        tok = self.peek()
        if tok is None or tok.kind != "num":
            raise _LineError(self.lineno, self.col(), "expected a number")
        return self.next()

    def at_end(self):
        return self.i >= len(self.tokens)

    def require_end(self):
        if not self.at_end():
            raise _LineError(self.lineno, self.col(),
                             f"unexpected trailing input {self.peek().text!r}")


class _LineError(Exception):
    def __init__(self, line, col, message, code="E_SYNTAX"):
        self.diag = Diagnostic(code, line, col, message)
        super().__init__(message)


# -- expression parsing ------------------------------------------------------

def _parse_expr(cur, index_var):
    left = _parse_prod(cur, index_var)
    while not cur.at_end() and cur.peek().text == "+":
        cur.next()
        left = Add(left, _parse_prod(cur, index_var))
    return left


def _parse_prod(cur, index_var):
    left = _parse_atom(cur, index_var)
    while not cur.at_end() and cur.peek().text == "*":
        cur.next()
        left = Mul(left, _parse_atom(cur, index_var))
    return left


def _parse_atom(cur, index_var):
    tok = cur.peek()
    if tok is None:
        raise _LineError(cur.lineno, cur.col(), "expected an expression")
    if tok.kind == "num":
        cur.next()
        return Const(float(tok.text))
    if tok.text == "[":
        return Const(_parse_literal(cur))
    if tok.kind == "ident":
        name = cur.next().text
        if name in ("sqrt", "inv_sqrt") and not cur.at_end() and cur.peek().text == "(":
            cur.next()
            inner = _parse_expr(cur, index_var)
            cur.expect(")")
            return Sqrt(inner) if name == "sqrt" else InvSqrt(inner)
        if not cur.at_end() and cur.peek().text == "@":
            cur.next()
            rhs = cur.expect_ident()
            return MatMul(name, rhs.text)
        if not cur.at_end() and cur.peek().text == "[":
            cur.next()
            idx = cur.expect_ident().text
            if not cur.at_end() and cur.peek().text == "[":
                cur.next()
                sub = cur.expect_ident().text
                cur.expect("]")
                cur.expect("]")
                if sub != index_var:
                    raise _LineError(cur.lineno, cur.col(),
                                     f"inner index must be the statement index, got {sub!r}")
                return CompRef(name, idx)
            cur.expect("]")
            if index_var is not None and idx == index_var:
                return Ref(name)      # elementwise use of the statement index
            return CompRef(name, idx)  # vector gather by an integer node
        return Ref(name)
    raise _LineError(cur.lineno, tok.col, f"unexpected token {tok.text!r} in expression")


def _parse_literal(cur):
    """Literal vector or matrix: [1, 2] or [[1, 2], [3, 4]]."""
    cur.expect("[")
    rows, flat = [], []
    is_matrix = cur.peek() is not None and cur.peek().text == "["
    while True:
        if is_matrix:
            cur.expect("[")
            row = [float(cur.expect_num().text)]
            while cur.peek() is not None and cur.peek().text == ",":
                cur.next()
                row.append(float(cur.expect_num().text))
            cur.expect("]")
            rows.append(row)
        else:
            flat.append(float(cur.expect_num().text))
        tok = cur.peek()
        if tok is not None and tok.text == ",":
            cur.next()
            continue
        break
    cur.expect("]")
    return np.array(rows) if is_matrix else np.array(flat)


def _parse_dist(cur, index_var, diags, lineno):
    tok = cur.expect_ident()
    dist = tok.text
    if dist not in FACTOR_CLASSES:
        raise _LineError(lineno, tok.col, f"unknown distribution {dist!r}",
                         code="E_UNKNOWN_DIST")
    cur.expect("(")
    args = []
    if cur.peek() is not None and cur.peek().text != ")":
        args.append(_parse_expr(cur, index_var))
        while cur.peek() is not None and cur.peek().text == ",":
            cur.next()
            args.append(_parse_expr(cur, index_var))
    cur.expect(")")
    arity = DIST_ARITY[dist]
    if dist == "dirichlet":
        # concentrations may come as one vector or K scalars
        if len(args) > 1:
            if not all(isinstance(a, Const) and a.value.ndim == 0 for a in args):
                raise _LineError(lineno, tok.col,
                                 "dirichlet takes one vector or scalar constants")
            args = [Const(np.array([float(a.value) for a in args]))]
    elif arity is not None and len(args) != arity:
        raise _LineError(lineno, tok.col,
                         f"{dist} takes {arity} argument(s), got {len(args)}")
    return dist, args


def _parse_shape(cur):
    dims = []
    if cur.peek() is not None and cur.peek().text == "[":
        cur.next()
        while True:
            tok = cur.peek()
            if tok is not None and tok.kind == "num":
                cur.next()
                dims.append(int(float(tok.text)))
            else:
                dims.append(cur.expect_ident().text)
            if cur.peek() is not None and cur.peek().text == ",":
                cur.next()
                continue
            break
        cur.expect("]")
    return tuple(dims)


def _parse_bounds(cur):
    """<lower=a> or <lower=a, upper=b>."""
    cur.expect("<")
    bounds = {}
    while True:
        key = cur.expect_ident().text
        if key not in ("lower", "upper"):
            raise _LineError(cur.lineno, cur.col(), f"unknown bound {key!r}")
        cur.expect("=")
        bounds[key] = float(cur.expect_num().text)
        if cur.peek() is not None and cur.peek().text == ",":
            cur.next()
            continue
        break
    cur.expect(">")
    return bounds


# -- statement parsing -------------------------------------------------------

def parse_spec(text):
    """Parse DSL source. Returns (ModelSpec | None, [Diagnostic]).

    The spec is returned only when there are no diagnostics.
    """
    spec = ModelSpec()
    diags = []
    saw_statement = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, diags)
        if tokens is None or not tokens:
            continue
        saw_statement = True
        cur = _Cursor(tokens, lineno)
        head = tokens[0].text
        try:
            if head == "model":
                cur.next()
                spec.name = cur.expect_ident().text
                cur.require_end()
            elif head == "data":
                _parse_data(cur, spec, diags)
            elif head == "param":
                _parse_param(cur, spec, diags)
            elif head == "latent":
                _parse_latent(cur, spec, diags)
            elif head == "det":
                _parse_det(cur, spec, diags)
            elif head == "block":
                _parse_block(cur, spec, diags)
            elif head == "order":
                cur.next()
                names = [cur.expect_ident().text]
                while cur.peek() is not None and cur.peek().text == ",":
                    cur.next()
                    names.append(cur.expect_ident().text)
                cur.require_end()
                spec.order = tuple(names)
            else:
                _parse_factor_stmt(cur, spec, diags)
        except _LineError as err:
            diags.append(err.diag)
    if not saw_statement:
        diags.append(Diagnostic("E_EMPTY", 1, 1, "no model statements found"))
    if not diags:
        _check_semantics(spec, diags)
    if diags:
        return None, diags
    return spec, []


def _parse_data(cur, spec, diags):
    cur.next()
    name = cur.expect_ident().text
    cur.expect(":")
    kind_tok = cur.expect_ident()
    if kind_tok.text not in ("real", "int"):
        raise _LineError(cur.lineno, kind_tok.col, "data type must be real or int")
    dims = _parse_shape(cur)
    values = None
    if cur.peek() is not None and cur.peek().text == "=":
        cur.next()
        if cur.peek() is not None and cur.peek().text == "[":
            values = _parse_literal(cur)
        else:
            values = float(cur.expect_num().text)
            if kind_tok.text == "int":
                values = int(values)
    cur.require_end()
    spec.data.append(DataDecl(name, kind_tok.text, dims, values, cur.lineno))


def _parse_param(cur, spec, diags):
    cur.next()
    name = cur.expect_ident().text
    cur.expect(":")
    type_tok = cur.expect_ident()
    if type_tok.text == "simplex":
        dims = _parse_shape(cur)
        if len(dims) != 1:
            raise _LineError(cur.lineno, type_tok.col, "simplex needs one dimension")
        support = ("simplex", dims[0])
    elif type_tok.text == "real":
        bounds = {}
        if cur.peek() is not None and cur.peek().text == "<":
            bounds = _parse_bounds(cur)
        dims = _parse_shape(cur)
        if not bounds:
            support = ("unbounded",)
        elif set(bounds) == {"lower"} and bounds["lower"] == 0:
            support = ("positive",)
        elif set(bounds) == {"lower", "upper"}:
            support = ("interval", bounds["lower"], bounds["upper"])
        else:
            raise _LineError(cur.lineno, type_tok.col,
                             "bounds must be lower=0 or lower+upper")
    else:
        raise _LineError(cur.lineno, type_tok.col,
                         f"unknown parameter type {type_tok.text!r}")
    cur.expect("~")
    dist, args = _parse_dist(cur, None, diags, cur.lineno)
    cur.require_end()
    prior = FactorStmt(name, dist, args, cur.lineno)
    spec.params.append(ParamDecl(name, dims, support, prior, cur.lineno))


def _parse_latent(cur, spec, diags):
    cur.next()
    name = cur.expect_ident().text
    cur.expect(":")
    kind_tok = cur.expect_ident()
    if kind_tok.text not in ("int", "real"):
        raise _LineError(cur.lineno, kind_tok.col, "latent type must be int or real")
    dims = _parse_shape(cur)
    lo = hi = 0
    if kind_tok.text == "int":
        cur.expect("<")
        lo = int(float(cur.expect_num().text))
        cur.expect("..")
        hi = int(float(cur.expect_num().text))
        cur.expect(">")
    cur.expect("~")
    dist, args = _parse_dist(cur, None, diags, cur.lineno)
    cur.require_end()
    prior = FactorStmt(name, dist, args, cur.lineno)
    spec.latents.append(LatentDecl(name, dims, kind_tok.text, lo, hi, prior, cur.lineno))


def _parse_det(cur, spec, diags):
    cur.next()
    name = cur.expect_ident().text
    cur.expect("=")
    expr = _parse_expr(cur, None)
    cur.require_end()
    spec.dets.append(DetDecl(name, expr, cur.lineno))


def _parse_block(cur, spec, diags):
    cur.next()
    if cur.peek() is not None and cur.peek().text == "(":
        cur.next()
        params = [cur.expect_ident().text]
        while cur.peek() is not None and cur.peek().text == ",":
            cur.next()
            params.append(cur.expect_ident().text)
        cur.expect(")")
    else:
        params = [cur.expect_ident().text]
    cur.expect(":")
    kernel_tok = cur.expect_ident()
    cur.require_end()
    if kernel_tok.text not in KERNEL_CATALOG:
        raise _LineError(cur.lineno, kernel_tok.col,
                         f"unknown kernel {kernel_tok.text!r}", code="E_UNKNOWN_KERNEL")
    spec.blocks.append(BlockStmt(tuple(params), kernel_tok.text, cur.lineno))


def _parse_factor_stmt(cur, spec, diags):
    tok = cur.expect_ident()
    child = tok.text
    index_var = None
    if cur.peek() is not None and cur.peek().text == "[":
        cur.next()
        index_var = cur.expect_ident().text
        cur.expect("]")
    cur.expect("~")
    dist, args = _parse_dist(cur, index_var, diags, cur.lineno)
    cur.require_end()
    spec.likelihoods.append(FactorStmt(child, dist, args, cur.lineno, tok.col))


# -- semantic checks ---------------------------------------------------------

def _check_semantics(spec, diags):
    declared = spec.declared()
    dupes = {n for n in declared if declared.count(n) > 1}
    for name in sorted(dupes):
        diags.append(Diagnostic("E_DUPLICATE", 1, 1, f"name {name!r} declared more than once"))
    known = set(declared)

    def check_refs(expr, line):
        for ref in sorted(expr.refs()):
            if ref not in known:
                diags.append(Diagnostic("E_UNDECLARED", line, 1,
                                        f"reference to undeclared name {ref!r}"))

    for stmt in spec.likelihoods:
        if stmt.child not in known:
            diags.append(Diagnostic("E_UNDECLARED", stmt.line, stmt.col,
                                    f"factor for undeclared name {stmt.child!r}"))
        for arg in stmt.args:
            check_refs(arg, stmt.line)
    for p in spec.params:
        for arg in p.prior.args:
            check_refs(arg, p.line)
    for z in spec.latents:
        for arg in z.prior.args:
            check_refs(arg, z.line)
    for d in spec.dets:
        check_refs(d.expr, d.line)
    for b in spec.blocks:
        for name in b.params:
            if spec.find_param(name) is None and spec.find_latent(name) is None:
                diags.append(Diagnostic("E_UNDECLARED", b.line, 1,
                                        f"block for undeclared parameter {name!r}"))
    if spec.order:
        owned = {p.name for p in spec.params} | {z.name for z in spec.latents}
        for name in spec.order:
            if name not in owned:
                diags.append(Diagnostic("E_UNDECLARED", 1, 1,
                                        f"order names unknown parameter {name!r}"))
    seen_children = {}
    for stmt in spec.likelihoods:
        if stmt.child in seen_children:
            diags.append(Diagnostic("E_DUPLICATE", stmt.line, stmt.col,
                                    f"node {stmt.child!r} has more than one factor"))
        seen_children[stmt.child] = stmt
        if spec.find_param(stmt.child) is not None:
            diags.append(Diagnostic("E_DUPLICATE", stmt.line, stmt.col,
                                    f"{stmt.child!r} already has a prior factor"))


# -- printing ----------------------------------------------------------------

def _format_support(support, dims):
    shape = "[" + ", ".join(str(d) for d in dims) + "]" if dims else ""
    kind = support[0]
    if kind == "simplex":
        return f"simplex[{support[1]}]"
    if kind == "unbounded":
        return f"real{shape}"
    if kind == "positive":
        return f"real<lower=0>{shape}"
    lo, hi = support[1], support[2]
    return f"real<lower={lo:g}, upper={hi:g}>{shape}"


def _format_values(values):
    if values is None:
        return ""
    if isinstance(values, (int, float)):
        return f" = {values:g}"
    arr = np.asarray(values)
    if arr.ndim == 1:
        return " = [" + ", ".join(format(v, "g") for v in arr) + "]"
    rows = ["[" + ", ".join(format(v, "g") for v in row) + "]" for row in arr]
    return " = [" + ", ".join(rows) + "]"


def print_spec(spec) -> str:
    lines = [f"model {spec.name}"]
    for d in spec.data:
        shape = "[" + ", ".join(str(x) for x in d.dims) + "]" if d.dims else ""
        lines.append(f"data {d.name} : {d.kind}{shape}{_format_values(d.values)}")
    for p in spec.params:
        args = ", ".join(repr(a) for a in p.prior.args)
        lines.append(f"param {p.name} : {_format_support(p.support, p.dims)}"
                     f" ~ {p.prior.dist}({args})")
    for z in spec.latents:
        shape = "[" + ", ".join(str(x) for x in z.dims) + "]" if z.dims else ""
        args = ", ".join(repr(a) for a in z.prior.args)
        rng = f"<{z.lo}..{z.hi}>" if z.kind == "int" else ""
        lines.append(f"latent {z.name} : {z.kind}{shape}{rng}"
                     f" ~ {z.prior.dist}({args})")
    for d in spec.dets:
        lines.append(f"det {d.name} = {d.expr!r}")
    for stmt in spec.likelihoods:
        args = ", ".join(repr(a) for a in stmt.args)
        lines.append(f"{stmt.child} ~ {stmt.dist}({args})")
    for b in spec.blocks:
        target = b.params[0] if len(b.params) == 1 else "(" + ", ".join(b.params) + ")"
        lines.append(f"block {target} : {b.kernel}")
    if spec.order:
        lines.append("order " + ", ".join(spec.order))
    return "\n".join(lines) + "\n"


# -- block assignment --------------------------------------------------------

@dataclass
class PlannedBlock:
    name: str
    owns: tuple
    kernel: str
    settings: dict = field(default_factory=dict)


@dataclass
class BlockPlan:
    blocks: list

    def __iter__(self):
        return iter(self.blocks)


def _all_factor_stmts(spec):
    stmts = [p.prior for p in spec.params] + [z.prior for z in spec.latents]
    return stmts + list(spec.likelihoods)


def _stmts_referencing(spec, name):
    out = []
    for stmt in _all_factor_stmts(spec):
        if stmt.child == name:
            continue
        refs = set()
        for arg in stmt.args:
            refs |= arg.refs()
        # references routed through deterministic nodes count too
        for det in spec.dets:
            if det.name in refs:
                refs |= det.expr.refs()
        if name in refs:
            out.append(stmt)
    return out


def _conjugate_check(spec, kernel, name):
    """Structural conjugacy guard for explicitly requested Gibbs kernels.

    Returns a recipe dict consumed by the block builder, or raises
    SpecError when the surrounding factors are not of the required form.
    """
    param = spec.find_param(name)
    latent = spec.find_latent(name)
    decl = param if param is not None else latent
    prior = decl.prior
    lik = _stmts_referencing(spec, name)

    def fail(msg):
        raise SpecError([Diagnostic("E_KERNEL_INCOMPATIBLE", decl.line, 1,
                                    f"block {name!r}: {msg}")])

    if kernel == "beta_gibbs":
        if prior.dist != "beta":
            fail("beta_gibbs needs a beta prior")
        if len(lik) != 1 or lik[0].dist != "bernoulli" or not _is_plain_ref(lik[0].args[0], name):
            fail("beta_gibbs needs a bernoulli likelihood with this probability")
        return {"obs": lik[0].child}
    if kernel == "dirichlet_gibbs":
        if prior.dist != "dirichlet":
            fail("dirichlet_gibbs needs a dirichlet prior")
        if len(lik) != 1 or lik[0].dist != "categorical" or not _is_plain_ref(lik[0].args[0], name):
            fail("dirichlet_gibbs needs a categorical likelihood over these weights")
        return {"obs": lik[0].child}
    if kernel == "normal_mean_gibbs":
        if prior.dist != "normal":
            fail("normal_mean_gibbs needs a normal prior")
        if len(lik) != 1 or lik[0].dist != "normal" or not _is_plain_ref(lik[0].args[0], name):
            fail("normal_mean_gibbs needs a normal likelihood with this mean")
        if name in lik[0].args[1].refs():
            fail("likelihood scale must not involve the mean")
        return {"obs": lik[0].child}
    if kernel == "inv_gamma_gibbs":
        if prior.dist != "inverse_gamma":
            fail("inv_gamma_gibbs needs an inverse-gamma prior")
        if len(lik) != 1 or lik[0].dist != "normal" or not _is_sqrt_ref(lik[0].args[1], name):
            fail("inv_gamma_gibbs needs a normal likelihood with scale sqrt(this)")
        if name in lik[0].args[0].refs():
            fail("likelihood mean must not involve the variance")
        return {"obs": lik[0].child}
    if kernel == "gamma_gibbs":
        if prior.dist != "gamma":
            fail("gamma_gibbs needs a gamma prior")
        if len(lik) != 1 or lik[0].dist != "normal" or not _is_inv_sqrt_ref(lik[0].args[1], name):
            fail("gamma_gibbs needs a normal likelihood with scale inv_sqrt(this)")
        if name in lik[0].args[0].refs():
            fail("likelihood mean must not involve the precision")
        return {"obs": lik[0].child}
    return {}


def _is_plain_ref(arg, name):
    return isinstance(arg, Ref) and arg.name == name


def _is_sqrt_ref(arg, name):
    return isinstance(arg, Sqrt) and _is_plain_ref(arg.inner, name)


def _is_inv_sqrt_ref(arg, name):
    return isinstance(arg, InvSqrt) and _is_plain_ref(arg.inner, name)


def assign_blocks(spec) -> BlockPlan:
    """Plan one sampling block per parameter group.

    Defaults: continuous parameters go to NUTS on transformed
    coordinates; finite discrete latents to categorical Gibbs; Markov
    paths to FFBS; stick-breaking weights to the stick-breaking kernel.
    Conjugate Gibbs kernels run only when the spec requests them
    explicitly, and explicit requests always win.
    """
    explicit = {}
    joint = []
    for b in spec.blocks:
        if len(b.params) > 1:
            if b.kernel != "joint_nuts":
                raise SpecError([Diagnostic("E_KERNEL_INCOMPATIBLE", b.line, 1,
                                            "grouped blocks support joint_nuts only")])
            joint.append(b)
        else:
            explicit[b.params[0]] = b
    grouped = {name for b in joint for name in b.params}

    planned = []
    order = spec.order or tuple(p.name for p in spec.params) + tuple(z.name for z in spec.latents)
    emitted_joint = set()
    for name in order:
        if name in grouped:
            for b in joint:
                if name in b.params and id(b) not in emitted_joint:
                    for member in b.params:
                        decl = spec.find_param(member)
                        if decl is None:
                            raise SpecError([Diagnostic(
                                "E_KERNEL_INCOMPATIBLE", b.line, 1,
                                f"joint_nuts member {member!r} is not a continuous parameter")])
                    planned.append(PlannedBlock("+".join(b.params), b.params, "joint_nuts"))
                    emitted_joint.add(id(b))
            continue
        param = spec.find_param(name)
        latent = spec.find_latent(name)
        if name in explicit:
            kernel = explicit[name].kernel
            _validate_kernel_support(spec, name, kernel, explicit[name].line)
            settings = (_conjugate_check(spec, kernel, name)
                        if kernel in CONJUGATE_KERNELS else {})
            planned.append(PlannedBlock(name, (name,), kernel, settings))
        elif param is not None:
            if param.prior.dist == "stick_breaking":
                planned.append(PlannedBlock(name, (name,), "stick_breaking"))
            else:
                planned.append(PlannedBlock(name, (name,), "nuts"))
        elif latent is not None:
            if latent.kind == "real":
                kernel = "nuts"
            elif latent.prior.dist == "markov_chain":
                kernel = "ffbs"
            else:
                kernel = "categorical_gibbs"
            planned.append(PlannedBlock(name, (name,), kernel))
    return BlockPlan(planned)


def _validate_kernel_support(spec, name, kernel, line):
    param = spec.find_param(name)
    latent = spec.find_latent(name)

    def fail(msg):
        raise SpecError([Diagnostic("E_KERNEL_INCOMPATIBLE", line, 1,
                                    f"block {name!r}: {msg}")])

    continuous = param if param is not None else (
        latent if latent is not None and latent.kind == "real" else None)
    if kernel in ("nuts", "joint_nuts", "univariate_slice", "normal_mean_gibbs",
                  "inv_gamma_gibbs", "gamma_gibbs", "beta_gibbs", "dirichlet_gibbs",
                  "stick_breaking"):
        if continuous is None:
            fail(f"{kernel} applies to continuous parameters")
        support = continuous.support if param is None else param.support
        if kernel == "univariate_slice" and continuous.dims:
            fail("univariate_slice applies to scalar parameters")
        if kernel == "dirichlet_gibbs" and support[0] != "simplex":
            fail("dirichlet_gibbs needs a simplex parameter")
        if kernel == "stick_breaking" and support[0] != "simplex":
            fail("stick_breaking needs a simplex parameter")
        if kernel == "beta_gibbs" and support[0] != "interval":
            fail("beta_gibbs needs a (0,1) parameter")
        if kernel in ("inv_gamma_gibbs", "gamma_gibbs") and support[0] != "positive":
            fail(f"{kernel} needs a positive parameter")
    elif kernel in ("categorical_gibbs", "ffbs"):
        if latent is None or latent.kind != "int":
            fail(f"{kernel} applies to discrete latents")
        if kernel == "ffbs" and latent.prior.dist != "markov_chain":
            fail("ffbs needs a markov_chain prior")
        if kernel == "categorical_gibbs" and latent.prior.dist != "categorical":
            fail("categorical_gibbs needs a categorical prior")
