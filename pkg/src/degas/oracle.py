"""Independent references: Monte Carlo over the exact semantics, 1-D
quadrature, and a seeded generator of random valid programs.

The sampler never touches the mixture algebra; it forward-simulates the
program on concrete values.  Random streams come from numpy's Philox
counter-based generator keyed by the seed, one jumped sub-stream per fixed
size chunk, so results do not depend on the platform or on chunk scheduling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate
from scipy.stats import norm

from .diff import ParamStore
from .errors import MaxSubdivisions, NoAcceptedSamples, UnsupportedProgram
from .frontend import (
    Assign,
    Ast,
    Cmp,
    FalseP,
    If,
    Linear,
    Observe,
    ParamDecl,
    Product,
    Real,
    RndAssign,
    Skip,
    TrueP,
    make_store,
    parse,
    pretty,
    validate,
)

__all__ = ["McResult", "mc_sample", "quad_integrate", "RandomProgramSpec", "gen_random_program", "CHUNK"]

CHUNK = 1 << 16

# per-sample provenance of each variable, used to decide how equality observes weigh
_DEPENDENT, _FRESH, _POINT, _MIXED = 0, 1, 2, 3


@dataclass
class McResult:
    n_requested: int
    n_effective: float
    mean: np.ndarray
    cov: np.ndarray
    std_error: np.ndarray
    cov_std_error: np.ndarray
    acceptance_rate: float
    # average importance weight over all runs (rejected runs count as 0)
    evidence: float
    var_names: tuple[str, ...] = ()


class _Sim:
    def __init__(self, ast: Ast, params: ParamStore | None, rng: np.random.Generator, m: int):
        self.names = list(ast.var_names)
        self.params = params
        self.rng = rng
        n = len(self.names)
        self.X = rng.standard_normal((m, n))
        self.status = np.full((m, n), _DEPENDENT, dtype=np.int8)
        self.draw = np.full((m, n), -1, dtype=np.int64)
        self.logw = np.zeros(m)
        self.alive = np.ones(m, dtype=bool)
        self.literals: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.literal_ids: dict[int, int] = {}

    def val(self, r: Real) -> float:
        if r.param is None:
            return r.value
        return r.value * self.params.value(r.param)

    def run(self, body, idx: np.ndarray) -> None:
        for stmt in body:
            idx = idx[self.alive[idx]]
            if idx.size == 0:
                return
            self.step(stmt, idx)

    def read(self, idx, k: int) -> None:
        fresh = self.status[idx, k] == _FRESH
        self.status[idx[fresh], k] = _DEPENDENT

    def step(self, stmt, idx: np.ndarray) -> None:
        X = self.X
        if isinstance(stmt, Skip):
            return
        if isinstance(stmt, Assign):
            t = self.names.index(stmt.var)
            e = stmt.expr
            if isinstance(e, Product):
                j, k = self.names.index(e.a), self.names.index(e.b)
                new = X[idx, j] * X[idx, k]
                srcs = [j, k]
            else:
                new = np.full(idx.size, self.val(e.const))
                srcs = []
                for c, v in e.terms:
                    k = self.names.index(v)
                    new = new + self.val(c) * X[idx, k]
                    srcs.append(k)
            point = np.ones(idx.size, dtype=bool)
            for k in srcs:
                point &= self.status[idx, k] == _POINT
                self.read(idx, k)
            X[idx, t] = new
            self.status[idx, t] = np.where(point, _POINT, _DEPENDENT)
            return
        if isinstance(stmt, RndAssign):
            t = self.names.index(stmt.var)
            w = np.array([self.val(r) for r in stmt.weights])
            mu = np.array([self.val(r) for r in stmt.means])
            sd = np.array([self.val(r) for r in stmt.stds])
            comp = self.rng.choice(len(w), size=idx.size, p=w / w.sum())
            X[idx, t] = mu[comp] + sd[comp] * self.rng.standard_normal(idx.size)
            key = id(stmt)
            if key not in self.literal_ids:
                self.literal_ids[key] = len(self.literals)
                self.literals.append((w / w.sum(), mu, sd))
            self.draw[idx, t] = self.literal_ids[key]
            if np.all(sd > 0):
                self.status[idx, t] = _FRESH
            elif np.all(sd == 0):
                self.status[idx, t] = _POINT
            else:
                self.status[idx, t] = _MIXED
            return
        if isinstance(stmt, If):
            mask = self.holds(stmt.pred, idx)
            self.run(stmt.then, idx[mask])
            self.run(stmt.orelse, idx[~mask])
            return
        if isinstance(stmt, Observe):
            pred = stmt.pred
            if isinstance(pred, Cmp) and pred.op == "==":
                self.observe_equal(pred, idx)
            else:
                mask = self.holds(pred, idx)
                self.alive[idx[~mask]] = False
            return
        raise TypeError(f"unknown statement {stmt!r}")

    def holds(self, pred, idx) -> np.ndarray:
        if isinstance(pred, TrueP):
            return np.ones(idx.size, dtype=bool)
        if isinstance(pred, FalseP):
            return np.zeros(idx.size, dtype=bool)
        k = self.names.index(pred.var)
        self.read(idx, k)
        x, c = self.X[idx, k], self.val(pred.bound)
        return {"<": x < c, "<=": x <= c, ">": x > c, ">=": x >= c, "==": x == c}[pred.op]

    def observe_equal(self, pred: Cmp, idx) -> None:
        k = self.names.index(pred.var)
        c = self.val(pred.bound)
        status = self.status[idx, k]
        if np.any((status == _DEPENDENT) | (status == _MIXED)):
            raise UnsupportedProgram(
                f"equality observe on {pred.var}: only fresh continuous draws or point values can be weighted"
            )
        point = status == _POINT
        hit = self.X[idx, k] == c
        self.alive[idx[point & ~hit]] = False
        fresh = idx[~point]
        for lit_id in np.unique(self.draw[fresh, k]):
            rows = fresh[self.draw[fresh, k] == lit_id]
            w, mu, sd = self.literals[lit_id]
            dens = float(np.sum(w * norm.pdf(c, mu, sd)))
            self.logw[rows] += math.log(dens) if dens > 0 else -math.inf
            self.X[rows, k] = c
            self.status[rows, k] = _POINT
        self.alive[idx[~np.isfinite(self.logw[idx])]] = False


def mc_sample(ast: Ast, params: ParamStore | None, n: int, seed: int = 0, chunk: int = CHUNK) -> McResult:
    """Forward-simulate ``n`` runs of the exact semantics and report weighted moments."""
    if n < 1:
        raise ValueError("n must be positive")
    base = np.random.Philox(key=seed)
    xs, lws = [], []
    accepted = 0
    for c, start in enumerate(range(0, n, chunk)):
        m = min(chunk, n - start)
        rng = np.random.Generator(base.jumped(c))
        sim = _Sim(ast, params, rng, m)
        sim.run(ast.body, np.arange(m))
        ok = sim.alive
        accepted += int(ok.sum())
        xs.append(sim.X[ok])
        lws.append(sim.logw[ok])
    if accepted == 0:
        raise NoAcceptedSamples("no run satisfied the observations")
    X = np.concatenate(xs)
    lw = np.concatenate(lws)
    top = lw.max()
    w = np.exp(lw - top)
    evidence = float(np.exp(top) * w.sum() / n)
    w = w / w.sum()
    n_eff = 1.0 / float(np.sum(w * w))
    mean = w @ X
    D = X - mean
    cov = (D * w[:, None]).T @ D
    se = np.sqrt(np.maximum(np.diag(cov), 0.0) / n_eff)
    prods = D[:, :, None] * D[:, None, :]
    second = np.einsum("s,sij->ij", w, (prods - cov) ** 2)
    cov_se = np.sqrt(second / n_eff)
    return McResult(n, n_eff, mean, cov, se, cov_se, accepted / n, evidence, tuple(ast.var_names))


def quad_integrate(f, a: float, b: float, tol: float = 1e-10, limit: int = 200) -> float:
    """Adaptive Gauss-Kronrod integral of ``f`` over [a, b] with absolute error <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, err = integrate.quad(f, a, b, epsabs=tol, epsrel=0.0, limit=limit)
        except integrate.IntegrationWarning as exc:
            raise MaxSubdivisions(str(exc).strip().splitlines()[0]) from None
    if err > tol:
        raise MaxSubdivisions(f"estimated error {err:.3g} exceeds tolerance {tol:.3g}")
    return float(value)


# random programs --------------------------------------------------------------

@dataclass(frozen=True)
class RandomProgramSpec:
    n_vars: int = 3
    max_tests: int = 2
    max_observes: int = 1
    # cap on tests plus observes; None means no joint cap
    max_conditions: int | None = None
    n_stmts: int = 4
    products: bool = True
    eq_observes: bool = True
    constants: bool = True
    discrete_gms: bool = True
    params: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_vars <= 4:
            raise ValueError("n_vars must be between 1 and 4")
        if not 0 <= self.max_tests <= 3:
            raise ValueError("max_tests must be between 0 and 3")


_COEFS = (-2.0, -1.0, 1.0, 2.0)
_STDS = (0.5, 1.0, 1.5, 2.0)


class _Gen:
    def __init__(self, spec: RandomProgramSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.names = [f"x{i}" for i in range(spec.n_vars)]
        self.decls: list[ParamDecl] = []
        self.tests = 0
        self.observes = 0
        # crude static summaries used to place thresholds: mean, std, discrete
        self.info: dict[str, tuple[float, float, bool]] = {}

    # helpers
    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def half_grid(self, lo=-2.0, hi=2.0) -> float:
        return float(self.rng.integers(int(2 * lo), int(2 * hi) + 1)) / 2.0

    def maybe_param(self, value: float, positive: bool = False, p: float = 0.3) -> Real:
        if not self.spec.params or not self.chance(p):
            return Real(value)
        name = f"p{len(self.decls)}"
        self.decls.append(ParamDecl(name, value, 0.0 if positive else -math.inf, math.inf))
        return Real(1.0, name)

    def conditions_left(self) -> int:
        cap = self.spec.max_conditions
        return math.inf if cap is None else cap - self.tests - self.observes

    # statements
    def rnd(self, var: str, discrete: bool) -> RndAssign:
        k = int(self.rng.integers(1, 3))
        if k == 1:
            weights = (Real(1.0),)
        else:
            weights = (Real(0.5), Real(0.5)) if self.chance(0.5) else (Real(0.25), Real(0.75))
        means_v = sorted({self.half_grid() for _ in range(k)})
        while len(means_v) < k:
            means_v.append(means_v[-1] + 1.0)
        means = tuple(self.maybe_param(m, p=0.0 if discrete else 0.3) for m in means_v)
        if discrete:
            stds = tuple(Real(0.0) for _ in range(k))
        else:
            stds = tuple(self.maybe_param(float(self.pick(_STDS)), positive=True) for _ in range(k))
        w = [r.value for r in weights]
        mean = float(np.dot(w, means_v))
        spread = float(np.dot(w, [(m - mean) ** 2 for m in means_v]))
        sd2 = spread + (0.0 if discrete else float(np.dot(w, [s.value if s.param is None else self._init(s) for s in stds]) ** 2))
        self.info[var] = (mean, math.sqrt(max(sd2, 0.0)), discrete)
        return RndAssign(var, weights, means, stds)

    def _init(self, r: Real) -> float:
        return next(d.init for d in self.decls if d.name == r.param)

    def linear(self, target: str, assigned: list[str]) -> Assign:
        pool = [v for v in assigned if v != target] or assigned
        k = min(len(pool), int(self.rng.integers(1, 3)))
        srcs = list(self.rng.choice(pool, size=k, replace=False))
        if target in assigned and self.chance(0.2):
            srcs = [target] + srcs[:1]
        terms = []
        mean, var, discrete = 0.0, 0.0, True
        for v in dict.fromkeys(srcs):
            coef = float(self.pick(_COEFS))
            m, s, d = self.info[v]
            mean += coef * m
            var += coef * coef * s * s
            discrete &= d
            terms.append((self.maybe_param(coef, p=0.2) if not d else Real(coef), str(v)))
        const = self.half_grid(-1.0, 1.0)
        self.info[target] = (mean + const, math.sqrt(var), discrete)
        return Assign(target, Linear(tuple(terms), Real(const)))

    def constant(self, target: str) -> Assign:
        c = self.half_grid()
        self.info[target] = (c, 0.0, True)
        return Assign(target, Linear((), Real(c)))

    def product(self, target: str, assigned: list[str]) -> Assign:
        a, b = (str(v) for v in self.rng.choice(assigned, size=2, replace=True))
        ma, sa, da = self.info[a]
        mb, sb, db = self.info[b]
        self.info[target] = (ma * mb, math.sqrt(ma**2 * sb**2 + mb**2 * sa**2 + sa**2 * sb**2), da and db)
        return Assign(target, Product(a, b))

    def threshold(self, var: str, spread: float = 0.0) -> float:
        m, s, d = self.info[var]
        return round(2.0 * (m + spread * s * float(self.rng.uniform(-1, 1)))) / 2.0

    def guard(self) -> Cmp:
        var = self.pick(self.names)
        op = self.pick(("<", "<=", ">", ">="))
        return Cmp(var, op, self.maybe_param(self.threshold(var, 0.5), p=0.3))

    def simple(self, assigned: list[str]):
        target = self.pick(self.names)
        r = self.rng.random()
        if r < 0.55:
            return self.linear(target, assigned)
        if r < 0.75 and self.spec.products:
            return self.product(target, assigned)
        if r < 0.85 and self.spec.constants:
            return self.constant(target)
        return self.rnd(target, self.spec.discrete_gms and self.chance(0.3))

    def statement(self, depth: int = 0):
        r = self.rng.random()
        if r < 0.35 and self.tests < self.spec.max_tests and self.conditions_left() > 0:
            self.tests += 1
            pred = self.guard()
            then = tuple(self.block(depth + 1))
            orelse = tuple(self.block(depth + 1))
            return If(pred, then, orelse)
        if r < 0.55 and self.observes < self.spec.max_observes and self.conditions_left() > 0:
            self.observes += 1
            continuous = [v for v in self.names if not self.info[v][2]]
            if self.spec.eq_observes and continuous and self.chance(0.3):
                var = self.pick(continuous)
                return Observe(Cmp(var, "==", Real(self.threshold(var))))
            var = self.pick(self.names)
            op = self.pick(("<", "<=", ">", ">="))
            # keep the observed event likely: put the bound on the far side of the mean
            m, s, _ = self.info[var]
            shift = (0.5 + 0.5 * float(self.rng.random())) * max(s, 0.5)
            c = m - shift if op in (">", ">=") else m + shift
            return Observe(Cmp(var, op, Real(round(2.0 * c) / 2.0)))
        return self.simple(self.names)

    def block(self, depth: int) -> list:
        out = []
        for _ in range(int(self.rng.integers(1, 3))):
            if depth < 2 and self.rng.random() < 0.3:
                out.append(self.statement(depth))
            else:
                out.append(self.simple(self.names))
        return out

    def program(self) -> list:
        body = []
        for v in self.names:
            r = self.rng.random()
            if self.spec.constants and r < 0.15:
                body.append(self.constant(v))
            elif self.spec.discrete_gms and r < 0.35:
                body.append(self.rnd(v, True))
            else:
                body.append(self.rnd(v, False))
        for _ in range(self.spec.n_stmts):
            body.append(self.statement())
        return body


def _format_decls(decls) -> str:
    from .frontend import _num

    return "".join(f"{d.name} {_num(d.init)} {_num(d.lo)} {_num(d.hi)}\n" for d in decls)


def gen_random_program(spec: RandomProgramSpec = RandomProgramSpec(), min_probability: float = 0.05) -> Ast:
    """Deterministic random program for ``spec.seed``.

    Candidates are drawn from one seeded stream until one has total path
    probability at least ``min_probability`` under the smoothed semantics;
    the accepted program is returned after a text round trip, so its Ast is
    exactly what parsing its printed source yields.
    """
    from .semantics import SmoothConfig, eval_program
    from .errors import DegasError

    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    for _ in range(100):
        gen = _Gen(spec, rng)
        body = tuple(gen.program())
        draft = Ast(tuple(gen.names), body, tuple(gen.decls))
        source = pretty(draft)
        ast = parse(source, gen.decls)
        store = make_store(gen.decls)
        try:
            validate(ast, store)
            post = eval_program(ast, store, SmoothConfig(epsilon=1e-3))
        except DegasError:
            continue
        if post.total_probability >= min_probability:
            return ast
    raise RuntimeError(f"no valid program found for seed {spec.seed}")


def program_text(ast: Ast) -> tuple[str, str]:
    """(source, parameter file) for a generated program."""
    return pretty(ast), _format_decls(ast.params)
