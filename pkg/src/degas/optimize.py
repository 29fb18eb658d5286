"""Loss construction and the projected Adam loop."""

from __future__ import annotations

import ast as pyast
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp as np_logsumexp

from . import gmix
from .cfg import Cfg, build_cfg
from .diff import DiffScalar, ParamStore, Tape, combine, exp, gradient, log, using_tape
from .errors import DegasError, MalformedLoss, NonFiniteLoss, SingularCovariance
from .frontend import Ast
from .semantics import Posterior, SmoothConfig, eval_program, posterior_stats

__all__ = [
    "LossSpec",
    "OptimizerConfig",
    "OptTrace",
    "Adam",
    "tangent_gradient",
    "nll_loss",
    "nll_loss_composed",
    "reachability_loss",
    "compile_expression",
    "evaluate_loss",
    "project_params",
    "run_optimization",
]

PROJECTION_MARGIN = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


# loss specifications ----------------------------------------------------------

_FUNCS = {"cdf", "pdf", "mean", "var", "std", "pathprob", "log", "exp"}
_BINOPS = (pyast.Add, pyast.Sub, pyast.Mult, pyast.Div, pyast.Pow)


@dataclass(frozen=True)
class LossSpec:
    """Either ``nll`` over a dataset or an expression over posterior summaries.

    Expression grammar (Python syntax, restricted)::

        cdf(v, lo, hi)   P(lo < v <= hi), bounds may be numbers, inf, -inf or _params
        cdf(v, t)        P(v <= t)
        pdf(v, t)        marginal density of v at t
        mean(v), var(v), std(v)
        pathprob()       total probability of the surviving paths
        log(e), exp(e), + - * / ** and numeric literals
    """

    kind: str
    data: np.ndarray | None = None
    observed: tuple[str, ...] = ()
    expr: str = ""
    maximize: bool = False

    @classmethod
    def nll(cls, data, observed: Sequence[str]) -> "LossSpec":
        data = np.atleast_2d(np.asarray(data, dtype=float))
        if data.shape[1] != len(observed):
            data = data.reshape(-1, len(observed))
        if data.size == 0:
            raise MalformedLoss("empty dataset")
        if not np.all(np.isfinite(data)):
            raise MalformedLoss("dataset contains non-finite entries")
        return cls("nll", data, tuple(observed))

    @classmethod
    def expression(cls, text: str, maximize: bool = False) -> "LossSpec":
        compile_expression(text)
        return cls("expr", expr=text, maximize=maximize)

    @classmethod
    def parse(cls, text: str, data: np.ndarray | None = None, observed: Sequence[str] = ()) -> "LossSpec":
        """``nll``, ``min:<expr>``, ``max:<expr>`` or a bare expression (minimized)."""
        t = text.strip()
        if t == "nll":
            if data is None:
                raise MalformedLoss("nll loss needs a dataset")
            return cls.nll(data, observed)
        if t.startswith("max:"):
            return cls.expression(t[4:], maximize=True)
        if t.startswith("min:"):
            return cls.expression(t[4:])
        return cls.expression(t)

    def check(self, var_names: Sequence[str], params: ParamStore | None = None) -> None:
        if self.kind == "nll":
            missing = [v for v in self.observed if v not in var_names]
            if missing:
                raise MalformedLoss(f"observed variables not in program: {missing}")
            return
        tree = compile_expression(self.expr)
        for node in pyast.walk(tree):
            if isinstance(node, pyast.Call) and node.func.id in ("cdf", "pdf", "mean", "var", "std"):
                name = node.args[0].id
                if name not in var_names:
                    raise MalformedLoss(f"unknown variable {name!r} in loss")
            if isinstance(node, pyast.Name) and node.id.startswith("_") and params is not None:
                if node.id not in params:
                    raise MalformedLoss(f"unknown parameter {node.id!r} in loss")


def compile_expression(text: str) -> pyast.Expression:
    try:
        tree = pyast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise MalformedLoss(f"cannot parse loss expression: {exc.msg}") from None
    for node in pyast.walk(tree):
        if isinstance(node, (pyast.Expression, pyast.Load, pyast.operator, pyast.unaryop)):
            if isinstance(node, pyast.operator) and not isinstance(node, _BINOPS):
                raise MalformedLoss(f"operator {type(node).__name__} not allowed")
            if isinstance(node, pyast.unaryop) and not isinstance(node, (pyast.USub, pyast.UAdd)):
                raise MalformedLoss(f"operator {type(node).__name__} not allowed")
            continue
        if isinstance(node, (pyast.BinOp, pyast.UnaryOp, pyast.Name)):
            continue
        if isinstance(node, pyast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, pyast.Call):
            if not isinstance(node.func, pyast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise MalformedLoss(f"unknown function in loss: {pyast.unparse(node.func)}")
            fn, n = node.func.id, len(node.args)
            arity = {"cdf": (2, 3), "pdf": (2,), "mean": (1,), "var": (1,), "std": (1,), "pathprob": (0,), "log": (1,), "exp": (1,)}
            if n not in arity[fn]:
                raise MalformedLoss(f"{fn} takes {' or '.join(map(str, arity[fn]))} arguments, got {n}")
            if fn in ("cdf", "pdf", "mean", "var", "std") and not isinstance(node.args[0], pyast.Name):
                raise MalformedLoss(f"first argument of {fn} must be a variable name")
            continue
        raise MalformedLoss(f"construct {type(node).__name__} not allowed in loss")
    return tree


class _Evaluator:
    def __init__(self, post: Posterior, params: ParamStore | None):
        self.post = post
        self.params = params
        self.stats = None

    def summary(self):
        if self.stats is None:
            self.stats = posterior_stats(self.post)
        return self.stats

    def bound(self, node) -> DiffScalar | float | None:
        v = self.eval(node)
        return v

    def eval(self, node):
        if isinstance(node, pyast.Expression):
            return self.eval(node.body)
        if isinstance(node, pyast.Constant):
            return float(node.value)
        if isinstance(node, pyast.Name):
            if node.id == "inf":
                return math.inf
            if node.id.startswith("_"):
                if self.params is None or node.id not in self.params:
                    raise MalformedLoss(f"unknown parameter {node.id!r}")
                return self.params.scalar(node.id)
            raise MalformedLoss(f"bare variable {node.id!r}; use mean({node.id}) or cdf({node.id}, ...)")
        if isinstance(node, pyast.UnaryOp):
            v = self.eval(node.operand)
            return -v if isinstance(node.op, pyast.USub) else v
        if isinstance(node, pyast.BinOp):
            a, b = self.eval(node.left), self.eval(node.right)
            op = node.op
            if isinstance(op, pyast.Add):
                return a + b
            if isinstance(op, pyast.Sub):
                return a - b
            if isinstance(op, pyast.Mult):
                return a * b
            if isinstance(op, pyast.Div):
                return a / b
            return a**b
        if isinstance(node, pyast.Call):
            fn = node.func.id
            if fn == "pathprob":
                return exp(self.post.log_total)
            if fn in ("log", "exp"):
                x = self.eval(node.args[0])
                x = x if isinstance(x, DiffScalar) else DiffScalar(x)
                return log(x) if fn == "log" else exp(x)
            var = node.args[0].id
            if var not in self.post.var_names:
                raise MalformedLoss(f"unknown variable {var!r} in loss")
            st = self.summary()
            k = self.post.var_names.index(var)
            if fn == "mean":
                return st.mean[k]
            if fn == "var":
                return st.cov[k][k]
            if fn == "std":
                return st.cov[k][k] ** 0.5
            if fn == "pdf":
                return st.pdf(var, self.eval(node.args[1]))
            if len(node.args) == 2:
                return st.interval(var, None, self.eval(node.args[1]))
            return st.interval(var, self.eval(node.args[1]), self.eval(node.args[2]))
        raise MalformedLoss(f"cannot evaluate {pyast.dump(node)}")


def reachability_loss(spec: LossSpec, post: Posterior, params: ParamStore | None = None) -> DiffScalar:
    value = _Evaluator(post, params).eval(compile_expression(spec.expr))
    value = value if isinstance(value, DiffScalar) else DiffScalar(value)
    return -value if spec.maximize else value


def _observed_blocks(post: Posterior, observed: Sequence[str]):
    idx = [post.var_names.index(v) for v in observed]
    mix = post.mixture
    out = []
    for w, g in zip(mix.weights, mix.components):
        if w.value <= 0.0:
            continue
        m = [g.mean[i] for i in idx]
        S = [[g.cov[i][j] for j in idx] for i in idx]
        out.append((w, m, S))
    return out


def nll_loss(post: Posterior, data: np.ndarray, observed: Sequence[str]) -> DiffScalar:
    """Negative log-likelihood of the rows of ``data`` under the observed marginal.

    Computed in numpy and recorded on the tape as one fused node whose local
    partials are the analytic derivatives with respect to the weights,
    means and covariance entries of every component.
    """
    X = np.atleast_2d(np.asarray(data, dtype=float))
    k = len(observed)
    X = X.reshape(-1, k)
    blocks = _observed_blocks(post, observed)
    N = X.shape[0]
    logN = np.empty((len(blocks), N))
    cache = []
    for c, (w, m, S) in enumerate(blocks):
        mv = np.array([x.value for x in m])
        Sv = np.array([[x.value for x in row] for row in S]).reshape(k, k)
        try:
            L = np.linalg.cholesky(Sv)
        except np.linalg.LinAlgError:
            raise SingularCovariance("observed marginal covariance is not positive definite") from None
        D = X - mv
        Z = solve_triangular(L, D.T, lower=True)
        with np.errstate(over="ignore"):
            # far-out rows overflow to -inf and are reported below
            logN[c] = -0.5 * np.sum(Z * Z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * k * LOG_2PI
        cache.append((L, D))
    logw = np.log(np.array([w.value for w, _, _ in blocks]))
    logp = np_logsumexp(logw[:, None] + logN, axis=0)
    bad = np.flatnonzero(~np.isfinite(logp))
    if bad.size:
        raise NonFiniteLoss(f"row {bad[0]} has numerically zero density", row=int(bad[0]))
    value = -float(np.sum(logp))

    inputs: list[DiffScalar] = []
    partials: list[float] = []
    for c, (w, m, S) in enumerate(blocks):
        ratio = np.exp(logN[c] - logp)  # d logp_r / d w_c
        resp = np.exp(logw[c]) * ratio
        L, D = cache[c]
        Sinv = solve_triangular(L.T, solve_triangular(L, np.eye(k), lower=True), lower=False)
        Sinv = 0.5 * (Sinv + Sinv.T)
        inputs.append(w)
        partials.append(-float(np.sum(ratio)))
        rd = D.T @ resp  # sum_r resp_r d_r
        gm = -(Sinv @ rd)
        for i in range(k):
            inputs.append(m[i])
            partials.append(float(gm[i]))
        outer = (D.T * resp) @ D
        gS = -0.5 * (Sinv @ outer @ Sinv - resp.sum() * Sinv)
        for i in range(k):
            for j in range(k):
                inputs.append(S[i][j])
                partials.append(float(gS[i, j]))
    return combine(value, inputs, partials)


def nll_loss_composed(post: Posterior, data: np.ndarray, observed: Sequence[str]) -> DiffScalar:
    """Reference NLL built from scalar tape operations (slow, for cross-checks)."""
    idx = [post.var_names.index(v) for v in observed]
    marg = gmix.marginal(post.mixture, idx)
    total = DiffScalar(0.0)
    for row in np.atleast_2d(np.asarray(data, dtype=float)).reshape(-1, len(idx)):
        total = total - gmix.log_pdf(marg, list(row))
    return total


def evaluate_loss(spec: LossSpec, post: Posterior, params: ParamStore | None = None) -> DiffScalar:
    if spec.kind == "nll":
        return nll_loss(post, spec.data, spec.observed)
    return reachability_loss(spec, post, params)


# optimizer --------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tolerance: float = 1e-8
    patience: int = 30
    epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.steps >= 0 and self.epsilon > 0 and self.patience > 0):
            raise ValueError("optimizer settings must be positive")


@dataclass
class OptTrace:
    names: list[str]
    losses: list[float] = field(default_factory=list)
    params: list[dict[str, float]] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    converged: bool = False
    final_loss: float = math.nan

    def __len__(self) -> int:
        return len(self.losses)

    def rows(self):
        for step, (loss, p, ms) in enumerate(zip(self.losses, self.params, self.wall_ms)):
            yield [step, loss] + [p[n] for n in self.names] + [ms]


class Adam:
    """Bias-corrected Adam over a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def tangent_gradient(params: ParamStore, g: np.ndarray) -> np.ndarray:
    """Remove the component of ``g`` normal to each parameterized weight simplex.

    Adam rescales coordinates independently; without this, a uniform push on
    all weights of a group survives as equal steps that renormalization undoes.
    """
    g = np.array(g, dtype=float)
    index = {n: k for k, n in enumerate(params.names)}
    for group in params.simplex_groups:
        ks = [index[n] for n in group.names]
        if len(ks) > 1:
            g[ks] -= g[ks].mean()
    return g


def project_params(params: ParamStore, margin: float = PROJECTION_MARGIN) -> ParamStore:
    """Clip into each domain shrunk by ``margin``; renormalize parameterized weight groups."""
    for name in params.names:
        d = params.domains[name]
        lo = d.lo + margin if math.isfinite(d.lo) else -math.inf
        hi = d.hi - margin if math.isfinite(d.hi) else math.inf
        if lo > hi:
            lo = hi = 0.5 * (d.lo + d.hi)
        v = params.value(name)
        clipped = min(max(v, lo), hi)
        if clipped != v:
            params.set(name, clipped)
    for group in params.simplex_groups:
        target = 1.0 - group.literal_mass
        vals = np.clip([params.value(n) for n in group.names], margin, 1.0)
        vals = vals * (target / vals.sum())
        for n, v in zip(group.names, vals):
            params.set(n, float(v))
    return params


def run_optimization(
    cfg: Cfg | Ast,
    params: ParamStore,
    loss: LossSpec,
    ocfg: OptimizerConfig = OptimizerConfig(),
    smooth: SmoothConfig | None = None,
) -> tuple[ParamStore, OptTrace]:
    """Projected Adam on the loss; ``params`` is updated in place and returned."""
    if isinstance(cfg, Ast):
        cfg = build_cfg(cfg)
    smooth = smooth or SmoothConfig(epsilon=ocfg.epsilon)
    loss.check(cfg.var_names, params)
    names = params.names
    trace = OptTrace(list(names))
    opt = Adam(len(names), ocfg.lr, ocfg.beta1, ocfg.beta2, ocfg.adam_eps)
    tape = Tape()
    prev = math.inf
    stale = 0
    project_params(params)

    def evaluate(step):
        tape.reset()
        with using_tape(tape):
            params.bind(tape)
            try:
                post = eval_program(cfg, params, smooth)
                value = evaluate_loss(loss, post, params)
            except DegasError as exc:
                exc.step = step
                raise
        if not math.isfinite(value.value):
            raise NonFiniteLoss(f"loss is {value.value} at step {step}", step=step)
        return value

    for step in range(ocfg.steps):
        t0 = time.perf_counter()
        value = evaluate(step)
        grads = gradient(value, params)
        x = np.array([params.value(n) for n in names])
        trace.losses.append(value.value)
        trace.params.append(dict(zip(names, x.tolist())))
        # converged once the loss has moved by less than the tolerance for patience steps
        if abs(value.value - prev) > ocfg.tolerance:
            stale = 0
        else:
            stale += 1
        prev = value.value
        if stale >= ocfg.patience:
            trace.converged = True
            trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
            break
        g = tangent_gradient(params, np.array([grads[n] for n in names]))
        x = opt.step(x, g)
        for n, v in zip(names, x):
            params.set(n, float(v))
        project_params(params)
        trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
    trace.final_loss = evaluate(len(trace.losses)).value
    tape.reset()
    params.unbind()
    return params, trace
