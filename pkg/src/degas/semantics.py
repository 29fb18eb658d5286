"""Node, path and program semantics over Gaussian mixtures.

Two modes share one interpreter:

* ``degas``: smoothed semantics.  Constant assignments and zero-std mixture
  components receive Gaussian noise of standard deviation epsilon, predicates
  on smoothed variables are relaxed by delta, and every covariance stays
  positive definite, so all outputs are differentiable in the parameters.
* ``soga``: moment-matched exact semantics.  No noise, no relaxation;
  conditioning on a zero-variance coordinate resolves by point membership.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gmix
from .cfg import Cfg, CfgNode, NodeKind, build_cfg, successor
from .diff import DiffScalar, ParamStore, exp, log, logsumexp, normal_cdf, normal_pdf, sqrt
from .errors import (
    AllPathsVanished,
    DegenerateVariance,
    NotOnPath,
    NumericallyVanishing,
    PathBudgetExceeded,
)
from .frontend import And, Assign, Ast, Cmp, FalseP, Linear, Observe, Product, Real, RndAssign, Skip, TrueP
from .gmix import Gaussian, GaussMix

__all__ = [
    "SmoothConfig",
    "PathState",
    "PathResult",
    "Posterior",
    "PosteriorStats",
    "parse_delta",
    "smooth_predicate",
    "negate_predicate",
    "entry_state",
    "eval_node",
    "eval_path",
    "eval_program",
    "soga_eval",
    "posterior_stats",
]

DEGAS = "degas"
SOGA = "soga"
NEG_INF = DiffScalar(-math.inf)
ZERO = DiffScalar(0.0)


def parse_delta(rule: str) -> Callable[[float], float]:
    """``sqrt`` or ``pow:<k>`` (delta = eps ** k)."""
    rule = rule.strip()
    if rule == "sqrt":
        return math.sqrt
    if rule.startswith("pow:"):
        k = float(rule[4:])
        if not 0.0 < k < 1.0:
            raise ValueError("pow:<k> needs 0 < k < 1 so that delta/eps grows as eps shrinks")
        return lambda eps: eps**k
    raise ValueError(f"unknown delta rule {rule!r}")


@dataclass(frozen=True)
class SmoothConfig:
    epsilon: float = 1e-3
    delta: Callable[[float], float] = math.sqrt
    mode: str = DEGAS
    # truncation probabilities at or below this are treated as exact zeros
    prob_floor: float = 1e-10
    max_paths: int = 4096

    def __post_init__(self):
        if self.mode not in (DEGAS, SOGA):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == DEGAS and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def delta_value(self) -> float:
        return self.delta(self.epsilon) if self.mode == DEGAS else 0.0

    @classmethod
    def soga(cls, **kw) -> "SmoothConfig":
        return cls(mode=SOGA, **kw)


@dataclass
class PathState:
    log_weight: DiffScalar
    dist: GaussMix
    smoothed: frozenset = frozenset()
    vanished: bool = False


@dataclass
class PathResult:
    """Outcome of one path.  Vanished entries carry the node prefix up to the vanishing node."""

    nodes: tuple[int, ...]
    log_weight: DiffScalar
    dist: GaussMix
    vanished: bool = False


@dataclass
class Posterior:
    var_names: tuple[str, ...]
    mixture: GaussMix
    paths: list[PathResult]
    log_total: DiffScalar
    params: dict[str, float] = field(default_factory=dict)

    @property
    def total_probability(self) -> float:
        return math.exp(self.log_total.value) if self.log_total.value > -math.inf else 0.0

    def index(self, var: str | int) -> int:
        return var if isinstance(var, int) else self.var_names.index(var)

    def path_probabilities(self) -> list[float]:
        return [math.exp(p.log_weight.value) if not p.vanished else 0.0 for p in self.paths]


# parameter resolution ---------------------------------------------------------

class _Resolver:
    def __init__(self, params: ParamStore | None):
        self.params = params
        self.cache: dict[str, DiffScalar] = {}

    def __call__(self, r: Real) -> DiffScalar:
        if r.param is None:
            return DiffScalar(r.value)
        p = self.cache.get(r.param)
        if p is None:
            if self.params is None or r.param not in self.params:
                raise KeyError(f"parameter _{r.param} has no value")
            p = self.cache[r.param] = self.params.scalar(r.param)
        return p if r.value == 1.0 else p * r.value


# predicates -------------------------------------------------------------------

_NEGATE = {"<": ">=", "<=": ">", ">": "<=", ">=": "<"}


def negate_predicate(pred):
    if isinstance(pred, TrueP):
        return FalseP()
    if isinstance(pred, FalseP):
        return TrueP()
    if isinstance(pred, Cmp) and pred.op in _NEGATE:
        return Cmp(pred.var, _NEGATE[pred.op], pred.bound)
    raise ValueError(f"cannot negate {pred!r}")


def smooth_predicate(pred, V, delta: float):
    """Relax ``pred`` by ``delta`` when its variable is smoothed.

    Bounds stay symbolic: the shift is folded into the Real literal when
    possible, otherwise ``_Shifted`` wraps it.
    """
    if not isinstance(pred, Cmp) or pred.var not in V:
        return pred
    c = pred.bound
    if pred.op in (">", ">="):
        return Cmp(pred.var, pred.op, _shift(c, delta if pred.op == ">" else -delta))
    if pred.op in ("<", "<="):
        return Cmp(pred.var, pred.op, _shift(c, -delta if pred.op == "<" else delta))
    # equality becomes the open interval (c - delta, c + delta)
    return And(Cmp(pred.var, ">", _shift(c, -delta)), Cmp(pred.var, "<", _shift(c, delta)))


@dataclass(frozen=True)
class _Shifted:
    base: Real
    offset: float


def _shift(c, offset: float):
    if isinstance(c, _Shifted):
        return _Shifted(c.base, c.offset + offset)
    if c.param is None:
        return Real(c.value + offset)
    return _Shifted(c, offset)


def _bound(c, resolve: _Resolver) -> DiffScalar:
    if isinstance(c, _Shifted):
        return resolve(c.base) + c.offset
    return resolve(c)


def _interval(pred, resolve) -> tuple[str, DiffScalar | None, DiffScalar | None, bool, bool]:
    """(var, lo, hi, lo_closed, hi_closed) for a Cmp or an And of two Cmps."""
    if isinstance(pred, And):
        v1, lo, _, lc, _ = _interval(pred.left, resolve)
        v2, _, hi, _, hc = _interval(pred.right, resolve)
        assert v1 == v2
        return v1, lo, hi, lc, hc
    b = _bound(pred.bound, resolve)
    if pred.op in (">", ">="):
        return pred.var, b, None, pred.op == ">=", False
    if pred.op in ("<", "<="):
        return pred.var, None, b, False, pred.op == "<="
    return pred.var, b, b, True, True


# node semantics ---------------------------------------------------------------

def entry_state(n: int) -> PathState:
    return PathState(ZERO, gmix.standard_normal(n), frozenset())


def _det(stmt, state: PathState, names, config: SmoothConfig, resolve) -> PathState:
    if isinstance(stmt, Skip):
        return state
    target = names.index(stmt.var)
    V = state.smoothed
    degas = config.mode == DEGAS
    e = stmt.expr
    if isinstance(e, Product):
        dist = gmix.product_assign(state.dist, target, names.index(e.a), names.index(e.b))
        in_V = e.a in V and e.b in V
    else:
        coeffs: dict[int, DiffScalar] = {}
        for c, v in e.terms:
            k = names.index(v)
            a = resolve(c)
            coeffs[k] = coeffs[k] + a if k in coeffs else a
        const = resolve(e.const)
        self_ref = stmt.var in e.variables
        noise = config.epsilon if degas and not self_ref else None
        dist = gmix.affine_assign(state.dist, target, coeffs, const, noise)
        in_V = all(v in V for v in e.variables)
    V2 = V | {stmt.var} if in_V else V - {stmt.var}
    return PathState(state.log_weight, dist, frozenset(V2))


def _rnd(stmt: RndAssign, state: PathState, names, config: SmoothConfig, resolve) -> PathState:
    target = names.index(stmt.var)
    weights = [resolve(w) for w in stmt.weights]
    means = [resolve(m) for m in stmt.means]
    stds = [resolve(s) for s in stmt.stds]
    degenerate = any(s.value == 0.0 for s in stds)
    if config.mode == DEGAS and degenerate:
        eps = DiffScalar(config.epsilon)
        stds = [eps if s.value == 0.0 else s for s in stds]
    dist = gmix.mix_product(state.dist, target, weights, means, stds)
    V = state.smoothed | {stmt.var} if degenerate else state.smoothed - {stmt.var}
    return PathState(state.log_weight, dist, frozenset(V))


def _member(x: float, lo, hi, lc: bool, hc: bool) -> bool:
    if lo is not None and not (x >= lo.value if lc else x > lo.value):
        return False
    if hi is not None and not (x <= hi.value if hc else x < hi.value):
        return False
    return True


def _condition(pred, state: PathState, names, config: SmoothConfig, resolve) -> PathState:
    """Truncate every component on a univariate predicate and reweight."""
    if isinstance(pred, TrueP):
        return state
    if isinstance(pred, FalseP):
        return PathState(NEG_INF, state.dist, state.smoothed, vanished=True)
    var, lo, hi, lc, hc = _interval(pred, resolve)
    k = names.index(var)
    probs, comps = [], []
    for w, g in zip(state.dist.weights, state.dist.components):
        if w.value <= 0.0:
            continue
        if g.cov[k][k].value <= 0.0:
            if config.mode == DEGAS:
                raise DegenerateVariance(f"{var} has zero variance under smoothed semantics")
            if _member(g.mean[k].value, lo, hi, lc, hc):
                probs.append(w)
                comps.append(g)
            continue
        try:
            p, g2 = gmix.truncate_component(g, k, lo, hi, floor=config.prob_floor)
        except NumericallyVanishing:
            continue
        probs.append(w * p)
        comps.append(g2)
    return _reweight(state, probs, comps, config)


def _reweight(state: PathState, probs, comps, config: SmoothConfig, V=None) -> PathState:
    V = state.smoothed if V is None else V
    if not probs:
        return PathState(NEG_INF, state.dist, state.smoothed, vanished=True)
    total = probs[0]
    for p in probs[1:]:
        total = total + p
    if not total.value > config.prob_floor:
        return PathState(NEG_INF, state.dist, state.smoothed, vanished=True)
    weights = [p / total for p in probs]
    return PathState(state.log_weight + log(total), GaussMix(weights, comps), frozenset(V))


def _observe_equal(pred: Cmp, state: PathState, names, config: SmoothConfig, resolve) -> PathState:
    k = names.index(pred.var)
    c = resolve(pred.bound)
    resample = config.epsilon if config.mode == DEGAS else 0.0
    probs, comps = [], []
    for w, g in zip(state.dist.weights, state.dist.components):
        if w.value <= 0.0:
            continue
        if g.cov[k][k].value <= 0.0:
            # only reachable in soga mode: a point mass either sits on c or not
            if g.mean[k].value == c.value:
                probs.append(w)
                comps.append(g)
            continue
        dens, g2 = gmix.condition_equal(g, k, c, resample)
        if dens.value <= 0.0:
            continue
        probs.append(w * dens)
        comps.append(g2)
    V = state.smoothed | {pred.var} if config.mode == DEGAS else state.smoothed
    if not probs:
        return PathState(NEG_INF, state.dist, state.smoothed, vanished=True)
    total = probs[0]
    for p in probs[1:]:
        total = total + p
    if not total.value > 0.0:
        return PathState(NEG_INF, state.dist, state.smoothed, vanished=True)
    weights = [p / total for p in probs]
    return PathState(state.log_weight + log(total), GaussMix(weights, comps), frozenset(V))


def _conditioning(pred, state, names, config, resolve) -> PathState:
    if isinstance(pred, Cmp) and pred.op == "==" and (config.mode == SOGA or pred.var not in state.smoothed):
        return _observe_equal(pred, state, names, config, resolve)
    smoothed = smooth_predicate(pred, state.smoothed, config.delta_value) if config.mode == DEGAS else pred
    return _condition(smoothed, state, names, config, resolve)


def eval_node(
    node: CfgNode,
    state: PathState | None,
    path: Sequence[int] | None,
    config: SmoothConfig,
    params: ParamStore | None,
    cfg: Cfg | None = None,
    resolve: _Resolver | None = None,
    names: Sequence[str] | None = None,
) -> PathState:
    """Apply the semantics of one node.

    For test nodes the branch is read from ``cond`` of the successor on
    ``path`` (``cfg`` supplies the nodes).
    """
    resolve = resolve or _Resolver(params)
    if names is None:
        if cfg is None:
            raise ValueError("eval_node needs the cfg or the variable names")
        names = cfg.var_names
    kind = node.kind
    if kind == NodeKind.ENTRY:
        return entry_state(len(names))
    if state.vanished or kind == NodeKind.EXIT:
        return state
    if kind == NodeKind.DET:
        return _det(node.arg, state, names, config, resolve)
    if kind == NodeKind.RND:
        return _rnd(node.arg, state, names, config, resolve)
    if kind == NodeKind.OBSERVE:
        return _conditioning(node.arg.pred, state, names, config, resolve)
    if kind == NodeKind.TEST:
        if path is None or cfg is None:
            raise ValueError("test nodes need the path and the cfg")
        branch = cfg.nodes[successor(path, node.id)].cond
        pred = node.arg if branch else negate_predicate(node.arg)
        return _conditioning(pred, state, names, config, resolve)
    raise ValueError(f"unknown node kind {kind}")


def _test_branch(node: CfgNode, state, branch: bool, names, config, resolve) -> PathState:
    pred = node.arg if branch else negate_predicate(node.arg)
    return _conditioning(pred, state, names, config, resolve)


def eval_path(cfg: Cfg, path: Sequence[int], params: ParamStore | None, config: SmoothConfig) -> tuple[DiffScalar, GaussMix]:
    """Fold the node semantics along ``path``.

    A path whose probability vanishes returns log p = -inf together with the
    distribution reached just before the vanishing node.
    """
    if not path or path[0] != cfg.entry_id or path[-1] != cfg.exit_id:
        raise NotOnPath("a path must run from entry to exit")
    resolve = _Resolver(params)
    state = None
    for nid in path:
        state = eval_node(cfg.nodes[nid], state, path, config, params, cfg, resolve, cfg.var_names)
        if state.vanished:
            break
    return state.log_weight, state.dist


def _walk(cfg: Cfg, params, config: SmoothConfig) -> list[PathResult]:
    """Depth-first evaluation sharing common prefixes between paths."""
    resolve = _Resolver(params)
    names = cfg.var_names
    results: list[PathResult] = []
    live = 0
    start = entry_state(len(names))
    stack: list[tuple[int, PathState, tuple[int, ...]]] = []
    for child in reversed(cfg.children[cfg.entry_id]):
        stack.append((child, start, (cfg.entry_id, child)))
    while stack:
        nid, state, trail = stack.pop()
        node = cfg.nodes[nid]
        if node.kind == NodeKind.EXIT:
            results.append(PathResult(trail, state.log_weight, state.dist))
            live += 1
            if live > config.max_paths:
                raise PathBudgetExceeded(live, config.max_paths)
            continue
        if node.kind == NodeKind.TEST:
            # children are (true, false); push false first so true is explored first
            for child in reversed(cfg.children[nid]):
                branch = cfg.nodes[child].cond
                nxt = _test_branch(node, state, branch, names, config, resolve)
                if nxt.vanished:
                    results.append(PathResult(trail + (child,), NEG_INF, nxt.dist, vanished=True))
                else:
                    stack.append((child, nxt, trail + (child,)))
            continue
        nxt = eval_node(node, state, None, config, params, cfg, resolve, names)
        if nxt.vanished:
            results.append(PathResult(trail, NEG_INF, nxt.dist, vanished=True))
            continue
        (child,) = cfg.children[nid]
        stack.append((child, nxt, trail + (child,)))
    # restore depth-first order (vanished branches are recorded when met)
    results.sort(key=lambda r: _order_key(cfg, r.nodes))
    return results


def _order_key(cfg: Cfg, nodes: tuple[int, ...]) -> tuple:
    # true-branch-first lexicographic order over branch decisions
    key = []
    for u, v in zip(nodes, nodes[1:]):
        if cfg.nodes[u].kind == NodeKind.TEST:
            key.append(0 if cfg.nodes[v].cond else 1)
    return tuple(key)


def eval_program(cfg: Cfg | Ast, params: ParamStore | None = None, config: SmoothConfig = SmoothConfig()) -> Posterior:
    """Normalized mixture over all surviving paths."""
    if isinstance(cfg, Ast):
        cfg = build_cfg(cfg)
    results = _walk(cfg, params, config)
    alive = [r for r in results if not r.vanished]
    snapshot = params.values() if params is not None else {}
    if not alive:
        post = Posterior(cfg.var_names, GaussMix([], []), results, NEG_INF, snapshot)
        raise AllPathsVanished("every path has vanishing probability", post)
    log_total = logsumexp([r.log_weight for r in alive])
    weights, comps = [], []
    for r in alive:
        pw = exp(r.log_weight - log_total)
        for w, g in zip(r.dist.weights, r.dist.components):
            weights.append(pw * w)
            comps.append(g)
    return Posterior(cfg.var_names, GaussMix(weights, comps), results, log_total, snapshot)


@dataclass
class SogaPath:
    nodes: tuple[int, ...]
    prob: float
    dist: GaussMix


def soga_eval(cfg: Cfg | Ast, params: ParamStore | None = None, max_paths: int = 4096) -> list[SogaPath]:
    """Per-path probabilities and moment-matched distributions without smoothing.

    Paths that hit a zero-probability event report p = 0 and the
    distribution reached before that event.
    """
    if isinstance(cfg, Ast):
        cfg = build_cfg(cfg)
    config = SmoothConfig(mode=SOGA, prob_floor=0.0, max_paths=max_paths)
    out = []
    for r in _walk(cfg, params, config):
        p = 0.0 if r.vanished else math.exp(r.log_weight.value)
        out.append(SogaPath(r.nodes, p, r.dist))
    return out


# posterior summaries ------------------------------------------------------------

@dataclass
class PosteriorStats:
    mean: list[DiffScalar]
    cov: list[list[DiffScalar]]
    mixture: GaussMix
    var_names: tuple[str, ...]

    def _idx(self, var) -> int:
        return var if isinstance(var, int) else self.var_names.index(var)

    def cdf(self, var, t: float | DiffScalar) -> DiffScalar:
        """P(x_var <= t) under the mixture marginal."""
        return marginal_cdf(self.mixture, self._idx(var), t)

    def pdf(self, var, t: float | DiffScalar) -> DiffScalar:
        return marginal_pdf(self.mixture, self._idx(var), t)

    def interval(self, var, lo, hi) -> DiffScalar:
        return marginal_interval(self.mixture, self._idx(var), lo, hi)


def _as_scalar(t) -> DiffScalar:
    return t if isinstance(t, DiffScalar) else DiffScalar(float(t))


def marginal_cdf(mix: GaussMix, k: int, t) -> DiffScalar:
    return marginal_interval(mix, k, None, t)


def marginal_interval(mix: GaussMix, k: int, lo, hi) -> DiffScalar:
    """P(lo < x_k <= hi); ``None`` or infinities mark open ends."""
    lo = None if lo is None or (not isinstance(lo, DiffScalar) and lo == -math.inf) else _as_scalar(lo)
    hi = None if hi is None or (not isinstance(hi, DiffScalar) and hi == math.inf) else _as_scalar(hi)
    total = ZERO
    for w, g in zip(mix.weights, mix.components):
        m, v = g.mean[k], g.cov[k][k]
        if v.value <= 0.0:
            inside = (lo is None or m.value > lo.value) and (hi is None or m.value <= hi.value)
            part = DiffScalar(1.0 if inside else 0.0)
        else:
            s = sqrt(v)
            up = normal_cdf((hi - m) / s) if hi is not None else DiffScalar(1.0)
            down = normal_cdf((lo - m) / s) if lo is not None else ZERO
            part = up - down
        total = total + w * part
    return total


def marginal_pdf(mix: GaussMix, k: int, t) -> DiffScalar:
    t = _as_scalar(t)
    total = ZERO
    for w, g in zip(mix.weights, mix.components):
        v = g.cov[k][k]
        if v.value <= 0.0:
            raise DegenerateVariance("density of a point mass")
        s = sqrt(v)
        total = total + w * normal_pdf((t - g.mean[k]) / s) / s
    return total


def posterior_stats(post: Posterior | GaussMix, var_names: Sequence[str] | None = None) -> PosteriorStats:
    mix = post.mixture if isinstance(post, Posterior) else post
    names = tuple(post.var_names) if isinstance(post, Posterior) else tuple(var_names or ())
    g = gmix.collapse(mix)
    return PosteriorStats(g.mean, g.cov, mix, names)
