"""Reverse-mode differentiation over scalars.

Every arithmetic operation on a :class:`DiffScalar` that depends on a tape
leaf appends one node to the active :class:`Tape`.  A node stores the tape
indices of its inputs and the local partial derivatives with respect to
them, so the reverse sweep is a single pass over the node list in
anti-chronological order.  Values that do not depend on any leaf are
constants: they carry no tape reference and never allocate a node.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import mpmath
from scipy.special import erfcx

from .errors import DomainError, NonFiniteGradient, StaleTape

__all__ = [
    "DiffScalar",
    "Tape",
    "ParamStore",
    "Domain",
    "SimplexGroup",
    "const",
    "lift",
    "current_tape",
    "using_tape",
    "combine",
    "exp",
    "log",
    "sqrt",
    "dmin",
    "dmax",
    "normal_pdf",
    "normal_cdf",
    "normal_sf",
    "mills_ratio",
    "logsumexp",
    "dot",
    "gradient",
    "backward",
    "finite_diff_check",
]

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

# Values are floats.  Multiprecision values (mpmath.mpf) are passed through
# untouched so the forward pass can be replayed at higher precision; this is
# what the finite-difference oracle uses to get rid of roundoff noise.
_MPF = mpmath.mpf


def _num(x):
    return x if isinstance(x, _MPF) else float(x)


def _m(fn_float, fn_mp):
    def f(x):
        return fn_mp(x) if isinstance(x, _MPF) else fn_float(x)
    return f


_exp = _m(math.exp, mpmath.exp)
_log = _m(math.log, mpmath.log)
_sqrt = _m(math.sqrt, mpmath.sqrt)
_erf = _m(math.erf, mpmath.erf)
_erfc = _m(math.erfc, mpmath.erfc)
_erfcx = _m(lambda a: float(erfcx(a)), lambda a: mpmath.exp(a * a) * mpmath.erfc(a))


class Tape:
    """Append-only operation log.

    ``parents[i]`` and ``partials[i]`` describe node ``i``.  ``reset`` starts a
    new epoch; handles recorded in an earlier epoch become stale.
    """

    __slots__ = ("epoch", "parents", "partials")

    def __init__(self) -> None:
        self.epoch = 0
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []

    def __len__(self) -> int:
        return len(self.parents)

    def reset(self) -> None:
        self.epoch += 1
        self.parents = []
        self.partials = []

    def record(self, parents: tuple[int, ...], partials: tuple[float, ...]) -> int:
        self.parents.append(parents)
        self.partials.append(partials)
        return len(self.parents) - 1

    def leaf(self, value: float) -> "DiffScalar":
        return DiffScalar(value, self, self.record((), ()), self.epoch)


_state = threading.local()


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def using_tape(tape: Tape | None):
    """Make ``tape`` the active tape for the current thread."""
    previous = current_tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


def _check(x: "DiffScalar") -> Tape:
    tape = x.tape
    if x.epoch != tape.epoch:
        raise StaleTape(f"value recorded in epoch {x.epoch}, tape is at epoch {tape.epoch}")
    return tape


def _unary(a: "DiffScalar", value: float, d: float) -> "DiffScalar":
    if a.tape is None:
        return DiffScalar(value)
    tape = _check(a)
    return DiffScalar(value, tape, tape.record((a.index,), (d,)), tape.epoch)


def _binary(a: "DiffScalar", b: "DiffScalar", value: float, da: float, db: float) -> "DiffScalar":
    ta, tb = a.tape, b.tape
    if ta is None:
        if tb is None:
            return DiffScalar(value)
        return _unary(b, value, db)
    if tb is None:
        return _unary(a, value, da)
    if ta is not tb:
        raise StaleTape("operands belong to different tapes")
    _check(a)
    _check(b)
    return DiffScalar(value, ta, ta.record((a.index, b.index), (da, db)), ta.epoch)


class DiffScalar:
    """A real number that remembers how it was computed."""

    __slots__ = ("value", "tape", "index", "epoch")

    def __init__(self, value: float, tape: Tape | None = None, index: int = -1, epoch: int = -1):
        self.value = _num(value)
        self.tape = tape
        self.index = index
        self.epoch = epoch

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.index}"
        return f"DiffScalar({self.value!r}, {tag})"

    def __float__(self) -> float:
        return self.value

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, DiffScalar):
            return _binary(self, other, self.value + other.value, 1.0, 1.0)
        return _unary(self, self.value + other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffScalar):
            return _binary(self, other, self.value - other.value, 1.0, -1.0)
        return _unary(self, self.value - other, 1.0)

    def __rsub__(self, other):
        return _unary(self, other - self.value, -1.0)

    def __mul__(self, other):
        if isinstance(other, DiffScalar):
            return _binary(self, other, self.value * other.value, other.value, self.value)
        return _unary(self, self.value * other, _num(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffScalar):
            b = other.value
            if b == 0.0:
                raise DomainError("division by zero")
            q = self.value / b
            return _binary(self, other, q, 1.0 / b, -q / b)
        if other == 0:
            raise DomainError("division by zero")
        return _unary(self, self.value / other, 1.0 / other)

    def __rtruediv__(self, other):
        b = self.value
        if b == 0.0:
            raise DomainError("division by zero")
        q = other / b
        return _unary(self, q, -q / b)

    def __neg__(self):
        return _unary(self, -self.value, -1.0)

    def __pos__(self):
        return self

    def __pow__(self, k):
        if isinstance(k, DiffScalar):
            if k.tape is None:
                k = k.value
            else:
                return exp(k * log(self))
        a = self.value
        if k == 2:
            return _unary(self, a * a, 2.0 * a)
        if a < 0 and not float(k).is_integer():
            raise DomainError(f"non-integer power of negative base {a}")
        if a == 0 and k < 1:
            raise DomainError("power of zero with exponent < 1")
        return _unary(self, a**k, k * a ** (k - 1))

    # comparisons act on values only (no smoothing)
    def __lt__(self, other):
        return self.value < _num(other)

    def __le__(self, other):
        return self.value <= _num(other)

    def __gt__(self, other):
        return self.value > _num(other)

    def __ge__(self, other):
        return self.value >= _num(other)


_ZERO = DiffScalar(0.0)
_ONE = DiffScalar(1.0)


def const(value: float) -> DiffScalar:
    return DiffScalar(value)


def lift(x) -> DiffScalar:
    return x if isinstance(x, DiffScalar) else DiffScalar(x)


def combine(value: float, inputs: Sequence[DiffScalar], partials: Sequence[float]) -> DiffScalar:
    """Record a fused operation with externally computed local partials.

    Repeated inputs are allowed; their contributions add up in the sweep.
    """
    parents, ds = [], []
    tape = None
    for x, d in zip(inputs, partials):
        if x.tape is None or d == 0.0:
            continue
        if tape is None:
            tape = _check(x)
        elif x.tape is not tape:
            raise StaleTape("operands belong to different tapes")
        else:
            _check(x)
        parents.append(x.index)
        ds.append(_num(d))
    if tape is None:
        return DiffScalar(value)
    return DiffScalar(value, tape, tape.record(tuple(parents), tuple(ds)), tape.epoch)


def dot(xs: Sequence[DiffScalar], ys: Sequence[DiffScalar], bias: DiffScalar | None = None) -> DiffScalar:
    """sum_k xs[k] * ys[k] (+ bias) recorded as a single tape node."""
    value = 0.0
    inputs: list[DiffScalar] = []
    partials: list[float] = []
    for x, y in zip(xs, ys):
        value += x.value * y.value
        if x.tape is not None:
            inputs.append(x)
            partials.append(y.value)
        if y.tape is not None:
            inputs.append(y)
            partials.append(x.value)
    if bias is not None:
        value += bias.value
        if bias.tape is not None:
            inputs.append(bias)
            partials.append(1.0)
    if not inputs:
        return DiffScalar(value)
    return combine(value, inputs, partials)


# elementary functions -------------------------------------------------------

def exp(x: DiffScalar) -> DiffScalar:
    v = _exp(x.value) if x.value < 709.78 or isinstance(x.value, _MPF) else math.inf
    return _unary(x, v, v)


def log(x: DiffScalar) -> DiffScalar:
    if x.value <= 0.0:
        raise DomainError(f"log of non-positive value {x.value}")
    return _unary(x, _log(x.value), 1.0 / x.value)


def sqrt(x: DiffScalar) -> DiffScalar:
    if x.value <= 0.0:
        raise DomainError(f"sqrt of non-positive value {x.value}")
    r = _sqrt(x.value)
    return _unary(x, r, 0.5 / r)


def dmin(a: DiffScalar, b: DiffScalar) -> DiffScalar:
    return a if a.value <= b.value else b


def dmax(a: DiffScalar, b: DiffScalar) -> DiffScalar:
    return a if a.value >= b.value else b


def _phi(z: float) -> float:
    return INV_SQRT_2PI * _exp(-0.5 * z * z)


def _Phi(z: float) -> float:
    if z < -8.0:
        return 0.5 * _erfc(-z / SQRT2)
    if z > 8.0:
        return 1.0 - 0.5 * _erfc(z / SQRT2)
    return 0.5 * (1.0 + _erf(z / SQRT2))


def normal_pdf(z: DiffScalar) -> DiffScalar:
    p = _phi(z.value)
    return _unary(z, p, -z.value * p)


def normal_cdf(z: DiffScalar) -> DiffScalar:
    return _unary(z, _Phi(z.value), _phi(z.value))


def normal_sf(z: DiffScalar) -> DiffScalar:
    """Upper tail 1 - Phi(z), accurate for large positive z."""
    return _unary(z, _Phi(-z.value), -_phi(z.value))


def _mills(a: float) -> float:
    if a > 0.0:
        return SQRT_2_OVER_PI / _erfcx(a / SQRT2)
    q = _Phi(-a)
    return _phi(a) / q


def mills_ratio(a: DiffScalar) -> DiffScalar:
    """Inverse Mills ratio phi(a) / (1 - Phi(a)), stable in both tails."""
    lam = _mills(a.value)
    return _unary(a, lam, lam * (lam - a.value))


def logsumexp(xs: Sequence[DiffScalar]) -> DiffScalar:
    finite = [x for x in xs if x.value != -math.inf]
    if not finite:
        return DiffScalar(-math.inf)
    m = max(x.value for x in finite)
    ws = [_exp(x.value - m) for x in finite]
    s = sum(ws)
    return combine(m + _log(s), finite, [w / s for w in ws])


# parameters -----------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    lo: float = -math.inf
    hi: float = math.inf

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class SimplexGroup:
    """Parameter names sharing a gm weight vector, plus the literal weight mass."""

    names: tuple[str, ...]
    literal_mass: float = 0.0


class ParamStore:
    """Ordered parameter table with domains.

    Values live as floats; :meth:`bind` creates fresh tape leaves for them.
    """

    def __init__(self, entries: Iterable[tuple[str, float, Domain]] = ()):
        self._values: dict[str, float] = {}
        self.domains: dict[str, Domain] = {}
        self.simplex_groups: list[SimplexGroup] = []
        self._leaves: dict[str, DiffScalar] = {}
        for name, value, domain in entries:
            self.add(name, value, domain)

    def add(self, name: str, value: float, domain: Domain = Domain()) -> None:
        name = name.lstrip("_")
        if name in self._values:
            raise ValueError(f"duplicate parameter {name}")
        self._values[name] = _num(value)
        self.domains[name] = domain

    @classmethod
    def from_dict(cls, values: Mapping[str, float], domains: Mapping[str, Domain] | None = None):
        domains = domains or {}
        return cls((k, v, domains.get(k, Domain())) for k, v in values.items())

    def copy(self) -> "ParamStore":
        other = ParamStore((n, v, self.domains[n]) for n, v in self._values.items())
        other.simplex_groups = list(self.simplex_groups)
        return other

    @property
    def names(self) -> list[str]:
        return list(self._values)

    def values(self) -> dict[str, float]:
        return dict(self._values)

    def __contains__(self, name: str) -> bool:
        return name.lstrip("_") in self._values

    def __len__(self) -> int:
        return len(self._values)

    def value(self, name: str) -> float:
        return self._values[name.lstrip("_")]

    def set(self, name: str, value: float) -> None:
        name = name.lstrip("_")
        if name not in self._values:
            raise KeyError(name)
        self._values[name] = _num(value)
        self._leaves.pop(name, None)

    def bind(self, tape: Tape) -> dict[str, DiffScalar]:
        self._leaves = {n: tape.leaf(v) for n, v in self._values.items()}
        return dict(self._leaves)

    def unbind(self) -> None:
        self._leaves = {}

    def scalar(self, name: str) -> DiffScalar:
        """Bound leaf for ``name`` if still live, else a constant."""
        name = name.lstrip("_")
        leaf = self._leaves.get(name)
        if leaf is not None and leaf.tape is not None and leaf.epoch == leaf.tape.epoch:
            return leaf
        return DiffScalar(self._values[name])

    def leaf(self, name: str) -> DiffScalar | None:
        return self._leaves.get(name.lstrip("_"))

    def __repr__(self) -> str:
        return f"ParamStore({self._values!r})"


# gradients ------------------------------------------------------------------

def backward(output: DiffScalar) -> list[float]:
    """Adjoints of every tape node up to ``output`` (empty list for constants)."""
    if output.tape is None:
        return []
    tape = _check(output)
    adj = [0.0] * (output.index + 1)
    adj[output.index] = 1.0
    parents, partials = tape.parents, tape.partials
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adj[p] += g * d
    return adj


def gradient(output: DiffScalar, params: ParamStore) -> dict[str, float]:
    grads = {name: 0.0 for name in params.names}
    if output.tape is None:
        return grads
    adj = backward(output)
    for name in params.names:
        leaf = params.leaf(name)
        if leaf is None or leaf.tape is not output.tape:
            continue
        if leaf.epoch != output.tape.epoch:
            raise StaleTape(f"parameter {name} was bound in an earlier epoch")
        if leaf.index < len(adj):
            grads[name] = adj[leaf.index]
    bad = [n for n, g in grads.items() if not math.isfinite(g)]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient for {', '.join(bad)}")
    return grads


def finite_diff_check(
    f: Callable[[ParamStore], DiffScalar | Sequence[DiffScalar]],
    params: ParamStore,
    h: float = 1e-5,
    floor: float = 1e-8,
    order: int = 2,
    dps: int | None = None,
) -> float:
    """Max relative discrepancy between tape gradients and central differences.

    ``f`` may return a single scalar or a sequence of scalars; every output is
    checked against every parameter.  The denominator is max(|analytic|, floor).
    ``order=2`` uses (f(x+h) - f(x-h)) / 2h; ``order=4`` uses the five-point
    central stencil, whose truncation error is O(h^4).

    With ``dps`` set, the perturbed evaluations run in mpmath with that many
    decimal digits.  The difference quotient is then free of float roundoff
    and ``h`` can be taken tiny, so the numeric side is essentially exact and
    the check measures the analytic gradient alone.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    reach = 1 if order == 2 else 2

    def as_list(out):
        return [out] if isinstance(out, DiffScalar) else list(out)

    tape = Tape()
    with using_tape(tape):
        params.bind(tape)
        outputs = as_list(f(params))
        analytic = [gradient(o, params) for o in outputs]
    params.unbind()

    worst = 0.0
    for name in params.names:
        base = params.value(name)
        dom = params.domains[name]
        step = h
        for attempt in range(4):
            if dom.lo < base - reach * step and base + reach * step < dom.hi:
                break
            step *= 0.1
        else:
            raise DomainError(f"parameter {name}={base} too close to its domain for h={h}")

        def at(offset):
            if dps is None:
                params.set(name, base + offset)
            else:
                params.set(name, mpmath.mpf(base) + mpmath.mpf(offset))
            return [o.value for o in as_list(f(params))]

        with mpmath.workdps(dps or mpmath.mp.dps):
            try:
                up, down = at(step), at(-step)
                if order == 4:
                    up2, down2 = at(2 * step), at(-2 * step)
            finally:
                params.set(name, base)
            for k, g in enumerate(analytic):
                if order == 2:
                    numeric = float((up[k] - down[k]) / (2 * step))
                else:
                    numeric = float((8 * (up[k] - down[k]) - (up2[k] - down2[k])) / (12 * step))
                err = abs(g[name] - numeric) / max(abs(g[name]), floor)
                worst = max(worst, err)
    return worst
