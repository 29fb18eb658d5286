import math

import mpmath
import numpy as np
import pytest

from degas import diff
from degas.diff import (
    DiffScalar,
    Domain,
    ParamStore,
    Tape,
    backward,
    combine,
    dmax,
    dmin,
    dot,
    finite_diff_check,
    gradient,
    logsumexp,
    mills_ratio,
    normal_cdf,
    normal_pdf,
    normal_sf,
    using_tape,
)
from degas.errors import DomainError, NonFiniteGradient, StaleTape

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def grad1(f, x):
    """d f / d x at a single point through the tape."""
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    adj = backward(out)
    return out.value, (adj[leaf.index] if adj else 0.0)


def grads(f, *xs):
    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    adj = backward(f(*leaves))
    return [adj[l.index] if l.index < len(adj) else 0.0 for l in leaves]


class TestScalarOps:
    def test_square(self):
        assert grad1(lambda t: t * t, 3.0) == (9.0, 6.0)
        assert grad1(lambda t: t**2, 3.0) == (9.0, 6.0)

    def test_exp_log_identity(self):
        value, g = grad1(lambda t: diff.exp(diff.log(t)), 2.0)
        assert value == pytest.approx(2.0, abs=1e-15)
        assert g == pytest.approx(1.0, abs=1e-15)

    def test_product_rule(self):
        assert grads(lambda a, b: a * b, 2.0, 5.0) == [5.0, 2.0]

    def test_quotient_and_negation(self):
        np.testing.assert_allclose(grads(lambda a, b: -a / b, 3.0, 2.0), [-0.5, 0.75])

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            diff.log(DiffScalar(0.0))
        with pytest.raises(DomainError):
            diff.sqrt(DiffScalar(-1.0))
        with pytest.raises(DomainError):
            DiffScalar(1.0) / DiffScalar(0.0)
        with pytest.raises(DomainError):
            DiffScalar(-2.0) ** 0.5

    def test_min_max_follow_values(self):
        assert grads(lambda a, b: dmin(a, b), 1.0, 2.0) == [1.0, 0.0]
        assert grads(lambda a, b: dmax(a, b), 1.0, 2.0) == [0.0, 1.0]

    def test_constants_allocate_no_nodes(self):
        tape = Tape()
        with using_tape(tape):
            c = DiffScalar(2.0) * DiffScalar(3.0) + 1.0
        assert c.is_constant and len(tape) == 0

    def test_combine_and_dot(self):
        g = grads(lambda a, b: dot([a, b], [b, DiffScalar(4.0)], bias=a), 2.0, 3.0)
        # d/da (a*b + 4b + a) = b + 1, d/db = a + 4
        assert g == [4.0, 6.0]
        g = grads(lambda a: combine(a.value**3, [a, a], [1.0, 2.0]), 1.5)
        assert g == [3.0]

    def test_logsumexp(self):
        g = grads(lambda a, b: logsumexp([a, b]), 0.0, math.log(3.0))
        np.testing.assert_allclose(g, [0.25, 0.75], rtol=1e-14)
        assert logsumexp([DiffScalar(-math.inf)]).value == -math.inf


UNARY = {
    "exp": (diff.exp, (-5.0, 5.0)),
    "log": (diff.log, (0.05, 20.0)),
    "sqrt": (diff.sqrt, (0.05, 20.0)),
    "square": (lambda t: t * t, (-5.0, 5.0)),
    "cube": (lambda t: t**3, (-5.0, 5.0)),
    "recip": (lambda t: 1.0 / t, (0.1, 5.0)),
    "pdf": (normal_pdf, (-6.0, 6.0)),
    "cdf": (normal_cdf, (-6.0, 6.0)),
    "sf": (normal_sf, (-6.0, 6.0)),
    "mills": (mills_ratio, (-6.0, 6.0)),
}


class TestRandomInputs:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_against_differences(self, name):
        f, (lo, hi) = UNARY[name]
        rng = np.random.default_rng(7)
        h = 1e-6
        for x in rng.uniform(lo, hi, 1000):
            _, g = grad1(f, x)
            fd = (f(DiffScalar(x + h)).value - f(DiffScalar(x - h)).value) / (2 * h)
            assert abs(g - fd) <= 1e-4 * max(abs(g), 1e-8) + 1e-9, (x, g, fd)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_against_differences(self, op):
        f = {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / b,
        }[op]
        rng = np.random.default_rng(11)
        h = 1e-6
        for a, b in rng.uniform(0.2, 4.0, (1000, 2)):
            ga, gb = grads(f, a, b)
            fa = (f(DiffScalar(a + h), DiffScalar(b)).value - f(DiffScalar(a - h), DiffScalar(b)).value) / (2 * h)
            fb = (f(DiffScalar(a), DiffScalar(b + h)).value - f(DiffScalar(a), DiffScalar(b - h)).value) / (2 * h)
            assert abs(ga - fa) <= 1e-4 * max(abs(ga), 1e-8)
            assert abs(gb - fb) <= 1e-4 * max(abs(gb), 1e-8)


class TestNormal:
    def test_cdf_at_zero(self):
        value, g = grad1(normal_cdf, 0.0)
        assert value == 0.5
        assert g == pytest.approx(INV_SQRT_2PI, abs=1e-15)
        assert g == pytest.approx(0.3989422804, abs=1e-10)

    def test_lower_tail(self):
        exact = mpmath.ncdf(-10)
        assert abs(normal_cdf(DiffScalar(-10.0)).value - float(exact)) < 1e-28
        assert f"{normal_cdf(DiffScalar(-10.0)).value:.6e}" == "7.619853e-24"

    def test_upper_tail_complement(self):
        for z in (8.5, 12.0, 30.0):
            assert normal_sf(DiffScalar(z)).value == pytest.approx(float(mpmath.ncdf(-z)), rel=1e-13)

    def test_pdf_derivative(self):
        value, g = grad1(normal_pdf, 1.3)
        assert g == pytest.approx(-1.3 * value, rel=1e-15)

    @pytest.mark.parametrize("a", [-30.0, -8.0, -1.0, 0.0, 0.5, 6.0, 9.0, 40.0])
    def test_mills_ratio_tails(self, a):
        with mpmath.workdps(50):
            exact = mpmath.npdf(a) / mpmath.ncdf(-a)
        assert mills_ratio(DiffScalar(a)).value == pytest.approx(float(exact), rel=1e-12)


class TestGradient:
    def test_cdf_ratio(self):
        ps = ParamStore.from_dict({"theta": 0.0, "sigma": 1.0})
        tape = Tape()
        with using_tape(tape):
            ps.bind(tape)
            out = normal_cdf(ps.scalar("theta") / ps.scalar("sigma"))
        g = gradient(out, ps)
        assert g["theta"] == pytest.approx(INV_SQRT_2PI, abs=1e-15)
        assert g["sigma"] == 0.0

    def test_constant_output(self):
        ps = ParamStore.from_dict({"a": 1.0, "b": 2.0})
        assert gradient(DiffScalar(3.0), ps) == {"a": 0.0, "b": 0.0}

    def test_stale_tape(self):
        ps = ParamStore.from_dict({"a": 1.0})
        tape = Tape()
        ps.bind(tape)
        out = ps.scalar("a") * 2.0
        tape.reset()
        with pytest.raises(StaleTape):
            gradient(out, ps)

    def test_linearity(self):
        ps = ParamStore.from_dict({"a": 0.7, "b": -0.4})
        tape = Tape()
        ps.bind(tape)
        a, b = ps.scalar("a"), ps.scalar("b")
        f, g = a * b + diff.exp(a), normal_cdf(a - b)
        gf, gg, gs = gradient(f, ps), gradient(g, ps), gradient(2.0 * f + g, ps)
        for n in ("a", "b"):
            assert gs[n] == pytest.approx(2.0 * gf[n] + gg[n], rel=1e-14)

    def test_non_finite_gradient(self):
        ps = ParamStore.from_dict({"a": 0.0})
        tape = Tape()
        ps.bind(tape)
        out = combine(1.0, [ps.scalar("a")], [math.inf])
        with pytest.raises(NonFiniteGradient):
            gradient(out, ps)

    def test_tape_reset_keeps_memory_flat(self):
        ps = ParamStore.from_dict({"a": 0.3})
        tape = Tape()
        sizes = []
        for _ in range(5):
            tape.reset()
            ps.bind(tape)
            x = ps.scalar("a")
            for _ in range(50):
                x = diff.exp(-x * x)
            sizes.append(len(tape))
        assert len(set(sizes)) == 1


class TestFiniteDiffCheck:
    def test_square(self):
        ps = ParamStore.from_dict({"t": 3.0})
        assert finite_diff_check(lambda p: p.scalar("t") ** 2, ps, h=1e-4) < 1e-7

    def test_cdf(self):
        ps = ParamStore.from_dict({"t": 1.0})
        assert finite_diff_check(lambda p: normal_cdf(p.scalar("t")), ps, h=1e-5) < 1e-6

    def test_several_outputs(self):
        ps = ParamStore.from_dict({"a": 0.5, "b": 2.0})
        f = lambda p: [p.scalar("a") * p.scalar("b"), diff.log(p.scalar("b"))]
        assert finite_diff_check(f, ps) < 1e-8

    def test_step_shrinks_near_domain_edge(self):
        ps = ParamStore([("s", 5e-6, Domain(0.0, math.inf))])
        assert finite_diff_check(lambda p: p.scalar("s") ** 2 + p.scalar("s"), ps, h=1e-5) < 1e-8

    def test_domain_error_when_shrinking_fails(self):
        ps = ParamStore([("s", 1e-12, Domain(0.0, math.inf))])
        with pytest.raises(DomainError):
            finite_diff_check(lambda p: diff.sqrt(p.scalar("s")), ps, h=1e-5)

    def test_fourth_order_stencil(self):
        ps = ParamStore.from_dict({"t": 0.4})
        f = lambda p: diff.exp(p.scalar("t") * 3.0)
        assert finite_diff_check(f, ps, h=1e-2, order=2) > 1e-5
        assert finite_diff_check(f, ps, h=1e-2, order=4) < 1e-7

    def test_multiprecision_differences(self):
        # 1 + x - x is exactly 1 in real arithmetic but wobbles in floats
        ps = ParamStore.from_dict({"t": 0.1})
        f = lambda p: normal_cdf(p.scalar("t")) + normal_sf(p.scalar("t")) + p.scalar("t") ** 2
        assert finite_diff_check(f, ps, h=1e-15, dps=40) < 1e-12
        assert type(ps.value("t")) is float

    def test_parameters_restored(self):
        ps = ParamStore.from_dict({"a": 0.25})
        finite_diff_check(lambda p: p.scalar("a") ** 3, ps, order=4)
        assert ps.value("a") == 0.25


class TestParamStore:
    def test_names_strip_underscore(self):
        ps = ParamStore.from_dict({"_theta": 1.0})
        assert ps.names == ["theta"]
        assert "_theta" in ps and ps.value("_theta") == 1.0

    def test_unbound_scalar_is_constant(self):
        ps = ParamStore.from_dict({"a": 2.0})
        assert ps.scalar("a").is_constant

    def test_copy_is_independent(self):
        ps = ParamStore.from_dict({"a": 2.0})
        other = ps.copy()
        other.set("a", 3.0)
        assert ps.value("a") == 2.0

    def test_duplicate(self):
        ps = ParamStore.from_dict({"a": 2.0})
        with pytest.raises(ValueError):
            ps.add("_a", 1.0)
