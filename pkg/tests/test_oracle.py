import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from degas.errors import MaxSubdivisions, NoAcceptedSamples, UnsupportedProgram
from degas.frontend import Product, load_program, parse, pretty
from degas.cfg import build_cfg, count_paths
from degas.oracle import RandomProgramSpec, gen_random_program, mc_sample, program_text, quad_integrate
from degas.semantics import SmoothConfig, eval_program, posterior_stats

from conftest import builtin, vals

GOLDEN = Path(__file__).parent / "golden"


def walk(body):
    for stmt in body:
        yield stmt
        for branch in ("then", "orelse"):
            yield from walk(getattr(stmt, branch, ()))


class TestMonteCarlo:
    def test_standard_normal(self):
        res = mc_sample(parse("x = gm([1.], [0.], [1.]);"), None, 10**6, seed=0)
        assert abs(res.mean[0]) < 3e-3
        assert abs(res.cov[0, 0] - 1.0) < 5e-3
        assert res.acceptance_rate == 1.0 and res.n_effective == pytest.approx(1e6)

    def test_p3_acceptance(self):
        res = mc_sample(*builtin("p3"), 10**5, seed=1)
        sd = math.sqrt(0.25 / 1e5)
        assert abs(res.acceptance_rate - 0.5) < 3 * sd
        assert res.mean[0] == 0.0 and res.cov[0, 0] == 0.0

    def test_fig2_symmetry(self, fig2):
        res = mc_sample(*fig2, 10**5, seed=2)
        assert abs(res.mean[1]) < 3 * res.std_error[1]

    def test_truncation(self):
        res = mc_sample(parse("x = gm([1.], [0.], [1.]); observe(x < 0);"), None, 10**5, seed=3)
        assert abs(res.mean[0] + math.sqrt(2 / math.pi)) < 3 * res.std_error[0]

    def test_equality_observe_weights(self):
        src = "x = gm([1.], [0.], [1.]); y = gm([0.5, 0.5], [0., 2.], [1., 1.]); observe(y == 0.5);"
        res = mc_sample(parse(src), None, 10**5, seed=4)
        assert res.mean[1] == pytest.approx(0.5, abs=1e-12) and abs(res.cov[1, 1]) < 1e-12
        # each run is weighted by the density of the component it drew
        expected = 0.5 * norm.pdf(0.5) + 0.5 * norm.pdf(1.5)
        assert res.evidence == pytest.approx(expected, rel=1e-2)

    def test_dependent_equality_unsupported(self):
        src = "x = gm([1.], [0.], [1.]); y = x + 1; observe(y == 1);"
        with pytest.raises(UnsupportedProgram):
            mc_sample(parse(src), None, 1000, seed=0)

    def test_no_accepted(self):
        with pytest.raises(NoAcceptedSamples):
            mc_sample(*builtin("p2"), 1000, seed=0)

    def test_deterministic(self, fig2):
        a = mc_sample(*fig2, 70000, seed=5)
        b = mc_sample(*fig2, 70000, seed=5)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.cov, b.cov)

    def test_chunking_does_not_matter(self, fig2):
        a = mc_sample(*fig2, 5000, seed=6, chunk=1000)
        b = mc_sample(*fig2, 5000, seed=6, chunk=1000)
        np.testing.assert_array_equal(a.mean, b.mean)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            mc_sample(parse("x = 1;"), None, 0)


class TestQuad:
    def test_normal_mass(self):
        assert quad_integrate(norm.pdf, -8.0, 8.0) == pytest.approx(1.0, abs=1e-10)

    def test_truncated_mean(self):
        value = quad_integrate(lambda x: x * norm.pdf(x) / 0.5, -8.0, 0.0)
        assert value == pytest.approx(-0.79788, abs=1e-5)
        assert value == pytest.approx(-math.sqrt(2 / math.pi), abs=1e-10)

    def test_example_marginal_mass(self, fig2):
        stats = posterior_stats(eval_program(*fig2, SmoothConfig(epsilon=0.05)))
        assert quad_integrate(lambda t: stats.pdf("y", t).value, -3.0, 3.0, tol=1e-9) == pytest.approx(1.0, abs=1e-8)

    def test_subdivision_limit(self):
        with pytest.raises(MaxSubdivisions):
            quad_integrate(lambda x: math.sin(1 / x) / x, 1e-6, 1.0, limit=5)

    def test_bad_tolerance(self):
        with pytest.raises(ValueError):
            quad_integrate(norm.pdf, 0.0, 1.0, tol=0.0)


class TestGenerator:
    def test_golden_seed0(self):
        src, ptext = program_text(gen_random_program(RandomProgramSpec(seed=0)))
        assert src == (GOLDEN / "random_seed0.soga").read_text()
        assert ptext == (GOLDEN / "random_seed0.params").read_text()

    def test_deterministic(self):
        for seed in range(5):
            a = gen_random_program(RandomProgramSpec(seed=seed))
            b = gen_random_program(RandomProgramSpec(seed=seed))
            assert pretty(a) == pretty(b)

    def test_products_disabled(self):
        for seed in range(20):
            ast = gen_random_program(RandomProgramSpec(seed=seed, products=False))
            assert not any(isinstance(getattr(s, "expr", None), Product) for s in walk(ast.body))

    def test_no_tests_single_path(self):
        for seed in range(20):
            ast = gen_random_program(RandomProgramSpec(seed=seed, max_tests=0))
            assert count_paths(build_cfg(ast)) == 1

    def test_programs_are_valid(self):
        for seed in range(20):
            src, ptext = program_text(gen_random_program(RandomProgramSpec(seed=seed, max_tests=3)))
            ast, ps = load_program(src, ptext)
            assert eval_program(ast, ps).total_probability >= 0.05

    def test_spec_bounds(self):
        with pytest.raises(ValueError):
            RandomProgramSpec(n_vars=5)
        with pytest.raises(ValueError):
            RandomProgramSpec(max_tests=4)


class TestAgreement:
    @pytest.mark.parametrize("seed", range(5))
    def test_linear_programs(self, seed):
        spec = RandomProgramSpec(seed=seed, max_tests=1, max_observes=1, max_conditions=1, products=False, eq_observes=False)
        ast, ps = load_program(*program_text(gen_random_program(spec)))
        stats = posterior_stats(eval_program(ast, ps, SmoothConfig(epsilon=1e-3)))
        res = mc_sample(ast, ps, 2 * 10**5, seed=seed)
        assert np.all(np.abs(np.array(vals(stats.mean)) - res.mean) <= 3 * res.std_error + 1e-3)
        assert np.all(np.abs(np.array(vals(stats.cov)) - res.cov) <= 3 * res.cov_std_error + 1e-3)
