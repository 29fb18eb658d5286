import csv
import io
import json

import numpy as np
import pytest

from degas.cli import bundled_programs, converge_table, main

from conftest import builtin


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def fig2_data(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 1.0, 1000)
    path = tmp_path / "data.csv"
    rows = [["x", "y"]] + [[repr(float(a)), "-1.0" if a < 0.5 else "1.0"] for a in x]
    path.write_text("\n".join(",".join(r) for r in rows) + "\n")
    return path


class TestEval:
    def test_fig2(self, capsys):
        code, out, _ = run(capsys, "eval", "--program", "builtin:fig2")
        assert code == 0
        summary = json.loads(out)
        y = summary["marginals"]["y"]["components"]
        np.testing.assert_allclose([c[0] for c in y], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose([c[1] for c in y], [-1.0, 1.0], atol=1e-12)
        assert summary["total_probability"] == pytest.approx(1.0)

    def test_skip_program(self, capsys, tmp_path):
        prog = tmp_path / "skip.soga"
        prog.write_text("x = gm([1.], [0.], [1.]);\nskip;\n")
        code, out, _ = run(capsys, "eval", "--program", str(prog))
        summary = json.loads(out)
        assert code == 0
        assert summary["posterior"] == {"mean": [0.0], "cov": [[1.0]]}
        assert summary["total_probability"] == 1.0

    def test_csv_format(self, capsys):
        code, out, _ = run(capsys, "eval", "--program", "builtin:fig1c", "--format", "csv")
        rows = list(csv.reader(io.StringIO(out)))
        assert code == 0 and rows[0] == ["variable", "mean", "std"]
        assert [r[0] for r in rows[1:]] == ["x", "y"]

    def test_p2_vanishes(self, capsys):
        code, out, err = run(capsys, "eval", "--program", "builtin:p2", "--epsilon", "1e-3")
        assert code == 3
        assert f"{json.loads(out)['total_probability']:.4f}" == "0.0000"
        assert err.startswith("error:")

    def test_parse_error(self, capsys, tmp_path):
        prog = tmp_path / "bad.soga"
        prog.write_text("x = ;\n")
        code, out, err = run(capsys, "eval", "--program", str(prog))
        assert code == 2 and out == "" and "error" in err

    def test_path_budget(self, capsys, tmp_path):
        prog = tmp_path / "wide.soga"
        # four guards on fresh draws give sixteen live paths
        prog.write_text("x = gm([1.], [0.], [1.]);\n" + "x = gm([1.], [0.], [1.]); if (x > 0) { skip; }\n" * 4)
        code, _, _ = run(capsys, "eval", "--program", str(prog), "--max-paths", "8")
        assert code == 4

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["eval"])
        assert info.value.code == 2

    def test_unknown_builtin(self, capsys):
        code, _, err = run(capsys, "eval", "--program", "builtin:nope")
        assert code == 1 and "available" in err

    def test_repeat_runs_identical(self, capsys):
        outs = [run(capsys, "eval", "--program", "builtin:thermostat")[1] for _ in range(2)]
        assert outs[0] == outs[1]

    def test_dump_cfg(self, capsys, tmp_path):
        dot = tmp_path / "cfg.dot"
        code, _, _ = run(capsys, "eval", "--program", "builtin:fig2", "--dump-cfg", str(dot))
        assert code == 0 and dot.read_text().startswith("digraph cfg {")

    def test_output_file(self, capsys, tmp_path):
        path = tmp_path / "out.json"
        code, out, _ = run(capsys, "eval", "--program", "builtin:fig2", "--out", str(path))
        assert code == 0 and out == ""
        assert json.loads(path.read_text())["variables"] == ["x", "y"]

    def test_bundled(self):
        assert {"fig1a", "fig1b", "fig1c", "fig1d", "fig2", "p1", "p2", "p3", "thermostat"} <= set(bundled_programs())


class TestOptimize:
    def test_fig2_recovery(self, capsys, tmp_path, fig2_data):
        out = tmp_path / "trace.csv"
        code, _, _ = run(
            capsys, "optimize", "--program", "builtin:fig2", "--loss", "nll", "--data", str(fig2_data), "--out", str(out)
        )
        assert code == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["step", "loss", "theta", "sigma", "wall_ms"]
        result = json.loads(out.with_suffix(".json").read_text())
        assert abs(result["parameters"]["theta"] - 0.5) <= 0.05
        assert result["final_loss"] < result["initial_loss"]

    def test_json_trace_monotone(self, capsys, tmp_path):
        prog = tmp_path / "q.soga"
        prog.write_text("x = gm([1.], [_t], [1.]);\n")
        params = tmp_path / "q.params"
        params.write_text("t 0 -inf inf\n")
        code, out, _ = run(
            capsys, "optimize", "--program", str(prog), "--params", str(params),
            "--loss", "min: (mean(x) - 2) ** 2", "--steps", "50", "--format", "json",
        )
        assert code == 0
        losses = [r["loss"] for r in json.loads(out)["trace"]]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_thermostat(self, capsys):
        code, out, _ = run(
            capsys, "optimize", "--program", "builtin:thermostat", "--loss", "max: cdf(T, 19.5, 20.5) * cdf(on, 0.5, inf)",
            "--lr", "0.1", "--steps", "100", "--format", "json",
        )
        result = json.loads(out)
        assert code == 0 and result["final_loss"] < result["initial_loss"]

    def test_non_finite_loss(self, capsys, tmp_path):
        data = tmp_path / "far.csv"
        data.write_text("x\n1e200\n")
        code, _, err = run(capsys, "optimize", "--program", "builtin:fig2", "--loss", "nll", "--data", str(data))
        assert code == 5 and "step 0" in err

    def test_missing_loss(self, capsys):
        code, _, _ = run(capsys, "optimize", "--program", "builtin:fig2")
        assert code == 1


class TestConverge:
    def test_table(self, capsys):
        code, out, _ = run(capsys, "converge", "--program", "builtin:p1")
        rows = list(csv.reader(io.StringIO(out)))
        assert code == 0
        assert rows[0] == ["epsilon", "p", "mu", "sigma"]
        assert rows[1][0] == "0.1"
        np.testing.assert_allclose([float(v) for v in rows[1][1:]], [0.9992, 0.0002, 0.0995], atol=5e-4)
        assert rows[-1] == ["soga", "1.0000", "0.0000", "0.0000"]

    def test_p3_and_p2(self):
        p3 = converge_table(*builtin("p3"))
        assert f"{p3[1][1]:.4f}" == "0.5000" and f"{p3[1][3]:.4f}" == "0.0100"
        p2 = converge_table(*builtin("p2"))
        assert f"{p2[-1][1]:.4f}" == "0.0000" and f"{p2[-1][3]:.4f}" == "0.0000"

    def test_json(self, capsys):
        code, out, _ = run(capsys, "converge", "--program", "builtin:p3", "--format", "json")
        payload = json.loads(out)
        assert code == 0 and payload["variable"] == "x" and len(payload["rows"]) == 5


class TestGradcheckAndMc:
    def test_gradcheck(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--program", "builtin:fig2")
        result = json.loads(out)
        assert code == 0 and result["max_relative_error"] < 1e-6

    def test_mc(self, capsys):
        code, out, _ = run(capsys, "mc", "--program", "builtin:p3", "--seed", "3")
        result = json.loads(out)
        assert code == 0 and abs(result["acceptance_rate"] - 0.5) < 3 * 0.0005
