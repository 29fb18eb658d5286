"""Command-line driver.

Exit codes: 0 success, 1 other errors, 2 parse/validation/usage errors,
3 every path vanished, 4 path budget exceeded, 5 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .cfg import build_cfg, to_dot
from .diff import ParamStore, finite_diff_check
from .errors import (
    AllPathsVanished,
    DegasError,
    MalformedLoss,
    NonFiniteLoss,
    ParseError,
    PathBudgetExceeded,
    ValidationError,
)
from .frontend import load_program
from .gmix import GaussMix, collapse
from .optimize import LossSpec, OptimizerConfig, run_optimization
from .semantics import Posterior, SmoothConfig, eval_program, parse_delta, posterior_stats, soga_eval

EXIT_OK, EXIT_ERROR, EXIT_PARSE, EXIT_VANISHED, EXIT_BUDGET, EXIT_NONFINITE = 0, 1, 2, 3, 4, 5
CONVERGE_EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4)
BUILTIN = "builtin:"
# central differences evaluated with 40 significant digits, so a tiny step is safe
GRADCHECK_H, GRADCHECK_DPS = 1e-15, 40


@dataclass
class RunConfig:
    command: str
    program: str
    params: str | None = None
    epsilon: float = 1e-3
    delta: str = "sqrt"
    lr: float = 0.01
    steps: int = 500
    loss: str | None = None
    data: str | None = None
    out: str = "-"
    format: str | None = None
    seed: int = 0
    max_paths: int = 4096
    threads: int = 1
    dump_cfg: str | None = None
    # Monte Carlo runs for the mc command; API only, the CLI always uses 10^6
    samples: int = 1_000_000


# program loading ----------------------------------------------------------------

def bundled_programs() -> list[str]:
    root = resources.files("degas") / "programs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".soga"))


def bundled_text(name: str, suffix: str) -> str | None:
    f = resources.files("degas") / "programs" / f"{name}{suffix}"
    return f.read_text(encoding="utf-8") if f.is_file() else None


def load(rc: RunConfig):
    if rc.program.startswith(BUILTIN):
        name = rc.program[len(BUILTIN):]
        source = bundled_text(name, ".soga")
        if source is None:
            raise FileNotFoundError(f"no bundled program {name!r}; available: {', '.join(bundled_programs())}")
        ptext = Path(rc.params).read_text(encoding="utf-8") if rc.params else (bundled_text(name, ".params") or "")
    else:
        source = Path(rc.program).read_text(encoding="utf-8")
        ptext = Path(rc.params).read_text(encoding="utf-8") if rc.params else ""
    ast, params = load_program(source, ptext)
    return ast, params


def smooth_config(rc: RunConfig) -> SmoothConfig:
    if not rc.epsilon > 0:
        raise ValueError("--epsilon must be positive")
    return SmoothConfig(epsilon=rc.epsilon, delta=parse_delta(rc.delta), max_paths=rc.max_paths)


# output helpers -----------------------------------------------------------------

def _open_out(path: str):
    if path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def _write(rc: RunConfig, text: str) -> None:
    fh, close = _open_out(rc.out)
    try:
        fh.write(text)
    finally:
        if close:
            fh.close()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _mix_summary(mix: GaussMix) -> list[dict]:
    return [
        {"weight": w.value, "mean": g.mean_values().tolist(), "cov": g.cov_values().tolist()}
        for w, g in zip(mix.weights, mix.components)
    ]


def _paths_summary(post_paths) -> list[dict]:
    out = []
    for r in post_paths:
        lp = r.log_weight.value
        out.append(
            {
                "nodes": list(r.nodes),
                "log_probability": lp if math.isfinite(lp) else None,
                "probability": math.exp(lp) if math.isfinite(lp) else 0.0,
                "vanished": r.vanished,
            }
        )
    return out


def posterior_summary(post: Posterior) -> dict:
    st = posterior_stats(post)
    mean = [m.value for m in st.mean]
    cov = [[c.value for c in row] for row in st.cov]
    lt = post.log_total.value
    marginals = {}
    for k, v in enumerate(post.var_names):
        comps = [
            [w.value, g.mean[k].value, math.sqrt(max(g.cov[k][k].value, 0.0))]
            for w, g in zip(post.mixture.weights, post.mixture.components)
        ]
        marginals[v] = {"mean": mean[k], "std": math.sqrt(max(cov[k][k], 0.0)), "components": comps}
    return {
        "variables": list(post.var_names),
        "parameters": post.params,
        "total_probability": post.total_probability,
        "log_total_probability": lt if math.isfinite(lt) else None,
        "paths": _paths_summary(post.paths),
        "components": _mix_summary(post.mixture),
        "posterior": {"mean": mean, "cov": cov},
        "marginals": marginals,
    }


# commands -----------------------------------------------------------------------

def cmd_eval(rc: RunConfig) -> int:
    ast, params = load(rc)
    cfg = build_cfg(ast)
    try:
        post = eval_program(cfg, params, smooth_config(rc))
    except AllPathsVanished as exc:
        part = exc.posterior
        summary = {
            "variables": list(ast.var_names),
            "parameters": params.values(),
            "total_probability": 0.0,
            "log_total_probability": None,
            "paths": _paths_summary(part.paths if part else []),
            "components": [],
            "posterior": None,
            "marginals": {},
        }
        _write(rc, _json(summary) if (rc.format or "json") == "json" else _csv([["variable", "mean", "std"]]))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VANISHED
    summary = posterior_summary(post)
    if (rc.format or "json") == "json":
        _write(rc, _json(summary))
    else:
        rows = [["variable", "mean", "std"]]
        rows += [[v, f"{m['mean']:.10g}", f"{m['std']:.10g}"] for v, m in summary["marginals"].items()]
        _write(rc, _csv(rows))
    return EXIT_OK


def _read_dataset(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedLoss("dataset is empty")
    header = [h.strip() for h in rows[0]]
    data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        raise MalformedLoss("dataset has no observations")
    return header, data.reshape(-1, len(header))


def cmd_optimize(rc: RunConfig) -> int:
    ast, params = load(rc)
    if rc.loss is None:
        raise MalformedLoss("--loss is required for optimize")
    data, observed = None, ()
    if rc.data:
        observed, data = _read_dataset(rc.data)
    loss = LossSpec.parse(rc.loss, data, observed)
    ocfg = OptimizerConfig(lr=rc.lr, steps=rc.steps, epsilon=rc.epsilon, seed=rc.seed)
    smooth = smooth_config(rc)
    final, trace = run_optimization(build_cfg(ast), params, loss, ocfg, smooth)
    result = {
        "parameters": final.values(),
        "converged": trace.converged,
        "steps": len(trace),
        "initial_loss": trace.losses[0] if trace.losses else None,
        "final_loss": trace.final_loss,
    }
    header = ["step", "loss"] + trace.names + ["wall_ms"]
    fmt = rc.format or "csv"
    if fmt == "json":
        result["trace"] = [dict(zip(header, row)) for row in trace.rows()]
        _write(rc, _json(result))
    else:
        _write(rc, _csv([header] + [[f"{x:.17g}" if isinstance(x, float) else x for x in r] for r in trace.rows()]))
        text = _json(result)
        if rc.out == "-":
            sys.stderr.write(text)
        else:
            Path(rc.out).with_suffix(".json").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig) -> int:
    ast, params = load(rc)
    cfg = build_cfg(ast)
    smooth = smooth_config(rc)

    def outputs(p: ParamStore):
        post = eval_program(cfg, p, smooth)
        st = posterior_stats(post)
        return [post.log_total] + list(st.mean)

    err = finite_diff_check(outputs, params, h=GRADCHECK_H, dps=GRADCHECK_DPS) if len(params) else 0.0
    _write(rc, _json({
        "max_relative_error": err,
        "parameters": params.values(),
        "h": GRADCHECK_H,
        "digits": GRADCHECK_DPS,
    }))
    return EXIT_OK


def _moments(mix_list: list[tuple[float, GaussMix]], k: int) -> tuple[float, float]:
    weights = np.array([w for w, _ in mix_list], dtype=float)
    if weights.sum() <= 0:
        weights = np.ones(len(mix_list))
    weights = weights / weights.sum()
    ms, vs = [], []
    for (_, mix) in mix_list:
        g = collapse(mix)
        ms.append(g.mean[k].value)
        vs.append(g.cov[k][k].value)
    ms, vs = np.array(ms), np.array(vs)
    mu = float(weights @ ms)
    var = float(weights @ (vs + (ms - mu) ** 2))
    return mu, math.sqrt(max(var, 0.0))


def converge_table(ast, params, delta: str = "sqrt", var: int = 0, max_paths: int = 4096) -> list[list]:
    """Rows (label, p, mu, sigma) for the epsilon ladder and the soga row."""
    cfg = build_cfg(ast)
    rows = []
    for eps in CONVERGE_EPSILONS:
        config = SmoothConfig(epsilon=eps, delta=parse_delta(delta), max_paths=max_paths)
        try:
            post = eval_program(cfg, params, config)
            p = post.total_probability
            mu, sd = _moments([(1.0, post.mixture)], var)
        except AllPathsVanished as exc:
            p = 0.0
            mu, sd = _moments([(0.0, r.dist) for r in exc.posterior.paths], var)
        rows.append([eps, p, mu, sd])
    paths = soga_eval(cfg, params, max_paths=max_paths)
    p = sum(sp.prob for sp in paths)
    mu, sd = _moments([(sp.prob, sp.dist) for sp in paths], var)
    rows.append(["soga", p, mu, sd])
    return rows


def cmd_converge(rc: RunConfig) -> int:
    ast, params = load(rc)
    rows = converge_table(ast, params, rc.delta, 0, rc.max_paths)
    var = ast.var_names[0] if ast.var_names else ""
    fmt = rc.format or "csv"
    if fmt == "json":
        _write(rc, _json({"variable": var, "rows": [dict(zip(["epsilon", "p", "mu", "sigma"], r)) for r in rows]}))
    else:
        out = [["epsilon", "p", "mu", "sigma"]]
        for label, p, mu, sd in rows:
            label = label if isinstance(label, str) else f"{label:g}"
            out.append([label, f"{p:.4f}", f"{mu:.4f}", f"{sd:.4f}"])
        _write(rc, _csv(out))
    return EXIT_OK


def cmd_mc(rc: RunConfig) -> int:
    from .oracle import mc_sample

    ast, params = load(rc)
    res = mc_sample(ast, params, rc.samples, rc.seed)
    payload = {
        "variables": list(res.var_names),
        "n_requested": res.n_requested,
        "n_effective": res.n_effective,
        "acceptance_rate": res.acceptance_rate,
        "evidence": res.evidence,
        "mean": res.mean.tolist(),
        "cov": res.cov.tolist(),
        "std_error": res.std_error.tolist(),
        "cov_std_error": res.cov_std_error.tolist(),
    }
    if (rc.format or "json") == "json":
        _write(rc, _json(payload))
    else:
        rows = [["variable", "mean", "std", "std_error"]]
        for k, v in enumerate(res.var_names):
            rows.append([v, f"{res.mean[k]:.10g}", f"{math.sqrt(res.cov[k, k]):.10g}", f"{res.std_error[k]:.3g}"])
        _write(rc, _csv(rows))
    return EXIT_OK


COMMANDS = {
    "eval": cmd_eval,
    "optimize": cmd_optimize,
    "gradcheck": cmd_gradcheck,
    "converge": cmd_converge,
    "mc": cmd_mc,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="degas", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--program", required=True, help="program file, or builtin:<name> for a bundled example")
    ap.add_argument("--params", help="parameter file: one 'name init lo hi' record per line")
    ap.add_argument("--epsilon", type=float, default=1e-3, help="smoothing standard deviation (default 1e-3)")
    ap.add_argument("--delta", default="sqrt", help="threshold shift rule: sqrt or pow:<k> (default sqrt)")
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--loss", help="nll, or an expression such as 'max: cdf(T, 19.5, 20.5)'")
    ap.add_argument("--data", help="CSV dataset with a header of variable names")
    ap.add_argument("--out", default="-", help="output path, '-' for stdout")
    ap.add_argument("--format", choices=["json", "csv"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-paths", type=int, default=4096)
    ap.add_argument("--threads", type=int, default=1, help="accepted for compatibility; evaluation is single-threaded")
    ap.add_argument("--dump-cfg", help="write the control-flow graph in DOT format to this path")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    rc = RunConfig(**{k: v for k, v in vars(args).items()})
    if rc.threads != 1:
        print("note: --threads is ignored; paths are evaluated sequentially", file=sys.stderr)
    try:
        if rc.dump_cfg:
            ast, _ = load(rc)
            Path(rc.dump_cfg).write_text(to_dot(build_cfg(ast)), encoding="utf-8")
        return COMMANDS[rc.command](rc)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except AllPathsVanished as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VANISHED
    except PathBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NonFiniteLoss as exc:
        step = getattr(exc, "step", None)
        print(f"error: {exc} (step {step})", file=sys.stderr)
        return EXIT_NONFINITE
    except (DegasError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
