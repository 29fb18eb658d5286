"""Differentiable Gaussian-mixture semantics for loop-free probabilistic programs."""

from .cfg import Cfg, build_cfg, enumerate_paths, successor
from .diff import DiffScalar, Domain, ParamStore, Tape, finite_diff_check, gradient, using_tape
from .frontend import Ast, load_program, parse, pretty, read_program, validate
from .semantics import (
    Posterior,
    SmoothConfig,
    eval_path,
    eval_program,
    posterior_stats,
    soga_eval,
)

__version__ = "0.1.0"
