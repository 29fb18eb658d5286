"""Gaussian-mixture algebra with differentiable entries.

Components store their mean as a list of DiffScalars and their covariance
as a list of rows.  Covariances are kept symmetric by construction: every
update writes one DiffScalar and places the same object at ``[i][j]`` and
``[j][i]``.  All transforms return new objects; inputs are never mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .diff import (
    DiffScalar,
    combine,
    dot,
    exp,
    log,
    logsumexp,
    mills_ratio,
    normal_cdf,
    normal_pdf,
    normal_sf,
    sqrt,
)
from .errors import DegenerateVariance, NumericallyVanishing, SingularCovariance

__all__ = [
    "Gaussian",
    "GaussMix",
    "standard_normal",
    "cholesky",
    "gaussian_logpdf",
    "log_pdf",
    "pdf",
    "mixture_mean",
    "moment_match",
    "collapse",
    "affine_assign",
    "product_assign",
    "truncate_component",
    "condition_equal",
    "mix_product",
    "marginal",
]

ZERO = DiffScalar(0.0)
ONE = DiffScalar(1.0)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gaussian:
    mean: list[DiffScalar]
    cov: list[list[DiffScalar]]

    @property
    def n(self) -> int:
        return len(self.mean)

    def mean_values(self) -> np.ndarray:
        return np.array([m.value for m in self.mean], dtype=float)

    def cov_values(self) -> np.ndarray:
        return np.array([[c.value for c in row] for row in self.cov], dtype=float).reshape(self.n, self.n)

    @classmethod
    def from_arrays(cls, mean, cov) -> "Gaussian":
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float).reshape(len(mean), len(mean))
        n = len(mean)
        rows = [[ZERO] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                rows[i][j] = rows[j][i] = DiffScalar(cov[i, j])
        return cls([DiffScalar(m) for m in mean], rows)


@dataclass
class GaussMix:
    weights: list[DiffScalar]
    components: list[Gaussian]

    @property
    def n(self) -> int:
        return self.components[0].n if self.components else 0

    def __len__(self) -> int:
        return len(self.components)

    def weight_values(self) -> np.ndarray:
        return np.array([w.value for w in self.weights], dtype=float)

    @classmethod
    def single(cls, g: Gaussian) -> "GaussMix":
        return cls([ONE], [g])


def standard_normal(n: int) -> GaussMix:
    """N(0, I_n), the entry distribution."""
    rows = [[ONE if i == j else ZERO for j in range(n)] for i in range(n)]
    return GaussMix.single(Gaussian([ZERO] * n, rows))


def _copy_cov(cov):
    return [list(row) for row in cov]


# densities --------------------------------------------------------------------

def cholesky(cov: Sequence[Sequence[DiffScalar]]) -> list[list[DiffScalar]]:
    n = len(cov)
    L = [[ZERO] * n for _ in range(n)]
    for j in range(n):
        d = cov[j][j] - dot(L[j][:j], L[j][:j]) if j else cov[j][j]
        if not d.value > 0.0:
            raise SingularCovariance(f"covariance is not positive definite (pivot {j} = {float(d.value):.3g})")
        L[j][j] = sqrt(d)
        for i in range(j + 1, n):
            s = cov[i][j] - dot(L[i][:j], L[j][:j]) if j else cov[i][j]
            L[i][j] = s / L[j][j]
    return L


def gaussian_logpdf(g: Gaussian, x: Sequence[float | DiffScalar]) -> DiffScalar:
    n = g.n
    L = cholesky(g.cov)
    z: list[DiffScalar] = []
    for i in range(n):
        xi = x[i] if isinstance(x[i], DiffScalar) else DiffScalar(float(x[i]))
        r = xi - g.mean[i]
        if i:
            r = r - dot(L[i][:i], z)
        z.append(r / L[i][i])
    half_logdet = log(L[0][0]) if n else ZERO
    for i in range(1, n):
        half_logdet = half_logdet + log(L[i][i])
    quad = dot(z, z) if n else ZERO
    return -0.5 * quad - half_logdet - 0.5 * n * LOG_2PI


def log_pdf(mix: GaussMix, x: Sequence[float | DiffScalar]) -> DiffScalar:
    terms = []
    for w, g in zip(mix.weights, mix.components):
        if w.value <= 0.0:
            continue
        terms.append(log(w) + gaussian_logpdf(g, x))
    return logsumexp(terms)


def pdf(mix: GaussMix, x: Sequence[float | DiffScalar]) -> DiffScalar:
    return exp(log_pdf(mix, x))


# moments ----------------------------------------------------------------------

def _normalized(weights: Sequence[DiffScalar]) -> list[DiffScalar]:
    total = weights[0]
    for w in weights[1:]:
        total = total + w
    if abs(total.value - 1.0) < 1e-15:
        return list(weights)
    return [w / total for w in weights]


def mixture_mean(weights: Sequence[DiffScalar], means: Sequence[Sequence[DiffScalar]]) -> list[DiffScalar]:
    """Weighted mean, written as ref + sum w (m - ref) so equal parts give ref exactly."""
    ws = _normalized(weights)
    ref = means[0]
    out = []
    for i in range(len(ref)):
        diffs = [m[i] - ref[i] for m in means[1:]]
        out.append(dot(ws[1:], diffs, ref[i]) if diffs else ref[i])
    return out


def moment_match(parts: Sequence[tuple[DiffScalar, Gaussian]]) -> Gaussian:
    """Gaussian with the first two moments of the weighted parts."""
    if len(parts) == 1:
        return parts[0][1]
    ws = _normalized([w for w, _ in parts])
    comps = [g for _, g in parts]
    mu = mixture_mean(ws, [g.mean for g in comps])
    n = len(mu)
    devs = [[g.mean[i] - mu[i] for i in range(n)] for g in comps]
    ref = comps[0].cov
    cov = [[ZERO] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            xs, ys = [], []
            for k, (w, g) in enumerate(zip(ws, comps)):
                spread = g.cov[i][j] - ref[i][j] if k else ZERO
                xs.append(w)
                ys.append(spread + devs[k][i] * devs[k][j])
            cov[i][j] = cov[j][i] = dot(xs, ys, ref[i][j])
    return Gaussian(mu, cov)


def collapse(mix: GaussMix) -> Gaussian:
    return moment_match(list(zip(mix.weights, mix.components)))


# assignments ------------------------------------------------------------------

def _coeff_map(coeffs, n: int) -> dict[int, DiffScalar]:
    if isinstance(coeffs, Mapping):
        items = coeffs.items()
    else:
        if len(coeffs) != n:
            raise ValueError(f"expected {n} coefficients, got {len(coeffs)}")
        items = enumerate(coeffs)
    out: dict[int, DiffScalar] = {}
    for k, a in items:
        if a is None:
            continue
        a = a if isinstance(a, DiffScalar) else DiffScalar(a)
        if a.tape is None and a.value == 0.0:
            continue
        out[k] = out[k] + a if k in out else a
    return out


def _affine_component(g: Gaussian, target: int, coeffs: dict[int, DiffScalar], const: DiffScalar, noise_var):
    n = g.n
    ks = list(coeffs)
    alphas = [coeffs[k] for k in ks]
    mean = list(g.mean)
    mean[target] = dot(alphas, [g.mean[k] for k in ks], const)
    # r[l] = Cov(e, x_l) under the old covariance
    r = [dot(alphas, [g.cov[k][l] for k in ks]) if ks else ZERO for l in range(n)]
    var = dot(alphas, [r[k] for k in ks]) if ks else ZERO
    if noise_var is not None:
        var = var + noise_var
    cov = _copy_cov(g.cov)
    for l in range(n):
        if l != target:
            cov[target][l] = cov[l][target] = r[l]
    cov[target][target] = var
    return Gaussian(mean, cov)


def affine_assign(mix: GaussMix, target: int, coeffs, const, noise_std: DiffScalar | float | None = None) -> GaussMix:
    """x_target := sum_k coeffs[k] x_k + const (+ independent N(0, noise_std^2))."""
    coeffs = _coeff_map(coeffs, mix.n)
    const = const if isinstance(const, DiffScalar) else DiffScalar(const)
    noise_var = None
    if noise_std is not None:
        s = noise_std if isinstance(noise_std, DiffScalar) else DiffScalar(noise_std)
        noise_var = s * s
    comps = [_affine_component(g, target, coeffs, const, noise_var) for g in mix.components]
    return GaussMix(list(mix.weights), comps)


def _product_component(g: Gaussian, target: int, j: int, k: int) -> Gaussian:
    mu, S = g.mean, g.cov
    mj, mk = mu[j], mu[k]
    sjk = S[j][k]
    mean = list(mu)
    mean[target] = dot([mj], [mk], sjk)
    # Isserlis: Var(x_j x_k) = mj^2 Skk + mk^2 Sjj + 2 mj mk Sjk + Sjj Skk + Sjk^2
    var = dot(
        [mj * mj, mk * mk, 2.0 * mj * mk, S[j][j], sjk],
        [S[k][k], S[j][j], sjk, S[k][k], sjk],
    )
    cov = _copy_cov(S)
    for l in range(g.n):
        if l != target:
            cov[target][l] = cov[l][target] = dot([mj, mk], [S[k][l], S[j][l]])
    cov[target][target] = var
    return Gaussian(mean, cov)


def product_assign(mix: GaussMix, target: int, j: int, k: int) -> GaussMix:
    """x_target := x_j * x_k, moment matched per component."""
    return GaussMix(list(mix.weights), [_product_component(g, target, j, k) for g in mix.components])


# conditioning -----------------------------------------------------------------

def _lift_regression(g: Gaussian, var: int, shift: DiffScalar, scale: DiffScalar) -> Gaussian:
    """mu_i += S_i,var * shift ; S_ij += S_i,var S_j,var * scale."""
    n = g.n
    col = [g.cov[i][var] for i in range(n)]
    live = [i for i in range(n) if not (col[i].tape is None and col[i].value == 0.0)]
    mean = list(g.mean)
    for i in live:
        mean[i] = dot([col[i]], [shift], g.mean[i])
    cov = _copy_cov(g.cov)
    for a, i in enumerate(live):
        for j in live[a:]:
            ci, cj, s = col[i], col[j], scale
            value = g.cov[i][j].value + ci.value * cj.value * s.value
            entry = combine(
                value,
                [g.cov[i][j], ci, cj, s],
                [1.0, cj.value * s.value, ci.value * s.value, ci.value * cj.value],
            )
            cov[i][j] = cov[j][i] = entry
    return Gaussian(mean, cov)


def truncate_component(
    g: Gaussian,
    var: int,
    lo: DiffScalar | None = None,
    hi: DiffScalar | None = None,
    floor: float = 1e-300,
) -> tuple[DiffScalar, Gaussian]:
    """Restrict coordinate ``var`` to (lo, hi); ``None`` marks an infinite bound.

    Returns the probability of the interval and the Gaussian carrying the
    first two moments of the truncated law.
    """
    s2 = g.cov[var][var]
    if not s2.value > 0.0:
        raise DegenerateVariance(f"variance of coordinate {var} is {s2.value}")
    if lo is not None and lo.value == -math.inf:
        lo = None
    if hi is not None and hi.value == math.inf:
        hi = None
    if lo is None and hi is None:
        return ONE, g
    if lo is not None and hi is not None and not lo.value < hi.value:
        raise NumericallyVanishing("empty truncation interval")
    s = sqrt(s2)
    m = g.mean[var]
    if hi is None:
        a = (lo - m) / s
        prob = normal_sf(a)
        r1 = mills_ratio(a)
        r2 = a * r1
    elif lo is None:
        b = (hi - m) / s
        prob = normal_cdf(b)
        r1 = -mills_ratio(-b)
        r2 = b * r1
    else:
        a = (lo - m) / s
        b = (hi - m) / s
        prob = normal_sf(a) - normal_sf(b) if a.value > 0.0 else normal_cdf(b) - normal_cdf(a)
        if prob.value > 0.0:
            pa, pb = normal_pdf(a), normal_pdf(b)
            r1 = (pa - pb) / prob
            r2 = (a * pa - b * pb) / prob
    if not prob.value > floor or not prob.value > 0.0:
        raise NumericallyVanishing(f"truncation probability {float(prob.value):.3g} below {floor:.3g}")
    shift = r1 / s
    scale = (r2 - r1 * r1) / s2
    return prob, _lift_regression(g, var, shift, scale)


def condition_equal(g: Gaussian, var: int, c: DiffScalar | float, resample_std: DiffScalar | float) -> tuple[DiffScalar, Gaussian]:
    """Condition on x_var == c; x_var is then re-attached as independent N(c, resample_std^2)."""
    c = c if isinstance(c, DiffScalar) else DiffScalar(c)
    s2 = g.cov[var][var]
    if not s2.value > 0.0:
        raise DegenerateVariance(f"variance of coordinate {var} is {s2.value}")
    s = sqrt(s2)
    resid = c - g.mean[var]
    density = normal_pdf(resid / s) / s
    shifted = _lift_regression(g, var, resid / s2, -1.0 / s2)
    mean = list(shifted.mean)
    mean[var] = c
    cov = shifted.cov
    for l in range(g.n):
        cov[var][l] = cov[l][var] = ZERO
    r = resample_std if isinstance(resample_std, DiffScalar) else DiffScalar(resample_std)
    cov[var][var] = r * r
    return density, Gaussian(mean, cov)


# structural -------------------------------------------------------------------

def mix_product(
    mix: GaussMix,
    var: int,
    weights: Sequence[DiffScalar],
    means: Sequence[DiffScalar],
    stds: Sequence[DiffScalar],
) -> GaussMix:
    """Replace coordinate ``var`` by an independent draw from the literal mixture."""
    variances = [s * s for s in stds]
    out_w, out_c = [], []
    for w, g in zip(mix.weights, mix.components):
        base = _copy_cov(g.cov)
        for l in range(g.n):
            base[var][l] = base[l][var] = ZERO
        for pj, mj, vj in zip(weights, means, variances):
            cov = _copy_cov(base)
            cov[var][var] = vj
            mean = list(g.mean)
            mean[var] = mj
            out_w.append(w * pj)
            out_c.append(Gaussian(mean, cov))
    return GaussMix(out_w, out_c)


def marginal(mix: GaussMix, vars: Sequence[int]) -> GaussMix:
    idx = list(vars)
    comps = [
        Gaussian([g.mean[i] for i in idx], [[g.cov[i][j] for j in idx] for i in idx])
        for g in mix.components
    ]
    return GaussMix(list(mix.weights), comps)
