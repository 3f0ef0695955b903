"""Numerical check of the Jacobian/Hessian expansion of the noise-stability term.

For a smooth map ``f`` and Gaussian noise ``eps ~ N(0, sigma^2 I)``, the
expected squared output change ``E||f(x + eps) - f(x)||^2`` is compared with

* the first-order term ``sigma^2 * ||J_f(x)||_F^2``, and
* the diagonal second-order term ``(3 sigma^4 / 4) * sum_k sum_i (d^2 f_k / dx_i^2)^2``.

The constant ``3 sigma^4 / 4`` comes from the Gaussian fourth moment
``E[eps_i^4] = 3 sigma^4`` times the 1/4 of the quadratic Taylor term.

Functions are written with :mod:`lnsr.diffcore` primitives and act on the last
axis, so one definition serves batched Monte-Carlo evaluation (plain arrays)
and exact reverse-mode Jacobians (Vars).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc

VectorFn = Callable[[object], object]

_MC_CHUNK = 200_000


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int


@dataclass
class ExpansionReport:
    sigma: float
    mc_estimate: float
    mc_stderr: float
    jacobian_term: float
    hessian_term: float
    residual: float
    n_samples: int
    # C * sum_k ||H_k||_F^2, i.e. the trace-of-H^T H reading of the closed form
    hessian_trace_form: float
    # exact Gaussian expectation of the quadratic Taylor term, cross terms included
    hessian_gaussian_exact: float
    hessian_constant: float
    low_confidence: bool

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / self.mc_estimate if self.mc_estimate else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relative_residual"] = self.relative_residual
        return d


@dataclass
class ExpansionStudy:
    reports: list[ExpansionReport]
    slope: float

    def to_dict(self) -> dict:
        return {"reports": [r.to_dict() for r in self.reports], "slope": self.slope}


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _fvals(f: VectorFn, x: np.ndarray) -> np.ndarray:
    out = np.asarray(dc.value_of(f(x)), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise dc.NonFiniteError("f", None)
    return out


def mc_noise_stability(f: VectorFn, x, sigma: float, n: int, rng=None) -> MCEstimate:
    """Monte-Carlo estimate of ``E||f(x + eps) - f(x)||^2`` with its standard error."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if n < 2:
        raise ValueError("need at least two samples")
    rng = _rng(rng)
    x = np.asarray(x, dtype=np.float64)
    fx = _fvals(f, x[None, :])
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n:
        m = min(_MC_CHUNK, n - done)
        eps = rng.standard_normal((m, x.size)) * sigma
        diff = _fvals(f, x[None, :] + eps) - fx
        sq = (diff * diff).reshape(m, -1).sum(axis=1)
        total += sq.sum()
        total_sq += (sq * sq).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return MCEstimate(float(mean), float(math.sqrt(var / n)), n)


def lipschitz_ratio(f: VectorFn, x, eps) -> float:
    """``||f(x + eps) - f(x)||^2 / ||eps||^2`` for one perturbation."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    denom = float(np.sum(eps * eps))
    if denom == 0.0:
        raise ValueError("perturbation must be nonzero")
    diff = _fvals(f, x + eps) - _fvals(f, x)
    return float(np.sum(diff * diff) / denom)


def exact_jacobian(f: VectorFn, x) -> np.ndarray:
    return dc.jacobian(f, np.asarray(x, dtype=np.float64))


def jacobian_term(f: VectorFn, x, sigma: float, method: str = "exact", h: float = 1e-6) -> float:
    """``sigma^2 * ||J_f(x)||_F^2``; ``method`` is "exact" (reverse mode) or "fd"."""
    if method == "exact":
        jac = exact_jacobian(f, x)
    elif method == "fd":
        jac = dc.finite_difference_jacobian(f, np.asarray(x, dtype=np.float64), h)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(sigma**2 * np.sum(jac * jac))


def hessians(f: VectorFn, x, h: float = 1e-4) -> np.ndarray:
    """Per-output Hessians, shape (k, d, d), from central differences of exact Jacobians."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    cols = []
    for i in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((exact_jacobian(f, xp) - exact_jacobian(f, xm)) / (2 * h))
    # cols[i][k, j] = d^2 f_k / dx_j dx_i
    return np.stack(cols, axis=2)


def hessian_constant(sigma: float) -> float:
    return 3.0 * sigma**4 / 4.0


def hessian_diag_term(f: VectorFn, x, sigma: float, h: float = 1e-4, hess: np.ndarray | None = None) -> float:
    """``(3 sigma^4 / 4) * sum_k sum_i (d^2 f_k / dx_i^2)^2``."""
    hess = hessians(f, x, h) if hess is None else hess
    diag = np.diagonal(hess, axis1=1, axis2=2)
    return float(hessian_constant(sigma) * np.sum(diag * diag))


def _hessian_extras(hess: np.ndarray, sigma: float) -> tuple[float, float]:
    frob = float(np.sum(hess * hess))
    traces = np.trace(hess, axis1=1, axis2=2)
    exact = sigma**4 / 4.0 * float(np.sum(traces * traces) + 2.0 * frob)
    return hessian_constant(sigma) * frob, exact


def expansion_report(f: VectorFn, x, sigma: float, n: int, rng=None, h: float = 1e-4) -> ExpansionReport:
    mc = mc_noise_stability(f, x, sigma, n, rng)
    jt = jacobian_term(f, x, sigma)
    hess = hessians(f, x, h)
    ht = hessian_diag_term(f, x, sigma, hess=hess)
    trace_form, exact = _hessian_extras(hess, sigma)
    return ExpansionReport(
        sigma=sigma,
        mc_estimate=mc.mean,
        mc_stderr=mc.stderr,
        jacobian_term=jt,
        hessian_term=ht,
        residual=mc.mean - (jt + ht),
        n_samples=n,
        hessian_trace_form=trace_form,
        hessian_gaussian_exact=exact,
        hessian_constant=hessian_constant(sigma),
        low_confidence=bool(mc.stderr > 0.1 * mc.mean),
    )


def loglog_slope(sigmas: Sequence[float], values: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(sigmas)), np.log(np.asarray(values)), 1)
    return float(slope)


def verify_expansion(f: VectorFn, x, sigmas: Sequence[float], n: int, seed: int = 0) -> ExpansionStudy:
    """One report per sigma plus the fitted log-log slope of the MC estimates.

    Every sigma reuses the same standard-normal draws (common random numbers),
    which keeps the slope estimate from picking up independent MC noise.
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or min(sigmas) <= 0:
        raise ValueError("sigmas must be strictly positive")
    if max(sigmas) / min(sigmas) < 10.0 - 1e-9:
        raise ValueError("sigmas must span at least one decade")
    reports = [expansion_report(f, x, s, n, np.random.default_rng(seed)) for s in sigmas]
    slope = loglog_slope(sigmas, [r.mc_estimate for r in reports])
    return ExpansionStudy(reports, slope)


def gaussian_fourth_moment(sigma: float, n: int, rng=None) -> float:
    """Empirical ``E[eps^4]`` of the noise sampler."""
    eps = _rng(rng).standard_normal(n) * sigma
    return float(np.mean(eps**4))


def odd_moment_mean(f: VectorFn, x, sigma: float, n: int, rng=None) -> np.ndarray:
    """Empirical mean of ``J_f(x) eps`` (first-order/zero-mean cross term), per output."""
    jac = exact_jacobian(f, x)
    eps = _rng(rng).standard_normal((n, jac.shape[1])) * sigma
    return (eps @ jac.T).mean(axis=0)


# -- test functions ----------------------------------------------------------

def identity_fn() -> VectorFn:
    return lambda x: x


def scaled_fn(c: float) -> VectorFn:
    return lambda x: x * c


def linear_fn(weight: np.ndarray, bias: np.ndarray | None = None) -> VectorFn:
    """``x -> W x + b`` with W shaped (out, in)."""
    wt = np.asarray(weight, dtype=np.float64).T.copy()
    b = None if bias is None else np.asarray(bias, dtype=np.float64)

    def f(x):
        y = dc.matmul(x, wt)
        return y if b is None else y + b

    return f


def constant_fn(value) -> VectorFn:
    value = np.asarray(value, dtype=np.float64)
    return lambda x: dc.sum_(x, axis=-1, keepdims=True) * 0.0 + value


def tanh_fn() -> VectorFn:
    return dc.tanh


def square_fn() -> VectorFn:
    return lambda x: x * x


def cubic_sum_fn() -> VectorFn:
    """``x -> sum_i x_i^3`` (a single output)."""
    return lambda x: dc.sum_(x * x * x, axis=-1, keepdims=True)


def mlp_fn(rng, d_in: int = 6, hidden: int = 8, d_out: int = 3, scale: float = 1.0) -> VectorFn:
    """Random two-layer tanh network."""
    rng = _rng(rng)
    w1 = rng.normal(0, scale / math.sqrt(d_in), (d_in, hidden))
    b1 = rng.normal(0, 0.1, hidden)
    w2 = rng.normal(0, scale / math.sqrt(hidden), (hidden, d_out))
    b2 = rng.normal(0, 0.1, d_out)
    return lambda x: dc.matmul(dc.tanh(dc.matmul(x, w1) + b1), w2) + b2


NAMED_FUNCTIONS = {
    "identity": lambda dim, rng: identity_fn(),
    "linear": lambda dim, rng: linear_fn(_rng(rng).normal(size=(dim, dim))),
    "tanh": lambda dim, rng: tanh_fn(),
    "cubic": lambda dim, rng: cubic_sum_fn(),
    "mlp": lambda dim, rng: mlp_fn(rng, d_in=dim),
}


__all__ = [
    "MCEstimate",
    "ExpansionReport",
    "ExpansionStudy",
    "mc_noise_stability",
    "lipschitz_ratio",
    "exact_jacobian",
    "jacobian_term",
    "hessians",
    "hessian_constant",
    "hessian_diag_term",
    "expansion_report",
    "verify_expansion",
    "loglog_slope",
    "gaussian_fourth_moment",
    "odd_moment_mean",
    "NAMED_FUNCTIONS",
]
