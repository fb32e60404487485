"""Benchmark-dose estimation on a fitted decreasing exposure-response curve.

The benchmark dose is the exposure at which the mean response has dropped,
relative to the baseline exposure, by enough to move a fraction ``p_plus``
of the population below the ``p0`` baseline quantile.  For Gaussian noise
that drop is ``sigma * c(p0, p_plus)`` with ``c`` a difference of inverse
normal quantiles, so the dose solves a one-dimensional root problem on the
fitted curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import BmdNotEstimable, DegenerateSlope, InvalidArgument
from .model import FittedModel

__all__ = [
    "BmdConfig",
    "BmdEstimate",
    "c_const",
    "u_n",
    "existence_check",
    "reflect",
    "estimate_bmd",
]


@dataclass(frozen=True)
class BmdConfig:
    """Baseline exposure, search bound, and risk levels for a BMD problem.

    ``p0`` is the fraction of the population considered affected at the
    baseline exposure ``x0``; ``p_plus`` is the extra fraction that defines
    the benchmark response.  ``xmax`` bounds the root search and defaults
    to the largest exposure the curve was fitted on.
    """

    x0: float = 0.0
    xmax: float | None = None
    p0: float = 0.025
    p_plus: float = 0.01
    tol: float = 1e-8
    max_iter: int = 50

    def __post_init__(self):
        if not 0.0 < self.p0 < 1.0:
            raise InvalidArgument(f"p0 must be in (0, 1), got {self.p0}")
        if not 0.0 < self.p_plus < 1.0 - self.p0:
            raise InvalidArgument(
                f"p_plus must be in (0, 1 - p0), got {self.p_plus}"
            )
        if self.xmax is not None and not self.x0 < self.xmax:
            raise InvalidArgument(
                f"x0 must lie below xmax, got [{self.x0}, {self.xmax}]"
            )
        if self.tol <= 0.0:
            raise InvalidArgument(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise InvalidArgument(
                f"max_iter must be at least 1, got {self.max_iter}"
            )


@dataclass(frozen=True)
class BmdEstimate:
    """Root of the estimating equation plus diagnostics of the solve."""

    xb_hat: float
    iterations: int
    u_prime_at_root: float
    existence_margin: float


def c_const(p0: float, p_plus: float) -> float:
    """Benchmark drop in units of the noise scale.

    ``c = ppf(p0 + p_plus) - ppf(p0)`` with ``ppf`` the inverse standard
    normal distribution function; strictly positive for valid risk levels.
    """
    if not 0.0 < p0 < 1.0:
        raise InvalidArgument(f"p0 must be in (0, 1), got {p0}")
    if not 0.0 < p_plus < 1.0 - p0:
        raise InvalidArgument(f"p_plus must be in (0, 1 - p0), got {p_plus}")
    return float(norm.ppf(p0 + p_plus) - norm.ppf(p0))


def u_n(x: float, model: FittedModel, cfg: BmdConfig) -> float:
    """Estimating equation: standardized drop of the curve minus ``c``.

    Strictly increasing in ``x`` whenever the fitted curve is strictly
    decreasing, with ``u_n(x0) = -c`` exactly; the benchmark dose is its
    unique root.
    """
    c = c_const(cfg.p0, cfg.p_plus)
    drop = model.f_hat(cfg.x0) - model.f_hat(float(x))
    return float(drop / model.sigma_hat - c)


def _resolve_xmax(model: FittedModel, cfg: BmdConfig) -> float:
    if cfg.xmax is not None:
        return float(cfg.xmax)
    return float(model.kv_x.support[1])


def existence_check(model: FittedModel, cfg: BmdConfig) -> float:
    """Value of the estimating equation at the search bound.

    A positive value brackets a sign change on ``(x0, xmax)`` and so
    guarantees a benchmark dose in the interval; callers treat a
    nonpositive value as not estimable.
    """
    return u_n(_resolve_xmax(model, cfg), model, cfg)


def reflect(x: float, l: float, u: float) -> float:
    """Fold a real number into ``[l, u]``, reflecting off both ends.

    Identity on the interval itself; the fold has period ``2 (u - l)``.
    The intermediate remainder is taken nonnegative, so arguments far
    below ``l`` fold the same way as their mirror images above ``u``.
    """
    period = 2.0 * (u - l)
    w = abs(x - l) % period
    return min(w, period - w) + l


def _reflective_root(fun, dfun, lo: float, hi: float,
                     tol: float, max_iter: int) -> tuple[float, int]:
    """Root of ``fun`` on ``[lo, hi]`` with ``fun(lo) > 0 > fun(hi)`` or the
    reverse; Newton steps folded into the bracket, bisection afterwards.

    Returns the root and the number of function evaluations.  Newton runs
    from the midpoint for ``max_iter`` steps; whenever it stalls, runs out
    of iterations, or meets a degenerate slope, bisection on the sign
    change finishes the job, so termination needs no slope assumptions.
    """
    sign_lo = 1.0 if fun(lo) > 0.0 else -1.0
    x = 0.5 * (lo + hi)
    iters = 1
    for _ in range(max_iter):
        u = fun(x)
        iters += 1
        if abs(u) <= tol:
            return x, iters
        d = dfun(x)
        if not np.isfinite(d) or d == 0.0:
            break
        x = reflect(x - u / d, lo, hi)
    while True:
        x = 0.5 * (lo + hi)
        if x <= lo or x >= hi:
            # The sign change is bracketed between adjacent floats, so the
            # crossing cannot be located any better; |fun| may still exceed
            # the tolerance when the slope there is steep enough to jump
            # past it in one ulp.  The first representable point past the
            # crossing is the root to full precision.
            u = fun(hi)
            iters += 1
            if np.isfinite(u):
                return hi, iters
            raise DegenerateSlope(
                "root could not be driven to tolerance: interval collapsed "
                f"at {x:.17g} with |value| = {abs(u):.3e}"
            )
        u = fun(x)
        iters += 1
        if abs(u) <= tol:
            return x, iters
        if sign_lo * u > 0.0:
            lo = x
        else:
            hi = x


def estimate_bmd(model: FittedModel, cfg: BmdConfig) -> BmdEstimate:
    """Solve the estimating equation by a reflective Newton line search.

    Newton steps use the curve's derivative through the de Boor recurrence
    and are folded back into ``[x0, xmax]`` so iterates never leave the
    bracket.  If the slope degenerates or ``max_iter`` steps do not reach
    ``tol``, the solve falls back to bisection, which the sign bracket
    guarantees to terminate.
    """
    xmax = _resolve_xmax(model, cfg)
    if not cfg.x0 < xmax:
        raise InvalidArgument(
            f"x0 must lie below the search bound, got [{cfg.x0}, {xmax}]"
        )
    c = c_const(cfg.p0, cfg.p_plus)
    f0 = model.f_hat(cfg.x0)
    sig = model.sigma_hat

    def u_at(x: float) -> float:
        return float((f0 - model.f_hat(x)) / sig - c)

    def u_prime(x: float) -> float:
        return -float(model.f_prime(x)) / sig

    margin = u_at(xmax)
    if not margin > 0.0:
        raise BmdNotEstimable(
            f"no benchmark dose in ({cfg.x0:g}, {xmax:g}): the fitted drop "
            f"never reaches sigma*c = {sig * c:.6g}; decrease p_plus"
        )
    x, iters = _reflective_root(u_at, u_prime, cfg.x0, xmax,
                                cfg.tol, cfg.max_iter)
    return BmdEstimate(
        xb_hat=float(x),
        iterations=iters,
        u_prime_at_root=u_prime(x),
        existence_margin=float(margin),
    )
