"""B-spline bases, de Boor evaluation, derivatives, and curvature penalties.

Conventions: a basis of order ``p`` (polynomial degree ``p - 1``) with ``L``
functions lives on a nondecreasing knot sequence of length ``L + p``.  The
support of a basis is the span where all ``p`` local functions exist and
sum to one, namely ``[t_p, t_{L+1}]``; evaluation outside it is refused.
Two layouts are built here: :func:`make_knots` repeats each boundary knot
``p`` times so the support is the whole knot range, and
:func:`uniform_knots` spaces knots evenly with ``p - 1`` of them extended
past each end of the support.  The support is closed on the right:
evaluation at its upper end uses the last interior span.  Recursion
weights with a zero-width denominator contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateKnots,
    InvalidArgument,
    NoDerivative,
    OutOfSupport,
    UnsupportedOrder,
)

__all__ = [
    "KnotVector",
    "make_knots",
    "uniform_knots",
    "eval_basis",
    "basis_derivative",
    "de_boor",
    "derivative_coeffs",
    "penalty_matrix",
    "greville_points",
]

# Two-point Gauss-Legendre nodes on (-1, 1); exact for cubic integrands,
# and the curvature products integrated below are piecewise quadratic.
_GAUSS2 = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))


@dataclass(frozen=True, eq=False)
class KnotVector:
    """A nondecreasing knot sequence together with the basis order.

    ``basis_count`` is implied: ``L = len(knots) - order``.
    """

    knots: np.ndarray
    order: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.order < 1:
            raise InvalidArgument(f"order must be >= 1, got {self.order}")
        if knots.ndim != 1:
            raise InvalidArgument("knots must be one dimensional")
        if not np.all(np.isfinite(knots)):
            raise InvalidArgument("knots must be finite")
        if np.any(np.diff(knots) < 0.0):
            raise InvalidArgument("knots must be nondecreasing")
        if knots.size < 2 * self.order:
            raise InvalidArgument(
                f"need at least {2 * self.order} knots for order "
                f"{self.order}, got {knots.size}"
            )
        if knots[self.order - 1] == knots[-self.order]:
            raise InvalidArgument("basis support has zero width")

    @property
    def basis_count(self) -> int:
        return self.knots.size - self.order

    @property
    def support(self) -> tuple[float, float]:
        """The span where the basis is complete and sums to one."""
        return float(self.knots[self.order - 1]), float(self.knots[-self.order])


def make_knots(sample_points, basis_count: int, order: int,
               support: tuple[float, float] | None = None) -> KnotVector:
    """Knot layout for ``basis_count`` functions of the given order.

    Interior knots sit at evenly spaced quantiles of ``sample_points`` and
    the boundary knots (the sample range, or ``support`` when a wider
    evaluation range is needed) are repeated ``order`` times.
    """
    pts = np.asarray(sample_points, dtype=float)
    if pts.ndim != 1 or pts.size == 0 or not np.all(np.isfinite(pts)):
        raise InvalidArgument("sample_points must be a finite 1-d array")
    if order < 1 or basis_count < order:
        raise InvalidArgument(
            f"need basis_count >= order >= 1, got {basis_count}, {order}"
        )
    distinct = np.unique(pts)
    if distinct.size < 2:
        raise DegenerateKnots("sample points have zero-width range")
    n_interior = basis_count - order
    if distinct.size < n_interior:
        raise DegenerateKnots(
            f"{distinct.size} distinct sample points cannot place "
            f"{n_interior} interior knots"
        )
    lo, hi = float(pts.min()), float(pts.max())
    if support is not None:
        slo, shi = float(support[0]), float(support[1])
        if not (np.isfinite(slo) and np.isfinite(shi)) or slo >= shi:
            raise InvalidArgument("support must be a finite increasing pair")
        if slo > lo or shi < hi:
            raise InvalidArgument("support must contain the sample range")
        lo, hi = slo, shi
    if n_interior > 0:
        levels = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(pts, levels)
    else:
        interior = np.empty(0)
    knots = np.concatenate([np.full(order, lo), interior, np.full(order, hi)])
    return KnotVector(knots=knots, order=order)


def uniform_knots(sample_points, basis_count: int, order: int,
                  support: tuple[float, float] | None = None) -> KnotVector:
    """Evenly spaced knots with ``order - 1`` extended past each end.

    The support (the sample range, or ``support`` when a wider evaluation
    range is needed) is divided into equal spans and the sequence continues
    at the same spacing beyond both ends, so every basis function is a
    shifted copy of the same bump and the Greville points are evenly
    spaced.  That uniformity matters for penalized monotone fits: curves
    whose coefficient steps decay geometrically then sit in the curvature
    penalty's null space everywhere, boundary included, where a repeated-
    boundary layout distorts them and inflates the fitted slope at the
    ends.
    """
    pts = np.asarray(sample_points, dtype=float)
    if pts.ndim != 1 or pts.size == 0 or not np.all(np.isfinite(pts)):
        raise InvalidArgument("sample_points must be a finite 1-d array")
    if order < 1 or basis_count < order:
        raise InvalidArgument(
            f"need basis_count >= order >= 1, got {basis_count}, {order}"
        )
    lo, hi = float(pts.min()), float(pts.max())
    if support is not None:
        slo, shi = float(support[0]), float(support[1])
        if not (np.isfinite(slo) and np.isfinite(shi)) or slo >= shi:
            raise InvalidArgument("support must be a finite increasing pair")
        if slo > lo or shi < hi:
            raise InvalidArgument("support must contain the sample range")
        lo, hi = slo, shi
    if lo == hi:
        raise DegenerateKnots("sample points have zero-width range")
    spacing = (hi - lo) / (basis_count - order + 1)
    offsets = np.arange(basis_count + order) - (order - 1)
    knots = lo + spacing * offsets
    # pin the support ends to the exact requested values so evaluation at
    # the extreme sample points cannot fall a rounding error outside
    knots[order - 1] = lo
    knots[-order] = hi
    return KnotVector(knots=knots, order=order)


def _span_index(x: float, kv: KnotVector) -> int:
    """Index k of the half-open span [knots[k], knots[k+1]) containing x.

    Clamped to the spans inside the support, so the support's upper end
    maps to the last interior span and evaluation there is a left limit.
    """
    t, p = kv.knots, kv.order
    k = int(np.searchsorted(t, x, side="right")) - 1
    return min(max(k, p - 1), t.size - p - 1)


def _check_support(x: float, kv: KnotVector):
    lo, hi = kv.support
    if not np.isfinite(x) or x < lo or x > hi:
        raise OutOfSupport(f"x={x} outside basis support [{lo}, {hi}]")


def eval_basis(x: float, kv: KnotVector) -> np.ndarray:
    """All ``basis_count`` basis function values at ``x``.

    Built by the Cox-de Boor recursion upward from the order-1 indicator of
    the span containing ``x``; at most ``order`` entries are nonzero.
    """
    x = float(x)
    _check_support(x, kv)
    t, p = kv.knots, kv.order
    L = kv.basis_count
    k = _span_index(x, kv)
    b = np.zeros(L + p - 1)
    b[k] = 1.0
    for q in range(2, p + 1):
        m = L + p - q
        left_den = t[q - 1:q - 1 + m] - t[:m]
        right_den = t[q:q + m] - t[1:1 + m]
        with np.errstate(divide="ignore", invalid="ignore"):
            wl = np.where(left_den > 0.0, (x - t[:m]) / left_den, 0.0)
            wr = np.where(right_den > 0.0, (t[q:q + m] - x) / right_den, 0.0)
        b = wl * b[:m] + wr * b[1:m + 1]
    return b


def de_boor(x: float, weights, kv: KnotVector) -> float:
    """Spline value at ``x`` via the de Boor triangular recurrence.

    Only the ``order`` active coefficients are touched, so the cost is
    O(order^2) regardless of ``basis_count``.
    """
    x = float(x)
    t, p = kv.knots, kv.order
    L = kv.basis_count
    w = np.asarray(weights, dtype=float)
    if w.shape != (L,):
        raise InvalidArgument(f"expected {L} weights, got shape {w.shape}")
    _check_support(x, kv)
    k = _span_index(x, kv)
    d = w[k - p + 1:k + 1].astype(float)
    for r in range(1, p):
        for j in range(p - 1, r - 1, -1):
            i = j + k - (p - 1)
            a = (x - t[i]) / (t[i + p - r] - t[i])
            d[j] = (1.0 - a) * d[j - 1] + a * d[j]
    return float(d[p - 1])


def derivative_coeffs(weights, kv: KnotVector) -> tuple[np.ndarray, KnotVector]:
    """Coefficients and knot view of the derivative spline.

    The derivative of an order-``p`` spline is an order-``p - 1`` spline on
    the knot sequence with one knot dropped from each end; coefficient ``i``
    is ``(p - 1) * (w[i+1] - w[i])`` over the width of the support of the
    shared order-``p - 1`` basis function, with zero-width supports
    contributing zero.
    """
    t, p = kv.knots, kv.order
    L = kv.basis_count
    if p < 2:
        raise NoDerivative("order-1 splines have no derivative spline")
    w = np.asarray(weights, dtype=float)
    if w.shape != (L,):
        raise InvalidArgument(f"expected {L} weights, got shape {w.shape}")
    span = t[p:L + p - 1] - t[1:L]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(span > 0.0, (p - 1) * (w[1:] - w[:-1]) / span, 0.0)
    return d, KnotVector(knots=t[1:-1], order=p - 1)


def _deriv_vec(x: float, kv: KnotVector, nu: int) -> np.ndarray:
    """nu-th derivative of every basis function at ``x``."""
    if nu == 0:
        return eval_basis(x, kv)
    t, p = kv.knots, kv.order
    L = kv.basis_count
    low = _deriv_vec(x, KnotVector(knots=t, order=p - 1), nu - 1)
    left_den = t[p - 1:p - 1 + L] - t[:L]
    right_den = t[p:p + L] - t[1:1 + L]
    with np.errstate(divide="ignore", invalid="ignore"):
        left = np.where(left_den > 0.0, low[:L] / left_den, 0.0)
        right = np.where(right_den > 0.0, low[1:L + 1] / right_den, 0.0)
    return (p - 1) * (left - right)


def basis_derivative(x: float, kv: KnotVector) -> np.ndarray:
    """First derivative of every basis function at ``x``."""
    if kv.order < 2:
        raise NoDerivative("order-1 splines have no derivative")
    x = float(x)
    _check_support(x, kv)
    return _deriv_vec(x, kv, 1)


def penalty_matrix(kv: KnotVector) -> np.ndarray:
    """Integrated squared-curvature penalty for a cubic basis.

    Entry (i, j) is the integral of ``b_i'' b_j''`` over the support.
    Second derivatives of cubics are piecewise linear, so a two-point
    Gauss rule per span is exact.  The result is symmetric positive
    semidefinite with affine functions in its null space.
    """
    if kv.order != 4:
        raise UnsupportedOrder(
            f"curvature penalty requires a cubic basis, got order {kv.order}"
        )
    t, p = kv.knots, kv.order
    L = kv.basis_count
    S = np.zeros((L, L))
    for a, b in zip(t[p - 1:-p], t[p:-p + 1]):
        if b <= a:
            continue
        h = b - a
        mid = 0.5 * (a + b)
        for node in _GAUSS2:
            xg = mid + 0.5 * h * node
            d2 = _deriv_vec(xg, kv, 2)
            S += (0.5 * h) * np.outer(d2, d2)
    return 0.5 * (S + S.T)


def greville_points(kv: KnotVector) -> np.ndarray:
    """Knot averages at which coefficient i controls the function value.

    A spline with coefficients ``g(greville_points(kv))`` reproduces any
    affine ``g`` exactly.
    """
    t, p = kv.knots, kv.order
    if p < 2:
        raise NoDerivative("greville points need order >= 2")
    L = kv.basis_count
    return np.array([t[l + 1:l + p].mean() for l in range(L)])
