"""Monotone additive dose-response regression.

The mean model is ``y = alpha + f(x) + g_1(z_1) + ... + g_m(z_m) + noise``
with ``f`` a strictly decreasing cubic regression spline and each ``g_j`` an
unconstrained cubic smooth.  Monotonicity comes from writing the spline
weights of ``f`` through :func:`reparameterize`, which turns unconstrained
coefficients into strictly decreasing ones.  Smoothing parameters and the
noise precision are estimated by maximizing a Laplace approximation to the
marginal likelihood: a Newton solver profiles out the regression
coefficients at fixed variance parameters, and a quasi-Newton ascent with
finite-difference gradients moves the variance parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .errors import FitFailed, InnerOptFailed, InvalidArgument
from .splines import (
    KnotVector,
    de_boor,
    derivative_coeffs,
    eval_basis,
    greville_points,
    uniform_knots,
    penalty_matrix,
)

__all__ = [
    "DoseResponseData",
    "ModelParams",
    "FitConfig",
    "Design",
    "FittedModel",
    "PosteriorSamples",
    "reparameterize",
    "build_design",
    "penalized_nll",
    "nll_gradient",
    "nll_hessian",
    "inner_opt",
    "laml",
    "fit",
    "posterior_sample",
]

_LOG2PI = math.log(2.0 * math.pi)
_EXP_CLAMP = 700.0
_STEP_CLAMP = 80.0
# The inner Newton loop accepts a stagnated point when no step can improve
# the value or gradient any further but the gradient is nearly at target or
# the Newton decrement says the remaining decrease is negligible; only
# reached at extreme smoothing or precision levels where the gradient
# target sits below the rounding floor of the objective.
_INNER_STAGNATION_GTOL = 1e-6
_INNER_STAGNATION_DECREMENT = 1e-9
# Variance parameters live on log scale, so steps beyond a few units are
# never sensible; capping them keeps early ascent iterations in range.
_OUTER_MAX_STEP = 5.0
# Finite-difference step and curvature floor for the variance-block
# covariance computed after the ascent converges.
_PHI_CURV_STEP = 0.05
_PHI_CURV_FLOOR = 1e-2


@dataclass(frozen=True, eq=False)
class DoseResponseData:
    """Response vector, exposure vector, and optional covariate columns."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        z = self.z
        z = np.empty((y.size, 0)) if z is None else np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        for name, arr in (("y", y), ("x", x)):
            if arr.ndim != 1:
                raise InvalidArgument(f"{name} must be one dimensional")
        if y.size != x.size or z.shape[0] != y.size:
            raise InvalidArgument(
                f"length mismatch: y {y.size}, x {x.size}, z rows {z.shape[0]}"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))
                and np.all(np.isfinite(z))):
            raise InvalidArgument("data must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def n_obs(self) -> int:
        return self.y.size

    @property
    def n_covariates(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Regression block (alpha, beta, gamma) and variance block (tau, loglambda).

    ``tau`` is minus twice the log residual standard deviation and
    ``loglambda`` holds one log smoothing parameter per smooth term.
    """

    alpha: float
    beta: np.ndarray
    gamma: np.ndarray
    tau: float
    loglambda: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        loglam = np.asarray(self.loglambda, dtype=float)
        L = beta.size
        if L < 1:
            raise InvalidArgument("beta must be nonempty")
        if gamma.size % max(L, 1) != 0:
            raise InvalidArgument(
                f"gamma size {gamma.size} is not a multiple of {L}"
            )
        m = gamma.size // L
        if loglam.size != m + 1:
            raise InvalidArgument(
                f"expected {m + 1} log smoothing parameters, got {loglam.size}"
            )
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "loglambda", loglam)

    @property
    def n_terms(self) -> int:
        return self.gamma.size // self.beta.size

    @property
    def dim_psi(self) -> int:
        return 1 + self.beta.size + self.gamma.size

    def pack_psi(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, self.gamma])

    def pack_phi(self) -> np.ndarray:
        return np.concatenate([[self.tau], self.loglambda])

    @classmethod
    def from_flat(cls, psi, phi, basis_count: int) -> "ModelParams":
        psi = np.asarray(psi, dtype=float)
        phi = np.asarray(phi, dtype=float)
        L = basis_count
        return cls(alpha=float(psi[0]), beta=psi[1:1 + L], gamma=psi[1 + L:],
                   tau=float(phi[0]), loglambda=phi[1:])


@dataclass(frozen=True)
class FitConfig:
    """Tuning constants for :func:`fit`."""

    basis_count: int = 20
    x0: float = 0.0
    ridge: float = 1e-8
    inner_gtol: float = 1e-9
    inner_max_iter: int = 200
    outer_max_iter: int = 100
    outer_ftol: float = 1e-6
    outer_gtol: float = 1e-4
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.basis_count < 4:
            raise InvalidArgument("basis_count must be at least 4")
        if self.ridge < 0:
            raise InvalidArgument("ridge must be nonnegative")


def reparameterize(beta) -> np.ndarray:
    """Map unconstrained weights to strictly decreasing spline weights.

    The first entry passes through; every later entry subtracts
    ``exp(beta[l])`` from its predecessor, so the output decreases strictly
    for any finite input.  Exponents are clamped at +-80: fitted values
    never come near that (the ridge pins flat coordinates at single-digit
    magnitudes), but posterior draws along nearly flat directions can be
    arbitrarily wild, and capping the step at ``exp(80)`` keeps their
    covariances and quadratic forms inside double range while preserving
    the only thing such a draw means, a curve with an effectively vertical
    drop.
    """
    b = np.asarray(beta, dtype=float)
    if b.ndim != 1 or b.size < 1:
        raise InvalidArgument("beta must be a nonempty 1-d array")
    steps = np.empty_like(b)
    steps[0] = b[0]
    if b.size > 1:
        steps[1:] = -np.exp(np.clip(b[1:], -_STEP_CLAMP, _STEP_CLAMP))
    return np.cumsum(steps)


def _reparameterize_rows(beta: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`reparameterize` for sample matrices."""
    steps = np.empty_like(beta)
    steps[:, 0] = beta[:, 0]
    if beta.shape[1] > 1:
        steps[:, 1:] = -np.exp(np.clip(beta[:, 1:], -_STEP_CLAMP, _STEP_CLAMP))
    return np.cumsum(steps, axis=1)


def _numeric_rank(S: np.ndarray) -> int:
    if S.size == 0:
        return 0
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    top = ev[-1] if ev.size else 0.0
    if top <= 0.0:
        return 0
    return int(np.sum(ev > 1e-9 * top))


def _penalty_factor(S: np.ndarray) -> np.ndarray:
    """Factor R with R'R = S, for cancellation-free quadratic forms.

    Near the null space of S the raw form beta' S beta loses all relative
    accuracy, which puts noise at the penalty scale into the objective;
    ||R beta||^2 is a sum of squares and stays exact.
    """
    ev, E = np.linalg.eigh(0.5 * (S + S.T))
    return np.sqrt(np.clip(ev, 0.0, None))[:, None] * E.T


@dataclass(eq=False)
class Design:
    """Evaluated bases, penalties, and data for one model specification."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    kv_x: KnotVector
    kv_z: tuple
    B: np.ndarray
    Z: np.ndarray
    S1: np.ndarray
    Sz: tuple
    rank1: int
    rank_z: tuple
    monotone: bool = True
    ridge: float = 1e-8
    R1: np.ndarray = None
    Rz: tuple = None
    _solver: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.R1 is None:
            self.R1 = _penalty_factor(self.S1)
        if self.Rz is None:
            self.Rz = tuple(_penalty_factor(S) for S in self.Sz)

    @property
    def basis_count(self) -> int:
        return self.kv_x.basis_count

    @property
    def n_terms(self) -> int:
        return len(self.kv_z)

    @property
    def dim_psi(self) -> int:
        return 1 + self.basis_count * (1 + self.n_terms)

    @property
    def penalty_ranks(self) -> np.ndarray:
        return np.array([self.rank1, *self.rank_z], dtype=float)

    def solver(self) -> "_InnerSolver":
        if self._solver is None:
            self._solver = _InnerSolver(self)
        return self._solver


def build_design(data: DoseResponseData, basis_count: int = 20,
                 support_x: tuple[float, float] | None = None,
                 monotone: bool = True, ridge: float = 1e-8) -> Design:
    """Evaluate bases and curvature penalties for every term.

    All terms share ``basis_count`` cubic basis functions on evenly
    spaced knots over each column's own sample range, extended past the
    ends so every basis function is a shifted copy of the same bump; see
    :func:`bmdkit.splines.uniform_knots` for why the monotone penalty
    needs that.  ``support_x`` widens the exposure support (used to cover
    a reference exposure below the smallest observation).
    ``monotone=False`` drops the decreasing-coefficient transform on the
    exposure term and fits an unconstrained additive model; everything
    downstream of the fit treats the exposure weights identically in both
    cases.
    """
    n = data.n_obs
    m = data.n_covariates
    kv_x = uniform_knots(data.x, basis_count, 4, support=support_x)
    B = np.empty((n, basis_count))
    for i in range(n):
        B[i] = eval_basis(data.x[i], kv_x)
    kv_z = []
    Zblocks = []
    Sz = []
    for j in range(m):
        kv = uniform_knots(data.z[:, j], basis_count, 4)
        Bj = np.empty((n, basis_count))
        for i in range(n):
            Bj[i] = eval_basis(data.z[i, j], kv)
        kv_z.append(kv)
        Zblocks.append(Bj)
        Sz.append(penalty_matrix(kv))
    Z = np.hstack(Zblocks) if Zblocks else np.empty((n, 0))
    S1 = penalty_matrix(kv_x)
    return Design(
        y=data.y, x=data.x, z=data.z, kv_x=kv_x, kv_z=tuple(kv_z),
        B=B, Z=Z, S1=S1, Sz=tuple(Sz),
        rank1=_numeric_rank(S1), rank_z=tuple(_numeric_rank(S) for S in Sz),
        monotone=monotone, ridge=ridge,
    )


def penalized_nll(params: ModelParams, design: Design) -> float:
    """Penalized Gaussian negative log likelihood.

    ``0.5 * exp(tau) * ||y - alpha - B beta_c - Z gamma||^2
    - (n/2) tau + (n/2) log(2 pi)
    + exp(loglambda_1) beta' S_1 beta
    + sum_j exp(loglambda_{1+j}) gamma_j' S_{1+j} gamma_j
    + ridge * (beta' beta + gamma' gamma)``

    The curvature penalty on the exposure term acts on the unconstrained
    weights.  The normalizing term in ``tau`` keeps the noise precision
    identifiable through the marginal likelihood, and the small ridge
    resolves the confounding between the intercept and the level of each
    smooth.
    """
    beta_c = reparameterize(params.beta) if design.monotone else params.beta
    r = design.y - params.alpha - design.B @ beta_c
    if design.Z.shape[1]:
        r = r - design.Z @ params.gamma
    n = design.y.size
    val = (0.5 * np.exp(params.tau) * float(r @ r)
           - 0.5 * n * params.tau + 0.5 * n * _LOG2PI)
    lam = np.exp(params.loglambda)
    rb = design.R1 @ params.beta
    val += lam[0] * float(rb @ rb)
    L = design.basis_count
    for j, R in enumerate(design.Rz):
        rg = R @ params.gamma[j * L:(j + 1) * L]
        val += lam[1 + j] * float(rg @ rg)
    val += design.ridge * (float(params.beta @ params.beta)
                           + float(params.gamma @ params.gamma))
    return float(val)


class _InnerSolver:
    """Newton machinery for the coefficient block at fixed variance block.

    The residual enters only through Gram blocks of the working design
    ``W = [1 | B M | Z]`` (``M`` accumulates the decreasing-weight steps),
    so one iteration costs O(dim^2) independent of the sample size.
    """

    def __init__(self, design: Design):
        d = design
        n = d.y.size
        L = d.basis_count
        m = d.n_terms
        if d.monotone:
            # suffix sums: column j of BM is sum over l >= j of B[:, l]
            Bw = np.cumsum(d.B[:, ::-1], axis=1)[:, ::-1]
        else:
            Bw = d.B
        W = np.hstack([np.ones((n, 1)), Bw, d.Z])
        self.design = d
        self.n = n
        self.L = L
        self.m = m
        self.D = 1 + L * (1 + m)
        self.G = W.T @ W
        self.wy = W.T @ d.y
        self.yy = float(d.y @ d.y)
        # triangular square root of G, kept for determinant work: stacking
        # scaled copies of it with the penalty factors expresses the expected
        # Hessian as A'A, whose log-determinant a QR pass reads off the
        # diagonal at condition sqrt(cond(H))
        self._rw = np.linalg.qr(W, mode="r")
        self.sl_beta = slice(1, 1 + L)
        self.sl_gamma = slice(1 + L, self.D)
        # recompose the penalties from their factors so value, gradient,
        # and Hessian are derivatives of one another to the last bit
        self.S1 = d.R1.T @ d.R1
        self.Sz = tuple(R.T @ R for R in d.Rz)

    def _transform(self, beta):
        if not self.design.monotone:
            return beta.copy(), np.ones_like(beta)
        xi = np.empty_like(beta)
        xi[0] = beta[0]
        if beta.size > 1:
            xi[1:] = -np.exp(np.clip(beta[1:], -_STEP_CLAMP, _STEP_CLAMP))
        v = np.ones_like(beta)
        v[1:] = xi[1:]
        return xi, v

    def _penalty(self, beta, gamma, lam):
        d = self.design
        rb = d.R1 @ beta
        val = lam[0] * float(rb @ rb)
        for j, R in enumerate(d.Rz):
            rg = R @ gamma[j * self.L:(j + 1) * self.L]
            val += lam[1 + j] * float(rg @ rg)
        val += d.ridge * (float(beta @ beta) + float(gamma @ gamma))
        return val

    def value(self, psi, phi):
        tau, lam = phi[0], np.exp(phi[1:])
        beta = psi[self.sl_beta]
        gamma = psi[self.sl_gamma]
        xi, _ = self._transform(beta)
        kappa = np.concatenate([psi[:1], xi, gamma])
        with np.errstate(over="ignore", invalid="ignore"):
            rss = self.yy - 2.0 * float(kappa @ self.wy) \
                + float(kappa @ (self.G @ kappa))
            val = (0.5 * np.exp(tau) * rss
                   - 0.5 * self.n * tau + 0.5 * self.n * _LOG2PI
                   + self._penalty(beta, gamma, lam))
        return float(val)

    def grad_hess(self, psi, phi, expected=False):
        """Value, gradient, and Hessian; ``expected`` drops the
        transform-curvature diagonal, giving the positive semidefinite
        Gauss-Newton form that is invariant along the ridge-scale flat
        directions (used for the Laplace determinant and the posterior)."""
        d = self.design
        tau, lam = phi[0], np.exp(phi[1:])
        beta = psi[self.sl_beta]
        gamma = psi[self.sl_gamma]
        xi, v = self._transform(beta)
        kappa = np.concatenate([psi[:1], xi, gamma])
        et = np.exp(tau)
        Gk = self.G @ kappa
        rss = self.yy - 2.0 * float(kappa @ self.wy) + float(kappa @ Gk)
        gk = et * (Gk - self.wy)
        f = (0.5 * et * rss - 0.5 * self.n * tau + 0.5 * self.n * _LOG2PI
             + self._penalty(beta, gamma, lam))

        g = np.empty(self.D)
        g[0] = gk[0]
        g[self.sl_beta] = (v * gk[self.sl_beta]
                           + 2.0 * lam[0] * (d.R1.T @ (d.R1 @ beta))
                           + 2.0 * d.ridge * beta)
        ggam = gk[self.sl_gamma].copy()
        for j, R in enumerate(d.Rz):
            gj = gamma[j * self.L:(j + 1) * self.L]
            ggam[j * self.L:(j + 1) * self.L] += \
                2.0 * lam[1 + j] * (R.T @ (R @ gj))
        ggam += 2.0 * d.ridge * gamma
        g[self.sl_gamma] = ggam

        H = et * self.G.copy()
        H[self.sl_beta, :] *= v[:, None]
        H[:, self.sl_beta] *= v[None, :]
        idx = np.arange(1, 1 + self.L)
        if not expected:
            # second derivative of the weight transform:
            # d^2 xi_l / d beta_l^2 equals xi_l for l >= 2, zero for l = 1
            curv = gk[self.sl_beta] * xi
            curv[0] = 0.0
            H[idx, idx] += curv
        H[self.sl_beta, self.sl_beta] += 2.0 * lam[0] * self.S1
        H[idx, idx] += 2.0 * d.ridge
        for j, S in enumerate(self.Sz):
            sl = slice(1 + self.L * (1 + j), 1 + self.L * (2 + j))
            H[sl, sl] += 2.0 * lam[1 + j] * S
        idx_g = np.arange(1 + self.L, self.D)
        H[idx_g, idx_g] += 2.0 * d.ridge
        return float(f), g, H

    def phi_cross(self, psi, phi):
        """Cross derivatives d2 ell / (d psi d phi) at ``psi``.

        Column 0 is the likelihood part of the coefficient gradient, which
        carries the factor exp(tau) and so equals its own tau-derivative;
        the remaining columns are the penalty-block gradients, each
        proportional to its own exp(lambda_j).
        """
        d = self.design
        tau, lam = phi[0], np.exp(phi[1:])
        beta = psi[self.sl_beta]
        gamma = psi[self.sl_gamma]
        xi, v = self._transform(beta)
        kappa = np.concatenate([psi[:1], xi, gamma])
        gk = np.exp(tau) * (self.G @ kappa - self.wy)
        C = np.zeros((self.D, 2 + d.n_terms))
        C[0, 0] = gk[0]
        C[self.sl_beta, 0] = v * gk[self.sl_beta]
        C[self.sl_gamma, 0] = gk[self.sl_gamma]
        C[self.sl_beta, 1] = 2.0 * lam[0] * (d.R1.T @ (d.R1 @ beta))
        for j, R in enumerate(d.Rz):
            gj = gamma[j * self.L:(j + 1) * self.L]
            C[1 + self.L * (1 + j):1 + self.L * (2 + j), 2 + j] = \
                2.0 * lam[1 + j] * (R.T @ (R @ gj))
        return C

    def logdet_gn(self, psi, phi):
        """Log-determinant of the expected Hessian at ``psi``.

        The expected Hessian is a sum of squares,
        ``exp(tau) S G S + 2 lam R'R + 2 ridge I`` with ``S`` the diagonal
        weight-transform scaling, so it factors exactly as ``A'A`` for a
        stacked rectangular ``A``.  One Householder QR of ``A`` then yields
        the log-determinant from the diagonal of the triangular factor.
        Unlike an eigendecomposition of the assembled Hessian (condition
        ~1e10, small eigenvalues carrying absolute rounding noise of order
        eps times the largest), the factor sees only the square root of
        that condition and varies smoothly with ``psi``, which keeps
        finite-difference gradients of the marginal likelihood clean.
        """
        d = self.design
        tau, lam = phi[0], np.exp(np.clip(phi[1:], -_EXP_CLAMP, _EXP_CLAMP))
        _, v = self._transform(psi[self.sl_beta])
        s = np.ones(self.D)
        s[self.sl_beta] = v
        blocks = [np.exp(0.5 * np.clip(tau, -_EXP_CLAMP, _EXP_CLAMP))
                  * (self._rw * s[None, :])]
        rows = np.zeros((self.L, self.D))
        rows[:, self.sl_beta] = np.sqrt(2.0 * lam[0]) * d.R1
        blocks.append(rows)
        for j, R in enumerate(d.Rz):
            rows = np.zeros((self.L, self.D))
            rows[:, 1 + self.L * (1 + j):1 + self.L * (2 + j)] = \
                np.sqrt(2.0 * lam[1 + j]) * R
            blocks.append(rows)
        blocks.append(np.sqrt(2.0 * d.ridge) * np.eye(self.D))
        r = np.linalg.qr(np.vstack(blocks), mode="r")
        return 2.0 * float(np.sum(np.log(np.abs(np.diag(r)))))

    @staticmethod
    def _stagnated(gnorm, slope):
        return gnorm <= _INNER_STAGNATION_GTOL \
            or -slope <= _INNER_STAGNATION_DECREMENT

    def minimize(self, phi, start, gtol=1e-9, max_iter=200):
        psi = np.array(start, dtype=float)
        if psi.shape != (self.D,):
            raise InvalidArgument(f"start must have shape ({self.D},)")
        f, g, H = self.grad_hess(psi, phi)
        if not np.isfinite(f):
            raise InnerOptFailed("objective not finite at the starting point")
        gnorm = float(np.linalg.norm(g))
        iters = 0
        while gnorm > gtol:
            Lc, _ = _chol_shifted(H)
            step = sla.cho_solve((Lc, True), -g)
            slope = float(g @ step)
            if not np.isfinite(slope) or slope >= 0.0:
                step = -g
                slope = -gnorm ** 2
            iters += 1
            if iters > max_iter:
                if self._stagnated(gnorm, slope):
                    break
                raise InnerOptFailed(
                    f"no convergence in {max_iter} Newton steps "
                    f"(gradient norm {gnorm:.3e})"
                )
            t = 1.0
            accepted = False
            while t >= 2.0 ** -60:
                f_try = self.value(psi + t * step, phi)
                if np.isfinite(f_try) and f_try < f + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                psi = psi + t * step
                f, g, H = self.grad_hess(psi, phi)
                gnorm = float(np.linalg.norm(g))
                if not (np.isfinite(f) and np.isfinite(gnorm)):
                    raise InnerOptFailed(
                        f"objective overflowed at Newton step {iters}"
                    )
                continue
            # The achievable decrease sits below the rounding noise of the
            # value, but the full Newton step can still shrink the gradient
            # quadratically; accept it when it does and the value does not
            # move beyond noise.
            f2, g2, H2 = self.grad_hess(psi + step, phi)
            g2norm = float(np.linalg.norm(g2))
            if (np.isfinite(f2) and f2 <= f + 1e-9 * (1.0 + abs(f))
                    and g2norm <= 0.5 * gnorm):
                psi = psi + step
                f, g, H, gnorm = f2, g2, H2, g2norm
                continue
            if self._stagnated(gnorm, slope):
                break
            raise InnerOptFailed(
                f"line search failed at Newton step {iters} "
                f"(gradient norm {gnorm:.3e})"
            )
        _, _, Hgn = self.grad_hess(psi, phi, expected=True)
        Lc, shift = _chol_shifted(Hgn)
        if shift:
            Hgn = Hgn + shift * np.eye(self.D)
        return InnerResult(psi=psi, value=f, grad_norm=gnorm, hessian=Hgn,
                           chol=Lc, iterations=iters, hessian_shift=shift)


def _chol_shifted(H):
    """Cholesky factor, adding the smallest diagonal shift that works."""
    try:
        return np.linalg.cholesky(H), 0.0
    except np.linalg.LinAlgError:
        pass
    base = float(np.mean(np.abs(np.diag(H)))) or 1.0
    eye = np.eye(H.shape[0])
    for e in range(-10, 3):
        shift = base * 10.0 ** e
        try:
            return np.linalg.cholesky(H + shift * eye), shift
        except np.linalg.LinAlgError:
            continue
    raise InnerOptFailed("Hessian could not be made positive definite")


@dataclass(frozen=True, eq=False)
class InnerResult:
    """Solution of the coefficient block at one variance-parameter value.

    ``hessian`` and ``chol`` hold the expected (Gauss-Newton) curvature at
    the solution, which is what the marginal likelihood and the posterior
    approximation use.
    """

    psi: np.ndarray
    value: float
    grad_norm: float
    hessian: np.ndarray
    chol: np.ndarray
    iterations: int
    hessian_shift: float


def nll_gradient(params: ModelParams, design: Design) -> np.ndarray:
    """Analytic gradient of :func:`penalized_nll` in the coefficient block."""
    _, g, _ = design.solver().grad_hess(params.pack_psi(), params.pack_phi())
    return g


def nll_hessian(params: ModelParams, design: Design) -> np.ndarray:
    """Analytic Hessian of :func:`penalized_nll` in the coefficient block."""
    _, _, H = design.solver().grad_hess(params.pack_psi(), params.pack_phi())
    return H


def _default_psi(design: Design) -> np.ndarray:
    """Feasible start: a gentle linear decrease fit by least squares."""
    y, x = design.y, design.x
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope = float(coef[1])
    lo, hi = design.kv_x.support
    scale = float(np.std(y)) + 1e-8
    slope = min(slope, -0.01 * scale / (hi - lo))
    grev = greville_points(design.kv_x)
    target = slope * (grev - grev.mean())
    if design.monotone:
        beta = np.empty_like(target)
        beta[0] = target[0]
        beta[1:] = np.log(np.maximum(target[:-1] - target[1:], 1e-12))
        curve = design.B @ reparameterize(beta)
    else:
        beta = target
        curve = design.B @ beta
    alpha = float(np.mean(y) - np.mean(curve))
    gamma = np.zeros(design.basis_count * design.n_terms)
    return np.concatenate([[alpha], beta, gamma])


def _default_phi(design: Design) -> np.ndarray:
    y, x = design.y, design.x
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    sd = float(np.std(y - A @ coef))
    tau = -2.0 * math.log(max(sd, 1e-8))
    return np.concatenate([[tau], np.zeros(design.n_terms + 1)])


def inner_opt(phi, design: Design, start=None,
              gtol: float = 1e-9, max_iter: int = 200) -> InnerResult:
    """Minimize the penalized negative log likelihood over the coefficients."""
    phi = np.asarray(phi, dtype=float)
    if phi.size != design.n_terms + 2:
        raise InvalidArgument(
            f"phi must have {design.n_terms + 2} entries, got {phi.size}"
        )
    if start is None:
        start = _default_psi(design)
    return design.solver().minimize(phi, start, gtol=gtol, max_iter=max_iter)


def _laml_from_inner(res: InnerResult, design: Design, phi) -> float:
    logdet = design.solver().logdet_gn(res.psi, phi)
    val = 0.5 * design.dim_psi * _LOG2PI - 0.5 * logdet - res.value
    # Normalization of the improper smoothing prior: without the
    # pseudo-determinant term the criterion is monotone in each smoothing
    # parameter and has no interior optimum.  At loglambda = 0 this term
    # vanishes and the value is the plain Laplace integral.
    val += 0.5 * float(design.penalty_ranks @ np.asarray(phi, dtype=float)[1:])
    return float(val)


def laml(phi, design: Design, start=None) -> float:
    """Laplace-approximate log marginal likelihood of the variance block."""
    res = inner_opt(phi, design, start=start)
    return _laml_from_inner(res, design, np.asarray(phi, dtype=float))


def _fd_gradient(fun, phi, h):
    g = np.empty(phi.size)
    for i in range(phi.size):
        e = np.zeros(phi.size)
        e[i] = h
        g[i] = (fun(phi + e) - fun(phi - e)) / (2.0 * h)
    return g


def _fd_hessian(fun, phi, h):
    # The step is two orders larger than the gradient step: second
    # differences divide by h^2, so the inner solver's ~1e-5 value noise
    # needs h^2 >> 1e-5 to stay below the real curvature.
    s = phi.size
    H = np.empty((s, s))
    f0 = fun(phi)
    for i in range(s):
        ei = np.zeros(s)
        ei[i] = h
        H[i, i] = (fun(phi + ei) - 2.0 * f0 + fun(phi - ei)) / h ** 2
        for j in range(i + 1, s):
            ej = np.zeros(s)
            ej[j] = h
            H[i, j] = H[j, i] = (
                fun(phi + ei + ej) - fun(phi + ei - ej)
                - fun(phi - ei + ej) + fun(phi - ei - ej)
            ) / (4.0 * h ** 2)
    return H


_STALL_PROBE_STEPS = (1e-3, 1e-2, 1e-1)
_STALL_MAX_MOVES = 40


def _stall_probe(fun, phi, fcur, ftol):
    """Best single-coordinate step that improves ``fun`` beyond ``ftol``."""
    best_phi, best_f = None, fcur
    for h in _STALL_PROBE_STEPS:
        for i in range(phi.size):
            for sign in (1.0, -1.0):
                cand = phi.copy()
                cand[i] += sign * h
                try:
                    f_c = fun(cand)
                except InnerOptFailed:
                    continue
                if np.isfinite(f_c) and f_c < best_f - ftol:
                    best_phi, best_f = cand, f_c
    return best_phi


@dataclass(eq=False)
class FittedModel:
    """A fitted dose-response model plus everything needed downstream."""

    params_hat: ModelParams
    beta_c_hat: np.ndarray
    hessian: np.ndarray
    chol: np.ndarray
    design: Design
    sigma_hat: float
    f_center: float
    g_centers: np.ndarray
    laml_value: float
    outer_iterations: int
    hessian_ridged: bool
    f_decreasing: bool
    phi_cov: np.ndarray | None = None
    coef_phi_jac: np.ndarray | None = None

    @property
    def psi_hat(self) -> np.ndarray:
        return self.params_hat.pack_psi()

    @property
    def phi_hat(self) -> np.ndarray:
        return self.params_hat.pack_phi()

    @property
    def kv_x(self) -> KnotVector:
        return self.design.kv_x

    @property
    def alpha_reported(self) -> float:
        return float(self.params_hat.alpha + self.f_center
                     + self.g_centers.sum())

    def f_hat(self, x, centered: bool = False):
        """Exposure-response curve; ``centered`` subtracts the data mean."""
        shift = self.f_center if centered else 0.0
        if np.ndim(x) == 0:
            return de_boor(float(x), self.beta_c_hat, self.kv_x) - shift
        return np.array([de_boor(float(v), self.beta_c_hat, self.kv_x)
                         for v in np.asarray(x, dtype=float)]) - shift

    def f_prime(self, x):
        dcoef, dkv = derivative_coeffs(self.beta_c_hat, self.kv_x)
        if np.ndim(x) == 0:
            return de_boor(float(x), dcoef, dkv)
        return np.array([de_boor(float(v), dcoef, dkv)
                         for v in np.asarray(x, dtype=float)])

    @classmethod
    def from_curve(cls, kv: KnotVector, beta_c, sigma: float,
                   hessian: np.ndarray | None = None) -> "FittedModel":
        """Wrap an externally specified decreasing curve for BMD work.

        Useful for analyses where the curve and its uncertainty come from
        elsewhere; the regression bookkeeping is filled with placeholders.
        """
        beta_c = np.asarray(beta_c, dtype=float)
        L = kv.basis_count
        if beta_c.shape != (L,):
            raise InvalidArgument(f"expected {L} weights, got {beta_c.shape}")
        if sigma <= 0:
            raise InvalidArgument("sigma must be positive")
        D = 1 + L
        H = np.eye(D) if hessian is None else np.asarray(hessian, dtype=float)
        steps = beta_c[:-1] - beta_c[1:]
        if np.all(steps > 0):
            beta = np.concatenate([[beta_c[0]], np.log(steps)])
        else:
            beta = np.zeros(L)
        params = ModelParams(
            alpha=0.0, beta=beta, gamma=np.empty(0),
            tau=-2.0 * math.log(sigma), loglambda=np.zeros(1),
        )
        design = Design(
            y=np.empty(0), x=np.empty(0), z=np.empty((0, 0)),
            kv_x=kv, kv_z=(), B=np.empty((0, L)), Z=np.empty((0, 0)),
            S1=np.zeros((L, L)), Sz=(), rank1=0, rank_z=(),
        )
        grid = np.linspace(*kv.support, 1000)
        fvals = np.array([de_boor(v, beta_c, kv) for v in grid])
        return cls(
            params_hat=params, beta_c_hat=beta_c, hessian=H,
            chol=np.linalg.cholesky(H), design=design, sigma_hat=float(sigma),
            f_center=0.0, g_centers=np.empty(0), laml_value=float("nan"),
            outer_iterations=0, hessian_ridged=False,
            f_decreasing=bool(np.all(np.diff(fvals) < 0.0)),
        )


def fit(data: DoseResponseData, config: FitConfig | None = None) -> FittedModel:
    """Fit the monotone additive model by Laplace-approximate marginal likelihood.

    The variance block starts at the residual scale of a straight-line fit
    with unit smoothing parameters and moves by BFGS steps on central
    finite-difference gradients; every objective evaluation solves the
    coefficient block by warm-started Newton iteration.
    """
    cfg = config or FitConfig()
    lo = min(cfg.x0, float(data.x.min()))
    hi = max(cfg.x0, float(data.x.max()))
    design = build_design(data, cfg.basis_count, support_x=(lo, hi),
                          ridge=cfg.ridge)
    if data.n_obs <= design.dim_psi:
        raise InvalidArgument(
            f"need more observations ({data.n_obs}) than coefficients "
            f"({design.dim_psi})"
        )
    solver = design.solver()
    warm = {"psi": _default_psi(design), "res": None}

    def neg_laml(phi):
        res = solver.minimize(phi, warm["psi"], gtol=cfg.inner_gtol,
                              max_iter=cfg.inner_max_iter)
        warm["psi"] = res.psi
        warm["res"] = res
        return -_laml_from_inner(res, design, phi)

    phi = _default_phi(design)
    s = phi.size
    Hinv = np.eye(s)
    last_df = np.inf
    iterations = 0
    converged = False
    restarted = False

    def gradient_scales(phi):
        # Gradient norm re-measured at shrinking steps.  Near a sharp
        # optimum the truncation error of the central difference dominates
        # the first estimate, so refinement can certify convergence; when
        # instead the estimates inflate as the step shrinks, inner-solve
        # noise dominates them all.
        out = []
        for h in (cfg.fd_step, cfg.fd_step / 10.0, cfg.fd_step / 100.0):
            out.append(float(np.linalg.norm(_fd_gradient(neg_laml, phi, h))))
            if out[-1] <= cfg.outer_gtol:
                break
        return out

    try:
        fcur = neg_laml(phi)
        res_cur = warm["res"]
        g = _fd_gradient(neg_laml, phi, cfg.fd_step)
        for iterations in range(1, cfg.outer_max_iter + 1):
            gnorm = float(np.linalg.norm(g))
            if last_df <= cfg.outer_ftol and gnorm <= cfg.outer_gtol:
                converged = True
                break
            d = -Hinv @ g
            slope = float(g @ d)
            if not np.isfinite(slope) or slope >= 0.0:
                d = -g
                slope = -gnorm ** 2
            dnorm = float(np.linalg.norm(d))
            if dnorm > _OUTER_MAX_STEP:
                d *= _OUTER_MAX_STEP / dnorm
                slope *= _OUTER_MAX_STEP / dnorm
            t = 1.0
            accepted = False
            while t >= 2.0 ** -44:
                try:
                    f_try = neg_laml(phi + t * d)
                except InnerOptFailed:
                    f_try = np.inf
                if np.isfinite(f_try) and f_try <= fcur + 1e-4 * t * slope:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                # no resolvable decrease left in this direction; the value
                # change criterion is met by construction
                gnorm = min(gradient_scales(phi))
                if gnorm <= cfg.outer_gtol:
                    converged = True
                    break
                if not restarted:
                    # the quasi-Newton direction has gone stale at this
                    # scale; fall back to steepest descent once
                    Hinv = np.eye(s)
                    restarted = True
                    continue
                # Difference quotients are untrustworthy here: the
                # coefficient solver occasionally stops a warm start ~1e-5
                # short in value, enough to flip the sign of a small-step
                # slope while leaving whole-coordinate differences intact.
                # Probe single-coordinate steps directly and accept the
                # point once none of them improves the value.
                moves = 0
                cand = _stall_probe(neg_laml, phi, fcur, cfg.outer_ftol)
                while cand is not None and moves < _STALL_MAX_MOVES:
                    fcur = neg_laml(cand)
                    phi, res_cur = cand, warm["res"]
                    moves += 1
                    cand = _stall_probe(neg_laml, phi, fcur, cfg.outer_ftol)
                converged = cand is None
                break
            res_try = warm["res"]
            phi_new = phi + t * d
            g_new = _fd_gradient(neg_laml, phi_new, cfg.fd_step)
            s_vec = phi_new - phi
            y_vec = g_new - g
            sy = float(s_vec @ y_vec)
            if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
                rho = 1.0 / sy
                V = np.eye(s) - rho * np.outer(s_vec, y_vec)
                Hinv = V @ Hinv @ V.T + rho * np.outer(s_vec, s_vec)
            last_df = abs(fcur - f_try)
            if last_df > cfg.outer_ftol:
                restarted = False
            phi, fcur, g, res_cur = phi_new, f_try, g_new, res_try
        else:
            gnorm = float(np.linalg.norm(g))
            if last_df <= cfg.outer_ftol:
                gnorm = min(gradient_scales(phi))
                converged = gnorm <= cfg.outer_gtol
    except InnerOptFailed as exc:
        raise FitFailed(f"coefficient solve failed during ascent: {exc}") \
            from exc
    if not converged:
        raise FitFailed(
            f"marginal likelihood ascent did not converge in {iterations} "
            f"steps (last change {last_df:.3e}, gradient norm {gnorm:.3e})"
        )

    phi_cov = None
    coef_phi_jac = None
    try:
        curv = _fd_hessian(neg_laml, phi, _PHI_CURV_STEP)
        w, Q = np.linalg.eigh(0.5 * (curv + curv.T))
        # Flat plateau directions (and finite-difference noise) can push
        # curvature to zero or below; the floor caps any variance
        # parameter's posterior standard deviation at 10, beyond which the
        # linear coefficient response could not be trusted anyway.
        w = np.maximum(w, _PHI_CURV_FLOOR)
        phi_cov = (Q / w) @ Q.T
        coef_phi_jac = -sla.cho_solve(
            (res_cur.chol, True), solver.phi_cross(res_cur.psi, phi))
    except InnerOptFailed:
        pass

    params = ModelParams.from_flat(res_cur.psi, phi, design.basis_count)
    beta_c = reparameterize(params.beta) if design.monotone else params.beta
    L = design.basis_count
    g_centers = np.array([
        float(np.mean(design.Z[:, j * L:(j + 1) * L]
                      @ params.gamma[j * L:(j + 1) * L]))
        for j in range(design.n_terms)
    ])
    grid = np.linspace(*design.kv_x.support, 1000)
    fvals = np.array([de_boor(v, beta_c, design.kv_x) for v in grid])
    return FittedModel(
        params_hat=params,
        beta_c_hat=beta_c,
        hessian=res_cur.hessian,
        chol=res_cur.chol,
        design=design,
        sigma_hat=float(np.exp(-0.5 * params.tau)),
        f_center=float(np.mean(design.B @ beta_c)),
        g_centers=g_centers,
        laml_value=-fcur,
        outer_iterations=iterations,
        hessian_ridged=res_cur.hessian_shift > 0.0,
        f_decreasing=bool(np.all(np.diff(fvals) < 0.0)),
        phi_cov=phi_cov,
        coef_phi_jac=coef_phi_jac,
    )


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Draws from the Gaussian posterior approximation.

    Every row of ``phi`` repeats the fitted variance block unless the
    sampler was asked to propagate its uncertainty, in which case each row
    holds that draw's variance parameters.
    """

    psi: np.ndarray
    beta_c: np.ndarray
    phi: np.ndarray


def posterior_sample(model: FittedModel, n_draws: int,
                     rng: np.random.Generator,
                     phi_uncertainty: bool = False) -> PosteriorSamples:
    """Sample the coefficient block from N(psi_hat, H^{-1}).

    Draws solve ``chol(H)' v = z`` for standard normal ``z``, giving
    covariance ``H^{-1}`` without forming the inverse.  By default the
    variance block stays degenerate at its estimate, so the draws describe
    the coefficients conditional on the selected smoothing and noise
    scale.  With ``phi_uncertainty`` the variance block is drawn from its
    own Gaussian approximation and pushed through the first-order response
    of the coefficient solution, restoring the spread that conditioning on
    the variance parameters hides; models carrying no variance-block
    covariance (for example hand-built curves) fall back to the
    conditional draws.
    """
    if n_draws < 1:
        raise InvalidArgument("n_draws must be positive")
    D = model.hessian.shape[0]
    z = rng.standard_normal((D, n_draws))
    v = sla.solve_triangular(model.chol.T, z, lower=False)
    psi = model.psi_hat[:, None] + v
    psi = np.ascontiguousarray(psi.T)
    phi = np.tile(model.phi_hat, (n_draws, 1))
    if phi_uncertainty and model.phi_cov is not None \
            and model.coef_phi_jac is not None:
        dphi = rng.standard_normal((n_draws, phi.shape[1]))
        dphi = dphi @ np.linalg.cholesky(model.phi_cov).T
        psi += dphi @ model.coef_phi_jac.T
        phi += dphi
    L = model.design.basis_count
    beta = psi[:, 1:1 + L]
    if model.design.monotone:
        beta_c = _reparameterize_rows(beta)
    else:
        beta_c = beta.copy()
    return PosteriorSamples(psi=psi, beta_c=beta_c, phi=phi)
