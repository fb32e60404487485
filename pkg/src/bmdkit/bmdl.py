"""Lower confidence limits for the benchmark dose.

Three limits, increasingly robust and increasingly expensive: a Delta-method
limit from a linearization of the estimating equation (can fall below the
baseline exposure and is then useless), an approximate-pivot limit that
inverts a chi-square statistic and by construction stays above the baseline,
and a Bayesian parametric bootstrap that re-solves the dose equation on
posterior draws of the curve.  All three share one posterior sample of the
constrained spline weights; none refits the model.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .bmd import (
    BmdConfig,
    BmdEstimate,
    _reflective_root,
    _resolve_xmax,
    c_const,
)
from .errors import BmdlNotEstimable, DegenerateSlope, InvalidArgument
from .model import FittedModel, PosteriorSamples, posterior_sample
from .splines import basis_derivative, de_boor, derivative_coeffs, eval_basis

__all__ = [
    "CoefCovariance",
    "BmdlReport",
    "coef_covariance",
    "v_n",
    "delta_bmdl",
    "pivot_bmdl",
    "bootstrap_bmdl",
    "bmdl_report",
]

log = logging.getLogger(__name__)

_PIVOT_TOL = 1e-8
_PIVOT_SCAN_POINTS = 1000


@dataclass(frozen=True)
class CoefCovariance:
    """Sample covariance of posterior draws of the constrained weights."""

    sigma_hat_beta_c: np.ndarray

    def __post_init__(self):
        m = self.sigma_hat_beta_c
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgument(f"covariance must be square, got {m.shape}")


@dataclass(frozen=True)
class BmdlReport:
    """The three lower limits plus the diagnostics needed to read them.

    ``delta_below_x0`` flags a Delta limit that fell below the baseline
    exposure and therefore carries no information about the benchmark
    dose; the value is still reported, never clamped.
    ``pivot_sign_changes`` counts sign changes of the pivot statistic on
    an inspection grid; anything other than one means the reported pivot
    root is one of several.
    """

    delta: float
    delta_below_x0: bool
    pivot: float
    boot: float
    var_at_xb: float
    u_prime_at_xb: float
    boot_samples_used: int
    boot_failures: int
    pivot_sign_changes: int


def coef_covariance(model: FittedModel, M: int = 1000,
                    rng: np.random.Generator | None = None,
                    phi_uncertainty: bool = True) -> CoefCovariance:
    """Covariance of the constrained weights from ``M`` posterior draws.

    The constraint map is nonlinear, so the covariance comes from sampling
    rather than from transforming the curvature matrix analytically.
    Variance-block uncertainty is propagated into the draws by default;
    conditioning on the fitted variance parameters instead understates the
    spread of the weights.
    """
    if M < 2:
        raise InvalidArgument(f"need at least 2 samples, got {M}")
    if rng is None:
        rng = np.random.default_rng()
    samples = posterior_sample(model, M, rng, phi_uncertainty)
    return _cov_from_samples(samples, model.sigma_hat)


def _cov_from_samples(samples: PosteriorSamples,
                      sigma_ref: float) -> CoefCovariance:
    # The estimating equation divides curve differences by the fitted
    # noise scale, so each draw's weights are expressed at that scale
    # (rows scale by sigma_ref / sigma_draw) before taking the
    # covariance.  The quadratic form over this matrix is then the
    # variance of the estimating equation including whatever
    # variance-block spread the draws carry; for draws with the variance
    # block held fixed the scale is one and nothing changes.
    scale = sigma_ref * np.exp(0.5 * samples.phi[:, 0])
    cov = np.cov(samples.beta_c * scale[:, None], rowvar=False)
    return CoefCovariance(sigma_hat_beta_c=0.5 * (cov + cov.T))


def v_n(x: float, model: FittedModel, cov: CoefCovariance,
        cfg: BmdConfig) -> float:
    """Variance of the estimating equation at ``x``.

    The equation is linear in the constrained weights, so its variance is
    the quadratic form of the basis-difference vector in the weight
    covariance, divided by the noise variance; exactly zero at ``x0``.
    """
    kv = model.kv_x
    diff = eval_basis(cfg.x0, kv) - eval_basis(float(x), kv)
    quad = float(diff @ cov.sigma_hat_beta_c @ diff)
    return quad / model.sigma_hat ** 2


def delta_bmdl(model: FittedModel, est: BmdEstimate, cov: CoefCovariance,
               cfg: BmdConfig) -> float:
    """Linearization-based lower limit: two standard errors below the root.

    The returned value may fall below ``x0``; callers must treat that as
    "no information" rather than truncating.
    """
    slope = abs(est.u_prime_at_root)
    if slope < 1e-14:
        raise DegenerateSlope(
            f"estimating equation slope {slope:.3e} at the root is too "
            "small for the linearized limit"
        )
    var = v_n(est.xb_hat, model, cov, cfg)
    return float(est.xb_hat - 2.0 * np.sqrt(var) / slope)


def _pivot_fns(model: FittedModel, cov: CoefCovariance, cfg: BmdConfig,
               alpha_level: float):
    """The pivot statistic and its derivative as closures over the fit."""
    q = float(chi2.ppf(alpha_level, 1))
    c = c_const(cfg.p0, cfg.p_plus)
    kv = model.kv_x
    sig = model.sigma_hat
    S = cov.sigma_hat_beta_c
    f0 = model.f_hat(cfg.x0)
    b0 = eval_basis(cfg.x0, kv)

    def u_at(x: float) -> float:
        return (f0 - model.f_hat(x)) / sig - c

    def kappa(x: float) -> float:
        diff = b0 - eval_basis(x, kv)
        return u_at(x) ** 2 - q * float(diff @ S @ diff) / sig ** 2

    def kappa_prime(x: float) -> float:
        diff = b0 - eval_basis(x, kv)
        # the variance derivative inherits the 1/sigma^2 of the variance
        v_prime = -2.0 * float(basis_derivative(x, kv) @ S @ diff) / sig ** 2
        u_prime = -float(model.f_prime(x)) / sig
        return 2.0 * u_at(x) * u_prime - q * v_prime

    return kappa, kappa_prime


def _pivot_root(model: FittedModel, est: BmdEstimate, cov: CoefCovariance,
                cfg: BmdConfig, alpha_level: float) -> float:
    """Root of the pivot statistic on ``(x0, xb_hat)``."""
    kappa, kappa_prime = _pivot_fns(model, cov, cfg, alpha_level)
    if kappa(est.xb_hat) >= 0.0:
        # negligible weight uncertainty at the root: the limit is the root
        return float(est.xb_hat)
    root, _ = _reflective_root(kappa, kappa_prime, cfg.x0, est.xb_hat,
                               _PIVOT_TOL, cfg.max_iter)
    return float(root)


def _pivot_scan(model: FittedModel, est: BmdEstimate, cov: CoefCovariance,
                cfg: BmdConfig, alpha_level: float) -> int:
    """Sign changes of the pivot statistic on a grid over the bracket."""
    kappa, _ = _pivot_fns(model, cov, cfg, alpha_level)
    grid = np.linspace(cfg.x0, est.xb_hat, _PIVOT_SCAN_POINTS)
    signs = np.sign([kappa(g) for g in grid])
    return int(np.sum(signs[1:] * signs[:-1] < 0))


def pivot_bmdl(model: FittedModel, est: BmdEstimate, cov: CoefCovariance,
               cfg: BmdConfig, alpha_level: float = 0.95,
               scan: bool = True) -> float:
    """Lower limit from inverting the squared-statistic pivot.

    The pivot is positive at ``x0`` (value ``c**2``) and negative at the
    estimated dose, so a root always lies strictly between them: this
    limit cannot cross the baseline.  Solved by the same reflective
    Newton iteration as the dose itself.  ``scan`` additionally sweeps a
    grid over the bracket and logs a warning when the root is not unique;
    the sweep costs far more than the solve, so timing-sensitive callers
    turn it off.
    """
    root = _pivot_root(model, est, cov, cfg, alpha_level)
    if scan:
        changes = _pivot_scan(model, est, cov, cfg, alpha_level)
        if changes > 1:
            log.warning(
                "pivot statistic changes sign %d times on (%g, %g); "
                "reporting the converged root %g",
                changes, cfg.x0, est.xb_hat, root,
            )
    return root


def _bmd_sample_chunk(args):
    """Solve the dose equation for a chunk of weight draws.

    Runs the same reflective Newton solve as the point estimate, on raw
    de Boor evaluations to stay cheap; draws whose curve never drops by
    ``sigma * c`` on the interval produce NaN.
    """
    (beta_rows, sig_rows, kv, c, x0, xmax, tol, max_iter) = args
    out = np.full(len(beta_rows), np.nan)
    for i, w in enumerate(beta_rows):
        sig = sig_rows[i]
        if not np.isfinite(sig) or sig <= 0.0:
            continue
        dcoef, dkv = derivative_coeffs(w, kv)
        f0 = de_boor(x0, w, kv)

        def u_at(x, w=w, f0=f0, sig=sig):
            return (f0 - de_boor(x, w, kv)) / sig - c

        def u_prime(x, dcoef=dcoef, dkv=dkv, sig=sig):
            return -de_boor(x, dcoef, dkv) / sig

        if not u_at(xmax) > 0.0:
            continue
        try:
            out[i], _ = _reflective_root(u_at, u_prime, x0, xmax,
                                         tol, max_iter)
        except DegenerateSlope:
            pass
    return out


def _bmd_samples(model: FittedModel, samples: PosteriorSamples,
                 cfg: BmdConfig, threads: int = 1) -> np.ndarray:
    """Per-draw benchmark doses; NaN marks draws without one.

    Each draw is solved at its own noise scale, which matters only when
    the sample carries variance-block draws.  Deterministic given the
    draws regardless of ``threads``: the chunk split is fixed and each
    chunk is a pure function of its rows.
    """
    xmax = _resolve_xmax(model, cfg)
    c = c_const(cfg.p0, cfg.p_plus)
    rows = samples.beta_c
    with np.errstate(over="ignore"):
        sigs = np.exp(-0.5 * samples.phi[:, 0])
    if threads <= 1 or len(rows) < 2 * threads:
        return _bmd_sample_chunk(
            (rows, sigs, model.kv_x, c,
             cfg.x0, xmax, cfg.tol, cfg.max_iter))
    chunks = np.array_split(rows, threads)
    sig_chunks = np.array_split(sigs, threads)
    args = [(ch, sg, model.kv_x, c,
             cfg.x0, xmax, cfg.tol, cfg.max_iter)
            for ch, sg in zip(chunks, sig_chunks)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_bmd_sample_chunk, args))
    return np.concatenate(parts)


def bootstrap_bmdl(model: FittedModel, cfg: BmdConfig, M: int = 1000,
                   rng: np.random.Generator | None = None,
                   alpha_level: float = 0.95, threads: int = 1,
                   phi_uncertainty: bool = True) -> float:
    """Parametric-bootstrap lower limit: a low percentile of dose draws.

    Each posterior draw of the weights gives one solved benchmark dose;
    the limit is the ``100 * (1 - alpha_level) / 2`` empirical percentile
    (linear interpolation of order statistics).  Draws without an
    estimable dose are dropped; if every draw fails the limit does not
    exist.
    """
    if M < 40:
        raise InvalidArgument(
            f"need at least 40 draws for a 2.5th percentile, got {M}"
        )
    if rng is None:
        rng = np.random.default_rng()
    samples = posterior_sample(model, M, rng, phi_uncertainty)
    doses = _bmd_samples(model, samples, cfg, threads=threads)
    valid = doses[np.isfinite(doses)]
    if valid.size == 0:
        raise BmdlNotEstimable(
            f"none of {M} posterior draws produced an estimable dose"
        )
    return float(np.percentile(valid, 100.0 * (1.0 - alpha_level) / 2.0))


def _report_from_samples(model: FittedModel, est: BmdEstimate,
                         cfg: BmdConfig, samples: PosteriorSamples,
                         alpha_level: float, threads: int,
                         ) -> tuple[BmdlReport, np.ndarray]:
    """Report plus the per-draw doses (NaN where no dose exists)."""
    cov = _cov_from_samples(samples, model.sigma_hat)
    delta = delta_bmdl(model, est, cov, cfg)
    pivot = _pivot_root(model, est, cov, cfg, alpha_level)
    changes = _pivot_scan(model, est, cov, cfg, alpha_level)
    doses = _bmd_samples(model, samples, cfg, threads=threads)
    valid = doses[np.isfinite(doses)]
    if valid.size == 0:
        raise BmdlNotEstimable(
            f"none of {len(doses)} posterior draws produced an estimable dose"
        )
    boot = float(np.percentile(valid, 100.0 * (1.0 - alpha_level) / 2.0))
    report = BmdlReport(
        delta=delta,
        delta_below_x0=delta < cfg.x0,
        pivot=pivot,
        boot=boot,
        var_at_xb=v_n(est.xb_hat, model, cov, cfg),
        u_prime_at_xb=est.u_prime_at_root,
        boot_samples_used=int(valid.size),
        boot_failures=int(len(doses) - valid.size),
        pivot_sign_changes=changes,
    )
    return report, doses


def bmdl_report(model: FittedModel, est: BmdEstimate, cfg: BmdConfig,
                M: int = 1000, rng: np.random.Generator | None = None,
                alpha_level: float = 0.95, threads: int = 1,
                samples: PosteriorSamples | None = None,
                phi_uncertainty: bool = True) -> BmdlReport:
    """All three lower limits from one shared posterior sample."""
    if samples is None:
        if M < 40:
            raise InvalidArgument(
                f"need at least 40 draws for a 2.5th percentile, got {M}"
            )
        if rng is None:
            rng = np.random.default_rng()
        samples = posterior_sample(model, M, rng, phi_uncertainty)
    report, _ = _report_from_samples(model, est, cfg, samples,
                                     alpha_level, threads)
    return report
