"""Deterministic numerical kernels shared by the statistical modules.

Weighted least squares, logistic regression by iteratively reweighted least
squares, distribution quantiles, empirical quantiles, and seeded random
streams. Every kernel is pure: identical inputs produce bit-identical
outputs.

Bootstrap loops dominate the runtime of this package, so the regression
kernels come in batched variants that operate on a leading replicate axis;
the scalar entry points are thin wrappers around a batch of one. The WLS
solver uses QR on the sqrt-weight scaled design rather than the normal
equations; the logistic Newton steps use the normal equations of the
working regression, which is adequate for the small, well-scaled propensity
designs this package fits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats as _stats
from scipy.special import expit

from .errors import DegenerateLabelsError, SeparationError, SingularMatrixError

# Condition estimate limit for X'WX; the estimate is the squared ratio of
# extreme |diag(R)| entries from the QR factorization.
CONDITION_LIMIT = 1e12

LOGISTIC_SCORE_TOL = 1e-8
LOGISTIC_MAX_ITER = 100
SEPARATION_NORM = 1e4

# Per-slice status codes used by the batched fitters.
OK = 0
DEGENERATE = 1
SEPARATED = 2
SINGULAR = 3


def stream_id(*tags) -> int:
    """Stable 64-bit id for a (purpose, index, ...) tag tuple.

    Uses blake2b so ids are identical across platforms and processes,
    unlike the builtin salted ``hash``.
    """
    h = hashlib.blake2b(digest_size=8)
    for t in tags:
        if isinstance(t, str):
            h.update(b"s")
            h.update(t.encode())
            h.update(b"\x00")
        else:
            h.update(b"i")
            h.update(int(t).to_bytes(16, "little", signed=True))
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (root_seed, stream)."""

    root_seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=(int(self.root_seed) & (2**64 - 1), self.stream))
        return np.random.default_rng(ss)

    def child(self, *tags) -> "RngStream":
        """Derive a statistically independent stream for a tagged purpose."""
        return RngStream(self.root_seed, stream_id(self.stream, *tags))


@dataclass(frozen=True)
class WlsSolution:
    coefficients: np.ndarray
    xtwx_inverse: np.ndarray
    residuals: np.ndarray


class WlsBatch(NamedTuple):
    coefficients: np.ndarray  # (B, q)
    xtwx_inverse: np.ndarray  # (B, q, q)
    residuals: np.ndarray  # (B, n)
    status: np.ndarray  # (B,) int, OK or SINGULAR
    condition: np.ndarray  # (B,) condition estimates


def solve_wls_batch(design: np.ndarray, response: np.ndarray, weights: np.ndarray) -> WlsBatch:
    """Solve a stack of weighted least squares problems.

    Parameters
    ----------
    design : (B, n, q) array
    response : (B, n) array
    weights : (B, n) nonnegative array

    Singular slices are flagged in ``status`` rather than raised so bootstrap
    drivers can redraw them; their coefficient rows are meaningless.
    """
    design = np.asarray(design, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    B, n, q = design.shape
    if n < q:
        raise SingularMatrixError(np.inf)

    sw = np.sqrt(weights)
    xs = design * sw[:, :, None]
    ys = response * sw
    qmat, rmat = np.linalg.qr(xs)
    rdiag = np.abs(np.diagonal(rmat, axis1=1, axis2=2))
    rmax = rdiag.max(axis=1)
    rmin = rdiag.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.where(rmin > 0.0, (rmax / np.where(rmin > 0.0, rmin, 1.0)) ** 2, np.inf)
    ok = np.isfinite(condition) & (condition <= CONDITION_LIMIT)
    status = np.where(ok, OK, SINGULAR).astype(np.int8)

    # Substitute the identity on bad slices so the batched solves stay finite.
    r_safe = np.where(ok[:, None, None], rmat, np.eye(q)[None])
    rhs = np.einsum("bnq,bn->bq", qmat, ys)
    coef = np.linalg.solve(r_safe, rhs[:, :, None])[:, :, 0]
    rinv = np.linalg.solve(r_safe, np.broadcast_to(np.eye(q), (B, q, q)))
    xtwx_inv = np.matmul(rinv, rinv.transpose(0, 2, 1))
    residuals = response - np.einsum("bnq,bq->bn", design, coef)
    return WlsBatch(coef, xtwx_inv, residuals, status, condition)


def solve_wls(design: np.ndarray, response: np.ndarray, weights: np.ndarray) -> WlsSolution:
    """Minimize sum_i w_i (y_i - x_i'b)^2 by QR on the sqrt(w)-scaled design.

    Returns the coefficients, (X'WX)^{-1} (needed by sandwich variance
    estimates), and the unweighted residuals.
    """
    design = np.atleast_2d(np.asarray(design, dtype=np.float64))
    response = np.asarray(response, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    out = solve_wls_batch(design[None], response[None], weights[None])
    if out.status[0] != OK:
        raise SingularMatrixError(float(out.condition[0]))
    return WlsSolution(out.coefficients[0], out.xtwx_inverse[0], out.residuals[0])


class LogisticBatch(NamedTuple):
    coefficients: np.ndarray  # (B, q)
    status: np.ndarray  # (B,) int
    iterations: int


def fit_logistic_batch(
    design: np.ndarray,
    labels: np.ndarray,
    warm: np.ndarray | None = None,
) -> LogisticBatch:
    """Fit a stack of logistic regressions by damped-free IRLS Newton steps.

    Iterates until the score (gradient) has max absolute entry below
    ``LOGISTIC_SCORE_TOL`` on every live slice or ``LOGISTIC_MAX_ITER`` passes.
    Slices with one-class labels are flagged DEGENERATE; slices whose
    coefficient norm passes ``SEPARATION_NORM`` are flagged SEPARATED.
    ``warm`` starts the iteration near a known solution, which cuts the
    typical bootstrap refit to two or three steps.
    """
    design = np.asarray(design, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    B, n, q = design.shape
    coef = np.zeros((B, q)) if warm is None else np.array(warm, dtype=np.float64, copy=True)
    status = np.full(B, OK, dtype=np.int8)
    frozen = np.zeros(B, dtype=bool)

    lab_mean = labels.mean(axis=1)
    degenerate = (lab_mean <= 0.0) | (lab_mean >= 1.0)
    status[degenerate] = DEGENERATE
    frozen |= degenerate

    design_t = design.transpose(0, 2, 1)
    iterations = 0
    converged = np.zeros(B, dtype=bool)
    for iterations in range(1, LOGISTIC_MAX_ITER + 1):
        eta = np.matmul(design, coef[:, :, None])[:, :, 0]
        p = expit(eta)
        score = np.matmul(design_t, (labels - p)[:, :, None])[:, :, 0]
        converged = np.max(np.abs(score), axis=1) < LOGISTIC_SCORE_TOL
        live = ~(frozen | converged)
        if not live.any():
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        xtwx = np.matmul(design_t, design * w[:, :, None])
        det = np.linalg.det(xtwx)
        bad = ~np.isfinite(det) | (det == 0.0)
        if bad.any():
            xtwx = np.where(bad[:, None, None], np.eye(q)[None], xtwx)
            status[bad & live] = SINGULAR
            frozen |= bad
            live &= ~bad
        delta = np.linalg.solve(xtwx, score[:, :, None])[:, :, 0]
        coef = np.where(live[:, None], coef + delta, coef)
        blown = live & (np.linalg.norm(coef, axis=1) > SEPARATION_NORM)
        if blown.any():
            status[blown] = SEPARATED
            frozen |= blown
    return LogisticBatch(coef, status, iterations)


def fit_logistic(design: np.ndarray, labels: np.ndarray, warm: np.ndarray | None = None) -> np.ndarray:
    """Maximum-likelihood logistic coefficients for a single design.

    Raises
    ------
    DegenerateLabelsError
        If only one label class is present.
    SeparationError
        If the coefficient norm diverges past the separation threshold.
    """
    design = np.atleast_2d(np.asarray(design, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64)
    out = fit_logistic_batch(design[None], labels[None], None if warm is None else np.asarray(warm)[None])
    code = int(out.status[0])
    if code == DEGENERATE:
        raise DegenerateLabelsError("labels contain a single class")
    if code == SEPARATED:
        raise SeparationError("logistic fit diverged; data appear separated")
    if code == SINGULAR:
        raise SingularMatrixError(np.inf)
    return out.coefficients[0]


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    return float(_stats.norm.ppf(p))


def chisq_quantile(p: float, df: int) -> float:
    """Inverse chi-square CDF with ``df`` degrees of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must be in (0, 1), got {p}")
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df}")
    return float(_stats.chi2.ppf(p, df))


def empirical_quantile(samples: np.ndarray, q: float) -> float:
    """Order-statistic quantile with linear interpolation between closest ranks."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    return float(np.quantile(samples, q, method="linear"))
