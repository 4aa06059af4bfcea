"""Backward-recursive weighted least squares estimation of stage-wise blip
parameters, treatment recommendation, and the plug-in value estimator.

The estimator works backward from the final stage: at each stage the
pseudo-outcome (observed outcome plus estimated downstream regrets) is
regressed on the treatment-free design and the treatment-blip interaction,
weighted by a balancing function of the estimated propensity score. With a
correctly specified blip model the estimate is consistent when either the
treatment-free or the propensity model is correct.

Everything routes through a batched core that fits many bootstrap resamples
in one stack of array operations; a plain fit is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, StageSpec, Trajectory, history
from .errors import (
    DegenerateLabelsError,
    PositivityError,
    SeparationError,
    SingularMatrixError,
)
from . import numerics
from .numerics import OK, DEGENERATE, SEPARATED, SINGULAR

WEIGHT_KINDS = ("overlap", "ipw")

# Propensities are clipped into this range before weighting; clip events are
# counted on the returned fit.
PROPENSITY_CLAMP = 1e-6


@dataclass(frozen=True)
class DwolsFit:
    """Fitted blip, treatment-free, and propensity coefficients.

    ``sigma_K`` is the sandwich covariance of the final-stage blip
    coefficients scaled so sigma_K / n estimates cov(psi_K).
    """

    psi: tuple[np.ndarray, ...]
    beta: tuple[np.ndarray, ...]
    xi: tuple[np.ndarray, ...]
    sigma_K: np.ndarray
    weight_kind: str
    n: int
    clamp_count: int = 0

    @property
    def K(self) -> int:
        return len(self.psi)


@dataclass(frozen=True)
class ValueEstimate:
    v_hat: float
    varsigma_hat: float
    n: int


class StageDesigns:
    """Per-stage design blocks (with leading intercept columns) for one dataset.

    Bootstrap refits gather rows from these blocks by index, so the blocks are
    built once per dataset and shared by every resample.
    """

    def __init__(self, data: Dataset, specs: Sequence[StageSpec]):
        specs = tuple(specs)
        if len(specs) != data.K:
            raise ValueError(f"expected {data.K} stage specs, got {len(specs)}")
        for k, spec in enumerate(specs, start=1):
            spec.validate(data.schema, k)
        self.specs = specs
        self.n = data.n
        self.K = data.K
        self.y = data.outcomes
        self.a = np.column_stack([data.treatments(k) for k in range(1, data.K + 1)]).astype(
            np.float64
        )
        self.hpsi: list[np.ndarray] = []
        self.hbeta: list[np.ndarray] = []
        self.hps: list[np.ndarray] = []
        ones = np.ones((data.n, 1))
        for k in range(1, data.K + 1):
            h = data.history_matrix(k)
            sp = specs[k - 1]
            self.hpsi.append(np.hstack([ones, h[:, sp.blip_columns]]))
            self.hbeta.append(np.hstack([ones, h[:, sp.tf_columns]]))
            self.hps.append(np.hstack([ones, h[:, sp.ps_columns]]))

    def psi_dims(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.hpsi)


class BatchFit(NamedTuple):
    psi: list[np.ndarray]  # per stage (B, q_k)
    beta: list[np.ndarray]
    xi: list[np.ndarray]
    status: np.ndarray  # (B,) OK / DEGENERATE / SEPARATED / SINGULAR
    clamp_count: np.ndarray  # (B,)
    sigma: np.ndarray | None  # (B, q_K, q_K) when requested


def weights(a, pi, kind: str):
    """Balancing weight for treatment ``a`` at propensity ``pi``.

    ``overlap`` gives |a - pi|; ``ipw`` gives a/pi + (1-a)/(1-pi). Both
    satisfy pi * w(1) = (1 - pi) * w(0).
    """
    if kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {kind!r}; expected one of {WEIGHT_KINDS}")
    a = np.asarray(a, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise PositivityError("propensity must lie strictly inside (0, 1)")
    if kind == "overlap":
        out = np.abs(a - pi)
    else:
        out = a / pi + (1.0 - a) / (1.0 - pi)
    return float(out) if out.ndim == 0 else out


def _fit_batch(
    designs: StageDesigns,
    idx: np.ndarray,
    weight_kind: str,
    warm_xi: list[np.ndarray] | None = None,
    want_sigma: bool = False,
) -> BatchFit:
    """Fit the backward recursion on every row-index set in ``idx`` (B, m)."""
    if weight_kind not in WEIGHT_KINDS:
        raise ValueError(f"unknown weight kind {weight_kind!r}")
    B, m = idx.shape
    K = designs.K
    psi: list[np.ndarray] = [None] * K  # type: ignore[list-item]
    beta: list[np.ndarray] = [None] * K  # type: ignore[list-item]
    xi: list[np.ndarray] = [None] * K  # type: ignore[list-item]
    status = np.full(B, OK, dtype=np.int8)
    clamp = np.zeros(B, dtype=np.int64)
    sigma = None

    ytil = designs.y[idx]
    for k in range(K, 0, -1):
        a_k = designs.a[idx, k - 1]
        xps = designs.hps[k - 1][idx]
        warm = None if warm_xi is None else np.broadcast_to(warm_xi[k - 1], (B, xps.shape[2]))
        logit = numerics.fit_logistic_batch(xps, a_k, warm)
        xi[k - 1] = logit.coefficients
        bad = logit.status != OK
        status = np.where((status == OK) & bad, logit.status, status)

        eta = np.matmul(xps, logit.coefficients[:, :, None])[:, :, 0]
        pi = expit(eta)
        lo, hi = PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP
        clamp += np.count_nonzero((pi < lo) | (pi > hi), axis=1)
        pi = np.clip(pi, lo, hi)
        if weight_kind == "overlap":
            w = np.abs(a_k - pi)
        else:
            w = a_k / pi + (1.0 - a_k) / (1.0 - pi)

        hb = designs.hbeta[k - 1][idx]
        hp = designs.hpsi[k - 1][idx]
        z = np.concatenate([hb, a_k[:, :, None] * hp], axis=2)
        sol = numerics.solve_wls_batch(z, ytil, w)
        status = np.where((status == OK) & (sol.status != OK), SINGULAR, status)
        r = hb.shape[2]
        beta[k - 1] = sol.coefficients[:, :r]
        psi[k - 1] = sol.coefficients[:, r:]

        if k == K and want_sigma:
            we = (w * sol.residuals)[:, :, None] * z
            meat = np.matmul(we.transpose(0, 2, 1), we)
            cov = np.matmul(np.matmul(sol.xtwx_inverse, meat), sol.xtwx_inverse)
            sigma = m * cov[:, r:, r:]

        if k > 1:
            t = np.matmul(hp, psi[k - 1][:, :, None])[:, :, 0]
            ytil = ytil + np.maximum(t, 0.0) - a_k * t

    return BatchFit(psi, beta, xi, status, clamp, sigma)


def _raise_for_status(code: int, stage_hint: str = "") -> None:
    where = f" ({stage_hint})" if stage_hint else ""
    if code == DEGENERATE:
        raise DegenerateLabelsError(f"a treatment stage has a single observed class{where}")
    if code == SEPARATED:
        raise SeparationError(f"propensity fit diverged{where}")
    if code == SINGULAR:
        raise SingularMatrixError(np.inf)


def fit(data: Dataset, specs: Sequence[StageSpec], weight_kind: str = "overlap") -> DwolsFit:
    """Full backward-recursive fit of all K stages. Deterministic."""
    designs = StageDesigns(data, specs)
    idx = np.arange(data.n)[None, :]
    out = _fit_batch(designs, idx, weight_kind, want_sigma=True)
    _raise_for_status(int(out.status[0]))
    assert out.sigma is not None
    return DwolsFit(
        psi=tuple(p[0].copy() for p in out.psi),
        beta=tuple(b[0].copy() for b in out.beta),
        xi=tuple(x[0].copy() for x in out.xi),
        sigma_K=out.sigma[0].copy(),
        weight_kind=weight_kind,
        n=data.n,
        clamp_count=int(out.clamp_count[0]),
    )


def fit_propensity(data: Dataset, specs: Sequence[StageSpec]) -> list[np.ndarray]:
    """Per-stage logistic fits of treatment on the selected history columns."""
    designs = StageDesigns(data, specs)
    out = []
    for k in range(1, data.K + 1):
        try:
            out.append(numerics.fit_logistic(designs.hps[k - 1], designs.a[:, k - 1]))
        except (DegenerateLabelsError, SeparationError) as exc:
            raise type(exc)(f"stage {k}: {exc}") from None
    return out


def pseudo_outcome(
    traj: Trajectory, specs: Sequence[StageSpec], psi_tail: Sequence[np.ndarray], k: int
) -> float:
    """Outcome plus estimated regrets of stages k+1..K for one trajectory.

    ``psi_tail`` holds the downstream blip coefficients (psi_{k+1}, ..., psi_K);
    for k = K it is empty and the observed outcome is returned unchanged.
    """
    K = len(traj.treatments)
    if not 1 <= k <= K:
        raise ValueError(f"stage {k} out of range 1..{K}")
    if len(psi_tail) != K - k:
        raise ValueError(f"expected {K - k} downstream coefficient vectors, got {len(psi_tail)}")
    out = float(traj.outcome)
    for j in range(k + 1, K + 1):
        h = history(traj, j)
        row = np.concatenate([[1.0], h[list(specs[j - 1].blip_columns)]])
        psi_j = np.asarray(psi_tail[j - k - 1], dtype=np.float64)
        if psi_j.shape != row.shape:
            raise ValueError(
                f"stage {j} blip coefficient has dim {psi_j.shape[0]}, design has {row.shape[0]}"
            )
        t = float(row @ psi_j)
        out += t * ((1.0 if t > 0 else 0.0) - traj.treatments[j - 1])
    return out


def recommend(fit_result: DwolsFit, k: int, h: np.ndarray, specs: Sequence[StageSpec]) -> int:
    """Estimated optimal treatment at stage k for history ``h`` (1 iff the
    fitted blip is strictly positive; ties go to the reference treatment 0)."""
    row = np.concatenate([[1.0], np.asarray(h, dtype=np.float64)[list(specs[k - 1].blip_columns)]])
    psi_k = fit_result.psi[k - 1]
    if row.shape != psi_k.shape:
        raise ValueError(f"history yields blip dim {row.shape[0]}, fit has {psi_k.shape[0]}")
    return int(row @ psi_k > 0.0)


def _regret_stack(designs: StageDesigns, psi_stack: Sequence[np.ndarray], rows=None) -> np.ndarray:
    """Sum over stages of h'psi {I(h'psi > 0) - a} for a stack of candidate psi.

    ``psi_stack[k]`` has shape (C, q_k); returns the (n_rows, C) matrix of
    per-subject regret sums.
    """
    first = np.asarray(psi_stack[0])
    C = 1 if first.ndim == 1 else first.shape[0]
    sel = slice(None) if rows is None else rows
    nrows = designs.n if rows is None else len(rows)
    acc = np.zeros((nrows, C))
    for k in range(designs.K):
        pk = np.asarray(psi_stack[k], dtype=np.float64)
        if pk.ndim == 1:
            pk = pk[None, :]
        if pk.shape[1] != designs.hpsi[k].shape[1]:
            raise ValueError(
                f"stage {k + 1} blip coefficient has dim {pk.shape[1]}, "
                f"design has {designs.hpsi[k].shape[1]}"
            )
        t = designs.hpsi[k][sel] @ pk.T
        acc += np.maximum(t, 0.0) - designs.a[sel, k][:, None] * t
    return acc


def value_profile(
    designs: StageDesigns, psi_stack: Sequence[np.ndarray], rows=None
) -> tuple[np.ndarray, np.ndarray]:
    """Value mean and (divide-by-n) standard deviation for a stack of psi."""
    sel = slice(None) if rows is None else rows
    yv = designs.y[sel][:, None] + _regret_stack(designs, psi_stack, rows)
    v = yv.mean(axis=0)
    sig = np.sqrt(np.mean((yv - v[None, :]) ** 2, axis=0))
    return v, sig


def value(data: Dataset, specs: Sequence[StageSpec], psi: Sequence[np.ndarray]) -> ValueEstimate:
    """Plug-in value of the regime indexed by ``psi`` and its spread.

    The estimate is the sample mean of the regret-adjusted outcome
    Y + sum_k h_k'psi_k {I(h_k'psi_k > 0) - a_k}; the spread is the square
    root of its biased (divide-by-n) sample variance.
    """
    designs = StageDesigns(data, specs)
    v, sig = value_profile(designs, [np.asarray(p, dtype=np.float64) for p in psi])
    return ValueEstimate(float(v[0]), float(sig[0]), data.n)


def sandwich_K(data: Dataset, specs: Sequence[StageSpec], fit_result: DwolsFit) -> np.ndarray:
    """Heteroskedasticity-robust covariance of the final-stage blip block.

    Treats the fitted propensity as fixed. Scaled so that the result divided
    by n estimates cov(psi_K).
    """
    designs = StageDesigns(data, specs)
    K = designs.K
    a_K = designs.a[:, K - 1]
    eta = designs.hps[K - 1] @ fit_result.xi[K - 1]
    pi = np.clip(expit(eta), PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
    if fit_result.weight_kind == "overlap":
        w = np.abs(a_K - pi)
    else:
        w = a_K / pi + (1.0 - a_K) / (1.0 - pi)
    z = np.hstack([designs.hbeta[K - 1], a_K[:, None] * designs.hpsi[K - 1]])
    coef = np.concatenate([fit_result.beta[K - 1], fit_result.psi[K - 1]])
    resid = designs.y - z @ coef
    sol = numerics.solve_wls(z, designs.y, w)
    we = (w * resid)[:, None] * z
    meat = we.T @ we
    cov = sol.xtwx_inverse @ meat @ sol.xtwx_inverse
    r = designs.hbeta[K - 1].shape[1]
    return data.n * cov[r:, r:]
