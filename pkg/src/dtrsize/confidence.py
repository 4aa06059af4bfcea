"""Confidence regions for the blip parameters.

The final stage gets a Wald ellipsoid from the sandwich covariance. Earlier
stages are non-regular (their estimates involve indicators of downstream
blips), so their intervals come from an m-out-of-n bootstrap whose resample
size adapts to an estimated degree of non-regularity: the closer the
downstream blips sit to zero over the sample, the smaller the resample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import Dataset, StageSpec
from .dwols import DwolsFit, StageDesigns, _fit_batch
from .errors import DegenerateResampleError, SingularMatrixError
from .numerics import OK, RngStream, chisq_quantile


@dataclass(frozen=True)
class RegionConfig:
    """Controls for region construction: the m-out-of-n tuning constant, the
    level used inside the non-regularity diagnostics, and bootstrap budgets."""

    kappa: float = 0.2
    nu: float = 0.05
    B: int = 500
    max_redraw: int = 10

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.nu < 1:
            raise ValueError("nu must be in (0, 1)")
        if self.B < 2:
            raise ValueError("bootstrap count must be at least 2")


@dataclass(frozen=True)
class WaldEllipsoid:
    """{v : n (v - center)' sigma^{-1} (v - center) <= radius}."""

    center: np.ndarray
    sigma: np.ndarray
    radius: float
    n: int

    def __post_init__(self):
        try:
            chol = np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(np.inf) from None
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def mahalanobis(self, v: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(v) - self.center[None, :]
        z = np.linalg.solve(self._chol, d.T)  # type: ignore[attr-defined]
        return self.n * np.sum(z * z, axis=0)

    def contains(self, v: np.ndarray) -> bool:
        return bool(self.mahalanobis(v)[0] <= self.radius + 1e-12)

    def axis_point(self, j: int, sign: float) -> np.ndarray:
        """Boundary point extremizing coordinate j."""
        sj = self.sigma[:, j]
        step = sj * np.sqrt(self.radius / (self.n * self.sigma[j, j]))
        return self.center + sign * step

    def coordinate_segment(self, v: np.ndarray, j: int) -> tuple[float, float]:
        """Feasible range of coordinate j holding the others at ``v``."""
        m = np.linalg.inv(self.sigma)
        d = v - self.center
        d = d.copy()
        d[j] = 0.0
        aa = self.n * m[j, j]
        bb = 2.0 * self.n * (m[j] @ d)
        cc = self.n * (d @ m @ d) - self.radius
        disc = bb * bb - 4.0 * aa * cc
        if disc < 0:
            disc = 0.0
        root = np.sqrt(disc)
        lo = (-bb - root) / (2.0 * aa)
        hi = (-bb + root) / (2.0 * aa)
        return float(self.center[j] + lo), float(self.center[j] + hi)


@dataclass(frozen=True)
class ConfidenceRegion:
    """Per-coordinate boxes for stages 1..K-1 plus the final-stage ellipsoid."""

    boxes: tuple[np.ndarray, ...]  # per stage, shape (q_k, 2) of [lo, hi]
    ellipsoid: WaldEllipsoid
    center: tuple[np.ndarray, ...]  # the fitted psi, all K stages
    eps: tuple[float, ...]
    m_hat: int
    p_hat: float
    p_hat_stages: tuple[float, ...]

    @property
    def K(self) -> int:
        return len(self.center)

    def contains(self, psi: Sequence[np.ndarray]) -> bool:
        for k, box in enumerate(self.boxes):
            v = np.asarray(psi[k], dtype=np.float64)
            if np.any(v < box[:, 0] - 1e-12) or np.any(v > box[:, 1] + 1e-12):
                return False
        return self.ellipsoid.contains(np.asarray(psi[self.K - 1], dtype=np.float64))


def wald_region_K(fit: DwolsFit, eps_K: float) -> WaldEllipsoid:
    """Wald-type asymptotic confidence region for the final-stage blip."""
    if not 0 < eps_K < 1:
        raise ValueError("eps_K must be in (0, 1)")
    p_K = fit.psi[-1].shape[0]
    return WaldEllipsoid(
        center=fit.psi[-1].copy(),
        sigma=fit.sigma_K.copy(),
        radius=chisq_quantile(1.0 - eps_K, p_K),
        n=fit.n,
    )


def resample_size(n: int, kappa: float, p_hat: float) -> int:
    """Adaptive m-out-of-n resample size, ceil(n^{(1 + kappa(1 - p)) / (1 + kappa)})."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must be in [0, 1]")
    if p_hat == 0.0:
        return int(n)
    exponent = (1.0 + kappa * (1.0 - p_hat)) / (1.0 + kappa)
    m = int(np.ceil(n**exponent))
    return max(min(m, n), int(np.ceil(n ** (1.0 / (1.0 + kappa)))))


def _draw_fit_batch(
    designs: StageDesigns,
    source_rows: np.ndarray,
    m: int,
    B: int,
    stream: RngStream,
    weight_kind: str,
    warm_xi,
    max_redraw: int,
    want_sigma: bool = False,
):
    """Fit B resamples of size m drawn from ``source_rows``, redrawing slices
    that produce degenerate stages (one treatment class, separation, or a
    singular design) up to ``max_redraw`` times."""
    rng = stream.generator()
    idx = source_rows[rng.integers(0, source_rows.shape[0], size=(B, m))]
    out = _fit_batch(designs, idx, weight_kind, warm_xi=warm_xi, want_sigma=want_sigma)
    bad = out.status != OK
    attempt = 0
    while bad.any():
        attempt += 1
        if attempt > max_redraw:
            raise DegenerateResampleError(
                f"{int(bad.sum())} of {B} resamples of size {m} stayed degenerate "
                f"after {max_redraw} redraws"
            )
        redraw_rng = stream.child("redraw", attempt).generator()
        idx_new = source_rows[redraw_rng.integers(0, source_rows.shape[0], size=(int(bad.sum()), m))]
        idx[bad] = idx_new
        repl = _fit_batch(designs, idx[bad], weight_kind, warm_xi=warm_xi, want_sigma=want_sigma)
        live = np.flatnonzero(bad)
        for k in range(designs.K):
            out.psi[k][live] = repl.psi[k]
            out.beta[k][live] = repl.beta[k]
            out.xi[k][live] = repl.xi[k]
        if want_sigma:
            out.sigma[live] = repl.sigma
        out.status[live] = repl.status
        out.clamp_count[live] = repl.clamp_count
        bad = out.status != OK
    return out, idx


def nonregularity_p_hat(
    data_or_designs,
    specs: Sequence[StageSpec] | None,
    fit: DwolsFit,
    nu: float = 0.05,
    kappa: float = 0.2,
    B: int = 500,
    seed: int | RngStream = 0,
    source_rows: np.ndarray | None = None,
    max_redraw: int = 10,
) -> tuple[tuple[float, ...], float]:
    """Estimate the per-stage degrees of non-regularity and their max.

    For each stage k = 1..K-1 this estimates the chance that the stage-(k+1)
    fitted blip is indistinguishable from zero: at k = K-1 by the plug-in rule
    comparing n (h'psi_K)^2 to its Wald threshold, and for earlier stages by
    the fraction of subjects whose m-out-of-n percentile interval for
    h'psi_{k+1} covers zero, moving backward with the resample size keyed to
    the previous stage's estimate.
    """
    designs = data_or_designs if isinstance(data_or_designs, StageDesigns) else StageDesigns(
        data_or_designs, specs
    )
    K = designs.K
    if K < 2:
        raise ValueError("non-regularity estimation needs K >= 2")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rows = np.arange(designs.n) if source_rows is None else np.asarray(source_rows)
    n = rows.shape[0]

    p_hat: dict[int, float] = {}
    # Final transition: plug-in using the stage-K sandwich.
    h = designs.hpsi[K - 1][rows]
    t = h @ fit.psi[K - 1]
    tau = np.einsum("nq,qp,np->n", h, fit.sigma_K, h) * chisq_quantile(1.0 - nu, 1)
    p_hat[K - 1] = float(np.mean(n * t * t <= tau))

    for k in range(K - 2, 0, -1):
        m = resample_size(n, kappa, p_hat[k + 1])
        boot, _ = _draw_fit_batch(
            designs,
            rows,
            m,
            B,
            stream.child("p_hat", k),
            fit.weight_kind,
            warm_xi=list(fit.xi),
            max_redraw=max_redraw,
        )
        hk = designs.hpsi[k][rows]  # stage k+1 blip design, 0-based index k
        contrasts = boot.psi[k] @ hk.T  # (B, n)
        centers = hk @ fit.psi[k]
        delta = np.sqrt(m) * (contrasts - centers[None, :])
        lo_q, hi_q = np.quantile(delta, [nu / 2.0, 1.0 - nu / 2.0], axis=0, method="linear")
        ci_lo = centers - hi_q / np.sqrt(m)
        ci_hi = centers - lo_q / np.sqrt(m)
        p_hat[k] = float(np.mean((ci_lo <= 0.0) & (0.0 <= ci_hi)))

    stages = tuple(p_hat[k] for k in range(1, K))
    return stages, max(stages)


def mn_region(
    data: Dataset,
    specs: Sequence[StageSpec],
    fit: DwolsFit,
    theta1: float,
    cfg: RegionConfig = RegionConfig(),
    seed: int | RngStream = 0,
    p_hat: float | None = None,
) -> ConfidenceRegion:
    """m-out-of-n bootstrap confidence region at joint level 1 - theta1.

    The level is split evenly across stages. ``p_hat`` can be supplied to
    reuse a non-regularity estimate computed elsewhere (the sizing loops do
    this for cost control); by default it is estimated here.
    """
    designs = StageDesigns(data, specs)
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    return region_from_designs(designs, np.arange(designs.n), fit, theta1, cfg, stream, p_hat)


def region_from_designs(
    designs: StageDesigns,
    rows: np.ndarray,
    fit: DwolsFit,
    theta1: float,
    cfg: RegionConfig,
    stream: RngStream,
    p_hat: float | None = None,
    region_B: int | None = None,
) -> ConfidenceRegion:
    """Region construction on an arbitrary row subset of precomputed designs."""
    if not 0 < theta1 < 1:
        raise ValueError("theta1 must be in (0, 1)")
    K = designs.K
    n = rows.shape[0]
    eps = tuple(theta1 / K for _ in range(K))

    if K == 1:
        stages: tuple[float, ...] = ()
        p_max = 0.0
    elif p_hat is None:
        stages, p_max = nonregularity_p_hat(
            designs,
            None,
            fit,
            nu=cfg.nu,
            kappa=cfg.kappa,
            B=cfg.B,
            seed=stream.child("p_hat"),
            source_rows=rows,
            max_redraw=cfg.max_redraw,
        )
    else:
        stages, p_max = (), float(p_hat)

    m_hat = resample_size(n, cfg.kappa, p_max)
    boxes: list[np.ndarray] = []
    if K > 1:
        B = cfg.B if region_B is None else region_B
        boot, _ = _draw_fit_batch(
            designs,
            rows,
            m_hat,
            B,
            stream.child("percentile"),
            fit.weight_kind,
            warm_xi=list(fit.xi),
            max_redraw=cfg.max_redraw,
        )
        root_m = np.sqrt(m_hat)
        for k in range(K - 1):
            delta = root_m * (boot.psi[k] - fit.psi[k][None, :])
            lo_q, hi_q = np.quantile(
                delta, [eps[k] / 2.0, 1.0 - eps[k] / 2.0], axis=0, method="linear"
            )
            lo = fit.psi[k] - hi_q / root_m
            hi = fit.psi[k] - lo_q / root_m
            # The percentile interval is not guaranteed to cover the point
            # estimate; widen minimally so the region always contains it.
            lo = np.minimum(lo, fit.psi[k])
            hi = np.maximum(hi, fit.psi[k])
            boxes.append(np.column_stack([lo, hi]))

    ellipsoid = WaldEllipsoid(
        center=fit.psi[K - 1].copy(),
        sigma=fit.sigma_K.copy(),
        radius=chisq_quantile(1.0 - eps[K - 1], fit.psi[K - 1].shape[0]),
        n=n,
    )
    return ConfidenceRegion(
        boxes=tuple(boxes),
        ellipsoid=ellipsoid,
        center=tuple(p.copy() for p in fit.psi),
        eps=eps,
        m_hat=m_hat,
        p_hat=p_max,
        p_hat_stages=stages,
    )
