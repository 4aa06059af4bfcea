"""Sample size estimation from pilot data by bootstrap oversampling.

Candidate study sizes n are assessed by resampling the pilot with replacement
at size n. The power criterion refits the estimator on each oversampled
replicate, builds its confidence region, and checks how often the infimum of
a centered-and-truncated test statistic clears the normal threshold; the
smallest n whose regression-smoothed power reaches the target is reported.
The concentration criterion instead tracks a quantile of the spread
(sup minus inf over the region) of the value-estimate error and finds the
smallest n bringing it under the tolerance. The combined rule takes the max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .confidence import (
    ConfidenceRegion,
    WaldEllipsoid,
    nonregularity_p_hat,
    resample_size,
)
from .data import Dataset, StageSpec
from .dwols import StageDesigns, ValueEstimate, _fit_batch, fit, value_profile
from .errors import ConfigError, DegenerateResampleError
from .numerics import OK, RngStream, chisq_quantile, empirical_quantile, normal_quantile
from .value_test import SearchConfig, _RegionGeometry, search_region

FINITE = "finite"
INFEASIBLE = "infeasible"  # pilot value at or below B0; no n can power the comparison
INFEASIBLE_GRID = "infeasible_grid"  # search budget exhausted without reaching the target


def default_grid(n0: int) -> tuple[int, ...]:
    """Geometric candidate sizes from 50 to 20 * n0 with ratio 1.3."""
    out = [50]
    while out[-1] < 20 * n0:
        out.append(min(int(math.ceil(out[-1] * 1.3)), 20 * n0))
    return tuple(dict.fromkeys(out))


@dataclass(frozen=True)
class SizingConfig:
    """Design constants and budgets for the sample size search.

    ``B`` oversampled replicates are drawn per candidate n; ``region_B``
    (defaulting to B) controls the inner percentile bootstrap that builds each
    replicate's confidence region. The non-regularity estimate is computed
    once on the pilot and reused inside every replicate unless
    ``refresh_p_hat`` is set.
    """

    B0: float = 0.0
    eta: float = 1.0
    alpha: float = 0.05
    phi: float = 0.10
    epsilon: float = 0.5
    zeta: float = 0.10
    pwr_theta1: float | None = None
    pwr_theta2: float | None = None
    opt_theta1: float | None = None
    opt_theta2: float | None = None
    kappa: float = 0.2
    nu: float = 0.05
    B: int = 500
    region_B: int | None = None
    grid: tuple[int, ...] | None = None
    neighborhood: float = 0.07
    refresh_p_hat: bool = False
    weight_kind: str = "overlap"
    search: SearchConfig = SearchConfig(draws=300, refine_rounds=1, golden_iters=16)
    max_redraw: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        for name in ("alpha", "phi", "zeta", "nu"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.B < 2:
            raise ConfigError("B must be at least 2")
        if self.neighborhood <= 0:
            raise ConfigError("neighborhood must be positive")
        if self.grid is not None:
            g = tuple(int(v) for v in self.grid)
            if len(g) < 1 or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 2:
                raise ConfigError("grid must be strictly increasing sizes >= 2")
            object.__setattr__(self, "grid", g)

    def pwr_thetas(self) -> tuple[float, float]:
        t1 = self.alpha / 2.0 if self.pwr_theta1 is None else self.pwr_theta1
        t2 = self.alpha / 2.0 if self.pwr_theta2 is None else self.pwr_theta2
        if abs(t1 + t2 - self.alpha) > 1e-9:
            raise ConfigError(f"pwr_theta1 + pwr_theta2 must equal alpha, got {t1} + {t2}")
        return t1, t2

    def opt_thetas(self) -> tuple[float, float]:
        t1 = self.zeta / 2.0 if self.opt_theta1 is None else self.opt_theta1
        t2 = self.zeta / 2.0 if self.opt_theta2 is None else self.opt_theta2
        if t1 + t2 > self.zeta + 1e-9:
            raise ConfigError(f"opt_theta1 + opt_theta2 must not exceed zeta, got {t1} + {t2}")
        return t1, t2

    def region_budget(self) -> int:
        return self.B if self.region_B is None else self.region_B


@dataclass(frozen=True)
class SizingResult:
    n_hat: int | None
    kind: str  # FINITE, INFEASIBLE, or INFEASIBLE_GRID
    condition: str  # "PWR" or "OPT"
    curve: tuple[tuple[int, float], ...]  # (n, power) or (n, Q-hat)
    pilot_value: ValueEstimate
    diagnostics: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.kind == FINITE


@dataclass(frozen=True)
class CombinedSizingResult:
    pwr: SizingResult
    opt: SizingResult
    n_hat: int | None
    kind: str
    condition: str = "BOTH"


class _PilotContext:
    """Everything reusable across candidate sizes for one pilot."""

    def __init__(self, pilot: Dataset, specs: Sequence[StageSpec], cfg: SizingConfig):
        self.designs = StageDesigns(pilot, specs)
        self.fit = fit(pilot, specs, cfg.weight_kind)
        self.value0 = _value_at(self.designs, self.fit.psi)
        self.n0 = pilot.n
        self.cfg = cfg
        self._p_hat: float | None = None

    def p_hat(self, stream: RngStream) -> float:
        if self.designs.K == 1:
            return 0.0
        if self._p_hat is None:
            _, self._p_hat = nonregularity_p_hat(
                self.designs,
                None,
                self.fit,
                nu=self.cfg.nu,
                kappa=self.cfg.kappa,
                B=self.cfg.B,
                seed=stream,
                max_redraw=self.cfg.max_redraw,
            )
        return self._p_hat


def _value_at(designs: StageDesigns, psi) -> ValueEstimate:
    v, sig = value_profile(designs, list(psi))
    return ValueEstimate(float(v[0]), float(sig[0]), designs.n)


def _inner_psi_boot(designs, outer_idx, m, region_B, stream, weight_kind, warm_xi, max_redraw):
    """Percentile-bootstrap blip draws for every outer replicate.

    Resamples size-m index sets from each outer replicate's rows (composition
    of index draws), fits them in memory-bounded chunks, and redraws slices
    with degenerate stages. Returns one (B, region_B, q_k) array per stage.
    """
    B, n = outer_idx.shape
    total = B * region_B
    positions = np.empty((total, m), dtype=np.int64)
    for b in range(B):
        gen = stream.child("inner", b).generator()
        positions[b * region_B : (b + 1) * region_B] = gen.integers(0, n, size=(region_B, m))
    outer_of = np.repeat(np.arange(B), region_B)
    abs_idx = outer_idx[outer_of[:, None], positions]

    dims = designs.psi_dims()
    psi_out = [np.empty((total, q)) for q in dims]
    chunk = max(32, min(8192, int(3.2e7 / (m * 60))))
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        sl = slice(start, stop)
        out = _fit_batch(designs, abs_idx[sl], weight_kind, warm_xi=warm_xi)
        bad = out.status != OK
        attempt = 0
        while bad.any():
            attempt += 1
            if attempt > max_redraw:
                raise DegenerateResampleError(
                    f"{int(bad.sum())} inner resamples of size {m} stayed degenerate "
                    f"after {max_redraw} redraws"
                )
            gen = stream.child("inner-redraw", start, attempt).generator()
            rows = np.flatnonzero(bad)
            new_pos = gen.integers(0, n, size=(rows.size, m))
            abs_rows = outer_idx[outer_of[start + rows][:, None], new_pos]
            repl = _fit_batch(designs, abs_rows, weight_kind, warm_xi=warm_xi)
            for k in range(designs.K):
                out.psi[k][rows] = repl.psi[k]
            out.status[rows] = repl.status
            bad = out.status != OK
        for k in range(designs.K):
            psi_out[k][sl] = out.psi[k]
    return [arr.reshape(B, region_B, q) for arr, q in zip(psi_out, dims)]


def _candidate_regions(ctx: _PilotContext, n: int, stream: RngStream, p_hat: float):
    """Oversample the pilot at size n and build each replicate's region.

    Returns (regions, outer_idx, m_hat). Outer replicate b draws its rows from
    the stream child ("outer", b), so results at one candidate n never depend
    on which other candidates were evaluated.
    """
    cfg = ctx.cfg
    designs = ctx.designs
    B = cfg.B
    K = designs.K
    rows0 = np.arange(ctx.n0)

    outer_idx = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        outer_idx[b] = stream.child("outer", b).generator().integers(0, ctx.n0, size=n)
    out = _fit_batch(designs, outer_idx, cfg.weight_kind, warm_xi=list(ctx.fit.xi), want_sigma=True)
    bad = out.status != OK
    attempt = 0
    while bad.any():
        attempt += 1
        if attempt > cfg.max_redraw:
            raise DegenerateResampleError(
                f"{int(bad.sum())} oversampled replicates of size {n} stayed degenerate "
                f"after {cfg.max_redraw} redraws"
            )
        gen = stream.child("outer-redraw", attempt).generator()
        rows = np.flatnonzero(bad)
        outer_idx[rows] = gen.integers(0, ctx.n0, size=(rows.size, n))
        repl = _fit_batch(designs, outer_idx[rows], cfg.weight_kind, warm_xi=list(ctx.fit.xi), want_sigma=True)
        for k in range(K):
            out.psi[k][rows] = repl.psi[k]
            out.xi[k][rows] = repl.xi[k]
        out.sigma[rows] = repl.sigma
        out.status[rows] = repl.status
        bad = out.status != OK

    return out, outer_idx


def _regions_for_batch(ctx, out, outer_idx, n, theta1, stream, p_hat):
    cfg = ctx.cfg
    designs = ctx.designs
    K = designs.K
    B = cfg.B
    eps = tuple(theta1 / K for _ in range(K))
    per_replicate_p = np.full(B, p_hat)
    if cfg.refresh_p_hat and K >= 2:
        for b in range(B):
            bfit = _replicate_fit(ctx, out, b, n)
            _, per_replicate_p[b] = nonregularity_p_hat(
                designs,
                None,
                bfit,
                nu=cfg.nu,
                kappa=cfg.kappa,
                B=cfg.region_budget(),
                seed=stream.child("p_hat", b),
                source_rows=outer_idx[b],
                max_redraw=cfg.max_redraw,
            )
    m_hats = np.array([resample_size(n, cfg.kappa, p) for p in per_replicate_p])
    m_hat = int(m_hats[0])

    boxes_per_stage = []
    if K > 1:
        if cfg.refresh_p_hat and len(set(m_hats.tolist())) > 1:
            # Mixed resample sizes: fall back to per-replicate inner bootstraps.
            psi_inner = [np.empty((B, cfg.region_budget(), q)) for q in designs.psi_dims()]
            for b in range(B):
                got = _inner_psi_boot(
                    designs,
                    outer_idx[b : b + 1],
                    int(m_hats[b]),
                    cfg.region_budget(),
                    stream.child("inner-batch", b),
                    cfg.weight_kind,
                    list(ctx.fit.xi),
                    cfg.max_redraw,
                )
                for k in range(K):
                    psi_inner[k][b] = got[k][0]
        else:
            psi_inner = _inner_psi_boot(
                designs,
                outer_idx,
                m_hat,
                cfg.region_budget(),
                stream.child("inner-batch"),
                cfg.weight_kind,
                list(ctx.fit.xi),
                cfg.max_redraw,
            )
        for k in range(K - 1):
            delta = np.sqrt(m_hats)[:, None, None] * (psi_inner[k] - out.psi[k][:, None, :])
            lo_q, hi_q = np.quantile(
                delta, [eps[k] / 2.0, 1.0 - eps[k] / 2.0], axis=1, method="linear"
            )
            lo = out.psi[k] - hi_q / np.sqrt(m_hats)[:, None]
            hi = out.psi[k] - lo_q / np.sqrt(m_hats)[:, None]
            lo = np.minimum(lo, out.psi[k])
            hi = np.maximum(hi, out.psi[k])
            boxes_per_stage.append(np.stack([lo, hi], axis=2))  # (B, q_k, 2)

    radius = chisq_quantile(1.0 - eps[K - 1], designs.psi_dims()[K - 1])
    regions = []
    for b in range(B):
        regions.append(
            ConfidenceRegion(
                boxes=tuple(boxes_per_stage[k][b] for k in range(K - 1)),
                ellipsoid=WaldEllipsoid(
                    center=out.psi[K - 1][b].copy(),
                    sigma=out.sigma[b].copy(),
                    radius=radius,
                    n=n,
                ),
                center=tuple(out.psi[k][b].copy() for k in range(K)),
                eps=eps,
                m_hat=int(m_hats[b]),
                p_hat=float(per_replicate_p[b]),
                p_hat_stages=(),
            )
        )
    return regions, m_hat


def _replicate_fit(ctx, out, b, n):
    from .dwols import DwolsFit

    return DwolsFit(
        psi=tuple(out.psi[k][b].copy() for k in range(ctx.designs.K)),
        beta=tuple(out.beta[k][b].copy() for k in range(ctx.designs.K)),
        xi=tuple(out.xi[k][b].copy() for k in range(ctx.designs.K)),
        sigma_K=out.sigma[b].copy(),
        weight_kind=ctx.cfg.weight_kind,
        n=n,
    )


def _pwr_power(ctx: _PilotContext, n: int, stream: RngStream, p_hat: float) -> tuple[float, int]:
    """Bootstrap power estimate at candidate size n, with the resample size used."""
    cfg = ctx.cfg
    designs = ctx.designs
    theta1, theta2 = cfg.pwr_thetas()
    z = normal_quantile(1.0 - theta2)
    root_n = math.sqrt(n)

    out, outer_idx = _candidate_regions(ctx, n, stream, p_hat)
    regions, m_hat = _regions_for_batch(ctx, out, outer_idx, n, theta1, stream, p_hat)

    hits = 0
    for b in range(cfg.B):
        geo = _RegionGeometry(regions[b])
        rows_b = outer_idx[b]

        def batch_eval(mat: np.ndarray) -> np.ndarray:
            stacks = geo.split(mat)
            vb, sb = value_profile(designs, stacks, rows=rows_b)
            v0, _ = value_profile(designs, stacks)
            sb = np.maximum(sb, 1e-12)
            drift = np.minimum(root_n * (v0 - cfg.B0), root_n * cfg.eta)
            return (root_n * (vb - v0) + drift) / sb

        _, inf_stat = search_region(
            regions[b], batch_eval, cfg.search, stream.child("search", b), minimize=True
        )
        if inf_stat >= z:
            hits += 1
    return hits / cfg.B, m_hat


def _opt_quantile(ctx: _PilotContext, n: int, stream: RngStream, p_hat: float) -> tuple[float, int]:
    """Bootstrap estimate of the (1 - theta2) quantile of the region spread of
    the value-estimate error at candidate size n."""
    cfg = ctx.cfg
    designs = ctx.designs
    theta1, theta2 = cfg.opt_thetas()

    out, outer_idx = _candidate_regions(ctx, n, stream, p_hat)
    regions, m_hat = _regions_for_batch(ctx, out, outer_idx, n, theta1, stream, p_hat)

    spreads = np.empty(cfg.B)
    for b in range(cfg.B):
        geo = _RegionGeometry(regions[b])
        rows_b = outer_idx[b]

        def batch_eval(mat: np.ndarray) -> np.ndarray:
            stacks = geo.split(mat)
            vb, _ = value_profile(designs, stacks, rows=rows_b)
            v0, _ = value_profile(designs, stacks)
            return vb - v0

        _, hi = search_region(
            regions[b], batch_eval, cfg.search, stream.child("sup", b), minimize=False
        )
        _, lo = search_region(
            regions[b], batch_eval, cfg.search, stream.child("inf", b), minimize=True
        )
        spreads[b] = hi - lo
    return float(empirical_quantile(spreads, 1.0 - theta2)), m_hat


def pwr_power_at(
    pilot: Dataset,
    specs: Sequence[StageSpec],
    n: int,
    cfg: SizingConfig,
    seed: int | RngStream | None = None,
) -> float:
    """Estimated power of the projection test at study size n, from the pilot."""
    if n < 2:
        raise ValueError("candidate size must be >= 2")
    ctx = _PilotContext(pilot, specs, cfg)
    stream = _as_stream(seed, cfg)
    p_hat = ctx.p_hat(stream.child("p_hat"))
    power, _ = _pwr_power(ctx, n, stream.child("pwr", n), p_hat)
    return power


def opt_quantile_at(
    pilot: Dataset,
    specs: Sequence[StageSpec],
    n: int,
    cfg: SizingConfig,
    seed: int | RngStream | None = None,
) -> float:
    """Estimated concentration quantile at study size n, from the pilot."""
    if n < 2:
        raise ValueError("candidate size must be >= 2")
    ctx = _PilotContext(pilot, specs, cfg)
    stream = _as_stream(seed, cfg)
    p_hat = ctx.p_hat(stream.child("p_hat"))
    q, _ = _opt_quantile(ctx, n, stream.child("opt", n), p_hat)
    return q


def _as_stream(seed, cfg: SizingConfig) -> RngStream:
    if seed is None:
        return RngStream(cfg.seed)
    return seed if isinstance(seed, RngStream) else RngStream(int(seed))


def size_for_pwr(pilot: Dataset, specs: Sequence[StageSpec], cfg: SizingConfig) -> SizingResult:
    """Smallest study size whose bootstrap power reaches 1 - phi.

    Scans the candidate grid in increasing order (stopping once power exits
    the regression band from above), regresses power on size over the points
    inside the band around the target, and inverts the fitted line. A pilot
    whose estimated value does not exceed B0 is INFEASIBLE (no size can power
    the comparison); a grid that never reaches the band is INFEASIBLE_GRID.
    """
    ctx = _PilotContext(pilot, specs, cfg)
    stream = _as_stream(None, cfg)
    if ctx.value0.v_hat <= cfg.B0:
        return SizingResult(
            n_hat=None,
            kind=INFEASIBLE,
            condition="PWR",
            curve=(),
            pilot_value=ctx.value0,
            diagnostics={"reason": "pilot value <= B0"},
        )
    p_hat = ctx.p_hat(stream.child("p_hat"))
    grid = cfg.grid if cfg.grid is not None else default_grid(pilot.n)
    target = 1.0 - cfg.phi

    curve: list[tuple[int, float]] = []
    m_hats: dict[int, int] = {}
    for n in grid:
        power, m_hat = _pwr_power(ctx, int(n), stream.child("pwr", int(n)), p_hat)
        curve.append((int(n), power))
        m_hats[int(n)] = m_hat
        if power > target + cfg.neighborhood:
            break

    n_hat, kind, extra = _invert_power_curve(curve, target, cfg.neighborhood, grid)
    diag = {"p_hat": p_hat, "m_hat": m_hats, **extra}
    return SizingResult(
        n_hat=n_hat,
        kind=kind,
        condition="PWR",
        curve=tuple(curve),
        pilot_value=ctx.value0,
        diagnostics=diag,
    )


def _invert_power_curve(curve, target, neighborhood, grid):
    """Regression step: fit power ~ a + b n on the in-band points and invert."""
    for band in (neighborhood, 2.0 * neighborhood):
        pts = [(n, p) for n, p in curve if abs(p - target) <= band]
        if len(pts) >= 2:
            ns = np.array([n for n, _ in pts], dtype=np.float64)
            ps = np.array([p for _, p in pts])
            slope = np.sum((ns - ns.mean()) * (ps - ps.mean()))
            denom = np.sum((ns - ns.mean()) ** 2)
            if denom > 0 and slope > 0:
                b = slope / denom
                a = ps.mean() - b * ns.mean()
                n_hat = int(math.ceil((target - a) / b))
                n_hat = max(min(n_hat, int(grid[-1])), int(grid[0]))
                return n_hat, FINITE, {"band": band, "in_band": len(pts)}
        crossers = [n for n, p in curve if p >= target]
        if crossers:
            return int(min(crossers)), FINITE, {"band": band, "in_band": len(pts), "fallback": "first_crossing"}
    return None, INFEASIBLE_GRID, {"band": 2.0 * neighborhood, "in_band": 0}


def size_for_opt(pilot: Dataset, specs: Sequence[StageSpec], cfg: SizingConfig) -> SizingResult:
    """Smallest study size whose concentration quantile falls under epsilon.

    Scans the grid upward, stops at the first candidate meeting the tolerance,
    and linearly interpolates between the bracketing pair.
    """
    t1, t2 = cfg.opt_thetas()  # validates the split
    ctx = _PilotContext(pilot, specs, cfg)
    stream = _as_stream(None, cfg)
    p_hat = ctx.p_hat(stream.child("p_hat"))
    grid = cfg.grid if cfg.grid is not None else default_grid(pilot.n)

    curve: list[tuple[int, float]] = []
    m_hats: dict[int, int] = {}
    n_hat: int | None = None
    for n in grid:
        q, m_hat = _opt_quantile(ctx, int(n), stream.child("opt", int(n)), p_hat)
        curve.append((int(n), q))
        m_hats[int(n)] = m_hat
        if q <= cfg.epsilon:
            if len(curve) == 1:
                n_hat = int(n)
            else:
                n_prev, q_prev = curve[-2]
                frac = (q_prev - cfg.epsilon) / (q_prev - q)
                n_hat = int(math.ceil(n_prev + frac * (n - n_prev)))
            break

    kind = FINITE if n_hat is not None else INFEASIBLE_GRID
    return SizingResult(
        n_hat=n_hat,
        kind=kind,
        condition="OPT",
        curve=tuple(curve),
        pilot_value=ctx.value0,
        diagnostics={"p_hat": p_hat, "m_hat": m_hats},
    )


def size_combined(pilot: Dataset, specs: Sequence[StageSpec], cfg: SizingConfig) -> CombinedSizingResult:
    """Size for both criteria and take the max of the two."""
    pwr = size_for_pwr(pilot, specs, cfg)
    opt = size_for_opt(pilot, specs, cfg)
    if pwr.kind == INFEASIBLE:
        return CombinedSizingResult(pwr=pwr, opt=opt, n_hat=None, kind=INFEASIBLE)
    if pwr.kind == INFEASIBLE_GRID or opt.kind == INFEASIBLE_GRID:
        return CombinedSizingResult(pwr=pwr, opt=opt, n_hat=None, kind=INFEASIBLE_GRID)
    assert pwr.n_hat is not None and opt.n_hat is not None
    return CombinedSizingResult(
        pwr=pwr, opt=opt, n_hat=max(pwr.n_hat, opt.n_hat), kind=FINITE
    )
