"""Projection-interval test of whether the optimal regime's value exceeds a
known comparison mean.

The test builds a joint confidence region for the blip parameters, then takes
the infimum over the region of the lower confidence bound for the value. The
objective is piecewise linear and non-convex in the blip parameters, so the
infimum is approximated by multistart sampling (region center, box/ellipsoid
face points, uniform draws) followed by rounds of per-coordinate
golden-section refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .confidence import ConfidenceRegion, RegionConfig, mn_region
from .data import Dataset, StageSpec
from .dwols import DwolsFit, StageDesigns, value_profile
from .numerics import RngStream, normal_quantile

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

OBJECTIVES = ("lower_bound_min", "v_max", "v_min")


@dataclass(frozen=True)
class SearchConfig:
    """Budget knobs for the region search.

    ``draws`` multistart points, ``refine_rounds`` passes of per-coordinate
    golden-section with ``golden_iters`` shrink steps each. Larger budgets
    tighten the infimum; an under-searched infimum biases the projection test
    anti-conservative.
    """

    draws: int = 1000
    refine_rounds: int = 3
    golden_iters: int = 40


@dataclass(frozen=True)
class TestResult:
    reject: bool
    test_statistic: float
    minimizer: tuple[np.ndarray, ...]
    B0: float
    theta1: float
    theta2: float
    region: ConfidenceRegion


class _RegionGeometry:
    """Flattened-vector view of a region: stages concatenated in order."""

    def __init__(self, region: ConfidenceRegion):
        self.region = region
        self.dims = [c.shape[0] for c in region.center]
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)])
        self.total = int(self.offsets[-1])
        self.center_vec = np.concatenate(region.center)
        self.K = region.K
        ell = region.ellipsoid
        self.ell_offset = int(self.offsets[self.K - 1])
        # Cholesky factor of the ellipsoid in its own block coordinates.
        self.ell_chol = np.linalg.cholesky(ell.sigma) * math.sqrt(
            max(ell.radius, 0.0) / ell.n
        )

    def split(self, mat: np.ndarray) -> list[np.ndarray]:
        mat = np.atleast_2d(mat)
        return [mat[:, self.offsets[k] : self.offsets[k + 1]] for k in range(self.K)]

    def face_points(self) -> np.ndarray:
        pts = []
        for k in range(self.K - 1):
            box = self.region.boxes[k]
            for j in range(box.shape[0]):
                for val in (box[j, 0], box[j, 1]):
                    v = self.center_vec.copy()
                    v[self.offsets[k] + j] = val
                    pts.append(v)
        ell = self.region.ellipsoid
        for j in range(ell.dim):
            for sign in (-1.0, 1.0):
                v = self.center_vec.copy()
                v[self.ell_offset :] = ell.axis_point(j, sign)
                pts.append(v)
        return np.array(pts) if pts else np.empty((0, self.total))

    def uniform_draws(self, L: int, rng: np.random.Generator) -> np.ndarray:
        out = np.tile(self.center_vec, (L, 1))
        for k in range(self.K - 1):
            box = self.region.boxes[k]
            u = rng.random((L, box.shape[0]))
            out[:, self.offsets[k] : self.offsets[k + 1]] = box[:, 0] + u * (
                box[:, 1] - box[:, 0]
            )
        p = self.region.ellipsoid.dim
        g = rng.standard_normal((L, p))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        radii = rng.random((L, 1)) ** (1.0 / p)
        ball = g / norms * radii
        out[:, self.ell_offset :] = (
            self.region.ellipsoid.center[None, :] + ball @ self.ell_chol.T
        )
        return out

    def coordinate_segment(self, vec: np.ndarray, coord: int) -> tuple[float, float]:
        if coord >= self.ell_offset:
            j = coord - self.ell_offset
            return self.region.ellipsoid.coordinate_segment(vec[self.ell_offset :], j)
        k = int(np.searchsorted(self.offsets, coord, side="right")) - 1
        j = coord - self.offsets[k]
        box = self.region.boxes[k]
        return float(box[j, 0]), float(box[j, 1])


def search_region(
    region: ConfidenceRegion,
    batch_eval: Callable[[np.ndarray], np.ndarray],
    cfg: SearchConfig,
    stream: RngStream,
    minimize: bool = True,
) -> tuple[np.ndarray, float]:
    """Extremize a scalar objective over the region.

    ``batch_eval`` maps a (C, total_dim) stack of candidate parameter vectors
    to (C,) objective values. Returns the best flattened vector and its value.
    """
    geo = _RegionGeometry(region)
    sign = 1.0 if minimize else -1.0
    rng = stream.generator()

    cands = [geo.center_vec[None, :], geo.face_points()]
    if cfg.draws > 0:
        cands.append(geo.uniform_draws(cfg.draws, rng))
    stack = np.vstack([c for c in cands if c.size])
    vals = sign * np.asarray(batch_eval(stack))
    best = int(np.argmin(vals))
    best_vec = stack[best].copy()
    best_val = float(vals[best])

    def eval_one(v: np.ndarray) -> float:
        return sign * float(np.asarray(batch_eval(v[None, :]))[0])

    for _ in range(cfg.refine_rounds):
        for coord in range(geo.total):
            lo, hi = geo.coordinate_segment(best_vec, coord)
            if not hi > lo:
                continue
            best_vec, best_val = _golden_coordinate(
                eval_one, best_vec, best_val, coord, lo, hi, cfg.golden_iters
            )
    return best_vec, sign * best_val


def _golden_coordinate(eval_one, vec, cur_val, coord, lo, hi, iters):
    """Golden-section scan of one coordinate, keeping the best point seen."""
    best_t = vec[coord]
    best_val = cur_val

    def probe(t: float) -> float:
        nonlocal best_t, best_val
        v = vec.copy()
        v[coord] = t
        val = eval_one(v)
        if val < best_val:
            best_val, best_t = val, t
        return val

    probe(lo)
    probe(hi)
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = probe(c), probe(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = probe(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = probe(d)
    out = vec.copy()
    out[coord] = best_t
    return out, best_val


def region_extremum(
    data: Dataset,
    specs: Sequence[StageSpec],
    region: ConfidenceRegion,
    objective: str,
    search: SearchConfig = SearchConfig(),
    seed: int | RngStream = 0,
    theta2: float | None = None,
) -> tuple[tuple[np.ndarray, ...], float]:
    """Extremize a value functional over the region.

    ``lower_bound_min`` minimizes V(psi) - z_{1-theta2} s(psi) / sqrt(n);
    ``v_min``/``v_max`` extremize the value estimate itself.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    designs = StageDesigns(data, specs)
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    geo = _RegionGeometry(region)

    if objective == "lower_bound_min":
        if theta2 is None:
            raise ValueError("lower_bound_min requires theta2")
        z = normal_quantile(1.0 - theta2)
        root_n = math.sqrt(designs.n)

        def batch_eval(mat: np.ndarray) -> np.ndarray:
            v, sig = value_profile(designs, geo.split(mat))
            return v - z * sig / root_n

        vec, val = search_region(region, batch_eval, search, stream, minimize=True)
    else:

        def batch_eval(mat: np.ndarray) -> np.ndarray:
            v, _ = value_profile(designs, geo.split(mat))
            return v

        vec, val = search_region(
            region, batch_eval, search, stream, minimize=(objective == "v_min")
        )
    psi = tuple(row[0].copy() for row in geo.split(vec[None, :]))
    return psi, float(val)


def projection_test(
    data: Dataset,
    specs: Sequence[StageSpec],
    fit: DwolsFit,
    B0: float,
    alpha: float = 0.05,
    theta1: float | None = None,
    theta2: float | None = None,
    region_cfg: RegionConfig = RegionConfig(),
    search: SearchConfig = SearchConfig(),
    seed: int | RngStream = 0,
) -> TestResult:
    """alpha-level test of H0: the optimal regime's value is at most B0.

    Splits alpha into theta1 (region level) and theta2 (normal bound); rejects
    when the infimum over the 1 - theta1 region of the value lower bound is at
    least B0.
    """
    if theta1 is None and theta2 is None:
        theta1 = theta2 = alpha / 2.0
    if theta1 is None or theta2 is None:
        raise ValueError("provide both theta1 and theta2 or neither")
    if abs(theta1 + theta2 - alpha) > 1e-9:
        raise ValueError(f"theta1 + theta2 must equal alpha, got {theta1} + {theta2} != {alpha}")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    region = mn_region(data, specs, fit, theta1, region_cfg, stream.child("region"))
    psi, stat = region_extremum(
        data, specs, region, "lower_bound_min", search, stream.child("search"), theta2=theta2
    )
    return TestResult(
        reject=bool(stat >= B0),
        test_statistic=float(stat),
        minimizer=psi,
        B0=float(B0),
        theta1=float(theta1),
        theta2=float(theta2),
        region=region,
    )
