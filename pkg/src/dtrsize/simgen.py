"""Linear-Gaussian generative models for K-stage treatment sequences, true-value
oracles, and the simulation experiment harness.

The generator draws a scalar state per stage with linear Gaussian transitions
that do not depend on treatment, assigns treatments from logistic propensities
on the raw history, and produces the outcome from structured polynomial terms
in states and treatments. The emitted analysis dataset can append derived
features (squares, treatment-state interactions) to each stage's covariate
block so analysis models can include or omit them.

True optimal decisions are resolved by backward reasoning on the known model.
When the advantage of treating at a stage is a function of the history alone
(no term mixes the stage's treatment with later states or later treatments,
and no later decision depends on it), it is evaluated in closed form;
otherwise it falls back to nested Monte Carlo rollouts with shared noise.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, Schema, StageSpec
from .numerics import RngStream

DEFAULT_INNER_SIZES = (2000, 200, 50)


@dataclass(frozen=True)
class Term:
    """A product of state powers and treatment indicators, e.g. x1^2 * a2.

    ``x_pows`` lists (stage, power) factors; ``a_stages`` lists treatment
    factors (binary, so powers are redundant). The empty term is the constant 1.
    """

    x_pows: tuple[tuple[int, int], ...] = ()
    a_stages: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "x_pows", tuple((int(s), int(p)) for s, p in self.x_pows))
        object.__setattr__(self, "a_stages", tuple(sorted(set(int(s) for s in self.a_stages))))
        if any(p < 1 or s < 1 for s, p in self.x_pows) or any(s < 1 for s in self.a_stages):
            raise ValueError(f"invalid term factors: {self}")

    def max_x_stage(self) -> int:
        return max((s for s, _ in self.x_pows), default=0)

    def max_a_stage(self) -> int:
        return max(self.a_stages, default=0)

    def value(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        out = np.ones(x.shape[:-1])
        for s, p in self.x_pows:
            out = out * x[..., s - 1] ** p
        for s in self.a_stages:
            out = out * a[..., s - 1]
        return out

    def without_a(self, stage: int) -> "Term":
        return Term(self.x_pows, tuple(s for s in self.a_stages if s != stage))


@dataclass(frozen=True)
class GenModel:
    """A K-stage generative model.

    propensity[k-1] are logistic coefficients on (1, x1, a1, ..., x_k);
    transitions[k-2] are linear coefficients on (1, x1, ..., x_{k-1}) for the
    stage-k state (unit Gaussian innovations); the outcome is
    ``sum(tf_coefs * tf_terms) + a_K * sum(blip_coefs * blip_terms)`` plus
    unit Gaussian noise. ``stage_features[k-1]`` are the terms emitted as the
    stage-k covariate block of generated datasets.
    """

    K: int
    propensity: tuple[tuple[float, ...], ...]
    transitions: tuple[tuple[float, ...], ...]
    tf_terms: tuple[Term, ...]
    tf_coefs: tuple[float, ...]
    blip_terms: tuple[Term, ...]
    blip_coefs: tuple[float, ...]
    stage_features: tuple[tuple[Term, ...], ...] = ()

    def __post_init__(self):
        K = self.K
        if K < 1:
            raise ValueError("K must be >= 1")
        object.__setattr__(self, "propensity", tuple(tuple(map(float, v)) for v in self.propensity))
        object.__setattr__(self, "transitions", tuple(tuple(map(float, v)) for v in self.transitions))
        object.__setattr__(self, "tf_coefs", tuple(map(float, self.tf_coefs)))
        object.__setattr__(self, "blip_coefs", tuple(map(float, self.blip_coefs)))
        if not self.stage_features:
            object.__setattr__(
                self, "stage_features", tuple((Term(x_pows=((k, 1),)),) for k in range(1, K + 1))
            )
        if len(self.propensity) != K:
            raise ValueError("need one propensity coefficient vector per stage")
        for k, v in enumerate(self.propensity, start=1):
            if len(v) != 2 * k:
                raise ValueError(f"stage {k} propensity must have {2 * k} coefficients, got {len(v)}")
        if len(self.transitions) != K - 1:
            raise ValueError("need one transition vector per stage 2..K")
        for k, v in enumerate(self.transitions, start=2):
            if len(v) != k:
                raise ValueError(f"stage {k} transition must have {k} coefficients, got {len(v)}")
        if len(self.tf_terms) != len(self.tf_coefs) or len(self.blip_terms) != len(self.blip_coefs):
            raise ValueError("terms and coefficients must align")
        for t in self.tf_terms + self.blip_terms:
            if t.max_x_stage() > K or t.max_a_stage() >= K:
                raise ValueError(f"outcome term {t} references states/treatments beyond stage K")
        if len(self.stage_features) != K:
            raise ValueError("need one feature tuple per stage")
        for k, feats in enumerate(self.stage_features, start=1):
            for t in feats:
                if t.max_x_stage() > k or t.max_a_stage() >= k:
                    raise ValueError(f"stage {k} feature {t} references future information")

    def schema(self) -> Schema:
        return Schema(tuple(len(f) for f in self.stage_features))


def _raw_history(x: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    """(1, x1, a1, ..., x_k) rows for the stage-k propensity design."""
    parts = [np.ones(x.shape[0])]
    for j in range(1, k + 1):
        parts.append(x[:, j - 1])
        if j < k:
            parts.append(a[:, j - 1])
    return np.column_stack(parts)


def draw_states(model: GenModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw the full state path (treatment-free transitions)."""
    x = np.empty((n, model.K))
    x[:, 0] = rng.standard_normal(n)
    for k in range(2, model.K + 1):
        coefs = np.asarray(model.transitions[k - 2])
        x[:, k - 1] = coefs[0] + x[:, : k - 1] @ coefs[1:] + rng.standard_normal(n)
    return x


def outcome_mean(model: GenModel, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Conditional mean outcome given states and treatments."""
    out = np.zeros(x.shape[:-1])
    for c, t in zip(model.tf_coefs, model.tf_terms):
        out = out + c * t.value(x, a)
    blip = np.zeros(x.shape[:-1])
    for c, t in zip(model.blip_coefs, model.blip_terms):
        blip = blip + c * t.value(x, a)
    return out + a[..., model.K - 1] * blip


def generate(model: GenModel, n: int, seed: int | RngStream) -> Dataset:
    """Sample a dataset of n subjects from the generative model."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rng = stream.generator()
    K = model.K
    x = np.empty((n, K))
    a = np.zeros((n, K))
    x[:, 0] = rng.standard_normal(n)
    for k in range(1, K + 1):
        if k > 1:
            coefs = np.asarray(model.transitions[k - 2])
            x[:, k - 1] = coefs[0] + x[:, : k - 1] @ coefs[1:] + rng.standard_normal(n)
        eta = _raw_history(x, a, k) @ np.asarray(model.propensity[k - 1])
        a[:, k - 1] = (rng.random(n) < expit(eta)).astype(np.float64)
    y = outcome_mean(model, x, a) + rng.standard_normal(n)
    blocks = [
        np.column_stack([t.value(x, a) for t in feats]) for feats in model.stage_features
    ]
    return Dataset(model.schema(), blocks, a.astype(np.int8), y)


def analysis_history(model: GenModel, x: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    """Stage-k history feature rows exactly as analysis datasets lay them out."""
    parts = []
    for j in range(1, k + 1):
        for t in model.stage_features[j - 1]:
            parts.append(t.value(x, a))
        if j < k:
            parts.append(a[:, j - 1])
    return np.column_stack(parts)


# ---------------------------------------------------------------------------
# True optimal decisions by backward reasoning


class _StageAnalysis(NamedTuple):
    exact: tuple[bool, ...]  # per stage, is the advantage history-measurable in closed form
    influencers: tuple[frozenset, ...]  # per stage, earlier treatments its decision varies with


@functools.lru_cache(maxsize=64)
def _analyze(model: GenModel) -> _StageAnalysis:
    K = model.K
    blip_a = frozenset(s for t in model.blip_terms for s in t.a_stages)
    infl: dict[int, frozenset] = {K: blip_a}
    exact: dict[int, bool] = {K: True}
    for k in range(K - 1, 0, -1):
        direct = [t for t in model.tf_terms if k in t.a_stages]
        ok = all(t.max_x_stage() <= k and t.max_a_stage() <= k for t in direct)
        ok &= k not in blip_a
        ok &= all(k not in infl[j] for j in range(k + 1, K + 1))
        deps: set[int] = set()
        for t in direct:
            deps |= {s for s in t.a_stages if s != k}
        # Terms owned by later treatments whose decisions this one can swing.
        for j in range(k + 1, K + 1):
            if k in infl[j]:
                deps |= infl[j] - {k}
                if j < K:
                    for t in model.tf_terms:
                        if j in t.a_stages:
                            deps |= {s for s in t.a_stages if s < k}
                else:
                    deps |= {s for s in blip_a if s < k}
        exact[k] = ok
        infl[k] = frozenset(s for s in deps if s < k)
    return _StageAnalysis(
        tuple(exact[k] for k in range(1, K + 1)),
        tuple(infl[k] for k in range(1, K + 1)),
    )


def advantage(
    model: GenModel,
    k: int,
    x_upto: np.ndarray,
    a_upto: np.ndarray,
    stream: RngStream | None = None,
    inner_sizes: Sequence[int] = DEFAULT_INNER_SIZES,
    depth: int = 0,
) -> np.ndarray:
    """Gain in expected outcome from treating at stage k versus not, assuming
    optimal decisions afterwards, given history (x_1..x_k, a_1..a_{k-1})."""
    K = model.K
    info = _analyze(model)
    n = x_upto.shape[0]
    if x_upto.shape[1] < k or (k > 1 and a_upto.shape[1] < k - 1):
        raise ValueError("history arrays shorter than the requested stage")
    if info.exact[k - 1]:
        out = np.zeros(n)
        if k == K:
            for c, t in zip(model.blip_coefs, model.blip_terms):
                out += c * t.value(x_upto, a_upto)
        else:
            for c, t in zip(model.tf_coefs, model.tf_terms):
                if k in t.a_stages:
                    out += c * t.without_a(k).value(x_upto, a_upto)
        return out
    if stream is None:
        raise ValueError(
            f"stage {k} advantage needs Monte Carlo rollouts; pass an RngStream"
        )
    return _advantage_mc(model, k, x_upto, a_upto, stream, tuple(inner_sizes), depth)


def _advantage_mc(model, k, x_upto, a_upto, stream, inner_sizes, depth):
    K = model.K
    n = x_upto.shape[0]
    M = inner_sizes[min(depth, len(inner_sizes) - 1)]
    rng = stream.generator()
    taus = rng.standard_normal((M, K - k))  # shared across points and arms
    x_full = np.empty((n, M, K))
    x_full[:, :, :k] = x_upto[:, None, :k]
    for j in range(k + 1, K + 1):
        coefs = np.asarray(model.transitions[j - 2])
        x_full[:, :, j - 1] = (
            coefs[0] + x_full[:, :, : j - 1] @ coefs[1:] + taus[None, :, j - k - 1]
        )
    x_flat = x_full.reshape(n * M, K)
    arm_means = []
    for arm in (0, 1):
        a_full = np.zeros((n, M, K))
        if k > 1:
            a_full[:, :, : k - 1] = a_upto[:, None, : k - 1]
        a_full[:, :, k - 1] = arm
        a_flat = a_full.reshape(n * M, K)
        for j in range(k + 1, K + 1):
            adv = advantage(
                model,
                j,
                x_flat[:, :j],
                a_flat[:, : j - 1],
                stream.child("decide", j, arm),
                inner_sizes,
                depth + 1,
            )
            a_flat[:, j - 1] = (adv > 0.0).astype(np.float64)
        mu = outcome_mean(model, x_flat, a_flat).reshape(n, M)
        arm_means.append(mu.mean(axis=1))
    return arm_means[1] - arm_means[0]


class OracleValue(NamedTuple):
    value: float
    se: float


def true_value_optimal(
    model: GenModel,
    n_mc: int,
    seed: int | RngStream,
    inner_sizes: Sequence[int] = DEFAULT_INNER_SIZES,
) -> OracleValue:
    """Monte Carlo value of the true optimal regime.

    Integrates the outcome noise analytically (the average is over conditional
    means), so the standard error reflects state-path variation only.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rng = stream.generator()
    x = draw_states(model, n_mc, rng)
    a = np.zeros((n_mc, model.K))
    for k in range(1, model.K + 1):
        adv = advantage(model, k, x[:, :k], a[:, : k - 1], stream.child("decide", k), inner_sizes)
        a[:, k - 1] = (adv > 0.0).astype(np.float64)
    mu = outcome_mean(model, x, a)
    return OracleValue(float(mu.mean()), float(mu.std(ddof=1) / np.sqrt(n_mc)))


def true_value_of_regime(
    model: GenModel,
    psi: Sequence[np.ndarray],
    specs: Sequence[StageSpec],
    n_mc: int,
    seed: int | RngStream,
) -> OracleValue:
    """Monte Carlo value of the linear-rule regime a_k = I(h_k,psi' psi_k > 0)."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rng = stream.generator()
    x = draw_states(model, n_mc, rng)
    a = np.zeros((n_mc, model.K))
    for k in range(1, model.K + 1):
        psi_k = np.asarray(psi[k - 1], dtype=np.float64)
        hist = analysis_history(model, x, a, k)
        cols = list(specs[k - 1].blip_columns)
        if psi_k.shape[0] != len(cols) + 1:
            raise ValueError(
                f"stage {k} blip coefficient has dim {psi_k.shape[0]}, design has {len(cols) + 1}"
            )
        t = psi_k[0] + hist[:, cols] @ psi_k[1:]
        a[:, k - 1] = (t > 0.0).astype(np.float64)
    mu = outcome_mean(model, x, a)
    return OracleValue(float(mu.mean()), float(mu.std(ddof=1) / np.sqrt(n_mc)))


# ---------------------------------------------------------------------------
# The three-stage benchmark model


def paper_model(blip_coefs: Sequence[float] | None = None) -> GenModel:
    """The three-stage benchmark generative model.

    ``blip_coefs`` overrides the final-stage blip coefficients, which is how
    the regular (blip bounded away from zero) and null (blip identically zero)
    variants used in the non-regularity diagnostics are built; overriding with
    a different length changes the blip design to match (intercept-only for a
    single coefficient).
    """
    x1 = Term(x_pows=((1, 1),))
    x1sq = Term(x_pows=((1, 2),))
    x2 = Term(x_pows=((2, 1),))
    x3 = Term(x_pows=((3, 1),))
    a1 = Term(a_stages=(1,))
    a1x1 = Term(x_pows=((1, 1),), a_stages=(1,))
    a2 = Term(a_stages=(2,))
    a2x1 = Term(x_pows=((1, 1),), a_stages=(2,))
    a2x2 = Term(x_pows=((2, 1),), a_stages=(2,))

    blip_terms = (Term(), x1, x2, x3)
    coefs = (0.25, 0.5, 0.5, -0.5) if blip_coefs is None else tuple(map(float, blip_coefs))
    if len(coefs) != len(blip_terms):
        blip_terms = (Term(), x1, x2, x3)[: len(coefs)]
        if len(coefs) != len(blip_terms):
            raise ValueError("blip override longer than the benchmark blip design")
    return GenModel(
        K=3,
        propensity=(
            (0.25, 1.0),
            (0.25, 1.0, -1.0, -1.0),
            (0.25, 0.5, 0.5, -0.5, 1.0, -0.5),
        ),
        transitions=((0.0, 0.5), (0.0, -0.5, 0.5)),
        tf_terms=(Term(), x1, a1, a1x1, x2, a2, a2x1, a2x2, x3, x1sq),
        tf_coefs=(1.0, 1.0, 0.5, -0.75, 0.5, -0.5, -0.5, 0.5, 0.5, 0.25),
        blip_terms=blip_terms,
        blip_coefs=coefs,
        stage_features=(
            (x1, x1sq),
            (x2, a1x1),
            (x3, a2x1, a2x2),
        ),
    )


def paper_specs(misspecified_tf: bool = True) -> tuple[StageSpec, ...]:
    """Analysis stage specs for the benchmark model.

    Blip and propensity designs are correctly specified; with
    ``misspecified_tf`` the treatment-free designs omit the x1^2 feature.

    Stage history feature layouts (0-based indices):
      stage 1: (x1, x1sq)
      stage 2: (x1, x1sq, a1, x2, a1x1)
      stage 3: (x1, x1sq, a1, x2, a1x1, a2, x3, a2x1, a2x2)
    """
    if misspecified_tf:
        tf1: tuple[int, ...] = (0,)
        tf2: tuple[int, ...] = (0, 2, 4, 3)
        tf3: tuple[int, ...] = (0, 2, 4, 3, 5, 7, 8, 6)
    else:
        tf1 = (0, 1)
        tf2 = (0, 2, 4, 3, 1)
        tf3 = (0, 2, 4, 3, 5, 7, 8, 6, 1)
    return (
        StageSpec(blip_columns=(0,), tf_columns=tf1, ps_columns=(0,)),
        StageSpec(blip_columns=(0, 3), tf_columns=tf2, ps_columns=(0, 2, 3)),
        StageSpec(blip_columns=(0, 3, 6), tf_columns=tf3, ps_columns=(0, 2, 3, 5, 6)),
    )
