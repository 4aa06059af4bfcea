"""Wide-format longitudinal datasets: schema, CSV ingestion, histories, resampling.

One row per subject, stages k = 1..K, binary treatment per stage, one final
outcome coded so larger is better. The canonical column layout is
``x1_1..x1_p1, a1, x2_1..x2_p2, a2, ..., xK_1..xK_pK, aK, y``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import RowParseError, SchemaError
from .numerics import RngStream


@dataclass(frozen=True)
class Schema:
    """Per-stage covariate dimensions; column names are canonical."""

    stage_dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.stage_dims) < 1 or any(p < 1 for p in self.stage_dims):
            raise SchemaError(f"stage dims must be positive, got {self.stage_dims}")
        object.__setattr__(self, "stage_dims", tuple(int(p) for p in self.stage_dims))

    @property
    def K(self) -> int:
        return len(self.stage_dims)

    def column_names(self) -> list[str]:
        names: list[str] = []
        for k, p in enumerate(self.stage_dims, start=1):
            names.extend(f"x{k}_{j}" for j in range(1, p + 1))
            names.append(f"a{k}")
        names.append("y")
        return names

    def history_feature_names(self, k: int) -> list[str]:
        """Feature names of the stage-k history (x_1, a_1, ..., a_{k-1}, x_k)."""
        self._check_stage(k)
        names: list[str] = []
        for j in range(1, k + 1):
            names.extend(f"x{j}_{i}" for i in range(1, self.stage_dims[j - 1] + 1))
            if j < k:
                names.append(f"a{j}")
        return names

    def history_dim(self, k: int) -> int:
        self._check_stage(k)
        return sum(self.stage_dims[:k]) + (k - 1)

    def _check_stage(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"stage {k} out of range 1..{self.K}")


@dataclass(frozen=True)
class Trajectory:
    """One subject: stage covariates, binary treatments, final outcome."""

    stage_covariates: tuple[np.ndarray, ...]
    treatments: tuple[int, ...]
    outcome: float

    def __post_init__(self):
        if len(self.stage_covariates) != len(self.treatments):
            raise ValueError("covariates and treatments must cover the same stages")
        if any(a not in (0, 1) for a in self.treatments):
            raise ValueError(f"treatments must be 0/1, got {self.treatments}")


@dataclass(frozen=True)
class StageSpec:
    """Column selections (into the stage-k history feature list) for one stage.

    The intercept is prepended automatically to each design and is never
    indexable.
    """

    blip_columns: tuple[int, ...]
    tf_columns: tuple[int, ...]
    ps_columns: tuple[int, ...]

    def __post_init__(self):
        for name in ("blip_columns", "tf_columns", "ps_columns"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    def validate(self, schema: Schema, k: int) -> None:
        hdim = schema.history_dim(k)
        for name in ("blip_columns", "tf_columns", "ps_columns"):
            for i in getattr(self, name):
                if not 0 <= i < hdim:
                    raise SchemaError(
                        f"stage {k} {name} index {i} out of range for history dim {hdim}"
                    )


class Dataset:
    """Immutable collection of trajectories, stored column-wise.

    Covariates are held as one (n, p_k) block per stage, treatments as an
    (n, K) integer matrix, outcomes as an (n,) vector. All arrays are
    read-only so datasets can be shared freely across bootstrap workers.
    """

    def __init__(self, schema: Schema, x_blocks, treatments, outcomes):
        self.schema = schema
        self._x = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in x_blocks)
        self._a = np.ascontiguousarray(treatments, dtype=np.int8)
        self._y = np.ascontiguousarray(outcomes, dtype=np.float64)
        n = self._y.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one trajectory")
        if self._a.shape != (n, schema.K):
            raise ValueError("treatment matrix shape does not match schema")
        for k, block in enumerate(self._x, start=1):
            if block.shape != (n, schema.stage_dims[k - 1]):
                raise ValueError(f"stage {k} covariate block has shape {block.shape}")
        if not np.isin(self._a, (0, 1)).all():
            raise ValueError("treatments must be 0/1")
        for arr in (*self._x, self._a, self._y):
            arr.setflags(write=False)
        self._history_cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_trajectories(cls, trajectories, schema: Schema) -> "Dataset":
        trajs = list(trajectories)
        if not trajs:
            raise ValueError("dataset must contain at least one trajectory")
        K = schema.K
        x_blocks = []
        for k in range(K):
            p = schema.stage_dims[k]
            block = np.empty((len(trajs), p))
            for i, t in enumerate(trajs):
                v = np.asarray(t.stage_covariates[k], dtype=np.float64).ravel()
                if v.shape != (p,):
                    raise SchemaError(
                        f"trajectory {i}: stage {k + 1} covariate has dim {v.shape[0]}, expected {p}"
                    )
                block[i] = v
            x_blocks.append(block)
        a = np.array([t.treatments for t in trajs], dtype=np.int8)
        y = np.array([t.outcome for t in trajs], dtype=np.float64)
        return cls(schema, x_blocks, a, y)

    @property
    def n(self) -> int:
        return self._y.shape[0]

    @property
    def K(self) -> int:
        return self.schema.K

    @property
    def outcomes(self) -> np.ndarray:
        return self._y

    def covariates(self, k: int) -> np.ndarray:
        self.schema._check_stage(k)
        return self._x[k - 1]

    def treatments(self, k: int) -> np.ndarray:
        self.schema._check_stage(k)
        return self._a[:, k - 1]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            tuple(block[i].copy() for block in self._x),
            tuple(int(v) for v in self._a[i]),
            float(self._y[i]),
        )

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]

    def history_matrix(self, k: int) -> np.ndarray:
        """All stage-k histories (x_1, a_1, ..., a_{k-1}, x_k), one row per subject."""
        self.schema._check_stage(k)
        if k not in self._history_cache:
            parts = []
            for j in range(1, k + 1):
                parts.append(self._x[j - 1])
                if j < k:
                    parts.append(self._a[:, j - 1 : j].astype(np.float64))
            h = np.hstack(parts)
            h.setflags(write=False)
            self._history_cache[k] = h
        return self._history_cache[k]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            self.schema,
            [block[idx] for block in self._x],
            self._a[idx],
            self._y[idx],
        )


def history(traj: Trajectory, k: int) -> np.ndarray:
    """Stage-k history vector (x_1, a_1, ..., a_{k-1}, x_k) of one trajectory."""
    if not 1 <= k <= len(traj.treatments):
        raise ValueError(f"stage {k} out of range 1..{len(traj.treatments)}")
    parts = []
    for j in range(1, k + 1):
        parts.append(np.asarray(traj.stage_covariates[j - 1], dtype=np.float64).ravel())
        if j < k:
            parts.append(np.array([traj.treatments[j - 1]], dtype=np.float64))
    return np.concatenate(parts)


def load_csv(path, schema: Schema | tuple[int, ...]) -> Dataset:
    """Read a wide-layout CSV into a Dataset.

    The header must match the canonical layout for ``schema`` exactly.
    Missing cells, non-numeric cells, and treatments outside {0, 1} are
    row-level errors naming the row (1-based, excluding the header) and
    column.
    """
    if not isinstance(schema, Schema):
        schema = Schema(tuple(schema))
    expected = schema.column_names()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [c.strip() for c in header] != expected:
            raise SchemaError(
                f"{path}: header {header!r} does not match expected layout {expected!r}"
            )
        rows = []
        for r, row in enumerate(reader, start=1):
            if len(row) != len(expected):
                raise RowParseError(r, expected[min(len(row), len(expected) - 1)], "missing value")
            vals = []
            for c, cell in enumerate(row):
                cell = cell.strip()
                col = expected[c]
                if cell == "":
                    raise RowParseError(r, col, "missing value")
                if col.startswith("a"):
                    if cell not in ("0", "1"):
                        raise RowParseError(r, col, f"treatment must be 0 or 1, got {cell!r}")
                    vals.append(float(cell))
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise RowParseError(r, col, f"non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    mat = np.array(rows, dtype=np.float64)
    x_blocks = []
    a_cols = []
    pos = 0
    for p in schema.stage_dims:
        x_blocks.append(mat[:, pos : pos + p])
        pos += p
        a_cols.append(mat[:, pos].astype(np.int8))
        pos += 1
    y = mat[:, pos]
    return Dataset(schema, x_blocks, np.column_stack(a_cols), y)


def write_csv(data: Dataset, path) -> None:
    """Write a Dataset in the canonical wide layout (floats via repr round-trip)."""
    names = data.schema.column_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(data.n):
            row: list[str] = []
            for k in range(1, data.K + 1):
                row.extend(repr(float(v)) for v in data.covariates(k)[i])
                row.append(str(int(data.treatments(k)[i])))
            row.append(repr(float(data.outcomes[i])))
            writer.writerow(row)


def resample_indices(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=m)


def resample(data: Dataset, m: int, seed: int | RngStream) -> Dataset:
    """Draw m trajectories i.i.d. uniformly with replacement."""
    if m < 1:
        raise ValueError(f"resample size must be >= 1, got {m}")
    stream = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    rng = stream.generator()
    return data.subset(resample_indices(data.n, m, rng))
