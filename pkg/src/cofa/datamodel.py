"""Tabular data handling: typed CSV ingestion, rare-level bucketing,
indicator encoding, train/test splitting and synthetic cohorts.

Categorical columns are stored as integer codes into a per-column level
dictionary; numeric columns as float64; the outcome as 0/1 int8.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

NUMERIC = "numeric"
CATEGORICAL = "categorical"
OUTCOME = "binary-outcome"
KINDS = (NUMERIC, CATEGORICAL, OUTCOME)

PREDICTOR = "predictor"
OUTCOME_ROLE = "outcome"
TARGET = "cluster-target"
IGNORE = "ignore"
ROLES = (PREDICTOR, OUTCOME_ROLE, TARGET, IGNORE)

OTHER = "Other"
_MISSING = {"", "na", "nan", "null", "none"}


class SchemaError(ValueError):
    """Schema is inconsistent or does not match the data file."""


class IngestionError(ValueError):
    """A cell could not be ingested. Carries the offending row and column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    role: str = PREDICTOR

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")


def validate_schema(schema: Sequence[ColumnSchema]) -> None:
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("column names must be unique")
    outcomes = [c for c in schema if c.role == OUTCOME_ROLE]
    if len(outcomes) != 1 or outcomes[0].kind != OUTCOME:
        raise SchemaError("exactly one column must have role 'outcome' and kind 'binary-outcome'")
    targets = [c for c in schema if c.role == TARGET]
    if len(targets) != 1 or targets[0].kind != CATEGORICAL:
        raise SchemaError("exactly one column must have role 'cluster-target' and kind 'categorical'")
    for c in schema:
        if c.kind == OUTCOME and c.role != OUTCOME_ROLE:
            raise SchemaError(f"column {c.name!r}: binary-outcome kind is reserved for the outcome")


def schema_from_dict(spec) -> list[ColumnSchema]:
    """Build a schema from a parsed config.

    Accepts either ``{"columns": [{"name":..., "kind":..., "role":...}, ...]}``
    or a mapping ``{name: {"kind":..., "role":...}}``.
    """
    if isinstance(spec, Mapping) and "columns" in spec:
        spec = spec["columns"]
    if isinstance(spec, Mapping):
        cols = [ColumnSchema(name, v["kind"], v.get("role", PREDICTOR)) for name, v in spec.items()]
    else:
        cols = [ColumnSchema(c["name"], c["kind"], c.get("role", PREDICTOR)) for c in spec]
    validate_schema(cols)
    return cols


def load_schema(path) -> list[ColumnSchema]:
    with open(path, encoding="utf-8") as fh:
        return schema_from_dict(json.load(fh))


def schema_to_dict(schema: Sequence[ColumnSchema]) -> dict:
    return {"columns": [{"name": c.name, "kind": c.kind, "role": c.role} for c in schema]}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable typed table.

    Parameters
    ----------
    schema : sequence of ColumnSchema
    data : mapping column name -> 1-D array
        float64 for numeric columns, integer level codes for categorical
        columns, 0/1 for the outcome.
    levels : mapping column name -> tuple of level names
        Level dictionary for every categorical column.
    """

    schema: tuple
    data: Mapping[str, np.ndarray]
    levels: Mapping[str, tuple]

    def __post_init__(self):
        schema = tuple(self.schema)
        validate_schema(schema)
        data, levels = {}, {}
        n = None
        for col in schema:
            if col.name not in self.data:
                raise SchemaError(f"no data for column {col.name!r}")
            values = np.asarray(self.data[col.name])
            if values.ndim != 1:
                raise SchemaError(f"column {col.name!r} must be 1-D")
            if n is None:
                n = len(values)
            elif len(values) != n:
                raise SchemaError(f"column {col.name!r} has length {len(values)}, expected {n}")
            if col.kind == NUMERIC:
                values = values.astype(np.float64)
                if not np.all(np.isfinite(values)):
                    raise IngestionError(f"column {col.name!r} has non-finite values", column=col.name)
            elif col.kind == CATEGORICAL:
                lv = tuple(str(x) for x in self.levels[col.name])
                if len(set(lv)) != len(lv):
                    raise SchemaError(f"column {col.name!r}: duplicate level names")
                values = values.astype(np.int64)
                if len(values) and (values.min() < 0 or values.max() >= len(lv)):
                    raise SchemaError(f"column {col.name!r}: level code out of range")
                levels[col.name] = lv
            else:
                if not np.all((values == 0) | (values == 1)):
                    raise IngestionError(f"outcome {col.name!r} must be 0/1", column=col.name)
                values = values.astype(np.int8)
            data[col.name] = _readonly(values)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "levels", levels)

    # -- accessors -------------------------------------------------------
    @property
    def n_rows(self) -> int:
        return len(next(iter(self.data.values())))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.schema]

    def column_schema(self, name: str) -> ColumnSchema:
        for c in self.schema:
            if c.name == name:
                return c
        raise KeyError(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    @property
    def outcome_name(self) -> str:
        return next(c.name for c in self.schema if c.role == OUTCOME_ROLE)

    @property
    def target_name(self) -> str:
        return next(c.name for c in self.schema if c.role == TARGET)

    @property
    def outcome(self) -> np.ndarray:
        return self.data[self.outcome_name]

    @property
    def predictor_names(self) -> list[str]:
        return [c.name for c in self.schema if c.role == PREDICTOR]

    def level_counts(self, name: str) -> np.ndarray:
        return np.bincount(self.data[name], minlength=len(self.levels[name]))

    def labels(self, name: str) -> list[str]:
        lv = self.levels[name]
        return [lv[i] for i in self.data[name]]

    # -- derivation ------------------------------------------------------
    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.schema, {k: v[rows] for k, v in self.data.items()}, self.levels)

    def with_column(self, col: ColumnSchema, values, levels=None) -> "Dataset":
        """Return a copy with ``col`` added, or replaced if the name exists."""
        schema = [c for c in self.schema if c.name != col.name]
        if len(schema) == len(self.schema):
            schema.append(col)
        else:
            schema = [col if c.name == col.name else c for c in self.schema]
        data = dict(self.data)
        data[col.name] = values
        lv = {k: v for k, v in self.levels.items() if k != col.name}
        if col.kind == CATEGORICAL:
            lv[col.name] = tuple(levels)
        return Dataset(schema, data, lv)

    def with_roles(self, roles: Mapping[str, str]) -> "Dataset":
        schema = [ColumnSchema(c.name, c.kind, roles.get(c.name, c.role)) for c in self.schema]
        return Dataset(schema, self.data, self.levels)

    def to_csv(self, path, comment: str | None = None) -> None:
        """Write as CSV with level names as strings and floats in repr form."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.names)
            cols = []
            for c in self.schema:
                v = self.data[c.name]
                if c.kind == CATEGORICAL:
                    lv = self.levels[c.name]
                    cols.append([lv[i] for i in v])
                elif c.kind == NUMERIC:
                    cols.append([repr(float(x)) for x in v])
                else:
                    cols.append([str(int(x)) for x in v])
            for row in zip(*cols):
                w.writerow(row)


# ---------------------------------------------------------------------------
# ingestion


def load_csv(path, schema: Sequence[ColumnSchema]) -> Dataset:
    """Read a UTF-8, comma-delimited CSV with a header row.

    Lines starting with ``#`` before the header are skipped. Level
    dictionaries are built in order of first appearance. Missing cells,
    unparseable numbers and outcomes outside {0, 1} raise IngestionError
    with the 1-based data row and the column name.
    """
    schema = list(schema)
    validate_schema(schema)
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        names = [c.name for c in schema]
        missing = [n for n in names if n not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        extra = [h for h in header if h not in names]
        if extra:
            raise SchemaError(f"{path}: column(s) {extra} not in schema")
        pos = {h: i for i, h in enumerate(header)}
        raw = {n: [] for n in names}
        for r, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}", row=r)
            for n in names:
                raw[n].append(row[pos[n]].strip())

    data, levels = {}, {}
    for col in schema:
        cells = raw[col.name]
        for r, cell in enumerate(cells, start=1):
            if cell.lower() in _MISSING:
                raise IngestionError(f"{path}: missing value at row {r}, column {col.name!r}",
                                     row=r, column=col.name)
        if col.kind == CATEGORICAL:
            index: dict[str, int] = {}
            codes = np.empty(len(cells), dtype=np.int64)
            for r, cell in enumerate(cells):
                codes[r] = index.setdefault(cell, len(index))
            data[col.name] = codes
            levels[col.name] = tuple(index)
        else:
            out = np.empty(len(cells), dtype=np.float64)
            for r, cell in enumerate(cells, start=1):
                try:
                    x = float(cell)
                except ValueError:
                    raise IngestionError(f"{path}: cannot parse {cell!r} as a number at row {r}, "
                                         f"column {col.name!r}", row=r, column=col.name) from None
                if not math.isfinite(x):
                    raise IngestionError(f"{path}: non-finite value at row {r}, column {col.name!r}",
                                         row=r, column=col.name)
                if col.kind == OUTCOME and x not in (0.0, 1.0):
                    raise IngestionError(f"{path}: outcome must be 0 or 1, got {cell!r} at row {r}, "
                                         f"column {col.name!r}", row=r, column=col.name)
                out[r - 1] = x
            data[col.name] = out
    return Dataset(schema, data, levels)


# ---------------------------------------------------------------------------
# preparation


def bucket_rare_levels(d: Dataset, column: str, min_count: int = 100) -> Dataset:
    """Merge levels seen fewer than ``min_count`` times into ``"Other"``.

    An existing ``"Other"`` level is reused, which makes the operation
    idempotent. Levels with zero rows are dropped from the dictionary.
    """
    if d.column_schema(column).kind != CATEGORICAL:
        raise TypeError(f"column {column!r} is not categorical")
    counts = d.level_counts(column)
    names = d.levels[column]
    rare = (counts < min_count) & (np.array(names, dtype=object) != OTHER)
    if not rare.any():
        return d
    needs_other = bool(np.any(counts[rare] > 0))
    new_names = [lv for lv, r in zip(names, rare) if not r and (counts[names.index(lv)] > 0 or lv == OTHER)]
    if needs_other and OTHER not in new_names:
        new_names.append(OTHER)
    new_index = {lv: i for i, lv in enumerate(new_names)}
    remap = np.array([new_index.get(OTHER, -1) if r else new_index.get(lv, -1)
                      for lv, r in zip(names, rare)], dtype=np.int64)
    codes = remap[d[column]]
    return d.with_column(d.column_schema(column), codes, new_names)


@dataclass(frozen=True)
class Encoding:
    """Learned indicator layout, reusable on held-out data.

    ``categorical`` holds ``(column, reference code, indicator codes,
    indicator level names)`` per encoded column.
    """

    numeric: tuple
    categorical: tuple

    @property
    def feature_names(self) -> list[str]:
        return list(self.numeric) + [f"{col}={lv}" for col, _, _, names in self.categorical for lv in names]


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Numeric feature matrix for the GLMs.

    ``X`` is (n_rows, n_features) with columns named by ``feature_names``;
    ``group_labels`` optionally carries a per-row stratum code.
    """

    feature_names: tuple
    X: np.ndarray
    outcome: np.ndarray
    group_labels: np.ndarray | None = None
    group_names: tuple | None = None
    encoding: Encoding | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(self.outcome), -1)
        if X.shape != (len(self.outcome), len(self.feature_names)):
            raise ValueError("X shape does not match outcome length and feature names")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "outcome", _readonly(np.asarray(self.outcome, dtype=np.float64)))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.group_labels is not None:
            object.__setattr__(self, "group_labels", _readonly(np.asarray(self.group_labels, dtype=np.int64)))

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.feature_names.index(name)]

    def take(self, rows) -> "DesignMatrix":
        rows = np.asarray(rows)
        g = None if self.group_labels is None else self.group_labels[rows]
        return DesignMatrix(self.feature_names, self.X[rows], self.outcome[rows], g,
                            self.group_names, self.encoding)


def _reference_level(counts: np.ndarray) -> int:
    # argmax returns the first maximum: ties go to dictionary order
    return int(np.argmax(counts))


def encode(d: Dataset, reference_policy="most_frequent", *, include: Iterable[str] = (),
           group_column: str | None = None, encoding: Encoding | None = None) -> DesignMatrix:
    """Expand a Dataset into numeric features with 0/1 level indicators.

    Parameters
    ----------
    d : Dataset
    reference_policy : "most_frequent" or mapping column -> reference level name
        Level dropped from each categorical column. The default picks the
        most frequent level, ties going to the earlier dictionary entry.
    include : column names
        Extra categorical columns (for instance the cluster target) to
        encode as indicators alongside the predictors.
    group_column : str, optional
        Categorical column exported as ``group_labels``. Defaults to the
        cluster target.
    encoding : Encoding, optional
        Reuse a layout learned on training data; ``reference_policy`` and
        ``include`` are then ignored.
    """
    if encoding is None:
        numeric, categorical = [], []
        cols = [c for c in d.schema if c.role == PREDICTOR or c.name in include]
        for c in cols:
            if c.kind == NUMERIC:
                numeric.append(c.name)
            elif c.kind == CATEGORICAL:
                counts = d.level_counts(c.name)
                if isinstance(reference_policy, Mapping) and c.name in reference_policy:
                    ref = d.levels[c.name].index(reference_policy[c.name])
                else:
                    ref = _reference_level(counts)
                codes = tuple(i for i in range(len(counts)) if i != ref)
                names = tuple(d.levels[c.name][i] for i in codes)
                categorical.append((c.name, ref, codes, names))
        encoding = Encoding(tuple(numeric), tuple(categorical))

    blocks = [d[name][:, None] for name in encoding.numeric]
    for col, _, codes, names in encoding.categorical:
        lv = d.levels[col]
        if any(i >= len(lv) or lv[i] != nm for i, nm in zip(codes, names)):
            raise ValueError(f"level dictionary of {col!r} does not match the encoding")
        v = d[col]
        blocks.append((v[:, None] == np.asarray(codes)[None, :]).astype(np.float64))
    X = np.hstack(blocks) if blocks else np.empty((d.n_rows, 0))

    gcol = group_column if group_column is not None else d.target_name
    return DesignMatrix(encoding.feature_names, X, d.outcome, d[gcol], d.levels[gcol], encoding)


def split_indices(n_rows: int, train_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Seeded uniform shuffle split; sizes are round-half-up of the fraction."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n_train = int(math.floor(train_fraction * n_rows + 0.5))
    if n_train == 0 or n_train == n_rows:
        raise ValueError(f"split of {n_rows} rows at {train_fraction} leaves one side empty")
    rng = np.random.default_rng(rng)
    perm = rng.permutation(n_rows)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_test(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train, test = split_indices(d.n_rows, train_fraction, seed)
    return d.take(train), d.take(test)


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class CovariateSpec:
    """One synthetic predictor.

    ``distribution`` is one of normal(mean, sd), uniform(low, high),
    bernoulli(p), poisson(lam) or categorical(levels, probs). ``coef`` is the
    log-odds coefficient: a scalar, or one value per planted group. For
    categorical covariates it is one value per level (or a per-group list
    of those). Contributions are centred at the distribution mean so the
    group event rates stay close to their nominal values.
    """

    name: str
    distribution: str = "normal"
    params: Mapping = field(default_factory=dict)
    coef: object = 0.0

    def _mean(self) -> float:
        p = self.params
        dist = self.distribution
        if dist == "normal":
            return float(p.get("mean", 0.0))
        if dist == "uniform":
            return 0.5 * (float(p.get("low", 0.0)) + float(p.get("high", 1.0)))
        if dist == "bernoulli":
            return float(p.get("p", 0.5))
        if dist == "poisson":
            return float(p.get("lam", 1.0))
        raise ValueError(f"unknown distribution {dist!r}")

    def draw(self, rng, n: int) -> np.ndarray:
        p = self.params
        dist = self.distribution
        if dist == "normal":
            return rng.normal(p.get("mean", 0.0), p.get("sd", 1.0), n)
        if dist == "uniform":
            return rng.uniform(p.get("low", 0.0), p.get("high", 1.0), n)
        if dist == "bernoulli":
            return (rng.random(n) < p.get("p", 0.5)).astype(np.float64)
        if dist == "poisson":
            return rng.poisson(p.get("lam", 1.0), n).astype(np.float64)
        if dist == "categorical":
            probs = np.asarray(p["probs"], dtype=np.float64)
            return rng.choice(len(probs), size=n, p=probs / probs.sum())
        raise ValueError(f"unknown distribution {dist!r}")

    def contribution(self, x: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
        coef = np.asarray(self.coef, dtype=np.float64)
        if self.distribution == "categorical":
            probs = np.asarray(self.params["probs"], dtype=np.float64)
            probs = probs / probs.sum()
            table = np.broadcast_to(coef, (n_groups, len(probs))) if coef.ndim == 1 else coef
            table = table - (table @ probs)[:, None]
            return table[group, x]
        per_group = np.broadcast_to(coef, (n_groups,)) if coef.ndim == 0 else coef
        return per_group[group] * (x - self._mean())


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-group cohort: each level of the cluster target belongs to a
    group with its own baseline event rate."""

    n_rows: int
    n_levels: int
    planted_groups: Sequence[int]
    group_event_rates: Sequence[float]
    covariates: Sequence[CovariateSpec] = ()
    level_weights: Sequence[float] | None = None
    seed: int = 0
    level_names: Sequence[str] | None = None
    target_name: str = "dx"
    outcome_name: str = "readmit"

    def __post_init__(self):
        rates = np.asarray(self.group_event_rates, dtype=np.float64)
        if np.any(rates <= 0) or np.any(rates >= 1):
            raise ValueError("group event rates must lie in (0, 1)")
        groups = np.asarray(self.planted_groups)
        if groups.shape != (self.n_levels,):
            raise ValueError("planted_groups must assign every level to one group")
        if groups.min() < 0 or groups.max() >= len(rates):
            raise ValueError("planted group index out of range")
        if self.level_weights is not None:
            w = np.asarray(self.level_weights, dtype=np.float64)
            if w.shape != (self.n_levels,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("level_weights must be positive and finite, one per level")
        if self.level_names is not None and len(self.level_names) != self.n_levels:
            raise ValueError("level_names must have one entry per level")

    @property
    def names(self) -> list[str]:
        if self.level_names is not None:
            return [str(x) for x in self.level_names]
        width = len(str(self.n_levels))
        return [f"L{i + 1:0{width}d}" for i in range(self.n_levels)]

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SyntheticSpec":
        obj = dict(obj)
        obj["covariates"] = tuple(CovariateSpec(**c) for c in obj.get("covariates", ()))
        return cls(**obj)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in ("n_rows", "n_levels", "seed", "target_name", "outcome_name")}
        out["planted_groups"] = [int(g) for g in self.planted_groups]
        out["group_event_rates"] = [float(r) for r in self.group_event_rates]
        out["level_weights"] = None if self.level_weights is None else [float(w) for w in self.level_weights]
        out["level_names"] = self.names
        out["covariates"] = [{"name": c.name, "distribution": c.distribution, "params": dict(c.params),
                              "coef": np.asarray(c.coef).tolist()} for c in self.covariates]
        return out


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a cohort row by row from ``spec``; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_rows
    weights = np.ones(spec.n_levels) if spec.level_weights is None else np.asarray(spec.level_weights, float)
    level = rng.choice(spec.n_levels, size=n, p=weights / weights.sum())
    groups = np.asarray(spec.planted_groups)[level]
    n_groups = len(spec.group_event_rates)
    eta = logit(np.asarray(spec.group_event_rates, dtype=np.float64))[groups]

    schema, data, levels = [], {}, {}
    for cov in spec.covariates:
        x = cov.draw(rng, n)
        eta = eta + cov.contribution(x, groups, n_groups)
        if cov.distribution == "categorical":
            schema.append(ColumnSchema(cov.name, CATEGORICAL))
            cat_names = cov.params.get("levels") or [f"{cov.name}{i}" for i in range(len(cov.params["probs"]))]
            levels[cov.name] = tuple(str(v) for v in cat_names)
            data[cov.name] = x
        else:
            schema.append(ColumnSchema(cov.name, NUMERIC))
            data[cov.name] = x
    y = (rng.random(n) < expit(eta)).astype(np.int8)

    schema.append(ColumnSchema(spec.target_name, CATEGORICAL, TARGET))
    data[spec.target_name] = level
    levels[spec.target_name] = tuple(spec.names)
    schema.append(ColumnSchema(spec.outcome_name, OUTCOME, OUTCOME_ROLE))
    data[spec.outcome_name] = y
    return Dataset(schema, data, levels)
