"""Co-frequency statistics for level pairs of the cluster target.

For levels i and j, ``s[i, j]`` is the fraction of target splits (over all
trees of a forest) that send i and j the same way, among the splits where
both levels reach the node. A permutation null gives each pair its own mean
and spread; pairs whose z-score survives a Bonferroni cut keep ``1 - s`` as
their distance, the rest are set to the uninformative 0.5.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from . import _tree_kernel as K
from .datamodel import Dataset
from .forest import Forest, ForestParams, Tree, _fit_prepared, _Prepared


@dataclass(frozen=True, eq=False)
class PairCounts:
    """Symmetric integer counts; the diagonal is unused and kept at zero."""

    same: np.ndarray
    together_total: np.ndarray

    @classmethod
    def zeros(cls, n_levels: int) -> "PairCounts":
        z = np.zeros((n_levels, n_levels), dtype=np.int64)
        return cls(z, z.copy())

    def __add__(self, other: "PairCounts") -> "PairCounts":
        return PairCounts(self.same + other.same, self.together_total + other.together_total)

    @property
    def split(self) -> np.ndarray:
        """Cross counts: both levels present but sent to different sides."""
        return self.together_total - self.same


def merge_counts(parts: Iterable[PairCounts]) -> PairCounts:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def accumulate_pair_counts(t: Tree, target: str | None = None) -> PairCounts:
    """Pair counts contributed by one tree.

    Every node that splits on the target with bipartition (L, R) of the
    levels present there adds one to ``together_total`` for each pair of
    present levels, and one to ``same`` for pairs inside L or inside R.
    """
    layout = t.layout
    j = layout.target if target is None else layout.names.index(target)
    n_levels = len(layout.levels[j])
    nodes = np.flatnonzero((t.kind == K.LEVEL_SPLIT) & (t.feature == j))
    if len(nodes) == 0:
        return PairCounts.zeros(n_levels)
    present = t.present_levels[nodes, :n_levels].astype(np.int64)
    left = present * t.left_levels[nodes, :n_levels]
    right = present - left
    together = present.T @ present
    same = left.T @ left + right.T @ right
    np.fill_diagonal(together, 0)
    np.fill_diagonal(same, 0)
    return PairCounts(same, together)


@dataclass(frozen=True, eq=False)
class CoFrequencyMatrix:
    s: np.ndarray  # NaN where the pair never shared a target split
    counts: PairCounts
    level_names: tuple

    @classmethod
    def from_counts(cls, counts: PairCounts, level_names: Sequence[str]) -> "CoFrequencyMatrix":
        with np.errstate(invalid="ignore", divide="ignore"):
            s = counts.same / counts.together_total
        s = np.where(counts.together_total > 0, s, np.nan)
        np.fill_diagonal(s, np.nan)
        return cls(s, counts, tuple(level_names))

    @property
    def n_levels(self) -> int:
        return len(self.level_names)


def cofa_matrix(f: Forest, target: str | None = None) -> CoFrequencyMatrix:
    layout = f.layout
    j = layout.target if target is None else layout.names.index(target)
    counts = merge_counts(accumulate_pair_counts(t, layout.names[j]) for t in f.trees)
    return CoFrequencyMatrix.from_counts(counts, layout.levels[j])


@dataclass(frozen=True, eq=False)
class NullDistribution:
    mu: np.ndarray
    sigma: np.ndarray
    n_defined: np.ndarray
    n_replicates: int
    level_names: tuple
    samples: np.ndarray | None = None  # (n_replicates, L, L), NaN where undefined
    trivial_root_counts: tuple = ()


def _summarise(samples: np.ndarray):
    defined = ~np.isnan(samples)
    n_def = defined.sum(axis=0)
    filled = np.where(defined, samples, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = filled.sum(axis=0) / n_def
        dev = np.where(defined, samples - mu, 0.0)
        sigma = np.sqrt((dev**2).sum(axis=0) / (n_def - 1))
    ok = n_def >= 2
    return np.where(ok, mu, np.nan), np.where(ok, sigma, np.nan), n_def


def replicate_stream(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def null_distribution(d: Dataset, target: str | None = None, params: ForestParams | None = None,
                      n_replicates: int = 500, seed: int = 0, *, reuse_forest_seed: bool = False,
                      n_jobs: int = 1, keep_samples: bool = True) -> NullDistribution:
    """Permutation null for ``s``.

    Each replicate permutes the target column across rows (all other
    columns fixed), fits a forest with ``params`` and records ``s``.
    Replicate ``r`` draws from a substream keyed by ``(seed, r)``. With
    ``reuse_forest_seed`` every null forest reuses ``params.seed``;
    otherwise each replicate draws its own forest seed.
    """
    if n_replicates < 2:
        raise ValueError("need at least two null replicates")
    params = params or ForestParams()
    if target is not None and target != d.target_name:
        d = d.with_roles({d.target_name: "predictor", target: "cluster-target"})
    prep = _Prepared.from_dataset(d)
    tcol = prep.layout.target
    level_names = prep.layout.levels[tcol]
    codes = prep.X[:, tcol]

    def job(r: int):
        rng = replicate_stream(seed, r)
        permuted = codes[rng.permutation(len(codes))]
        forest_seed = params.seed if reuse_forest_seed else int(rng.integers(2**63))
        p = ForestParams(**{**params.__dict__, "seed": forest_seed})
        f = _fit_prepared(prep.with_target(permuted), p)
        return cofa_matrix(f).s, f.trivial_root_count

    if n_jobs == 1:
        results = [job(r) for r in range(n_replicates)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(job, range(n_replicates)))
    samples = np.stack([r[0] for r in results])
    mu, sigma, n_def = _summarise(samples)
    return NullDistribution(mu, sigma, n_def, n_replicates, level_names,
                            samples if keep_samples else None, tuple(r[1] for r in results))


@dataclass(frozen=True, eq=False)
class SignificanceMask:
    z: np.ndarray  # NaN where undefined
    alpha: float
    n_tests: int
    cutoff: float
    significant: np.ndarray


def bonferroni_cutoff(n_levels: int, alpha: float = 0.05) -> tuple[int, float]:
    """Number of pair tests and the two-sided |z| cutoff at alpha / n_tests."""
    n_tests = n_levels * (n_levels - 1) // 2
    return n_tests, float(norm.isf(alpha / n_tests / 2.0))


def significance_mask(obs: CoFrequencyMatrix, null: NullDistribution, alpha: float = 0.05) -> SignificanceMask:
    if tuple(obs.level_names) != tuple(null.level_names):
        raise ValueError("observed and null matrices use different level orders")
    n_tests, cutoff = bonferroni_cutoff(obs.n_levels, alpha)
    usable = ~np.isnan(obs.s) & ~np.isnan(null.mu) & (null.sigma > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(usable, (obs.s - null.mu) / np.where(usable, null.sigma, 1.0), np.nan)
    significant = usable & (np.abs(np.nan_to_num(z)) > cutoff)
    return SignificanceMask(z, alpha, n_tests, cutoff, significant)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    d: np.ndarray
    level_names: tuple

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] != len(self.level_names):
            raise ValueError("distance matrix must be square and match level_names")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "level_names", tuple(self.level_names))

    @property
    def n_levels(self) -> int:
        return len(self.level_names)


def to_distance(obs: CoFrequencyMatrix, mask: SignificanceMask) -> DistanceMatrix:
    if mask.significant.shape != obs.s.shape:
        raise ValueError("mask and matrix shapes differ")
    d = np.where(mask.significant, 1.0 - np.nan_to_num(obs.s), 0.5)
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d, obs.level_names)


# ---------------------------------------------------------------------------
# CSV exports


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def matrix_to_csv(values: np.ndarray, level_names: Sequence[str], comment: str | None = None) -> str:
    """Square matrix with a level-name header row and column; NaN -> NA."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", *level_names])
    for name, row in zip(level_names, values):
        if row.dtype == bool:
            w.writerow([name, *("1" if v else "0" for v in row)])
        else:
            w.writerow([name, *(_fmt(float(v)) for v in row)])
    return buf.getvalue()


def matrix_from_csv(text: str) -> tuple[np.ndarray, tuple]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    names = tuple(rows[0][1:])
    vals = np.array([[np.nan if v == "NA" else float(v) for v in r[1:]] for r in rows[1:]])
    return vals, names


def null_summary_csv(null: NullDistribution, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level_i", "level_j", "mu", "sigma", "n_defined"])
    names = null.level_names
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            w.writerow([names[i], names[j], _fmt(float(null.mu[i, j])), _fmt(float(null.sigma[i, j])),
                        int(null.n_defined[i, j])])
    return buf.getvalue()
