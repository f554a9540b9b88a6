"""Rank-accuracy evaluation.

AUC (Mann-Whitney with half credit for ties), subgroup-size weighted AUC,
a repeated random sub-sampling harness with paired splits across
procedures, and the corrected resampled paired t-test.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .datamodel import Dataset, split_indices
from .glm import stratum_labels

MAX_RETRIES = 100


class UndefinedAUC(ValueError):
    """AUC requested for labels that contain a single class."""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Computed from the rank sum of the positives (average ranks for ties),
    which gives half credit to tied pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def subgroup_aucs(scores, labels, groups) -> dict:
    """``{group: (auc or nan, size)}`` in order of first appearance."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    g = np.asarray(groups)
    out = {}
    for key in dict.fromkeys(g.tolist()):
        rows = g == key
        try:
            a = auc(s[rows], y[rows])
        except UndefinedAUC:
            a = float("nan")
        out[key] = (a, int(rows.sum()))
    return out


def weighted_auc(scores, labels, groups) -> float:
    """Per-group AUC averaged with group-size weights.

    Groups whose AUC is undefined (one class only) are dropped and the
    weights renormalised over the rest.
    """
    parts = [(a, n) for a, n in subgroup_aucs(scores, labels, groups).values() if not np.isnan(a)]
    if not parts:
        raise UndefinedAUC("every group has a single outcome class")
    a, n = np.array(parts).T
    return float((a * n).sum() / n.sum())


# ---------------------------------------------------------------------------
# repeated sub-sampling


@dataclass(frozen=True, eq=False)
class Split:
    iteration: int
    train: np.ndarray
    test: np.ndarray
    retries: int
    seed: int  # handed to procedures; identical for every procedure


def _degenerate(y: np.ndarray) -> bool:
    return y.min() == y.max()


def subsample_splits(d: Dataset, m: int = 100, train_fraction: float = 0.8, seed: int = 0) -> list[Split]:
    """``m`` seeded train/test splits, one substream per iteration.

    A split whose train or test side holds a single outcome class is
    re-drawn from the next attempt of the same iteration's substream; the
    number of re-draws is kept on the split.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    y = d.outcome
    out = []
    for i in range(m):
        ss = np.random.SeedSequence(seed, spawn_key=(i,))
        rng = np.random.default_rng(ss)
        proc_seed = int(ss.generate_state(1, dtype=np.uint32)[0])
        for attempt in range(MAX_RETRIES + 1):
            tr, te = split_indices(d.n_rows, train_fraction, rng)
            if not (_degenerate(y[tr]) or _degenerate(y[te])):
                break
        else:
            raise ValueError(f"iteration {i}: no non-degenerate split in {MAX_RETRIES} retries")
        out.append(Split(i, np.sort(tr), np.sort(te), attempt, proc_seed))
    return out


def split_digest(splits: Sequence[Split]) -> str:
    h = hashlib.sha256()
    for s in splits:
        h.update(s.train.astype(np.int64).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class AucSamples:
    """Per-iteration test metric of one procedure under one metric."""

    procedure: str
    metric: str  # "auc" or "weighted_auc:<grouping>"
    values: np.ndarray
    n_test: int
    n_train: int
    split_digest: str
    retries: tuple = ()
    group_names: tuple = ()
    group_values: np.ndarray | None = None  # (m, n_groups), NaN where undefined

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) < 2:
            raise ValueError("need at least two iterations")
        if np.any((v < 0) | (v > 1)):
            raise ValueError("AUC values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


Procedure = Callable[[Dataset, Dataset, int], np.ndarray]


def _grouping_labels(d: Dataset, grouping) -> np.ndarray:
    return stratum_labels(d, grouping)


def run_procedures(d: Dataset, procedures: Mapping[str, Procedure], m: int = 100,
                   train_fraction: float = 0.8, seed: int = 0, *,
                   groupings: Mapping[str, object] | None = None, n_jobs: int = 1,
                   splits: Sequence[Split] | None = None) -> dict[tuple, AucSamples]:
    """Evaluate several procedures on one shared set of splits.

    Each procedure maps ``(train, test, seed)`` to scores for the test rows.
    Every procedure is scored by plain AUC and, for each entry of
    ``groupings`` (a categorical column name or a level clustering), by
    weighted AUC over those groups. Returns ``{(procedure, metric): samples}``.
    """
    groupings = dict(groupings or {})
    splits = list(splits) if splits is not None else subsample_splits(d, m, train_fraction, seed)
    digest = split_digest(splits)
    labels = {g: _grouping_labels(d, spec) for g, spec in groupings.items()}
    names = {g: tuple(dict.fromkeys(lab.tolist())) for g, lab in labels.items()}

    def job(args):
        pname, sp = args
        proc = procedures[pname]
        scores = np.asarray(proc(d.take(sp.train), d.take(sp.test), sp.seed), dtype=np.float64)
        y = d.outcome[sp.test]
        res = {"auc": (auc(scores, y), None)}
        for g, lab in labels.items():
            per = subgroup_aucs(scores, y, lab[sp.test])
            res[f"weighted_auc:{g}"] = (weighted_auc(scores, y, lab[sp.test]),
                                       np.array([per.get(k, (np.nan, 0))[0] for k in names[g]]))
        return res

    work = [(p, sp) for p in procedures for sp in splits]
    if n_jobs == 1:
        results = [job(w) for w in work]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(job, work))
    n_train, n_test = len(splits[0].train), len(splits[0].test)
    retries = tuple(sp.retries for sp in splits)
    out = {}
    for pi, p in enumerate(procedures):
        chunk = results[pi * len(splits):(pi + 1) * len(splits)]
        for metric in chunk[0]:
            vals = np.array([r[metric][0] for r in chunk])
            g = metric.split(":", 1)[1] if ":" in metric else None
            gv = np.vstack([r[metric][1] for r in chunk]) if g else None
            out[(p, metric)] = AucSamples(p, metric, vals, n_test, n_train, digest, retries,
                                          names[g] if g else (), gv)
    return out


def repeated_subsampling(d: Dataset, procedure: Procedure, m: int = 100, train_fraction: float = 0.8,
                         seed: int = 0, *, groups=None, name: str = "procedure", n_jobs: int = 1) -> AucSamples:
    """Test AUC of ``procedure`` over ``m`` seeded train/test splits.

    With ``groups`` (a categorical column name or a level clustering) the
    metric is the weighted AUC over those groups. Equal seeds give equal
    splits, so two procedures run with one seed are paired.
    """
    groupings = {"groups": groups} if groups is not None else None
    res = run_procedures(d, {name: procedure}, m, train_fraction, seed, groupings=groupings, n_jobs=n_jobs)
    return res[(name, "weighted_auc:groups" if groups is not None else "auc")]


# ---------------------------------------------------------------------------
# corrected resampled t-test


def student_t_sf(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if df < 1:
        raise ValueError("df must be >= 1")
    t = float(t)
    if np.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class TTestResult:
    mean_diff: float
    sigma_hat: float
    t: float
    df: int
    p: float
    degenerate: bool = False  # zero spread with a non-zero mean difference


def paired_t_from_differences(x, ratio: float) -> TTestResult:
    """t-test on differences ``x`` with variance inflated by
    ``1/m + ratio`` (``ratio = n_test / n_train``; 0 gives the classical
    paired test)."""
    x = np.asarray(x, dtype=np.float64)
    m = len(x)
    if m < 2:
        raise ValueError("need at least two paired differences")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    df = m - 1
    if np.ptp(x) == 0.0:  # all differences equal; std may carry rounding noise
        if mean == 0.0:
            return TTestResult(mean, 0.0, 0.0, df, 1.0)
        return TTestResult(mean, 0.0, float(np.copysign(np.inf, mean)), df, 0.0, True)
    t = mean / (sd * np.sqrt(1.0 / m + ratio))
    return TTestResult(mean, sd, float(t), df, student_t_sf(t, df))


def corrected_resampled_t_test(a: AucSamples, b: AucSamples) -> TTestResult:
    """Paired comparison of two procedures' per-iteration metrics.

    The differences ``a - b`` are tested with variance
    ``sigma^2 (1/m + n_test/n_train)``, which accounts for overlap between
    the training sets of different iterations.
    """
    if a.m != b.m or a.split_digest != b.split_digest:
        raise ValueError("samples are not paired (different splits)")
    if (a.n_test, a.n_train) != (b.n_test, b.n_train):
        raise ValueError("samples use different split sizes")
    return paired_t_from_differences(a.values - b.values, a.n_test / a.n_train)


# ---------------------------------------------------------------------------
# report


def _fmt(x) -> str:
    x = float(x)
    return "NA" if np.isnan(x) else repr(x)


@dataclass(eq=False)
class EvaluationReport:
    samples: dict  # {(procedure, metric): AucSamples}
    comparisons: list = field(default_factory=list)  # (a, b, metric, TTestResult)
    header: Mapping = field(default_factory=dict)

    def compare(self, a: str, b: str, metric: str = "auc", metric_b: str | None = None) -> TTestResult:
        r = corrected_resampled_t_test(self.samples[(a, metric)], self.samples[(b, metric_b or metric)])
        self.comparisons.append((a, b, metric if metric_b is None else f"{metric} vs {metric_b}", r))
        return r

    def _comment(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.header.items())

    def iterations_csv(self) -> str:
        buf = io.StringIO()
        if self.header:
            buf.write(f"# {self._comment()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["procedure", "metric", "iteration", "value"])
        for (p, metric), s in self.samples.items():
            for i, v in enumerate(s.values):
                w.writerow([p, metric, i, _fmt(v)])
        return buf.getvalue()

    def ttest_csv(self) -> str:
        buf = io.StringIO()
        if self.header:
            buf.write(f"# {self._comment()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["procedure_a", "procedure_b", "metric", "mean_diff", "sigma_hat", "t", "df", "p", "degenerate"])
        for a, b, metric, r in self.comparisons:
            w.writerow([a, b, metric, _fmt(r.mean_diff), _fmt(r.sigma_hat), _fmt(r.t), r.df, _fmt(r.p),
                        int(r.degenerate)])
        return buf.getvalue()

    def subgroup_rows(self) -> list:
        rows = []
        for (p, metric), s in self.samples.items():
            if s.group_values is None:
                continue
            for j, g in enumerate(s.group_names):
                col = s.group_values[:, j]
                col = col[~np.isnan(col)]
                k = len(col)
                mean = float(col.mean()) if k else float("nan")
                se = float(col.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
                rows.append((p, metric.split(":", 1)[1], g, k, mean, se))
        return rows

    def subgroup_csv(self) -> str:
        buf = io.StringIO()
        if self.header:
            buf.write(f"# {self._comment()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["procedure", "grouping", "group", "n_defined", "mean_auc", "se_auc"])
        for p, g, grp, k, mean, se in self.subgroup_rows():
            w.writerow([p, g, grp, k, _fmt(mean), _fmt(se)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            **self.header,
            "procedures": [
                {"procedure": p, "metric": metric, "m": s.m, "n_train": s.n_train, "n_test": s.n_test,
                 "mean": s.mean, "sd": float(s.values.std(ddof=1)), "split_digest": s.split_digest,
                 "total_retries": int(sum(s.retries))}
                for (p, metric), s in self.samples.items()
            ],
            "comparisons": [
                {"a": a, "b": b, "metric": metric, "mean_diff": r.mean_diff, "sigma_hat": r.sigma_hat,
                 "t": r.t if np.isfinite(r.t) else str(r.t), "df": r.df, "p": r.p, "degenerate": r.degenerate}
                for a, b, metric, r in self.comparisons
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
