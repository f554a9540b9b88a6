"""End-to-end study stages over a run configuration.

Each stage reads the previous stage's files from the output directory and
writes self-describing CSV / JSON / Newick artifacts. Every artifact starts
with (or contains) the configuration hash and master seed, and nothing
time- or host-dependent is written, so reruns are byte-identical.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import cluster as C
from . import cofrequency as F
from . import evaluate as E
from . import glm as G
from .datamodel import (CATEGORICAL, PREDICTOR, TARGET, ColumnSchema, Dataset, IngestionError,
                        SchemaError, SyntheticSpec, bucket_rare_levels, encode, generate_synthetic, load_csv,
                        load_schema, schema_from_dict, schema_to_dict)
from .forest import ForestParams, fit_forest

SAMPLE = "sample"
GROUP_COLUMN = "cofa_group"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration, or a missing stage input."""


@dataclass(frozen=True)
class RunConfig:
    """All protocol settings of one study run.

    ``data`` is a CSV path (with ``schema`` a JSON schema path) or
    ``"sample"`` for the bundled ICD fixture; alternatively ``synthetic``
    holds a :class:`SyntheticSpec` as a mapping.
    """

    data: str | None = None
    schema: str | None = None
    synthetic: dict | None = None
    target: str | None = None
    min_count: int = 100
    n_trees: int = 100
    min_split: int = 20
    min_bucket: int = 7
    max_depth: int = 30
    complexity: float = 0.001
    bootstrap: bool = True
    null_replicates: int = 500
    reuse_forest_seed: bool = False
    alpha: float = 0.05
    k: int = 3
    folds: int = 5
    m: int = 100
    train_fraction: float = 0.8
    min_stratum_rows: int = 50
    seed: int = 0
    out: str = "cofa-out"
    n_jobs: int = 1

    # settings that never influence artifact contents
    _NEUTRAL = ("out", "n_jobs")

    def __post_init__(self):
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'data' or 'synthetic'")
        if self.data not in (None, SAMPLE) and self.schema is None:
            raise ConfigError("'data' needs a 'schema' file")
        checks = [
            (self.min_count >= 1, "min_count must be >= 1"),
            (self.n_trees >= 1, "n_trees must be >= 1"),
            (self.null_replicates >= 2, "null_replicates must be >= 2"),
            (0 < self.alpha < 1, "alpha must lie in (0, 1)"),
            (self.k >= 1, "k must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.m >= 2, "m must be >= 2"),
            (0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.n_jobs >= 1, "n_jobs must be >= 1"),
            (self.complexity >= 0, "complexity must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, obj) -> "RunConfig":
        unknown = set(obj) - set(cls.fields())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in self._NEUTRAL}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def stamp(self) -> str:
        return f"cofa config={self.hash} seed={self.seed}"

    def forest_params(self) -> ForestParams:
        return ForestParams(self.n_trees, self.min_split, self.min_bucket, self.max_depth, self.complexity,
                            self.bootstrap, stage_seed(self.seed, "forest"))


def stage_seed(master: int, stage: str) -> int:
    """Independent non-negative seed for one stage, derived from the master seed."""
    ss = np.random.SeedSequence([master, zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(2))


# ---------------------------------------------------------------------------
# file helpers


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="")
    return path


def _write_json(path: Path, cfg: RunConfig, doc: dict) -> Path:
    doc = {"config_hash": cfg.hash, "seed": cfg.seed, **doc}
    return _write(path, json.dumps(doc, indent=2) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{path} not found; run '{stage}' first")
    return path


def sample_paths() -> tuple[Path, Path]:
    base = resources.files("cofa") / "data"
    return Path(str(base / "sample_icd.csv")), Path(str(base / "sample_icd_schema.json"))


def _load_input(cfg: RunConfig) -> tuple[Dataset, dict | None]:
    if cfg.synthetic is not None:
        spec = dict(cfg.synthetic)
        spec.setdefault("seed", stage_seed(cfg.seed, "synthetic"))
        try:
            spec = SyntheticSpec.from_dict(spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None
        d = generate_synthetic(spec)
        truth = dict(zip(spec.names, (int(g) + 1 for g in spec.planted_groups)))
        return d, truth
    if cfg.data == SAMPLE:
        data, schema = sample_paths()
    else:
        data, schema = Path(cfg.data), Path(cfg.schema)
    if not schema.exists():
        raise ConfigError(f"schema file {schema} not found")
    if not data.exists():
        raise IngestionError(f"{data}: file not found")
    try:
        cols = load_schema(schema)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"{schema}: {exc}") from None
    try:
        return load_csv(data, cols), None
    except IngestionError as exc:
        raise IngestionError(f"{data}: {exc}", exc.row, exc.column) from None


def _retarget(d: Dataset, target: str | None) -> Dataset:
    if target is None or target == _target_or_none(d):
        if _target_or_none(d) is None:
            raise SchemaError("no cluster-target column; set 'target'")
        return d
    if target not in d.names:
        raise SchemaError(f"target column {target!r} not in data")
    if d.column_schema(target).kind != CATEGORICAL:
        raise SchemaError(f"target column {target!r} is not categorical")
    roles = {target: TARGET}
    old = _target_or_none(d)
    if old is not None:
        roles[old] = PREDICTOR
    return d.with_roles(roles)


def _target_or_none(d: Dataset):
    return next((c.name for c in d.schema if c.role == TARGET), None)


def load_prepared(cfg: RunConfig) -> Dataset:
    out = Path(cfg.out)
    schema = schema_from_dict(json.loads(_require(out / "schema.json", "prepare").read_text())["columns"])
    return load_csv(_require(out / "prepared.csv", "prepare"), schema)


# ---------------------------------------------------------------------------
# stages


def cmd_prepare(cfg: RunConfig) -> dict:
    """Load or generate data, bucket rare target levels, write the prepared
    table, its schema and a preparation report."""
    out = _out(cfg)
    raw, truth = _load_input(cfg)
    raw = _retarget(raw, cfg.target)
    target = raw.target_name
    before = dict(zip(raw.levels[target], raw.level_counts(target).tolist()))
    d = bucket_rare_levels(raw, target, cfg.min_count)
    after = dict(zip(d.levels[target], d.level_counts(target).tolist()))
    other = [lv for lv in before if lv not in after]
    written = {"prepared": out / "prepared.csv", "schema": out / "schema.json", "report": out / "prep_report.json"}
    d.to_csv(written["prepared"], comment=cfg.stamp)
    _write_json(written["schema"], cfg, {"columns": schema_to_dict(d.schema)["columns"]})
    y = d.outcome
    _write_json(written["report"], cfg, {
        "n_rows": d.n_rows,
        "target": target,
        "outcome": d.outcome_name,
        "event_rate": float(y.mean()),
        "min_count": cfg.min_count,
        "n_levels_before": len(before),
        "n_levels": len(after),
        "levels": [{"level": lv, "count": int(n),
                    "event_rate": float(y[d[target] == i].mean()) if n else None}
                   for i, (lv, n) in enumerate(after.items())],
        "other_members": other,
    })
    if truth is not None:
        written["truth"] = out / "truth.csv"
        a = C.ClusterAssignment(tuple(truth.values()), tuple(truth), len(set(truth.values())))
        _write(written["truth"], a.to_csv(cfg.stamp))
    return written


def _group_table(d: Dataset, assignment: C.ClusterAssignment) -> list[dict]:
    target = d.target_name
    mapping = assignment.mapping
    g = np.array([mapping[lv] for lv in d.levels[target]])[d[target]]
    y = d.outcome
    rows = []
    for k in range(1, assignment.k + 1):
        sel = g == k
        rows.append({"group": k, "levels": assignment.members(k), "n_obs": int(sel.sum()),
                     "event_rate": float(y[sel].mean()) if sel.any() else None})
    rows.append({"group": "all", "levels": list(assignment.level_names), "n_obs": d.n_rows,
                 "event_rate": float(y.mean())})
    return rows


def _group_table_csv(rows: list[dict], comment: str) -> str:
    lines = [f"# {comment}", "group,n_levels,n_obs,event_rate,levels"]
    for r in rows:
        rate = "NA" if r["event_rate"] is None else repr(r["event_rate"])
        lines.append(f"{r['group']},{len(r['levels'])},{r['n_obs']},{rate},\"{';'.join(r['levels'])}\"")
    return "\n".join(lines) + "\n"


def _newick_text(dg: C.Dendrogram, cfg: RunConfig) -> str:
    return f"[{cfg.stamp}]\n{C.export_newick(dg)}\n"


def _write_clustering(cfg: RunConfig, d: Dataset, dist: F.DistanceMatrix, written: dict) -> C.ClusterAssignment:
    out = Path(cfg.out)
    dg = C.complete_linkage(dist)
    if cfg.k > dist.n_levels:
        raise ConfigError(f"k={cfg.k} exceeds the {dist.n_levels} target levels")
    a = C.cut_tree(dg, cfg.k)
    written["newick"] = _write(out / "dendrogram.nwk", _newick_text(dg, cfg))
    written["merges"] = _write(out / "merges.csv", C.merge_table_csv(dg, cfg.stamp))
    written["assignment"] = _write(out / "assignment.csv", a.to_csv(cfg.stamp))
    table = _group_table(d, a)
    written["groups"] = _write(out / "groups.csv", _group_table_csv(table, cfg.stamp))
    return a


def cmd_cofa(cfg: RunConfig) -> dict:
    """Forest, co-frequency matrix, permutation null, Bonferroni mask,
    distances, complete linkage and the k-group cut."""
    out = _out(cfg)
    d = load_prepared(cfg)
    params = cfg.forest_params()
    forest = fit_forest(d, params, n_jobs=cfg.n_jobs)
    obs = F.cofa_matrix(forest)
    null = F.null_distribution(d, params=params, n_replicates=cfg.null_replicates,
                               seed=stage_seed(cfg.seed, "null"), reuse_forest_seed=cfg.reuse_forest_seed,
                               n_jobs=cfg.n_jobs, keep_samples=False)
    mask = F.significance_mask(obs, null, cfg.alpha)
    dist = F.to_distance(obs, mask)
    names = obs.level_names
    written = {}
    for key, values in (("s", obs.s), ("z", mask.z), ("d", dist.d)):
        written[key] = _write(out / f"cofa_{key}.csv", F.matrix_to_csv(values, names, cfg.stamp))
    written["mask"] = _write(out / "cofa_mask.csv", F.matrix_to_csv(mask.significant, names, cfg.stamp))
    written["together"] = _write(out / "cofa_together.csv",
                                 F.matrix_to_csv(obs.counts.together_total.astype(float), names, cfg.stamp))
    written["null"] = _write(out / "null_summary.csv", F.null_summary_csv(null, cfg.stamp))
    doc = forest.to_dict()
    written["forest"] = _write_json(out / "forest.json", cfg, doc)
    a = _write_clustering(cfg, d, dist, written)
    iu = np.triu_indices(len(names), 1)
    _write_json(out / "cofa_summary.json", cfg, {
        "target": d.target_name,
        "n_levels": len(names),
        "n_tests": mask.n_tests,
        "cutoff": mask.cutoff,
        "alpha": cfg.alpha,
        "significant_pairs": int(mask.significant[iu].sum()),
        "undefined_pairs": int(np.isnan(obs.s[iu]).sum()),
        "trivial_roots": forest.trivial_root_count,
        "null_trivial_roots_mean": float(np.mean(null.trivial_root_counts)),
        "k": cfg.k,
        "groups": _group_table(d, a),
    })
    written["summary"] = out / "cofa_summary.json"
    return written


def cmd_cluster(cfg: RunConfig) -> dict:
    """Re-cluster from an existing distance matrix (e.g. to try another k)."""
    out = Path(cfg.out)
    d = load_prepared(cfg)
    values, names = F.matrix_from_csv(_require(out / "cofa_d.csv", "cofa").read_text())
    written = {}
    _write_clustering(cfg, d, F.DistanceMatrix(values, names), written)
    return written


def load_assignment(cfg: RunConfig) -> C.ClusterAssignment:
    return C.ClusterAssignment.from_csv(_require(Path(cfg.out) / "assignment.csv", "cofa").read_text())


def with_groups(d: Dataset, a: C.ClusterAssignment) -> Dataset:
    """Add the level clustering as a categorical predictor column."""
    mapping = a.mapping
    missing = [lv for lv in d.levels[d.target_name] if lv not in mapping]
    if missing:
        raise SchemaError(f"levels {missing} have no cluster assignment")
    names = tuple(str(g) for g in range(1, a.k + 1))
    codes = np.array([mapping[lv] - 1 for lv in d.levels[d.target_name]])[d[d.target_name]]
    return d.with_column(ColumnSchema(GROUP_COLUMN, CATEGORICAL, PREDICTOR), codes, names)


def procedures(cfg: RunConfig, a: C.ClusterAssignment) -> dict:
    """The five compared recipes, each ``(train, test, seed) -> scores``."""
    folds, rows = cfg.folds, cfg.min_stratum_rows

    def simple(include):
        def run(train, test, seed):
            X = encode(train, include=include)
            model = G.fit_pipeline(X, n_folds=folds, seed=seed)
            return G.predict(model, encode(test, encoding=X.encoding))
        return run

    def grouped(train, test, seed):
        return simple((GROUP_COLUMN,))(with_groups(train, a), with_groups(test, a), seed)

    def clusterwise(strat):
        def run(train, test, seed):
            s = train.target_name if strat == "target" else a
            m = G.fit_clusterwise(train, s, n_folds=folds, seed=seed, min_rows=rows)
            return G.predict(m, test)
        return run

    return {
        "baseline": simple(()),
        "target_indicators": lambda tr, te, s: simple((tr.target_name,))(tr, te, s),
        "cofa_group_indicators": grouped,
        "clusterwise_target": clusterwise("target"),
        "clusterwise_cofa": clusterwise("cofa"),
    }


def cmd_fit(cfg: RunConfig) -> dict:
    """Fit the five models on the full prepared data and serialise them."""
    out = _out(cfg)
    d = load_prepared(cfg)
    a = load_assignment(cfg)
    seed = stage_seed(cfg.seed, "fit")
    models = {}
    for name, include, data in (("baseline", (), d), ("target_indicators", (d.target_name,), d),
                                ("cofa_group_indicators", (GROUP_COLUMN,), with_groups(d, a))):
        models[name] = G.fit_pipeline(encode(data, include=include), n_folds=cfg.folds, seed=seed).to_dict()
    for name, strat in (("clusterwise_target", d.target_name), ("clusterwise_cofa", a)):
        models[name] = G.fit_clusterwise(d, strat, n_folds=cfg.folds, seed=seed,
                                         min_rows=cfg.min_stratum_rows).to_dict()
    return {"models": _write_json(out / "models.json", cfg, {"fold_seed": seed, "models": models})}


COMPARISONS = (
    ("target_indicators", "baseline", "auc"),
    ("cofa_group_indicators", "baseline", "auc"),
    ("target_indicators", "cofa_group_indicators", "auc"),
    ("clusterwise_target", "baseline", "weighted_auc:target"),
    ("clusterwise_cofa", "baseline", "weighted_auc:cofa"),
    ("clusterwise_target", "clusterwise_cofa", "auc"),
)


def cmd_evaluate(cfg: RunConfig) -> dict:
    """Repeated sub-sampling of all five procedures on shared splits, the
    baseline's weighted AUC on the same subgroups, and paired tests."""
    out = _out(cfg)
    d = load_prepared(cfg)
    a = load_assignment(cfg)
    procs = procedures(cfg, a)
    samples = E.run_procedures(d, procs, cfg.m, cfg.train_fraction, stage_seed(cfg.seed, "subsample"),
                               groupings={"target": d.target_name, "cofa": a}, n_jobs=cfg.n_jobs)
    report = E.EvaluationReport(samples, header={"config": cfg.hash, "seed": cfg.seed})
    for x, y, metric in COMPARISONS:
        report.compare(x, y, metric)
    return {
        "iterations": _write(out / "eval_iterations.csv", report.iterations_csv()),
        "ttests": _write(out / "eval_ttests.csv", report.ttest_csv()),
        "subgroups": _write(out / "eval_subgroups.csv", report.subgroup_csv()),
        "report": _write(out / "eval_report.json", report.to_json()),
    }


def cmd_simulate(cfg: RunConfig) -> dict:
    """Write a synthetic cohort with its schema and planted truth, ready to be
    used as ``data``/``schema`` input."""
    if cfg.synthetic is None:
        raise ConfigError("simulate needs a 'synthetic' spec")
    out = _out(cfg)
    d, truth = _load_input(cfg)
    written = {"data": out / "synthetic.csv", "schema": out / "synthetic_schema.json", "truth": out / "truth.csv"}
    d.to_csv(written["data"], comment=cfg.stamp)
    _write(written["schema"], json.dumps(schema_to_dict(d.schema), indent=2) + "\n")
    a = C.ClusterAssignment(tuple(truth.values()), tuple(truth), len(set(truth.values())))
    _write(written["truth"], a.to_csv(cfg.stamp))
    return written


STAGES = {
    "prepare": cmd_prepare,
    "cofa": cmd_cofa,
    "cluster": cmd_cluster,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
}
