import csv
import json
from pathlib import Path

import pytest

from cofa.cli import build_parser, main, resolve_config
from cofa.pipeline import ConfigError, RunConfig, stage_seed

SPEC = {
    "n_rows": 1500, "n_levels": 8, "planted_groups": [0, 0, 0, 1, 1, 2, 2, 2],
    "group_event_rates": [0.1, 0.17, 0.33], "seed": 5,
    "covariates": [{"name": "age", "distribution": "normal", "params": {"mean": 60, "sd": 15}, "coef": 0.02}],
}
FAST = ["--n-trees", "8", "--null-replicates", "5", "--m", "3", "--folds", "3", "--min-count", "20"]
ALL_STAGES = ("prepare", "cofa", "cluster", "fit", "evaluate")


def write_spec(tmp_path, spec=SPEC):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    return str(p)


def run_all(tmp_path, out, *extra):
    spec = write_spec(tmp_path)
    for stage in ALL_STAGES:
        assert main([stage, "--synthetic", spec, "--out", str(out), *FAST, *extra]) == 0, stage


def snapshot(out):
    return {p.name: p.read_bytes() for p in sorted(Path(out).iterdir())}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    run_all(tmp, tmp / "out")
    return tmp / "out"


class TestConfig:
    def test_defaults(self):
        c = RunConfig(data="sample")
        assert (c.min_count, c.n_trees, c.null_replicates, c.alpha, c.k, c.folds, c.m, c.train_fraction) == \
            (100, 100, 500, 0.05, 3, 5, 100, 0.8)

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": "sample", "n_trees": 7, "k": 4}))
        args = build_parser().parse_args(["cofa", "--config", str(cfg), "--k", "5"])
        c = resolve_config(args)
        assert (c.n_trees, c.k, c.null_replicates) == (7, 5, 500)

    def test_hash_ignores_output_and_workers(self):
        a = RunConfig(data="sample", out="x", n_jobs=1)
        assert a.hash == RunConfig(data="sample", out="y", n_jobs=8).hash
        assert a.hash != RunConfig(data="sample", seed=1).hash

    def test_stage_seeds_independent(self):
        assert stage_seed(0, "forest") != stage_seed(0, "null")
        assert stage_seed(0, "forest") == stage_seed(0, "forest")

    @pytest.mark.parametrize("bad", [{}, {"data": "sample", "alpha": 2}, {"data": "x.csv"},
                                     {"data": "sample", "bogus": 1}])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping(bad)


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        assert main(["prepare", "--data", "sample", "--alpha", "1.5", "--out", str(tmp_path)]) == 1
        with pytest.raises(SystemExit) as e:
            main(["nonsense"])
        assert e.value.code == 1
        with pytest.raises(SystemExit) as e:
            main(["prepare", "--n-trees", "many"])
        assert e.value.code == 1

    def test_missing_stage_input(self, tmp_path):
        assert main(["cofa", "--data", "sample", "--out", str(tmp_path / "empty")]) == 1

    def test_data_errors(self, tmp_path):
        schema = tmp_path / "s.json"
        schema.write_text(json.dumps({"columns": [
            {"name": "dx", "kind": "categorical", "role": "cluster-target"},
            {"name": "y", "kind": "binary-outcome", "role": "outcome"}]}))
        missing = ["prepare", "--data", str(tmp_path / "nope.csv"), "--schema", str(schema), "--out", str(tmp_path)]
        assert main(missing) == 2
        bad = tmp_path / "bad.csv"
        bad.write_text("dx,y\nA,1\nB,maybe\n")
        assert main(["prepare", "--data", str(bad), "--schema", str(schema), "--out", str(tmp_path)]) == 2

    def test_numerical_failure(self, tmp_path):
        spec = dict(SPEC, n_rows=300, group_event_rates=[0.004, 0.004, 0.004])
        path = write_spec(tmp_path, spec)
        out = str(tmp_path / "o")
        base = ["--synthetic", path, "--out", out, *FAST]
        for stage in ("prepare", "cofa"):
            assert main([stage, *base]) == 0
        assert main(["fit", *base]) == 3


class TestArtifacts:
    def test_files(self, pipeline_run):
        names = set(p.name for p in pipeline_run.iterdir())
        for f in ("prepared.csv", "schema.json", "prep_report.json", "truth.csv", "cofa_s.csv", "cofa_z.csv",
                  "cofa_d.csv", "cofa_mask.csv", "dendrogram.nwk", "assignment.csv", "groups.csv",
                  "cofa_summary.json", "models.json", "eval_iterations.csv", "eval_ttests.csv",
                  "eval_subgroups.csv", "eval_report.json"):
            assert f in names, f

    def test_stamped(self, pipeline_run):
        summary = json.loads((pipeline_run / "cofa_summary.json").read_text())
        stamp = f"config={summary['config_hash']}"
        for f in ("cofa_s.csv", "assignment.csv", "dendrogram.nwk", "groups.csv", "eval_iterations.csv"):
            assert stamp in (pipeline_run / f).read_text(), f
        assert json.loads((pipeline_run / "models.json").read_text())["config_hash"] == summary["config_hash"]

    def test_models_and_tests(self, pipeline_run):
        models = json.loads((pipeline_run / "models.json").read_text())["models"]
        assert set(models) == {"baseline", "target_indicators", "cofa_group_indicators",
                               "clusterwise_target", "clusterwise_cofa"}
        rows = list(csv.DictReader(ln for ln in (pipeline_run / "eval_ttests.csv").read_text().splitlines()
                                   if not ln.startswith("#")))
        assert len(rows) == 6

    def test_groups_table(self, pipeline_run):
        lines = [ln for ln in (pipeline_run / "groups.csv").read_text().splitlines() if not ln.startswith("#")]
        rows = list(csv.DictReader(lines))
        total = rows.pop()
        assert total["group"] == "all" and int(total["n_obs"]) == 1500
        assert sum(int(r["n_obs"]) for r in rows) == 1500
        assert sum(int(r["n_levels"]) for r in rows) == 8

    def test_recluster_from_distances(self, pipeline_run, tmp_path):
        before = (pipeline_run / "assignment.csv").read_text()
        assert main(["cluster", "--synthetic", write_spec(tmp_path), "--out", str(pipeline_run), *FAST]) == 0
        assert (pipeline_run / "assignment.csv").read_text() == before

    def test_sample_fixture_prepare(self, tmp_path):
        assert main(["prepare", "--data", "sample", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "prep_report.json").read_text())
        assert report["n_levels"] == 34

    def test_simulate(self, tmp_path):
        assert main(["simulate", "--synthetic", write_spec(tmp_path), "--out", str(tmp_path / "s")]) == 0
        assert (tmp_path / "s" / "truth.csv").exists()


def test_rerun_byte_identical_across_workers(tmp_path):
    run_all(tmp_path, tmp_path / "a")
    run_all(tmp_path, tmp_path / "b", "--n-jobs", "4")
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")
