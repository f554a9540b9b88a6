"""Command-line entry point: ``cofa <stage> [options]``.

Settings resolve as defaults, then the JSON ``--config`` file, then
explicit flags. Exit codes: 0 success, 1 usage or configuration error,
2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .datamodel import IngestionError, SchemaError
from .evaluate import UndefinedAUC
from .glm import CVError
from .pipeline import STAGES, ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# flag -> (type, help); every flag mirrors a RunConfig field
FLAGS = {
    "data": (str, "input CSV, or 'sample' for the bundled ICD fixture"),
    "schema": (str, "JSON schema of the input CSV"),
    "synthetic": (str, "JSON file holding a synthetic cohort spec"),
    "target": (str, "categorical column whose levels are clustered"),
    "min_count": (int, "levels seen fewer times are merged into 'Other' (100)"),
    "n_trees": (int, "trees per forest (100)"),
    "min_split": (int, "smallest node that may split (20)"),
    "min_bucket": (int, "smallest child node (7)"),
    "max_depth": (int, "maximum tree depth (30)"),
    "complexity": (float, "minimum relative impurity improvement per split (0.001)"),
    "bootstrap": (_bool, "bootstrap rows for each tree (true)"),
    "null_replicates": (int, "permutation forests in the null (500)"),
    "reuse_forest_seed": (_bool, "null forests reuse the observed forest seed (false)"),
    "alpha": (float, "family-wise error rate of the pair tests (0.05)"),
    "k": (int, "number of groups cut from the dendrogram (3)"),
    "folds": (int, "cross-validation folds (5)"),
    "m": (int, "sub-sampling iterations (100)"),
    "train_fraction": (float, "training share of each split (0.8)"),
    "min_stratum_rows": (int, "strata smaller than this get an intercept-only model (50)"),
    "seed": (int, "master seed (0)"),
    "out": (str, "output directory (cofa-out)"),
    "n_jobs": (int, "worker threads; results do not depend on it (1)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cofa", description="Categorical co-frequency analysis pipeline.")
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for stage, fn in STAGES.items():
        p = sub.add_parser(stage, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="JSON file with RunConfig fields")
        for name, (typ, hlp) in FLAGS.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=hlp)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    settings: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        settings.update(loaded)
    for name in FLAGS:
        value = getattr(args, name)
        if value is None:
            continue
        if name == "synthetic":
            try:
                with open(value, encoding="utf-8") as fh:
                    value = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read synthetic spec {value}: {exc}") from None
        settings[name] = value
    if "data" in settings and "synthetic" in settings and args.data is not None and args.synthetic is None:
        settings.pop("synthetic")  # a flag outranks the file's choice of input
    if "synthetic" in settings and args.synthetic is not None and args.data is None:
        settings.pop("data", None)
    return RunConfig.from_mapping(settings)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        written = STAGES[args.stage](cfg)
    except ConfigError as exc:
        print(f"cofa {args.stage}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, SchemaError, FileNotFoundError) as exc:
        print(f"cofa {args.stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CVError, UndefinedAUC, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"cofa {args.stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for key, path in written.items():
        print(f"{key}\t{path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
