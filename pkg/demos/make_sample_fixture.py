"""Regenerate the bundled sample ICD cohort (src/cofa/data/sample_icd.csv).

The cohort is synthetic. Each row is a hospital stay with a primary
diagnosis at the ICD "major" tier, a handful of patient covariates and a
30-day readmission flag. 33 majors are common enough to survive rare-level
bucketing; six more appear fewer than 100 times and are merged into
"Other" before the file is written, so the shipped table has 34 levels
(the state of a cohort after rare-level bucketing). Majors are planted in three
risk groups with readmission rates near 17%, 33% and 10%.

Run from the repository root:

    python3 demos/make_sample_fixture.py
"""
import json
from pathlib import Path

import numpy as np

from cofa.datamodel import (CovariateSpec, SyntheticSpec, bucket_rare_levels, generate_synthetic,
                            schema_to_dict)

OUT = Path(__file__).resolve().parent.parent / "src" / "cofa" / "data"

GROUP_1 = ["R10", "N17", "K85", "I48", "F31", "I63", "K80", "E08", "K57", "I50", "J44", "K92",
           "N39", "A41", "R07", "K56", "J18", "F43", "J96", "F25", "G45", "E11", "F39"]
GROUP_2 = ["F10"]
GROUP_3 = ["L03", "M12", "R42", "S72", "S22", "F33", "F32", "F11", "R55"]
RARE = ["I10", "K70", "E87", "N18", "G40", "D64"]  # bucketed into "Other"
RATES = [0.1687, 0.3304, 0.0985]


def build_spec(seed=2024):
    rng = np.random.default_rng(seed)
    names = GROUP_1 + GROUP_2 + GROUP_3 + RARE
    groups = [0] * len(GROUP_1) + [1] + [2] * len(GROUP_3) + [0] * len(RARE)
    weights = np.concatenate([
        rng.uniform(170, 420, len(GROUP_1)),
        [600.0],
        rng.uniform(120, 200, len(GROUP_3)),
        rng.uniform(35, 60, len(RARE)),
    ])
    covariates = [
        CovariateSpec("age", "uniform", {"low": 18, "high": 95}, 0.01),
        CovariateSpec("male", "bernoulli", {"p": 0.55}, 0.1),
        CovariateSpec("length_of_stay", "poisson", {"lam": 5}, 0.05),
        CovariateSpec("prior_admissions", "poisson", {"lam": 0.8}, 0.35),
        CovariateSpec("ed_visits", "poisson", {"lam": 1.2}, 0.15),
        CovariateSpec("insurance", "categorical",
                      {"levels": ["Medicaid", "Medicare", "Private", "Uninsured"],
                       "probs": [0.45, 0.3, 0.15, 0.1]},
                      [0.2, 0.1, -0.3, 0.0]),
    ]
    n_rows = 8000
    return SyntheticSpec(n_rows, len(names), groups, RATES, covariates, weights.tolist(), seed,
                         names, target_name="icd_major", outcome_name="readmit30")


def main():
    spec = build_spec()
    d = generate_synthetic(spec)
    counts = dict(zip(d.levels["icd_major"], d.level_counts("icd_major").tolist()))
    assert all(counts[c] >= 100 for c in GROUP_1 + GROUP_2 + GROUP_3), counts
    assert all(counts[c] < 100 for c in RARE), counts
    d = bucket_rare_levels(d, "icd_major", 100)
    assert len(d.levels["icd_major"]) == 34

    OUT.mkdir(parents=True, exist_ok=True)
    d.to_csv(OUT / "sample_icd.csv", comment="synthetic ICD-major readmission cohort; see demos/make_sample_fixture.py")
    (OUT / "sample_icd_schema.json").write_text(json.dumps(schema_to_dict(d.schema), indent=2) + "\n")
    truth = {name: g + 1 for name, g in zip(spec.names, spec.planted_groups) if name not in RARE}
    truth["Other"] = 1
    (OUT / "sample_icd_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    print(f"wrote {d.n_rows} rows, {len(counts)} raw majors, event rate {d.outcome.mean():.3f}")


if __name__ == "__main__":
    main()
