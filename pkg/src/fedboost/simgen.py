"""Simulation scenarios: correlated ternary covariates, sparse true effects.

Covariates take values -1/0/1 with a uniform marginal.  Neighboring columns
agree with a target probability q, produced by copying the previous column
with probability rho = (q - 1/3) / (2/3) and redrawing uniformly otherwise
(plain copying with probability q would give agreement q + (1 - q)/3).
Binary outcomes follow a logistic model with intercept zero on the sparse
truth vector.

Random streams are derived as ``default_rng(SeedSequence([seed, replicate,
purpose]))`` with purpose 0 = training covariates, 1 = training outcome,
2 = cohort split, 3 = test covariates, 4 = test outcome, so replicates are
independent and individually reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

MODERATE = "moderate"
GROUPED = "grouped"

_PURPOSE_COVARIATES = 0
_PURPOSE_OUTCOME = 1
_PURPOSE_SPLIT = 2
_PURPOSE_TEST_COVARIATES = 3
_PURPOSE_TEST_OUTCOME = 4


class LayoutInfeasibleError(ValueError):
    pass


class IndivisibleSplitError(ValueError):
    pass


@dataclass
class Scenario:
    """One simulation setting; defaults are the desk-scale configuration."""

    name: str = "scenario"
    n: int = 500
    p: int = 250
    structure: str = GROUPED
    effects_count: int = 10
    effect_size: float = 1.0
    per_group: int = 1
    group_size: int = 5
    p_same_within: float = 0.75
    p_same_between: float = 0.5
    cohorts: int = 1
    seed: int = 0
    replicates: int = 1

    def __post_init__(self):
        if self.structure not in (MODERATE, GROUPED):
            raise ValueError(f"unknown structure {self.structure!r}")
        if self.n % self.cohorts != 0:
            raise IndivisibleSplitError(
                f"n={self.n} is not divisible into {self.cohorts} equal cohorts")
        if self.per_group not in (1, 2):
            raise ValueError("per_group must be 1 or 2")
        for q in (self.p_same_within, self.p_same_between):
            if not 1 / 3 <= q <= 1:
                raise ValueError(f"agreement probability {q} outside [1/3, 1]")
        place_effects(self)  # raises LayoutInfeasibleError early


def copy_probability(q: float) -> float:
    """Copy probability that yields exact agreement probability q."""
    return (q - 1.0 / 3.0) / (2.0 / 3.0)


def gen_covariates(scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    """n x p ternary matrix with the scenario's neighbor-agreement structure."""
    n, p = scenario.n, scenario.p
    fresh = rng.integers(-1, 2, size=(n, p)).astype(float)
    if p == 1:
        return fresh
    rho = np.zeros(p)
    for j in range(1, p):
        same_group = (scenario.structure == GROUPED
                      and j % scenario.group_size != 0)
        q = scenario.p_same_within if same_group else scenario.p_same_between
        rho[j] = copy_probability(q)
    copy = rng.random(size=(n, p)) < rho[None, :]
    x = fresh
    for j in range(1, p):
        x[:, j] = np.where(copy[:, j], x[:, j - 1], x[:, j])
    return x


def place_effects(scenario: Scenario) -> np.ndarray:
    """Deterministic sparse truth vector.

    Effects sit at the first position of consecutive groups (and the fourth
    as well when per_group is 2) until the requested count is reached.
    """
    beta = np.zeros(scenario.p)
    count, per = scenario.effects_count, scenario.per_group
    if count == 0:
        return beta
    if count % per != 0:
        raise LayoutInfeasibleError(f"{count} effects do not fill groups of {per}")
    offsets = (0,) if per == 1 else (0, 3)
    if per == 2 and scenario.group_size < 4:
        raise LayoutInfeasibleError("two effects need groups of at least 4")
    groups_needed = count // per
    if groups_needed * scenario.group_size > scenario.p:
        raise LayoutInfeasibleError(
            f"{count} effects need {groups_needed} groups of "
            f"{scenario.group_size}, but p={scenario.p}")
    positions = []
    for g in range(groups_needed):
        for off in offsets:
            positions.append(g * scenario.group_size + off)
    beta[positions] = scenario.effect_size
    gaps = np.diff(positions) - 1
    min_gap = 2 if per == 1 else 1
    if positions and (gaps < min_gap).any():
        raise LayoutInfeasibleError("effect positions too close together")
    return beta


def gen_outcome(x: np.ndarray, beta_true: np.ndarray,
                rng: np.random.Generator) -> np.ndarray:
    """Bernoulli outcomes from a logistic model with intercept zero."""
    prob = expit(x @ beta_true)
    return (rng.random(x.shape[0]) < prob).astype(float)


def split_cohorts(x: np.ndarray, y: np.ndarray, cohorts: int,
                  rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random partition into equally sized cohorts."""
    n = x.shape[0]
    if n % cohorts != 0:
        raise IndivisibleSplitError(f"{n} rows cannot split into {cohorts} cohorts")
    perm = rng.permutation(n)
    size = n // cohorts
    return [(x[perm[i * size:(i + 1) * size]], y[perm[i * size:(i + 1) * size]])
            for i in range(cohorts)]


def replicate_rng(scenario: Scenario, replicate: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        [scenario.seed, replicate, purpose]))


@dataclass
class ReplicateData:
    scenario: Scenario
    replicate: int
    x: np.ndarray
    y: np.ndarray
    beta_true: np.ndarray
    sites: list
    test_x: np.ndarray
    test_y: np.ndarray


def generate_replicate(scenario: Scenario, replicate: int) -> ReplicateData:
    """One training dataset, its cohort split, and a same-size test set."""
    beta_true = place_effects(scenario)
    x = gen_covariates(scenario, replicate_rng(scenario, replicate, _PURPOSE_COVARIATES))
    y = gen_outcome(x, beta_true, replicate_rng(scenario, replicate, _PURPOSE_OUTCOME))
    sites = split_cohorts(x, y, scenario.cohorts,
                          replicate_rng(scenario, replicate, _PURPOSE_SPLIT))
    test_x = gen_covariates(scenario,
                            replicate_rng(scenario, replicate, _PURPOSE_TEST_COVARIATES))
    test_y = gen_outcome(test_x, beta_true,
                         replicate_rng(scenario, replicate, _PURPOSE_TEST_OUTCOME))
    return ReplicateData(scenario, replicate, x, y, beta_true, sites, test_x, test_y)


def _data_frame(x: np.ndarray, y: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(x.astype(int),
                         columns=[f"x{j}" for j in range(1, x.shape[1] + 1)])
    frame["y"] = y.astype(int)
    return frame


def write_replicate(data: ReplicateData, out_dir) -> list[Path]:
    """Write site_<l>.csv per cohort plus truth.csv and test.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for l, (sx, sy) in enumerate(data.sites, start=1):
        path = out / f"site_{l}.csv"
        _data_frame(sx, sy).to_csv(path, index=False)
        written.append(path)
    truth = pd.DataFrame({"covariate": [f"x{j}" for j in range(1, data.scenario.p + 1)],
                          "beta_true": data.beta_true})
    truth_path = out / "truth.csv"
    truth.to_csv(truth_path, index=False)
    written.append(truth_path)
    test_path = out / "test.csv"
    _data_frame(data.test_x, data.test_y).to_csv(test_path, index=False)
    written.append(test_path)
    return written


def read_truth(path) -> np.ndarray:
    frame = pd.read_csv(path)
    return frame["beta_true"].to_numpy(dtype=float)


def standard_scenarios(n: int = 500, p: int = 250, cohorts: int = 1,
                       seed: int = 0, replicates: int = 1) -> dict[str, Scenario]:
    """The four study settings at the requested scale."""
    common = dict(n=n, p=p, cohorts=cohorts, seed=seed, replicates=replicates)
    return {
        "moderate_10strong": Scenario(name="moderate_10strong", structure=MODERATE,
                                      effects_count=10, effect_size=1.0,
                                      per_group=1, **common),
        "grouped_10strong_1per": Scenario(name="grouped_10strong_1per",
                                          structure=GROUPED, effects_count=10,
                                          effect_size=1.0, per_group=1, **common),
        "grouped_10strong_2per": Scenario(name="grouped_10strong_2per",
                                          structure=GROUPED, effects_count=10,
                                          effect_size=1.0, per_group=2, **common),
        "grouped_50weak_1per": Scenario(name="grouped_50weak_1per",
                                        structure=GROUPED, effects_count=50,
                                        effect_size=0.2, per_group=1, **common),
    }
