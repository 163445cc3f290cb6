"""Synthetic designs, the Monte Carlo driver, and bias/coverage reporting.

Covariates: three standard normals, one Bernoulli(0.5), and a three-level
categorical with equal probabilities. The response indicator follows a
logistic propensity in the covariates and the outcome is a unit-variance
normal around the design's mean function. Four designs vary how many
interaction terms enter the propensity index and the mean function.

Replication r of a run derives its own random stream from
(master_seed, r), so reports are bit-identical for a given seed at any
parallelism level. All methods within a replication share the dataset, the
outcome-model posterior draws, and the bootstrap weight sequence.
"""

from __future__ import annotations

import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .bart import BartConfig, run_bart_binary, run_bart_regression
from .correction import (
    MeanResponsePilots,
    MissingDataset,
    bootstrap_weight_matrix,
    credible_interval,
    run_mean_response,
)
from .pilots import (
    FeatureMap,
    PilotFit,
    fit_outcome_pilot,
    fit_propensity_logit,
    oracle_outcome_pilot,
    oracle_propensity_pilot,
    stack_pilots,
)
from .rng import RngStream, derive_stream, substream

ONEHOT_GROUPS = ((4, 5, 6),)  # expanded indicator columns of the categorical variable

# substream purposes within one replication
_DATA, _MAIN_CHAIN, _WEIGHTS, _OUTCOME_PILOT, _PI_CHAIN, _STACK = range(6)

SIM_METHODS = ("plugin", "onestep", "robart-logit", "robart-stacked", "robart-oracle")


def logistic(t):
    return special.expit(t)


def category_effect(x5):
    """Step effect of the three-level categorical covariate."""
    return 2.0 * (x5 == 1) - 1.0 * (x5 == 2) - 0.5 * (x5 == 3)


@dataclass(frozen=True)
class DesignSpec:
    """Propensity index e(x) and mean function m(x) on the raw covariates."""

    id: str
    e: Callable
    m: Callable
    mean_outcome: float  # analytic E[m(X)], verified against a Monte Carlo oracle


DESIGNS = {
    "I": DesignSpec(
        "I",
        e=lambda x: -0.2 * x[:, 0] + 0.4 * x[:, 0] * x[:, 2],
        m=lambda x: 1.0
        - 2.0 * x[:, 0]
        - 0.5 * x[:, 0] ** 2
        + x[:, 1]
        + x[:, 2]
        + x[:, 3]
        + category_effect(x[:, 4]),
        mean_outcome=7.0 / 6.0,
    ),
    "II": DesignSpec(
        "II",
        e=lambda x: -0.2 * x[:, 0] + 0.4 * x[:, 0] * x[:, 2],
        m=lambda x: 1.0
        + x[:, 0] * x[:, 1]
        + x[:, 0] * x[:, 2]
        + x[:, 1]
        + x[:, 3]
        + category_effect(x[:, 4]),
        mean_outcome=5.0 / 3.0,
    ),
    "III": DesignSpec(
        "III",
        e=lambda x: -0.2 * x[:, 0] + 0.4 * x[:, 0] * x[:, 2] + 0.4 * x[:, 1] * x[:, 2],
        m=lambda x: 1.0
        + x[:, 0] * x[:, 2]
        + x[:, 1] * x[:, 2]
        + x[:, 0]
        + x[:, 3]
        + category_effect(x[:, 4]),
        mean_outcome=5.0 / 3.0,
    ),
    "IV": DesignSpec(
        "IV",
        e=lambda x: -0.2 * x[:, 0] + 0.4 * x[:, 0] * x[:, 2] + 0.4 * x[:, 1] * x[:, 2],
        m=lambda x: 1.0
        + x[:, 0] * x[:, 2]
        + x[:, 1] * x[:, 2]
        + x[:, 1] * x[:, 3]
        + category_effect(x[:, 4]),
        mean_outcome=7.0 / 6.0,
    ),
}


def true_mean(design) -> float:
    """Analytic mean outcome of a design (frozen exact constants)."""
    spec = DESIGNS[design] if isinstance(design, str) else design
    return spec.mean_outcome


def gen_covariates(n: int, rng: RngStream) -> np.ndarray:
    """Raw covariate matrix (n, 5): three normals, one Bernoulli, one 3-level code."""
    if n < 1:
        raise ValueError(f"n must be >= 1 (got {n})")
    g = rng.generator
    x = np.empty((n, 5))
    x[:, 0:3] = g.standard_normal((n, 3))
    x[:, 3] = (g.random(n) < 0.5).astype(float)
    x[:, 4] = g.integers(1, 4, n).astype(float)
    return x


def expand_raw_covariates(x_raw: np.ndarray) -> np.ndarray:
    """Numeric design matrix for the estimators: one-hot expand the categorical."""
    cols = [x_raw[:, 0], x_raw[:, 1], x_raw[:, 2], x_raw[:, 3]]
    for level in (1.0, 2.0, 3.0):
        cols.append((x_raw[:, 4] == level).astype(float))
    return np.column_stack(cols)


@dataclass
class OracleTruth:
    """Simulation-only side table; never visible to the estimators."""

    y_full: np.ndarray
    pi: np.ndarray
    m: np.ndarray
    chi0: float


@dataclass
class SimulatedMissingData:
    data: MissingDataset
    truth: OracleTruth
    x_raw: np.ndarray


def gen_missing_data(n: int, design: DesignSpec, rng: RngStream) -> SimulatedMissingData:
    """Draw one dataset: full outcomes are generated, then masked to r = 1."""
    g = rng.generator
    x_raw = gen_covariates(n, rng)
    pi = logistic(design.e(x_raw))
    m = design.m(x_raw)
    r = (g.random(n) < pi).astype(np.int64)
    y_full = m + g.standard_normal(n)
    y = np.where(r == 1, y_full, np.nan)
    data = MissingDataset(y, r, expand_raw_covariates(x_raw), ONEHOT_GROUPS)
    return SimulatedMissingData(data, OracleTruth(y_full, pi, m, design.mean_outcome), x_raw)


# --------------------------------------------------------------------------
# Monte Carlo driver


@dataclass
class SimSettings:
    """Everything one replication needs besides the seed (picklable)."""

    bart: BartConfig = field(default_factory=lambda: BartConfig(num_trees=50, num_draws=1000, burn_in=250))
    pilot_bart: BartConfig = field(default_factory=lambda: BartConfig(num_trees=50, num_draws=300, burn_in=200))
    S: int = 1000
    alpha: float = 0.05
    clip_eps: float = 0.01
    ridge: float = 1e-8
    stack_folds: int = 5


def paper_scale_settings() -> SimSettings:
    """Full-size sampler profile (long runtimes; offline use)."""
    return SimSettings(
        bart=BartConfig(num_trees=200, num_draws=2000, burn_in=500),
        pilot_bart=BartConfig(num_trees=200, num_draws=500, burn_in=500),
        S=2000,
    )


def pilot_feature_map() -> FeatureMap:
    """Quadratic expansion with pairwise interactions used by the logit pilot."""
    return FeatureMap(onehot_groups=ONEHOT_GROUPS)


@dataclass
class MCReport:
    """Bias / coverage / interval-length summary of one (design, n) cell."""

    design: str
    n: int
    reps: int
    seed: int
    chi0: float
    methods: dict  # method -> {bias, bias_signed, cp, cp_se, cil, used_reps}
    failures: list
    runtime_seconds: float


def _method_pilots(
    method: str,
    sim: SimulatedMissingData,
    settings: SimSettings,
    streams: dict,
    cache: dict,
) -> MeanResponsePilots:
    data = sim.data
    if method == "plugin":
        return MeanResponsePilots()
    if method == "onestep":
        if "pi_draws" not in cache:
            cache["pi_draws"] = run_bart_binary(data.x, data.r, settings.bart, streams[_PI_CHAIN])
        return MeanResponsePilots(pi_draws=cache["pi_draws"])

    if method == "robart-oracle":
        return MeanResponsePilots(
            propensity=oracle_propensity_pilot(sim.truth.pi, settings.clip_eps),
            outcome=oracle_outcome_pilot(sim.truth.m),
        )

    if "outcome_pilot" not in cache:
        cache["outcome_pilot"] = fit_outcome_pilot(
            data.x,
            data.observed_y(),
            data.r == 1,
            "bart-mean",
            settings.pilot_bart,
            streams[_OUTCOME_PILOT],
        )
    if "logit_pilot" not in cache:
        cache["logit_pilot"] = fit_propensity_logit(
            data.x,
            data.r,
            pilot_feature_map(),
            ridge=settings.ridge,
            clip_eps=settings.clip_eps,
        )
    if method == "robart-logit":
        return MeanResponsePilots(propensity=cache["logit_pilot"], outcome=cache["outcome_pilot"])
    if method == "robart-stacked":
        if "stacked_pilot" not in cache:
            full_prob = run_bart_binary(
                data.x, data.r, settings.pilot_bart, substream(streams[_STACK], 0)
            ).fitted.mean(axis=0)
            flexible = PilotFit(
                kind="bart-mean",
                clip_eps=settings.clip_eps,
                table=full_prob,
                recipe={"bart_config": settings.pilot_bart},
            )
            cache["stacked_pilot"] = stack_pilots(
                [cache["logit_pilot"], flexible],
                settings.stack_folds,
                data.x,
                data.r,
                substream(streams[_STACK], 1),
                clip_eps=settings.clip_eps,
            )
        return MeanResponsePilots(propensity=cache["stacked_pilot"], outcome=cache["outcome_pilot"])
    raise ValueError(f"unknown simulation method {method!r} (expected one of {SIM_METHODS})")


def _run_replication(design_id, n, methods, settings, master_seed, rep):
    root = derive_stream(master_seed, rep)
    streams = {k: substream(root, k) for k in range(6)}
    sim = gen_missing_data(n, DESIGNS[design_id], streams[_DATA])
    data = sim.data
    obs = data.r == 1

    m_draws = run_bart_regression(
        data.x[obs], data.y[obs], settings.bart, streams[_MAIN_CHAIN], X_test=data.x
    )
    weights = bootstrap_weight_matrix(settings.S, n, streams[_WEIGHTS])

    cache: dict = {}
    out = {}
    for method in methods:
        pilots = _method_pilots(method, sim, settings, streams, cache)
        core = "plugin-bart" if method == "plugin" else ("onestep" if method == "onestep" else "robart")
        draws = run_mean_response(
            data, core, pilots, settings.bart, settings.S, root, m_draws=m_draws, weights=weights
        )
        summary = credible_interval(draws, settings.alpha)
        out[method] = {
            "post_mean": summary.mean,
            "lo": summary.lo,
            "hi": summary.hi,
            "length": summary.length,
            "covered": bool(summary.lo <= sim.truth.chi0 <= summary.hi),
        }
    return out


def _replication_task(args):
    design_id, n, methods, settings, master_seed, rep = args
    try:
        return rep, _run_replication(design_id, n, methods, settings, master_seed, rep), None
    except Exception:
        return rep, None, traceback.format_exc()


def run_mc(
    design: str,
    n: int,
    reps: int,
    methods,
    settings: SimSettings,
    master_seed: int,
    parallelism: int = 1,
) -> MCReport:
    """Replicated comparison of methods on one design; deterministic in the seed.

    Failed replications are excluded and recorded; more than 1% failures
    aborts the run.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1 (got {reps})")
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r} (expected one of {sorted(DESIGNS)})")
    methods = list(methods)
    for m in methods:
        if m not in SIM_METHODS:
            raise ValueError(f"unknown simulation method {m!r} (expected one of {SIM_METHODS})")
    start = time.perf_counter()
    tasks = [(design, n, methods, settings, master_seed, rep) for rep in range(reps)]
    results: list = [None] * reps
    errors: list = []
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for rep, res, err in pool.map(_replication_task, tasks):
                results[rep] = res
                if err is not None:
                    errors.append(f"rep {rep}: {err}")
    else:
        for task in tasks:
            rep, res, err = _replication_task(task)
            results[rep] = res
            if err is not None:
                errors.append(f"rep {rep}: {err}")

    if len(errors) > max(0.01 * reps, 0):
        raise RuntimeError(
            f"{len(errors)} of {reps} replications failed (>1%):\n" + "\n".join(errors[:3])
        )

    chi0 = true_mean(design)
    method_rows = {}
    for method in methods:
        means = np.array([r[method]["post_mean"] for r in results if r is not None])
        covered = np.array([r[method]["covered"] for r in results if r is not None], dtype=float)
        lengths = np.array([r[method]["length"] for r in results if r is not None])
        used = means.size
        signed = float(np.mean(means) - chi0)
        cp = float(np.mean(covered))
        method_rows[method] = {
            "bias": abs(signed),
            "bias_signed": signed,
            "cp": cp,
            "cp_se": math.sqrt(cp * (1.0 - cp) / used) if used else float("nan"),
            "cil": float(np.mean(lengths)),
            "used_reps": int(used),
        }
    return MCReport(
        design=design,
        n=n,
        reps=reps,
        seed=master_seed,
        chi0=chi0,
        methods=method_rows,
        failures=errors,
        runtime_seconds=time.perf_counter() - start,
    )


# --------------------------------------------------------------------------
# Reporting


_CSV_HEADER = "design,n,method,used_reps,bias,bias_signed,cp,cp_se,cil,chi0,seed"


def format_report(report, style: str = "markdown") -> str:
    """Render one report or a list of reports; CSV output is bit-stable."""
    reports = report if isinstance(report, (list, tuple)) else [report]
    if style == "csv":
        lines = [_CSV_HEADER]
        for rep in reports:
            for method, row in rep.methods.items():
                lines.append(
                    f"{rep.design},{rep.n},{method},{row['used_reps']},"
                    f"{row['bias']!r},{row['bias_signed']!r},{row['cp']!r},"
                    f"{row['cp_se']!r},{row['cil']!r},{rep.chi0!r},{rep.seed}"
                )
        return "\n".join(lines) + "\n"
    if style == "markdown":
        lines = []
        for rep in reports:
            lines.append(f"### Design {rep.design}, n={rep.n}, reps={rep.reps}, seed={rep.seed}")
            lines.append("")
            lines.append("| Method | Bias | CP | CP se | CIL |")
            lines.append("|---|---|---|---|---|")
            for method, row in rep.methods.items():
                lines.append(
                    f"| {method} | {row['bias']:.3f} | {row['cp']:.3f} "
                    f"| {row['cp_se']:.3f} | {row['cil']:.3f} |"
                )
            lines.append("")
        return "\n".join(lines)
    raise ValueError(f"unknown report style {style!r}")


def parse_report_csv(text: str) -> list:
    """Round-trip reader for format_report(..., 'csv')."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError("unrecognized report CSV header")
    rows = []
    for ln in lines[1:]:
        design, n, method, used, bias, signed, cp, cp_se, cil, chi0, seed = ln.split(",")
        rows.append(
            {
                "design": design,
                "n": int(n),
                "method": method,
                "used_reps": int(used),
                "bias": float(bias),
                "bias_signed": float(signed),
                "cp": float(cp),
                "cp_se": float(cp_se),
                "cil": float(cil),
                "chi0": float(chi0),
                "seed": int(seed),
            }
        )
    return rows
