"""Command-line surface: simulate, fit, ate, att, report.

Every run resolves its options as defaults < config file (--config) < explicit
flags, then writes the resolved options to a manifest alongside the results so
any run can be reproduced bit-exactly with ``--config <manifest>``. Exit
codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import time

import numpy as np
from scipy.special import expit

from . import __version__
from .bart import BartConfig, run_bart_binary, run_bart_regression
from .correction import (
    MeanResponsePilots,
    MissingDataset,
    TreatmentPilots,
    credible_interval,
    export_drawset_csv,
    run_att,
    run_ate,
    run_mean_response,
)
from .dataio import CsvSchema, load_csv, read_flat_config, trim_by_propensity, write_flat_config
from .pilots import (
    FeatureMap,
    PilotFit,
    fit_logit_irls,
    fit_outcome_pilot,
    fit_propensity_logit,
    predict_propensity,
    stack_pilots,
)
from .rng import derive_stream, substream
from .simlab import (
    SIM_METHODS,
    SimSettings,
    format_report,
    paper_scale_settings,
    parse_report_csv,
    run_mc,
)

_INT_KEYS = {
    "n", "reps", "seed", "parallelism", "num_trees", "draws", "burn_in",
    "pilot_draws", "pilot_burn_in", "S", "crossfit", "stack_folds",
}
_FLOAT_KEYS = {"alpha", "clip_eps", "ridge", "trim"}


def _coerce(key: str, value: str):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    return value


def _resolve(defaults: dict, config_path, cli_values: dict) -> dict:
    resolved = dict(defaults)
    if config_path:
        for key, value in read_flat_config(config_path).items():
            if key.startswith("meta.") or key == "command":
                continue
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = _coerce(key, value)
    for key, value in cli_values.items():
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(command: str, resolved: dict, results_path: str, runtime: float) -> None:
    manifest = {"command": command}
    manifest.update({k: resolved[k] for k in sorted(resolved)})
    manifest["meta.package_version"] = __version__
    manifest["meta.numpy_version"] = np.__version__
    manifest["meta.python"] = platform.python_version()
    manifest["meta.runtime_seconds"] = f"{runtime:.3f}"
    manifest["meta.results_path"] = results_path
    write_flat_config(f"{results_path}.manifest", manifest)


def _csv_list(text: str) -> list:
    return [token.strip() for token in text.split(",") if token.strip()]


# --------------------------------------------------------------------------
# simulate


_SIM_DEFAULTS = {
    "design": "II",
    "n": 250,
    "reps": 200,
    "methods": "plugin,robart-logit",
    "seed": 0,
    "out": "simulate_report.csv",
    "profile": "desk",
    "parallelism": 1,
    "alpha": 0.05,
    "clip_eps": 0.01,
    "num_trees": 0,  # 0 = take from profile
    "draws": 0,
    "burn_in": 0,
    "pilot_draws": 0,
    "pilot_burn_in": 0,
    "S": 0,
    "stack_folds": 5,
}


def _cmd_simulate(cfg: dict) -> None:
    settings = paper_scale_settings() if cfg["profile"] == "paper" else SimSettings()
    bart = settings.bart
    if cfg["num_trees"]:
        bart = dataclasses.replace(bart, num_trees=cfg["num_trees"])
    if cfg["draws"]:
        bart = dataclasses.replace(bart, num_draws=cfg["draws"])
    if cfg["burn_in"]:
        bart = dataclasses.replace(bart, burn_in=cfg["burn_in"])
    pilot = settings.pilot_bart
    if cfg["num_trees"]:
        pilot = dataclasses.replace(pilot, num_trees=cfg["num_trees"])
    if cfg["pilot_draws"]:
        pilot = dataclasses.replace(pilot, num_draws=cfg["pilot_draws"])
    if cfg["pilot_burn_in"]:
        pilot = dataclasses.replace(pilot, burn_in=cfg["pilot_burn_in"])
    settings = dataclasses.replace(
        settings,
        bart=bart,
        pilot_bart=pilot,
        S=cfg["S"] or bart.num_draws,
        alpha=cfg["alpha"],
        clip_eps=cfg["clip_eps"],
        stack_folds=cfg["stack_folds"],
    )
    methods = _csv_list(cfg["methods"])
    for m in methods:
        if m not in SIM_METHODS:
            raise ValueError(f"unknown method {m!r} (expected one of {SIM_METHODS})")
    start = time.perf_counter()
    report = run_mc(
        cfg["design"], cfg["n"], cfg["reps"], methods, settings, cfg["seed"], cfg["parallelism"]
    )
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        fh.write(format_report(report, "csv"))
    print(format_report(report, "markdown"))
    _write_manifest("simulate", cfg, cfg["out"], time.perf_counter() - start)


# --------------------------------------------------------------------------
# fit / ate / att


_FIT_DEFAULTS = {
    "input": "",
    "outcome": "y",
    "indicator": "r",
    "covariates": "",
    "categorical": "",
    "method": "robart",
    "pilot": "logit",
    "seed": 0,
    "num_trees": 200,
    "draws": 2000,
    "burn_in": 500,
    "pilot_draws": 500,
    "pilot_burn_in": 250,
    "S": 0,
    "alpha": 0.05,
    "clip_eps": 0.01,
    "ridge": 1e-8,
    "crossfit": 0,
    "stack_folds": 5,
    "trim": 0.0,
    "out": "",
    "draws_out": "",
}


def _bart_configs(cfg: dict) -> tuple:
    main = BartConfig(num_trees=cfg["num_trees"], num_draws=cfg["draws"], burn_in=cfg["burn_in"])
    pilot = BartConfig(
        num_trees=cfg["num_trees"], num_draws=cfg["pilot_draws"], burn_in=cfg["pilot_burn_in"]
    )
    return main, pilot


def _load_dataset(cfg: dict, kind: str):
    if not cfg["input"]:
        raise ValueError("an input CSV is required (--input)")
    if not cfg["covariates"]:
        raise ValueError("covariate columns are required (--covariates a,b,c)")
    schema = CsvSchema(
        outcome=cfg["outcome"],
        indicator=cfg["indicator"],
        covariates=tuple(_csv_list(cfg["covariates"])),
        categorical=tuple(_csv_list(cfg["categorical"])),
        kind=kind,
    )
    return load_csv(cfg["input"], schema)


def _propensity_pilot(cfg, data, labels, rng):
    fmap = FeatureMap(onehot_groups=data.onehot_groups)
    logit = fit_propensity_logit(
        data.x, labels, fmap, ridge=cfg["ridge"], clip_eps=cfg["clip_eps"]
    )
    if cfg["pilot"] == "logit":
        return logit
    if cfg["pilot"] == "stacked":
        _, pilot_bart = _bart_configs(cfg)
        prob = run_bart_binary(data.x, labels, pilot_bart, substream(rng, 0)).fitted.mean(axis=0)
        flexible = PilotFit(
            kind="bart-mean",
            clip_eps=cfg["clip_eps"],
            table=prob,
            recipe={"bart_config": pilot_bart},
        )
        return stack_pilots(
            [logit, flexible], cfg["stack_folds"], data.x, labels, substream(rng, 1),
            clip_eps=cfg["clip_eps"],
        )
    raise ValueError(f"unknown pilot {cfg['pilot']!r} (expected 'logit' or 'stacked')")


def _crossfit_mean_pilots(cfg, data: MissingDataset, rng) -> MeanResponsePilots:
    """K-fold cross-fitted propensity and outcome tables."""
    k = cfg["crossfit"]
    n = data.n
    perm = rng.generator.permutation(n)
    fold = np.empty(n, dtype=np.int64)
    fold[perm] = np.arange(n) % k
    fmap = FeatureMap(onehot_groups=data.onehot_groups).resolve(data.x)
    features = fmap.expand(data.x)
    _, pilot_bart = _bart_configs(cfg)
    pi_table = np.empty(n)
    m_table = np.empty(n)
    y_filled = data.observed_y()
    for fold_id in range(k):
        held = fold == fold_id
        train = ~held
        coef = fit_logit_irls(features[train], data.r[train], ridge=cfg["ridge"])
        pi_table[held] = expit(features[held] @ coef)
        train_obs = train & (data.r == 1)
        draws = run_bart_regression(
            data.x[train_obs],
            y_filled[train_obs],
            pilot_bart,
            substream(rng, 10 + fold_id),
            X_test=data.x[held],
        )
        m_table[held] = draws.fitted_test.mean(axis=0)
    return MeanResponsePilots(
        propensity=PilotFit(kind="logit-irls", clip_eps=cfg["clip_eps"], table=pi_table),
        outcome=PilotFit(kind="bart-mean", table=m_table),
    )


def _summary_json(cfg, estimand, summary, S, extra=None) -> str:
    record = {
        "method": cfg["method"],
        "estimand": estimand,
        "mean": summary.mean,
        "lo": summary.lo,
        "hi": summary.hi,
        "cil": summary.length,
        "S": S,
        "seed": cfg["seed"],
    }
    if extra:
        record.update(extra)
    return json.dumps(record, sort_keys=True) + "\n"


def _emit(cfg, command, text, draws, start) -> None:
    out = cfg["out"] or f"{command}_summary.json"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    if cfg["draws_out"]:
        export_drawset_csv(draws, cfg["draws_out"])
    _write_manifest(command, cfg, out, time.perf_counter() - start)


def _cmd_fit(cfg: dict) -> None:
    start = time.perf_counter()
    data = _load_dataset(cfg, "missing")
    main_bart, pilot_bart = _bart_configs(cfg)
    S = cfg["S"] or main_bart.num_draws
    root = derive_stream(cfg["seed"], 0)
    method = cfg["method"]

    pilots = MeanResponsePilots()
    if method == "onestep":
        pilots = MeanResponsePilots(
            pi_draws=run_bart_binary(data.x, data.r, main_bart, substream(root, 4))
        )
    elif method == "robart":
        if cfg["crossfit"] > 0:
            pilots = _crossfit_mean_pilots(cfg, data, substream(root, 5))
        else:
            pilots = MeanResponsePilots(
                propensity=_propensity_pilot(cfg, data, data.r, substream(root, 5)),
                outcome=fit_outcome_pilot(
                    data.x, data.observed_y(), data.r == 1, "bart-mean",
                    pilot_bart, substream(root, 3),
                ),
            )
    elif method != "plugin-bart":
        raise ValueError(f"unknown method {method!r}")

    draws = run_mean_response(data, method, pilots, main_bart, S, substream(root, 1))
    summary = credible_interval(draws, cfg["alpha"])
    _emit(cfg, "fit", _summary_json(cfg, "mean", summary, S), draws, start)


def _treatment_outcome_table(data, estimand, pilot_bart, rng) -> np.ndarray:
    n = data.n
    if estimand == "ate":
        xz = np.column_stack([data.d.astype(float), data.x])
        x_test = np.vstack(
            [np.column_stack([np.ones(n), data.x]), np.column_stack([np.zeros(n), data.x])]
        )
        draws = run_bart_regression(xz, data.y, pilot_bart, rng, X_test=x_test)
        means = draws.fitted_test.mean(axis=0)
        return np.column_stack([means[n:], means[:n]])  # (arm 0, arm 1)
    control = data.d == 0
    draws = run_bart_regression(data.x[control], data.y[control], pilot_bart, rng, X_test=data.x)
    m0 = draws.fitted_test.mean(axis=0)
    return np.column_stack([m0, m0])  # arm-1 column unused for the ATT


def _cmd_treatment(cfg: dict, estimand: str) -> None:
    start = time.perf_counter()
    data = _load_dataset(cfg, "treatment")
    main_bart, pilot_bart = _bart_configs(cfg)
    S = cfg["S"] or main_bart.num_draws
    root = derive_stream(cfg["seed"], 0)

    # trimming uses a logit propensity on the full sample, then everything
    # (pilots included) is refit on the trimmed sample
    fmap = FeatureMap(onehot_groups=data.onehot_groups)
    trim_fit = fit_propensity_logit(data.x, data.d, fmap, ridge=cfg["ridge"], clip_eps=1e-6)
    pi_for_trim = predict_propensity(trim_fit, X=data.x)
    data, n_bar = trim_by_propensity(data, pi_for_trim, cfg["trim"])

    method = cfg["method"]
    pilots = TreatmentPilots()
    if method == "onestep":
        pilots = TreatmentPilots(
            pi_draws=run_bart_binary(data.x, data.d, main_bart, substream(root, 4))
        )
    elif method == "robart":
        pilots = TreatmentPilots(
            propensity=_propensity_pilot(cfg, data, data.d, substream(root, 5)),
            outcome_table=_treatment_outcome_table(data, estimand, pilot_bart, substream(root, 3)),
        )
    elif method != "plugin-bart":
        raise ValueError(f"unknown method {method!r}")

    runner = run_ate if estimand == "ate" else run_att
    draws = runner(data, method, pilots, main_bart, S, substream(root, 1))
    summary = credible_interval(draws, cfg["alpha"])
    extra = {"n_bar": n_bar, "trim": cfg["trim"]}
    _emit(cfg, estimand, _summary_json(cfg, estimand, summary, S, extra), draws, start)


# --------------------------------------------------------------------------
# report


_REPORT_DEFAULTS = {"input": "", "style": "markdown"}


def _cmd_report(cfg: dict) -> None:
    if not cfg["input"]:
        raise ValueError("an input report CSV is required (--input)")
    with open(cfg["input"], encoding="utf-8") as fh:
        text = fh.read()
    if cfg["style"] == "csv":
        print(text, end="")
        return
    rows = parse_report_csv(text)
    print("| Design | n | Method | Bias | CP | CP se | CIL |")
    print("|---|---|---|---|---|---|---|")
    for row in rows:
        print(
            f"| {row['design']} | {row['n']} | {row['method']} | {row['bias']:.3f} "
            f"| {row['cp']:.3f} | {row['cp_se']:.3f} | {row['cil']:.3f} |"
        )


# --------------------------------------------------------------------------
# parser and dispatch


def _add_common(sub, keys: dict) -> None:
    for key, default in keys.items():
        flag = "--" + key.replace("_", "-")
        if key in _INT_KEYS:
            sub.add_argument(flag, type=int, default=None, help=f"default: {default}")
        elif key in _FLOAT_KEYS:
            sub.add_argument(flag, type=float, default=None, help=f"default: {default}")
        else:
            sub.add_argument(flag, type=str, default=None, help=f"default: {default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robart",
        description="Robust posterior inference for mean responses, ATEs, and ATTs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in (
        ("simulate", _SIM_DEFAULTS),
        ("fit", _FIT_DEFAULTS),
        ("ate", _FIT_DEFAULTS),
        ("att", _FIT_DEFAULTS),
        ("report", _REPORT_DEFAULTS),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="flat key=value config file")
        _add_common(p, defaults)
    return parser


_DISPATCH = {
    "simulate": (_SIM_DEFAULTS, _cmd_simulate),
    "fit": (_FIT_DEFAULTS, _cmd_fit),
    "ate": (_FIT_DEFAULTS, lambda cfg: _cmd_treatment(cfg, "ate")),
    "att": (_FIT_DEFAULTS, lambda cfg: _cmd_treatment(cfg, "att")),
    "report": (_REPORT_DEFAULTS, _cmd_report),
}


def cli_main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return 0 if code == 0 else 2
    defaults, handler = _DISPATCH[args.command]
    cli_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        resolved = _resolve(defaults, args.config, cli_values)
        handler(resolved)
    except Exception as exc:  # runtime failure -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
