"""Posterior draws for the mean response, ATE, and ATT, with optional debiasing.

Each retained draw of the outcome-model posterior is paired with a fresh
Bayesian-bootstrap weight vector. The plug-in method averages the fitted
mean function under the weights; the one-step method adds the inverse
propensity-weighted residual term (propensities drawn per-sweep from the
binary sampler); the debiased method uses fixed pilot estimates for the
weighting function and outcome mean and subtracts the equally-weighted
correction term from every draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bart import BartConfig, PosteriorDraws, run_bart_regression
from .pilots import PilotFit, predict_outcome, predict_propensity, riesz_representer
from .rng import RngStream, substream

METHODS = ("plugin-bart", "onestep", "robart")


class DatasetError(ValueError):
    """Dataset rows violate the construction invariants."""


class MethodError(ValueError):
    """Method/pilot combination is inconsistent."""


# --------------------------------------------------------------------------
# Datasets


@dataclass
class MissingDataset:
    """Rows (y, r, x): y is observed exactly when r = 1 (NaN otherwise)."""

    y: np.ndarray
    r: np.ndarray
    x: np.ndarray
    onehot_groups: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.r = np.asarray(self.r)
        self.x = np.asarray(self.x, dtype=float)
        if not np.all((self.r == 0) | (self.r == 1)):
            raise DatasetError("response indicator must be 0/1")
        self.r = self.r.astype(np.int64)
        if self.y.shape != self.r.shape or self.y.shape[0] != self.x.shape[0]:
            raise DatasetError("y, r, x row counts differ")
        if not self.r.any():
            raise DatasetError("no observed rows (r = 1 required somewhere)")
        obs = self.r == 1
        if not np.all(np.isfinite(self.y[obs])):
            raise DatasetError("observed outcomes must be finite")
        if np.any(np.isfinite(self.y[~obs])):
            raise DatasetError("unobserved rows must carry NaN outcomes")
        if not np.all(np.isfinite(self.x)):
            raise DatasetError("covariates must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def observed_y(self) -> np.ndarray:
        """y with unobserved entries zeroed; safe only inside r-weighted products."""
        return np.where(self.r == 1, np.nan_to_num(self.y), 0.0)


@dataclass
class TreatmentDataset:
    """Rows (y, d, x) with both treatment arms nonempty."""

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    onehot_groups: tuple = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.d = np.asarray(self.d)
        self.x = np.asarray(self.x, dtype=float)
        if not np.all((self.d == 0) | (self.d == 1)):
            raise DatasetError("treatment indicator must be 0/1")
        self.d = self.d.astype(np.int64)
        if self.y.shape != self.d.shape or self.y.shape[0] != self.x.shape[0]:
            raise DatasetError("y, d, x row counts differ")
        if not np.all(np.isfinite(self.y)):
            raise DatasetError("outcomes must be finite")
        if not np.all(np.isfinite(self.x)):
            raise DatasetError("covariates must be finite")
        if self.d.min() == self.d.max():
            raise DatasetError("both treatment arms must be nonempty")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class DrawSet:
    """Corrected posterior draws of a scalar estimand plus diagnostics."""

    draws: np.ndarray
    method: str
    estimand: str
    chi_raw: Optional[np.ndarray] = None  # per-draw uncorrected functional
    b_hat: Optional[np.ndarray] = None  # per-draw correction term
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if not np.all(np.isfinite(self.draws)):
            raise MethodError("draws contain non-finite values")
        if self.chi_raw is not None and self.b_hat is not None:
            if not np.array_equal(self.draws, np.asarray(self.chi_raw) - np.asarray(self.b_hat)):
                raise MethodError("stored components do not reproduce the corrected draws")

    @property
    def num_draws(self) -> int:
        return self.draws.size


@dataclass(frozen=True)
class CredibleSummary:
    mean: float
    lo: float
    hi: float
    length: float


@dataclass
class MeanResponsePilots:
    """Pilot inputs for run_mean_response; fields required depend on the method."""

    propensity: Optional[PilotFit] = None
    outcome: Optional[PilotFit] = None
    pi_draws: Optional[PosteriorDraws] = None


# --------------------------------------------------------------------------
# Elementary operations


def bayesian_bootstrap_weights(n: int, rng: RngStream) -> np.ndarray:
    """One Dirichlet(1,...,1) weight vector via normalized unit exponentials."""
    if n < 1:
        raise ValueError(f"n must be >= 1 (got {n})")
    e = rng.generator.exponential(1.0, n)
    return e / e.sum()


def bootstrap_weight_matrix(S: int, n: int, rng: RngStream) -> np.ndarray:
    """S independent weight vectors, one per posterior draw."""
    e = rng.generator.exponential(1.0, (S, n))
    return e / e.sum(axis=1, keepdims=True)


def chi_draw(m_s, gamma_hat, y, r, weights) -> float:
    """Weighted one-step functional of a single posterior draw.

    Rows with r = 0 contribute only the weighted model term; the residual
    product is identically zero there because the weighting function carries
    the factor r.
    """
    m_s = np.asarray(m_s, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.asarray(r)
    weights = np.asarray(weights, dtype=float)
    if not (m_s.shape == gamma_hat.shape == y.shape == r.shape == weights.shape):
        raise ValueError("chi_draw inputs must share one length")
    if np.any(gamma_hat[r == 0] != 0.0):
        raise ValueError("weighting function must vanish on unobserved rows")
    y_filled = np.where(r == 1, np.nan_to_num(y), 0.0)
    return float(np.sum(weights * (m_s + gamma_hat * (y_filled - m_s))))


def debias_term(m_s, m_hat, gamma_hat) -> float:
    """Equally weighted correction: mean of (gamma_hat - 1)(m_hat - m_s)."""
    m_s = np.asarray(m_s, dtype=float)
    m_hat = np.asarray(m_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    if not (m_s.shape == m_hat.shape == gamma_hat.shape):
        raise ValueError("debias_term inputs must share one length")
    return float(np.mean((gamma_hat - 1.0) * (m_hat - m_s)))


def oracle_bias_term(m_true, m_s, gamma_true) -> float:
    """Infeasible correction evaluated at the simulation truth."""
    m_true = np.asarray(m_true, dtype=float)
    m_s = np.asarray(m_s, dtype=float)
    gamma_true = np.asarray(gamma_true, dtype=float)
    return float(np.mean((gamma_true - 1.0) * (m_true - m_s)))


def aipw_point_estimate(data: MissingDataset, pi_hat, m_hat) -> float:
    """Doubly robust point estimate at the pilots (diagnostic centering)."""
    pi_hat = np.asarray(pi_hat, dtype=float)
    m_hat = np.asarray(m_hat, dtype=float)
    y_filled = data.observed_y()
    gamma = data.r / pi_hat
    return float(np.mean(m_hat + gamma * (y_filled - m_hat)))


def credible_interval(draws, alpha: float) -> CredibleSummary:
    """Equal-tail interval from empirical quantiles (linear interpolation)."""
    if isinstance(draws, DrawSet):
        x = draws.draws
    else:
        x = np.asarray(draws, dtype=float)
    if x.size < 2:
        raise ValueError(f"need at least 2 draws (got {x.size})")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1) (got {alpha})")
    lo, hi = np.quantile(x, [alpha / 2.0, 1.0 - alpha / 2.0])
    return CredibleSummary(float(np.mean(x)), float(lo), float(hi), float(hi - lo))


# --------------------------------------------------------------------------
# Draw-set drivers


def _check_budget(S: int, available: int, what: str) -> None:
    if S > available:
        raise MethodError(f"requested {S} draws but only {available} {what} are available")


def _per_draw_gamma(pi_draws: PosteriorDraws, indicator: np.ndarray, S: int, mode: str, pi_bar=None):
    _check_budget(S, pi_draws.num_draws, "propensity posterior draws")
    pi = np.clip(pi_draws.fitted[:S], 1e-10, 1.0 - 1e-10)
    if mode == "mean-response":
        return indicator[None, :] / pi
    if mode == "ate":
        return indicator[None, :] / pi - (1.0 - indicator[None, :]) / (1.0 - pi)
    if mode == "att":
        return indicator[None, :] / pi_bar - ((1.0 - indicator[None, :]) / pi_bar) * pi / (1.0 - pi)
    raise MethodError(f"unknown mode {mode!r}")


def run_mean_response(
    data: MissingDataset,
    method: str,
    pilots: Optional[MeanResponsePilots],
    bart_config: BartConfig,
    S: int,
    rng: RngStream,
    m_draws: Optional[PosteriorDraws] = None,
    weights: Optional[np.ndarray] = None,
    store_components: bool = True,
) -> DrawSet:
    """Posterior draws for the mean response under missing data.

    The outcome model is trained on the observed rows and evaluated at every
    row. `m_draws` and `weights` may be supplied to share one chain and one
    weight sequence across methods on the same dataset; otherwise they are
    generated here from substreams of `rng`.
    """
    if method not in METHODS:
        raise MethodError(f"unknown method {method!r} (expected one of {METHODS})")
    pilots = pilots or MeanResponsePilots()
    n = data.n
    obs = data.r == 1

    if m_draws is None:
        m_draws = run_bart_regression(
            data.x[obs], data.y[obs], bart_config, substream(rng, 0), X_test=data.x
        )
    if m_draws.fitted_test is None or m_draws.fitted_test.shape[1] != n:
        raise MethodError("outcome-model draws must be tabulated at every dataset row")
    _check_budget(S, m_draws.num_draws, "outcome posterior draws")
    m_mat = m_draws.fitted_test[:S]

    if weights is None:
        weights = bootstrap_weight_matrix(S, n, substream(rng, 1))
    else:
        weights = np.asarray(weights, dtype=float)
        _check_budget(S, weights.shape[0], "bootstrap weight vectors")
        weights = weights[:S]

    y_filled = data.observed_y()
    r = data.r

    if method == "plugin-bart":
        chi = np.sum(weights * m_mat, axis=1)
        return DrawSet(chi, method, "mean", meta={"S": S})

    if method == "onestep":
        if pilots.pi_draws is None:
            raise MethodError("onestep needs per-draw propensities (pilots.pi_draws)")
        gamma = _per_draw_gamma(pilots.pi_draws, r.astype(float), S, "mean-response")
        chi = np.sum(weights * (m_mat + gamma * (y_filled[None, :] - m_mat)), axis=1)
        return DrawSet(chi, method, "mean", meta={"S": S})

    if pilots.propensity is None or pilots.outcome is None:
        raise MethodError("robart needs both a propensity pilot and an outcome pilot")
    pi_hat = predict_propensity(pilots.propensity, X=data.x)
    gamma = riesz_representer("mean-response", r, pi_hat)
    m_hat = predict_outcome(pilots.outcome, X=data.x)
    chi = np.sum(weights * (m_mat + gamma[None, :] * (y_filled[None, :] - m_mat)), axis=1)
    b = np.mean((gamma[None, :] - 1.0) * (m_hat[None, :] - m_mat), axis=1)
    return DrawSet(
        chi - b,
        method,
        "mean",
        chi_raw=chi if store_components else None,
        b_hat=b if store_components else None,
        meta={"S": S},
    )


@dataclass
class TreatmentPilots:
    """Pilot inputs for the treatment-effect drivers.

    `outcome_table` holds pilot means per row: column 0 = control arm,
    column 1 = treated arm (only column 0 is used for the ATT).
    """

    propensity: Optional[PilotFit] = None
    outcome_table: Optional[np.ndarray] = None
    pi_draws: Optional[PosteriorDraws] = None


def run_ate(
    data: TreatmentDataset,
    method: str,
    pilots: Optional[TreatmentPilots],
    bart_config: BartConfig,
    S: int,
    rng: RngStream,
    m_draws: Optional[PosteriorDraws] = None,
    weights: Optional[np.ndarray] = None,
    store_components: bool = True,
) -> DrawSet:
    """Posterior draws for the average treatment effect.

    One outcome model is trained on (d, x) jointly and evaluated at
    (1, x_i), (0, x_i) for every row.
    """
    if method not in METHODS:
        raise MethodError(f"unknown method {method!r} (expected one of {METHODS})")
    pilots = pilots or TreatmentPilots()
    n = data.n
    d = data.d.astype(float)

    if m_draws is None:
        xz = np.column_stack([d, data.x])
        x_test = np.vstack(
            [np.column_stack([np.ones(n), data.x]), np.column_stack([np.zeros(n), data.x])]
        )
        m_draws = run_bart_regression(xz, data.y, bart_config, substream(rng, 0), X_test=x_test)
    if m_draws.fitted_test is None or m_draws.fitted_test.shape[1] != 2 * n:
        raise MethodError("ATE needs outcome draws tabulated at (1, x) and (0, x) per row")
    _check_budget(S, m_draws.num_draws, "outcome posterior draws")
    m1 = m_draws.fitted_test[:S, :n]
    m0 = m_draws.fitted_test[:S, n:]
    m_at_d = np.where(d[None, :] == 1.0, m1, m0)

    if weights is None:
        weights = bootstrap_weight_matrix(S, n, substream(rng, 1))
    else:
        weights = np.asarray(weights, dtype=float)
        _check_budget(S, weights.shape[0], "bootstrap weight vectors")
        weights = weights[:S]

    if method == "plugin-bart":
        tau = np.sum(weights * (m1 - m0), axis=1)
        return DrawSet(tau, method, "ate", meta={"S": S})

    if method == "onestep":
        if pilots.pi_draws is None:
            raise MethodError("onestep needs per-draw propensities (pilots.pi_draws)")
        gamma = _per_draw_gamma(pilots.pi_draws, d, S, "ate")
    else:
        if pilots.propensity is None or pilots.outcome_table is None:
            raise MethodError("robart needs a propensity pilot and an outcome pilot table")
        pi_hat = predict_propensity(pilots.propensity, X=data.x)
        gamma = riesz_representer("ate", d, pi_hat)[None, :]

    tau = np.sum(weights * (m1 - m0 + gamma * (data.y[None, :] - m_at_d)), axis=1)
    if method == "onestep":
        return DrawSet(tau, method, "ate", meta={"S": S})

    mhat0 = pilots.outcome_table[:, 0]
    mhat1 = pilots.outcome_table[:, 1]
    mhat_d = np.where(d == 1.0, mhat1, mhat0)
    # correction applies the effect functional to the fit difference (no outcome term)
    g1 = m1 - mhat1[None, :]
    g0 = m0 - mhat0[None, :]
    g_at_d = m_at_d - mhat_d[None, :]
    b = np.mean(g1 - g0 - gamma * g_at_d, axis=1)
    return DrawSet(
        tau - b,
        method,
        "ate",
        chi_raw=tau if store_components else None,
        b_hat=b if store_components else None,
        meta={"S": S},
    )


def run_att(
    data: TreatmentDataset,
    method: str,
    pilots: Optional[TreatmentPilots],
    bart_config: BartConfig,
    S: int,
    rng: RngStream,
    m_draws: Optional[PosteriorDraws] = None,
    weights: Optional[np.ndarray] = None,
    store_components: bool = True,
) -> DrawSet:
    """Posterior draws for the average treatment effect on the treated.

    The outcome model is trained on the control arm only and evaluated at
    every row; the treated fraction enters the weighting function directly.
    """
    if method not in METHODS:
        raise MethodError(f"unknown method {method!r} (expected one of {METHODS})")
    pilots = pilots or TreatmentPilots()
    n = data.n
    d = data.d.astype(float)
    control = data.d == 0
    if not control.any():
        raise DatasetError("control arm is empty")
    pi_bar = float(np.mean(d))

    if m_draws is None:
        m_draws = run_bart_regression(
            data.x[control], data.y[control], bart_config, substream(rng, 0), X_test=data.x
        )
    if m_draws.fitted_test is None or m_draws.fitted_test.shape[1] != n:
        raise MethodError("ATT needs control-arm outcome draws tabulated at every row")
    _check_budget(S, m_draws.num_draws, "outcome posterior draws")
    m0 = m_draws.fitted_test[:S]

    if weights is None:
        weights = bootstrap_weight_matrix(S, n, substream(rng, 1))
    else:
        weights = np.asarray(weights, dtype=float)
        _check_budget(S, weights.shape[0], "bootstrap weight vectors")
        weights = weights[:S]

    if method == "plugin-bart":
        num = np.sum(weights * d[None, :] * (data.y[None, :] - m0), axis=1)
        den = np.sum(weights * d[None, :], axis=1)
        return DrawSet(num / den, method, "att", meta={"S": S})

    if method == "onestep":
        if pilots.pi_draws is None:
            raise MethodError("onestep needs per-draw propensities (pilots.pi_draws)")
        gamma = _per_draw_gamma(pilots.pi_draws, d, S, "att", pi_bar=pi_bar)
    else:
        if pilots.propensity is None or pilots.outcome_table is None:
            raise MethodError("robart needs a propensity pilot and an outcome pilot table")
        pi_hat = predict_propensity(pilots.propensity, X=data.x)
        gamma = riesz_representer("att", d, pi_hat, pi_bar=pi_bar)[None, :]

    theta = np.sum(weights * gamma * (data.y[None, :] - m0), axis=1)
    if method == "onestep":
        return DrawSet(theta, method, "att", meta={"S": S})

    g0 = m0 - pilots.outcome_table[:, 0][None, :]
    b = np.mean((1.0 - gamma) * g0, axis=1)
    return DrawSet(
        theta - b,
        method,
        "att",
        chi_raw=theta if store_components else None,
        b_hat=b if store_components else None,
        meta={"S": S},
    )


def export_drawset_csv(draws: DrawSet, path) -> None:
    """CSV with columns draw_index, chi, b_hat, chi_corrected (full precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("draw_index,chi,b_hat,chi_corrected\n")
        chi_raw = draws.chi_raw if draws.chi_raw is not None else draws.draws
        b_hat = draws.b_hat if draws.b_hat is not None else np.zeros_like(draws.draws)
        for i, (c, b, out) in enumerate(zip(chi_raw, b_hat, draws.draws)):
            fh.write(f"{i},{float(c)!r},{float(b)!r},{float(out)!r}\n")
