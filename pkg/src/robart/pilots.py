"""Pilot estimators plugged into the posterior correction.

Propensity pilots: ridge-stabilized logistic regression fit by iteratively
reweighted least squares on a quadratic feature expansion, a tabulated
posterior-mean fit from the binary tree sampler, a cross-validated convex
stack of candidates, or oracle values (simulation diagnostics). Outcome
pilots: tabulated posterior means from the tree sampler or least squares on
the expanded features. All propensity predictions are clipped away from 0/1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import special

from .bart import BartConfig, run_bart_binary, run_bart_regression
from .rng import RngStream, substream


class PilotError(ValueError):
    """Pilot fitting or prediction failed."""


class ConvergenceError(PilotError):
    """Iterative fitting did not converge."""


# --------------------------------------------------------------------------
# Feature expansion


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic quadratic expansion of a numeric covariate matrix.

    Columns listed in `onehot_groups` are indicator blocks from a single
    categorical variable; the first column of each block is dropped (the
    intercept absorbs it), squares are never formed from indicator or binary
    columns, and pairwise products skip within-block pairs (identically zero).
    `square_columns` freezes which columns get squares; leave None to resolve
    from the data at fit time.
    """

    include_raw: bool = True
    include_squares: bool = True
    include_pairwise: bool = True
    onehot_groups: tuple = ()
    intercept: bool = True
    square_columns: Optional[tuple] = None

    def _base_columns(self, p: int) -> list[int]:
        dropped = {group[0] for group in self.onehot_groups if len(group) > 1}
        return [j for j in range(p) if j not in dropped]

    def resolve(self, X) -> "FeatureMap":
        """Freeze the square-column choice against this matrix."""
        if self.square_columns is not None:
            return self
        X = np.asarray(X, dtype=float)
        in_group = {j for group in self.onehot_groups for j in group}
        squares = tuple(
            j
            for j in self._base_columns(X.shape[1])
            if j not in in_group and np.unique(X[:, j]).size > 2
        )
        return replace(self, square_columns=squares)

    def expand(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        fm = self.resolve(X)
        p = X.shape[1]
        base = fm._base_columns(p)
        group_of = {}
        for gi, group in enumerate(fm.onehot_groups):
            for j in group:
                group_of[j] = gi
        cols = []
        if fm.intercept:
            cols.append(np.ones(X.shape[0]))
        if fm.include_raw:
            cols.extend(X[:, j] for j in base)
        if fm.include_squares:
            cols.extend(X[:, j] ** 2 for j in fm.square_columns if j in base)
        if fm.include_pairwise:
            for a_idx, j in enumerate(base):
                for k in base[a_idx + 1 :]:
                    if j in group_of and group_of.get(k) == group_of[j]:
                        continue
                    cols.append(X[:, j] * X[:, k])
        if not cols:
            raise PilotError("feature map produced no columns")
        return np.column_stack(cols)


# --------------------------------------------------------------------------
# Pilot fits


@dataclass
class PilotFit:
    """A fitted pilot: parametric coefficients or tabulated per-row predictions."""

    kind: str  # logit-irls | stacked | bart-mean | oracle
    clip_eps: float = 0.01
    coefficients: Optional[np.ndarray] = None
    feature_map: Optional[FeatureMap] = None
    table: Optional[np.ndarray] = None  # per-row predictions; (n, 2) = (arm 0, arm 1)
    components: Optional[list] = None  # stacked: candidate fits
    weights: Optional[np.ndarray] = None  # stacked: convex weights
    recipe: Optional[dict] = None  # enough to refit on a row subset (stacking CV)

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 0.5:
            raise PilotError(f"clip_eps must be in (0, 0.5) (got {self.clip_eps})")


def fit_logit_irls(
    features,
    labels,
    ridge: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> np.ndarray:
    """Maximize the ridge-penalized Bernoulli log-likelihood with a logistic link.

    Newton steps with halving keep the penalized objective nondecreasing;
    convergence means the max abs score dropped below `tol`.
    """
    F = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if F.ndim != 2 or y.shape != (F.shape[0],):
        raise PilotError(f"features {F.shape} and labels {y.shape} are incompatible")
    if y.min() == y.max():
        raise PilotError("labels contain a single class")
    if ridge < 0:
        raise PilotError(f"ridge must be >= 0 (got {ridge})")
    n, q = F.shape
    if q >= n and ridge == 0.0:
        raise PilotError(f"{q} features with {n} rows needs ridge > 0")

    def penalized_loglik(beta, eta):
        # log(1 + e^eta) via the stable softplus
        return float(np.dot(y, eta) - np.logaddexp(0.0, eta).sum() - 0.5 * ridge * np.dot(beta, beta))

    beta = np.zeros(q)
    eta = F @ beta
    ll = penalized_loglik(beta, eta)
    for _ in range(max_iter):
        p = special.expit(eta)
        score = F.T @ (y - p) - ridge * beta
        if float(np.max(np.abs(score))) < tol:
            return beta
        w = p * (1.0 - p)
        if ridge == 0.0 and float(np.max(w)) < 1e-6:
            # every fitted probability is saturated: the unpenalized optimum
            # sits at infinity (separation)
            raise PilotError("separation detected (diverging coefficients); add ridge")
        w = np.clip(w, 1e-12, None)
        H = (F * w[:, None]).T @ F
        if ridge > 0:
            H[np.diag_indices_from(H)] += ridge
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError as exc:
            raise PilotError(f"singular IRLS system ({exc}); add ridge") from exc
        scale = 1.0
        for _ in range(50):
            cand = beta + scale * step
            eta_cand = F @ cand
            ll_cand = penalized_loglik(cand, eta_cand)
            if ll_cand >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            raise ConvergenceError("IRLS line search failed to make progress")
        if ll_cand < ll - 1e-9:
            raise AssertionError("IRLS objective decreased")
        beta, eta, ll = cand, eta_cand, ll_cand
        if float(np.max(np.abs(beta))) > 1e3:
            raise PilotError(
                "coefficients are diverging (likely separation); increase ridge"
            )
    p = special.expit(eta)
    grad_norm = float(np.max(np.abs(F.T @ (y - p) - ridge * beta)))
    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations (max |score| = {grad_norm:.3e})"
    )


def fit_propensity_logit(
    X,
    labels,
    feature_map: FeatureMap,
    ridge: float = 1e-8,
    clip_eps: float = 0.01,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> PilotFit:
    """Quadratic logistic-regression propensity pilot on the expanded features."""
    fm = feature_map.resolve(X)
    coef = fit_logit_irls(fm.expand(X), labels, ridge=ridge, tol=tol, max_iter=max_iter)
    return PilotFit(
        kind="logit-irls",
        clip_eps=clip_eps,
        coefficients=coef,
        feature_map=fm,
        recipe={"ridge": ridge, "tol": tol, "max_iter": max_iter},
    )


def oracle_propensity_pilot(pi_values, clip_eps: float = 0.01) -> PilotFit:
    return PilotFit(kind="oracle", clip_eps=clip_eps, table=np.asarray(pi_values, dtype=float))


def predict_propensity(fit: PilotFit, X=None, row_ids=None) -> np.ndarray:
    """Propensity predictions clipped into [clip_eps, 1 - clip_eps].

    Tabulated pilots predict at `row_ids` (default: every tabulated row);
    parametric pilots expand X through the stored feature map.
    """
    if fit.kind == "stacked":
        preds = [predict_propensity(c, X, row_ids) for c in fit.components]
        raw = np.tensordot(fit.weights, np.vstack(preds), axes=1)
    elif fit.table is not None:
        table = fit.table
        if row_ids is None:
            raw = table.copy()
        else:
            row_ids = np.asarray(row_ids)
            if row_ids.size and (row_ids.min() < 0 or row_ids.max() >= table.shape[0]):
                raise PilotError(
                    f"unknown row id for tabulated pilot (valid range 0..{table.shape[0] - 1})"
                )
            raw = table[row_ids]
    else:
        if X is None:
            raise PilotError(f"{fit.kind} pilot needs covariates to predict")
        raw = special.expit(fit.feature_map.expand(X) @ fit.coefficients)
        if row_ids is not None:
            raw = raw[np.asarray(row_ids)]
    return np.clip(raw, fit.clip_eps, 1.0 - fit.clip_eps)


def riesz_representer(mode: str, indicator, pi_hat, pi_bar: Optional[float] = None) -> np.ndarray:
    """Weight function of the target functional.

    mean-response: r / pi_hat(x); ate: d/pi_hat - (1-d)/(1-pi_hat);
    att: d/pi_bar - ((1-d)/pi_bar) * pi_hat/(1-pi_hat) with pi_bar the
    sample treated fraction.
    """
    ind = np.asarray(indicator, dtype=float)
    pi = np.asarray(pi_hat, dtype=float)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise PilotError("propensity values must lie strictly inside (0, 1)")
    if mode == "mean-response":
        return ind / pi
    if mode == "ate":
        return ind / pi - (1.0 - ind) / (1.0 - pi)
    if mode == "att":
        if pi_bar is None or not 0.0 < pi_bar < 1.0:
            raise PilotError(f"att mode needs pi_bar in (0, 1) (got {pi_bar})")
        return ind / pi_bar - ((1.0 - ind) / pi_bar) * (pi / (1.0 - pi))
    raise PilotError(f"unknown riesz mode {mode!r}")


# --------------------------------------------------------------------------
# Outcome pilot


def fit_outcome_pilot(
    X,
    y,
    observed,
    method: str,
    bart_config: Optional[BartConfig],
    rng: Optional[RngStream],
    feature_map: Optional[FeatureMap] = None,
    ridge: float = 0.0,
) -> PilotFit:
    """Pilot for the conditional outcome mean, tabulated or parametric.

    Trains on the observed arm (rows where `observed` is true) and, for
    'bart-mean', tabulates the posterior-mean fit at every row of X.
    'ols-expansion' does least squares on the expanded features.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    obs = np.asarray(observed, dtype=bool)
    if not obs.any():
        raise PilotError("observed arm is empty")
    y_obs = y[obs]
    if not np.all(np.isfinite(y_obs)):
        raise PilotError("observed outcomes contain non-finite values")

    if method == "bart-mean":
        if bart_config is None or rng is None:
            raise PilotError("bart-mean outcome pilot needs a sampler config and rng")
        draws = run_bart_regression(X[obs], y_obs, bart_config, rng, X_test=X)
        return PilotFit(kind="bart-mean", table=draws.fitted_test.mean(axis=0))
    if method == "ols-expansion":
        fm = (feature_map or FeatureMap()).resolve(X)
        F = fm.expand(X)
        F_obs = F[obs]
        if ridge > 0:
            H = F_obs.T @ F_obs
            H[np.diag_indices_from(H)] += ridge
            coef = np.linalg.solve(H, F_obs.T @ y_obs)
        else:
            coef, _, rank, _ = np.linalg.lstsq(F_obs, y_obs, rcond=None)
            if rank < F.shape[1]:
                raise PilotError(
                    f"rank-deficient expansion (rank {rank} of {F.shape[1]}); add ridge"
                )
        return PilotFit(kind="ols-expansion", coefficients=coef, feature_map=fm)
    raise PilotError(f"unknown outcome pilot method {method!r}")


def oracle_outcome_pilot(m_values) -> PilotFit:
    return PilotFit(kind="oracle", table=np.asarray(m_values, dtype=float))


def predict_outcome(fit: PilotFit, X=None, row_ids=None) -> np.ndarray:
    """Outcome-pilot predictions (no clipping)."""
    if fit.table is not None:
        if row_ids is None:
            return fit.table.copy()
        row_ids = np.asarray(row_ids)
        if row_ids.size and (row_ids.min() < 0 or row_ids.max() >= fit.table.shape[0]):
            raise PilotError(
                f"unknown row id for tabulated pilot (valid range 0..{fit.table.shape[0] - 1})"
            )
        return fit.table[row_ids]
    if X is None:
        raise PilotError(f"{fit.kind} pilot needs covariates to predict")
    pred = fit.feature_map.expand(X) @ fit.coefficients
    if row_ids is not None:
        pred = pred[np.asarray(row_ids)]
    return pred


# --------------------------------------------------------------------------
# Stacking


def _candidate_oof_predictions(
    fit: PilotFit, X: np.ndarray, labels: np.ndarray, fold_ids: np.ndarray, rng: RngStream
) -> np.ndarray:
    """Out-of-fold probability predictions, refitting the candidate per fold."""
    n = labels.size
    out = np.empty(n)
    for k in range(int(fold_ids.max()) + 1):
        held = fold_ids == k
        train = ~held
        if labels[train].min() == labels[train].max():
            raise PilotError(f"fold {k} leaves a single-class training set; use fewer folds")
        if fit.kind == "logit-irls":
            coef = fit_logit_irls(
                fit.feature_map.expand(X)[train],
                labels[train],
                ridge=fit.recipe["ridge"],
                tol=fit.recipe["tol"],
                max_iter=fit.recipe["max_iter"],
            )
            out[held] = special.expit(fit.feature_map.expand(X)[held] @ coef)
        elif fit.kind == "bart-mean":
            draws = run_bart_binary(
                X[train], labels[train], fit.recipe["bart_config"], substream(rng, k), X_test=X[held]
            )
            out[held] = draws.fitted_test.mean(axis=0)
        elif fit.kind == "oracle":
            out[held] = fit.table[held]
        else:
            raise PilotError(f"cannot cross-validate pilot kind {fit.kind!r}")
    return out


def _weight_grid(n_candidates: int, step: int = 100):
    """All convex weight vectors on the 1/step grid, lexicographic order."""
    if n_candidates == 2:
        for i in range(step + 1):
            yield (i / step, (step - i) / step)
    elif n_candidates == 3:
        for i in range(step + 1):
            for j in range(step + 1 - i):
                yield (i / step, j / step, (step - i - j) / step)
    else:
        raise PilotError(f"stacking supports 2 or 3 candidates (got {n_candidates})")


def stack_pilots(
    candidates: list,
    folds: int,
    X,
    labels,
    rng: RngStream,
    clip_eps: float = 0.01,
) -> PilotFit:
    """Convex stack of propensity pilots minimizing K-fold CV log-loss.

    Weights come from an exhaustive 0.01-step grid over the simplex; ties go
    to the first (lexicographically lowest-index) minimizer. The returned
    pilot predicts with the full-data candidate fits.
    """
    if len(candidates) < 2:
        raise PilotError("stacking needs at least 2 candidates")
    if folds < 2:
        raise PilotError(f"folds must be >= 2 (got {folds})")
    X = np.asarray(X, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = y.size
    perm = rng.generator.permutation(n)
    fold_ids = np.empty(n, dtype=np.int64)
    fold_ids[perm] = np.arange(n) % folds

    oof = np.vstack(
        [
            _candidate_oof_predictions(c, X, y, fold_ids, substream(rng, 100 + ci))
            for ci, c in enumerate(candidates)
        ]
    )
    best_w, best_loss = None, math.inf
    for w in _weight_grid(len(candidates)):
        p = np.clip(np.tensordot(np.asarray(w), oof, axes=1), 1e-12, 1.0 - 1e-12)
        loss = -float(np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
        if loss < best_loss - 1e-15:
            best_loss, best_w = loss, w
    return PilotFit(
        kind="stacked",
        clip_eps=clip_eps,
        components=list(candidates),
        weights=np.asarray(best_w),
    )
