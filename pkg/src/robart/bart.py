"""Sum-of-trees posterior sampler.

Continuous outcomes use a Gaussian likelihood with Bayesian backfitting:
each tree's structure is updated by Metropolis-Hastings on the integrated
(leaf-values-marginalized) likelihood of its partial residuals, then leaf
heights and the noise scale are drawn from their conjugate conditionals.
Binary outcomes use probit latent-variable augmentation with unit noise
scale; emitted values are probabilities on the normal-CDF link.

Tree-structure prior: a node at depth l is internal with probability
``a * (1 + l)^-b``; the split variable is drawn from a simplex vector `s`
(optionally given a sparse Dirichlet hyperprior), and the split value is
uniform among the observed values of that variable within the node that
leave both children non-degenerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special, stats

from .rng import RngStream, truncated_normal_vector
from .trees import Forest, SplitRule, Tree, leaf_assignments, split_value_candidates

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class BartConfig:
    """Sampler configuration; defaults follow the standard sum-of-trees setup."""

    num_trees: int = 200
    num_draws: int = 2000
    burn_in: int = 500
    depth_split_base: float = 0.95
    depth_split_power: float = 2.0
    sigma_prior_df: float = 3.0
    sigma_prior_quantile: float = 0.9
    leaf_sd_k: float = 2.0
    sparse: bool = True
    move_probs: tuple = (0.4, 0.4, 0.2)  # (grow, prune, change)
    min_node_size: int = 1
    thin: int = 1
    constant_outcome_jitter: float = 0.0  # 0 disables; >0 = sd of jitter added to a constant y

    def validate(self) -> None:
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1 (got {self.num_trees})")
        if self.num_draws < 1:
            raise ValueError(f"num_draws must be >= 1 (got {self.num_draws})")
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be >= 0 (got {self.burn_in})")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1 (got {self.thin})")
        if self.min_node_size < 1:
            raise ValueError(f"min_node_size must be >= 1 (got {self.min_node_size})")
        if not 0.0 < self.depth_split_base < 1.0:
            raise ValueError(f"depth_split_base must be in (0,1) (got {self.depth_split_base})")
        if self.depth_split_power < 0.0:
            raise ValueError(f"depth_split_power must be >= 0 (got {self.depth_split_power})")
        mp = np.asarray(self.move_probs, dtype=float)
        if mp.shape != (3,) or np.any(mp < 0) or abs(mp.sum() - 1.0) > 1e-12:
            raise ValueError(f"move_probs must be 3 nonnegative values summing to 1 (got {self.move_probs})")
        if (mp[0] > 0) != (mp[1] > 0):
            raise ValueError("grow and prune probabilities must be both zero or both positive")
        if not self.leaf_sd_k > 0:
            raise ValueError(f"leaf_sd_k must be > 0 (got {self.leaf_sd_k})")
        if not self.sigma_prior_df > 0:
            raise ValueError(f"sigma_prior_df must be > 0 (got {self.sigma_prior_df})")
        if not 0.0 < self.sigma_prior_quantile < 1.0:
            raise ValueError(f"sigma_prior_quantile must be in (0,1) (got {self.sigma_prior_quantile})")


@dataclass
class BartState:
    """Mutable chain state. Owned by a single chain; never shared across threads."""

    forest: Forest
    sigma: float
    split_probs: np.ndarray
    sparsity_theta: float
    residuals: np.ndarray  # centered outcome minus all tree fits, training rows
    x_full: np.ndarray  # training rows stacked above prediction-only rows
    n_train: int
    leaf_sd: float
    sigma_prior_df: float
    sigma_prior_scale: float
    config: BartConfig
    assigns: list = field(default_factory=list)  # per tree: leaf node id per row of x_full
    fits: list = field(default_factory=list)  # per tree: fitted contribution at training rows
    move_stats: dict = field(default_factory=dict)


@dataclass
class PosteriorDraws:
    """Retained posterior draws on the outcome (or probability) scale."""

    fitted: np.ndarray  # (S, n_train)
    sigma: Optional[np.ndarray]  # (S,), None for binary outcomes
    acceptance: dict
    fitted_test: Optional[np.ndarray] = None  # (S, n_test) when prediction rows were given

    @property
    def num_draws(self) -> int:
        return self.fitted.shape[0]


# --------------------------------------------------------------------------
# Priors and marginal likelihood


def _depth_split_prob(config: BartConfig, depth: int) -> float:
    return config.depth_split_base * (1.0 + depth) ** (-config.depth_split_power)


def log_tree_prior(tree: Tree, config: BartConfig, split_probs, X) -> float:
    """Log prior mass of a tree's structure given the observed covariates.

    Internal node at depth l: ``a(1+l)^-b * s[var] / n_candidates(node, var)``;
    leaf at depth l: ``1 - a(1+l)^-b``. Returns -inf for a tree whose rules are
    not reachable from the observed split candidates.
    """
    s = np.asarray(split_probs, dtype=float)
    X = np.asarray(X, dtype=float)
    total = 0.0
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        d = _depth_split_prob(config, tree.depth[node])
        if tree.is_leaf(node):
            total += math.log1p(-d)
            continue
        j = tree.var[node]
        cands = split_value_candidates(X[rows, j], config.min_node_size)
        if cands.size == 0 or s[j] <= 0.0:
            return -math.inf
        total += math.log(d) + math.log(s[j]) - math.log(cands.size)
        go_left = X[rows, j] <= tree.threshold[node]
        stack.append((tree.left[node], rows[go_left]))
        stack.append((tree.right[node], rows[~go_left]))
    return total


def _leaf_marginal_core(n: float, rsum: float, sigma2: float, smu2: float) -> float:
    # terms of the leaf marginal likelihood that change under structure moves
    denom = sigma2 + n * smu2
    return 0.5 * math.log(sigma2 / denom) + smu2 * rsum * rsum / (2.0 * sigma2 * denom)


def integrated_leaf_loglik(residuals_by_leaf, sigma: float, leaf_sd: float) -> float:
    """Log marginal likelihood of per-leaf residuals with leaf means integrated out.

    Each leaf contributes ``log Int prod_i N(r_i; mu, sigma^2) N(mu; 0, leaf_sd^2) dmu``;
    an empty leaf contributes 0.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0 (got {sigma})")
    if not leaf_sd > 0:
        raise ValueError(f"leaf_sd must be > 0 (got {leaf_sd})")
    sigma2 = sigma * sigma
    smu2 = leaf_sd * leaf_sd
    total = 0.0
    for r in residuals_by_leaf:
        r = np.asarray(r, dtype=float)
        n = r.size
        if n == 0:
            continue
        total += (
            -0.5 * n * (_LOG_2PI + math.log(sigma2))
            - float(np.dot(r, r)) / (2.0 * sigma2)
            + _leaf_marginal_core(n, float(r.sum()), sigma2, smu2)
        )
    return total


# --------------------------------------------------------------------------
# Structure moves


def _valid_var_mask(state: BartState, rows_train: np.ndarray) -> np.ndarray:
    """Boolean mask of variables with at least one usable split on these rows."""
    X = state.x_full
    mns = state.config.min_node_size
    if rows_train.size < 2 * mns:
        return np.zeros(X.shape[1], dtype=bool)
    sub = X[rows_train]
    if mns == 1:
        # a split exists exactly when the column is not constant on the node
        return sub.min(axis=0) < sub.max(axis=0)
    return np.array(
        [split_value_candidates(sub[:, j], mns).size > 0 for j in range(X.shape[1])]
    )


def _candidates_for(state: BartState, rows_train: np.ndarray, j: int) -> np.ndarray:
    X = state.x_full
    mns = state.config.min_node_size
    if mns == 1:
        vals = np.unique(X[rows_train, j])
        return vals[:-1]
    return split_value_candidates(X[rows_train, j], mns)


def _pick_var(g, s: np.ndarray, valid_mask: np.ndarray):
    """Index drawn proportionally to s restricted to the valid variables."""
    weights = np.where(valid_mask, s, 0.0)
    total = float(weights.sum())
    if total <= 0.0:
        return None, 0.0
    cum = np.cumsum(weights)
    j = int(np.searchsorted(cum, g.random() * total, side="right"))
    return min(j, s.size - 1), total


def mh_tree_update(
    state: BartState, tree_index: int, rng: RngStream, partial: Optional[np.ndarray] = None
) -> bool:
    """One grow/prune/change Metropolis-Hastings step on a tree's structure.

    Operates on the tree's partial residuals (requires the residual cache to be
    current; `partial` may be supplied when the caller already has it). On
    acceptance the structure and row assignments are updated and the tree's
    leaf values are stale until the next leaf update. Impossible proposals
    count as rejections.
    """
    g = rng.generator
    cfg = state.config
    tree = state.forest.trees[tree_index]
    assign = state.assigns[tree_index]
    n_train = state.n_train
    if partial is None:
        partial = state.residuals + state.fits[tree_index]
    sigma2 = state.sigma * state.sigma
    smu2 = state.leaf_sd * state.leaf_sd
    s = state.split_probs
    p_grow, p_prune, _p_change = cfg.move_probs

    u_move = g.random()
    if u_move < p_grow:
        move = "grow"
    elif u_move < p_grow + p_prune:
        move = "prune"
    else:
        move = "change"
    stats_entry = state.move_stats.setdefault(move, [0, 0])
    stats_entry[0] += 1

    if move == "grow":
        counts_by_node = np.bincount(assign[:n_train], minlength=tree.node_count)
        mns = cfg.min_node_size
        growable = [leaf for leaf in tree.leaf_ids() if counts_by_node[leaf] >= 2 * mns]
        if not growable:
            return False
        leaf = growable[g.integers(len(growable))]
        rows_full = np.flatnonzero(assign == leaf)
        rows_train = rows_full[: np.searchsorted(rows_full, n_train)]
        valid_mask = _valid_var_mask(state, rows_train)
        j, total_weight = _pick_var(g, s, valid_mask)
        if j is None:
            return False
        cands = _candidates_for(state, rows_train, j)
        value = float(cands[g.integers(cands.size)])

        go_left = state.x_full[rows_full, j] <= value
        left_train = go_left[: rows_train.size]
        part_leaf = partial[rows_train]
        sum_all = float(part_leaf.sum())
        sum_left = float(part_leaf[left_train].sum())
        n_all = rows_train.size
        n_left = int(left_train.sum())
        llr = (
            _leaf_marginal_core(n_left, sum_left, sigma2, smu2)
            + _leaf_marginal_core(n_all - n_left, sum_all - sum_left, sigma2, smu2)
            - _leaf_marginal_core(n_all, sum_all, sigma2, smu2)
        )

        d_here = _depth_split_prob(cfg, tree.depth[leaf])
        d_child = _depth_split_prob(cfg, tree.depth[leaf] + 1)
        prunable = tree.prunable_ids()
        parent = tree.parent[leaf]
        n_prunable_after = len(prunable) + 1 - (1 if parent >= 0 and parent in prunable else 0)
        # s[j] and the candidate count cancel between prior and proposal;
        # the restricted-variable normalizer total_weight survives
        log_accept = (
            math.log(d_here)
            - math.log1p(-d_here)
            + 2.0 * math.log1p(-d_child)
            + llr
            + math.log(p_prune)
            - math.log(p_grow)
            + math.log(len(growable))
            + math.log(total_weight)
            - math.log(n_prunable_after)
        )
        if math.log(g.random()) < log_accept:
            left_id, right_id = tree.grow(leaf, SplitRule(j, value))
            assign[rows_full] = np.where(go_left, left_id, right_id)
            stats_entry[1] += 1
            return True
        return False

    if move == "prune":
        prunable = tree.prunable_ids()
        if not prunable:
            return False
        node = prunable[g.integers(len(prunable))]
        c_left, c_right = tree.left[node], tree.right[node]
        member = (assign == c_left) | (assign == c_right)
        rows_full = np.flatnonzero(member)
        rows_train = rows_full[: np.searchsorted(rows_full, n_train)]
        part_leaf = partial[rows_train]
        in_left = assign[rows_train] == c_left
        sum_all = float(part_leaf.sum())
        sum_left = float(part_leaf[in_left].sum())
        n_all = rows_train.size
        n_left = int(in_left.sum())
        llr = (
            _leaf_marginal_core(n_all, sum_all, sigma2, smu2)
            - _leaf_marginal_core(n_left, sum_left, sigma2, smu2)
            - _leaf_marginal_core(n_all - n_left, sum_all - sum_left, sigma2, smu2)
        )

        valid_mask = _valid_var_mask(state, rows_train)
        total_weight = float(np.where(valid_mask, s, 0.0).sum())
        if total_weight <= 0.0:
            return False
        # growable-leaf count of the pruned tree: drop the two children, add the merged leaf
        counts_by_node = np.bincount(assign[:n_train], minlength=tree.node_count)
        mns = cfg.min_node_size
        n_growable_after = 1 if n_all >= 2 * mns else 0
        for leaf in tree.leaf_ids():
            if leaf != c_left and leaf != c_right and counts_by_node[leaf] >= 2 * mns:
                n_growable_after += 1
        if n_growable_after == 0:
            return False

        d_here = _depth_split_prob(cfg, tree.depth[node])
        d_child = _depth_split_prob(cfg, tree.depth[node] + 1)
        log_accept = (
            -(math.log(d_here) - math.log1p(-d_here) + 2.0 * math.log1p(-d_child))
            + llr
            + math.log(p_grow)
            - math.log(p_prune)
            - math.log(n_growable_after)
            - math.log(total_weight)
            + math.log(len(prunable))
        )
        if math.log(g.random()) < log_accept:
            assign[member] = node
            remap = tree.prune(node)
            state.assigns[tree_index] = remap[assign]
            stats_entry[1] += 1
            return True
        return False

    # change: redraw the rule of an internal node whose children are leaves;
    # prior and proposal factors cancel exactly, leaving the likelihood ratio
    eligible = tree.prunable_ids()
    if not eligible:
        return False
    node = eligible[g.integers(len(eligible))]
    c_left, c_right = tree.left[node], tree.right[node]
    member = (assign == c_left) | (assign == c_right)
    rows_full = np.flatnonzero(member)
    rows_train = rows_full[: np.searchsorted(rows_full, n_train)]
    valid_mask = _valid_var_mask(state, rows_train)
    j, _ = _pick_var(g, s, valid_mask)
    if j is None:
        return False
    cands = _candidates_for(state, rows_train, j)
    value = float(cands[g.integers(cands.size)])

    part_leaf = partial[rows_train]
    in_left_old = assign[rows_train] == c_left
    go_left = state.x_full[rows_full, j] <= value
    in_left_new = go_left[: rows_train.size]
    sum_all = float(part_leaf.sum())
    n_all = rows_train.size
    sum_left_old = float(part_leaf[in_left_old].sum())
    n_left_old = int(in_left_old.sum())
    sum_left_new = float(part_leaf[in_left_new].sum())
    n_left_new = int(in_left_new.sum())
    llr = (
        _leaf_marginal_core(n_left_new, sum_left_new, sigma2, smu2)
        + _leaf_marginal_core(n_all - n_left_new, sum_all - sum_left_new, sigma2, smu2)
        - _leaf_marginal_core(n_left_old, sum_left_old, sigma2, smu2)
        - _leaf_marginal_core(n_all - n_left_old, sum_all - sum_left_old, sigma2, smu2)
    )
    if math.log(g.random()) < llr:
        tree.change_rule(node, SplitRule(j, value))
        assign[rows_full] = np.where(go_left, c_left, c_right)
        stats_entry[1] += 1
        return True
    return False


# --------------------------------------------------------------------------
# Conjugate updates


def gibbs_leaf_update(
    state: BartState, tree_index: int, rng: RngStream, partial: Optional[np.ndarray] = None
) -> None:
    """Redraw every leaf height of one tree from its conjugate normal posterior.

    Posterior per leaf: variance (n/sigma^2 + 1/leaf_sd^2)^-1, mean
    variance * (sum of partial residuals)/sigma^2; a leaf with no training
    rows draws from the prior. Updates the residual cache and fit cache.
    """
    g = rng.generator
    tree = state.forest.trees[tree_index]
    assign = state.assigns[tree_index]
    n_train = state.n_train
    if partial is None:
        partial = state.residuals + state.fits[tree_index]
    sigma2 = state.sigma * state.sigma
    smu2 = state.leaf_sd * state.leaf_sd

    leaf_nodes = tree.leaf_ids()
    n_leaves = len(leaf_nodes)
    slot_of_node = np.full(tree.node_count, -1, dtype=np.int64)
    slot_of_node[leaf_nodes] = np.arange(n_leaves)
    slots = slot_of_node[assign[:n_train]]
    cnt = np.bincount(slots, minlength=n_leaves)
    rsum = np.bincount(slots, weights=partial, minlength=n_leaves)
    post_var = 1.0 / (cnt / sigma2 + 1.0 / smu2)
    post_mean = post_var * rsum / sigma2
    values = post_mean + np.sqrt(post_var) * g.standard_normal(n_leaves)
    for k, node in enumerate(leaf_nodes):
        tree.leaf_value[node] = float(values[k])
    new_fit = values[slots]
    state.residuals = partial - new_fit
    state.fits[tree_index] = new_fit


def gibbs_sigma_update(state: BartState, rng: RngStream) -> None:
    """Draw sigma^2 from its scaled-inverse-chi-square conditional posterior."""
    g = rng.generator
    nu = state.sigma_prior_df
    lam = state.sigma_prior_scale
    res = state.residuals
    n = res.size
    if n == 0:
        df, scale = nu, lam
    else:
        df = nu + n
        scale = (nu * lam + float(np.dot(res, res))) / df
    sigma2 = df * scale / g.chisquare(df)
    state.sigma = math.sqrt(sigma2)


def calibrate_sigma_lambda(y, X, nu: float, quantile: float) -> float:
    """Scale of the noise-variance prior: P(sigma < sigma_hat) = quantile.

    sigma_hat is the residual sd of a linear regression of y on X (with
    intercept) when there are enough rows, otherwise the sample sd of y.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n = y.size
    if n < 2 or float(np.min(y)) == float(np.max(y)):
        raise ValueError("outcome has zero variance; cannot calibrate the noise prior")
    sd_y = float(np.std(y, ddof=1))
    p = X.shape[1]
    if n > p + 1:
        design = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        resid = y - design @ coef
        dof = n - design.shape[1]
        sigma_hat = math.sqrt(float(np.dot(resid, resid)) / dof) if dof > 0 else sd_y
    else:
        sigma_hat = sd_y
    sigma_hat = max(sigma_hat, 1e-12 * max(sd_y, 1.0))
    # P(sigma^2 < sigma_hat^2) = q  <=>  nu*lambda/sigma_hat^2 = chi2_nu quantile at 1-q
    return sigma_hat * sigma_hat * float(stats.chi2.ppf(1.0 - quantile, nu)) / nu


def forest_split_counts(forest: Forest, p: int) -> np.ndarray:
    """Number of internal-node splits per variable across the forest."""
    counts = np.zeros(p, dtype=np.int64)
    for tree in forest.trees:
        for v in tree.var:
            if v >= 0:
                counts[v] += 1
    return counts


_THETA_GRID_CACHE: dict = {}


def _theta_grid_constants(p: int, grid_size: int):
    key = (p, grid_size)
    cached = _THETA_GRID_CACHE.get(key)
    if cached is None:
        rho = np.geomspace(1e-3, 1.0 - 1e-3, grid_size)
        theta = p * rho / (1.0 - rho)
        alpha = theta / p
        log_prior = stats.beta.logpdf(rho, 0.5, 1.0) + special.gammaln(theta) - p * special.gammaln(alpha)
        cached = (theta, alpha, log_prior)
        _THETA_GRID_CACHE[key] = cached
    return cached


def theta_grid_posterior(split_probs, p: int, grid_size: int = 100):
    """Discrete conditional posterior of the sparsity concentration theta.

    The grid is log-spaced in rho = theta/(theta+p) over [1e-3, 1-1e-3];
    weights combine the Beta(0.5, 1) prior on rho with the symmetric
    Dirichlet(theta/p) likelihood of the current split-probability vector.
    """
    s = np.clip(np.asarray(split_probs, dtype=float), 1e-300, None)
    theta, alpha, log_prior = _theta_grid_constants(p, grid_size)
    log_w = log_prior + (alpha - 1.0) * float(np.log(s).sum())
    log_w = log_w - log_w.max()
    w = np.exp(log_w)
    return theta, w / w.sum()


def gibbs_split_prob_update(state: BartState, rng: RngStream) -> None:
    """Sparse mode: refresh split probabilities and the concentration theta.

    s ~ Dirichlet(theta/p + split counts); theta by an exact discrete-grid
    draw from its conditional posterior given s.
    """
    g = rng.generator
    p = state.x_full.shape[1]
    counts = forest_split_counts(state.forest, p)
    alpha = state.sparsity_theta / p + counts
    gm = g.standard_gamma(alpha)
    state.split_probs = gm / gm.sum()
    theta_grid, probs = theta_grid_posterior(state.split_probs, p)
    idx = int(np.searchsorted(np.cumsum(probs), g.random(), side="right"))
    state.sparsity_theta = float(theta_grid[min(idx, probs.size - 1)])


# --------------------------------------------------------------------------
# Chain drivers


def _validate_training_inputs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be a 2-d matrix (got ndim={X.ndim})")
    if y.shape != (X.shape[0],):
        raise ValueError(f"y must have one entry per row of X (got {y.shape} vs {X.shape})")
    if X.shape[0] < 2:
        raise ValueError(f"need at least 2 training rows (got {X.shape[0]})")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite entries")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite entries")
    return X, y


def _stack_test(X: np.ndarray, X_test) -> tuple[np.ndarray, int]:
    if X_test is None:
        return X, 0
    X_test = np.asarray(X_test, dtype=float)
    if X_test.ndim != 2 or X_test.shape[1] != X.shape[1]:
        raise ValueError(f"X_test width {X_test.shape} does not match X width {X.shape[1]}")
    if not np.all(np.isfinite(X_test)):
        raise ValueError("X_test contains non-finite entries")
    return np.vstack([X, X_test]), X_test.shape[0]


def _init_state(
    X_full: np.ndarray,
    n_train: int,
    residuals: np.ndarray,
    sigma: float,
    leaf_sd: float,
    lam: float,
    config: BartConfig,
    outcome_offset: float,
) -> BartState:
    p = X_full.shape[1]
    trees = [Tree.root_only(0.0) for _ in range(config.num_trees)]
    state = BartState(
        forest=Forest(trees, outcome_offset),
        sigma=sigma,
        split_probs=np.full(p, 1.0 / p),
        sparsity_theta=float(p),
        residuals=residuals.astype(float).copy(),
        x_full=X_full,
        n_train=n_train,
        leaf_sd=leaf_sd,
        sigma_prior_df=config.sigma_prior_df,
        sigma_prior_scale=lam,
        config=config,
    )
    n_full = X_full.shape[0]
    state.assigns = [np.zeros(n_full, dtype=np.int64) for _ in range(config.num_trees)]
    state.fits = [np.zeros(n_train) for _ in range(config.num_trees)]
    return state


def replace_tree(state: BartState, tree_index: int, tree: Tree) -> None:
    """Install a tree (e.g. a hand-built structure) and refresh the caches."""
    assign = leaf_assignments(tree, state.x_full)
    values = np.asarray(tree.leaf_value, dtype=float)
    new_fit = values[assign[: state.n_train]]
    state.residuals = state.residuals + state.fits[tree_index] - new_fit
    state.forest.trees[tree_index] = tree
    state.assigns[tree_index] = assign
    state.fits[tree_index] = new_fit


def _emission_schedule(config: BartConfig) -> tuple[int, list[int]]:
    emit_at = [config.burn_in + k * config.thin for k in range(config.num_draws)]
    return emit_at[-1] + 1, emit_at


def _test_fits(state: BartState) -> np.ndarray:
    n_train = state.n_train
    out = np.zeros(state.x_full.shape[0] - n_train)
    for tree, assign in zip(state.forest.trees, state.assigns):
        values = np.asarray(tree.leaf_value, dtype=float)
        out += values[assign[n_train:]]
    return out


def check_residual_cache(state: BartState, y_centered: np.ndarray, tol: float = 1e-10) -> float:
    """Max abs deviation between the residual cache and a from-scratch rebuild."""
    total = np.zeros(state.n_train)
    for tree, assign in zip(state.forest.trees, state.assigns):
        values = np.asarray(tree.leaf_value, dtype=float)
        total += values[assign[: state.n_train]]
    gap = float(np.max(np.abs(y_centered - total - state.residuals)))
    if gap > tol:
        raise AssertionError(f"residual cache drifted by {gap}")
    return gap


def run_bart_regression(
    X,
    y,
    config: BartConfig,
    rng: RngStream,
    X_test=None,
    debug_checks: bool = False,
) -> PosteriorDraws:
    """Run the backfitting sampler on a continuous outcome.

    The outcome is centered internally; emitted fitted values (at the training
    rows and, when given, at X_test) are on the original outcome scale.
    """
    config.validate()
    X, y = _validate_training_inputs(X, y)
    n = y.size

    y_work = y
    if float(np.min(y)) == float(np.max(y)):
        if config.constant_outcome_jitter <= 0.0:
            raise ValueError(
                "outcome is constant; set constant_outcome_jitter > 0 to fit anyway"
            )
        y_work = y + config.constant_outcome_jitter * rng.generator.standard_normal(n)

    offset = float(np.mean(y_work))
    y_cent = y_work - offset
    y_range = float(np.max(y_work) - np.min(y_work))
    leaf_sd = y_range / (2.0 * config.leaf_sd_k * math.sqrt(config.num_trees))
    lam = calibrate_sigma_lambda(y_work, X, config.sigma_prior_df, config.sigma_prior_quantile)
    sigma0 = math.sqrt(lam * config.sigma_prior_df / stats.chi2.ppf(1.0 - config.sigma_prior_quantile, config.sigma_prior_df))

    X_full, n_test = _stack_test(X, X_test)
    state = _init_state(X_full, n, y_cent, sigma0, leaf_sd, lam, config, offset)

    total_sweeps, emit_at = _emission_schedule(config)
    emit_set = set(emit_at)
    S = config.num_draws
    fitted = np.empty((S, n))
    fitted_test = np.empty((S, n_test)) if n_test else None
    sigmas = np.empty(S)
    k = 0
    for sweep in range(total_sweeps):
        for t in range(config.num_trees):
            partial = state.residuals + state.fits[t]
            mh_tree_update(state, t, rng, partial)
            gibbs_leaf_update(state, t, rng, partial)
        gibbs_sigma_update(state, rng)
        if config.sparse:
            gibbs_split_prob_update(state, rng)
        if debug_checks:
            check_residual_cache(state, y_cent)
        if sweep in emit_set:
            fitted[k] = offset + (y_cent - state.residuals)
            if n_test:
                fitted_test[k] = offset + _test_fits(state)
            sigmas[k] = state.sigma
            k += 1
    acceptance = {m: tuple(v) for m, v in state.move_stats.items()}
    return PosteriorDraws(fitted, sigmas, acceptance, fitted_test)


def run_bart_binary(
    X,
    r,
    config: BartConfig,
    rng: RngStream,
    X_test=None,
) -> PosteriorDraws:
    """Probit sum-of-trees sampler for a binary indicator.

    Latent variables are truncated normals around the current fit (positive
    half-line where r=1, negative where r=0) with unit noise scale; emitted
    values are success probabilities through the normal CDF.
    """
    config.validate()
    X, r = _validate_training_inputs(X, r)
    r = r.astype(np.int64)
    if not np.all((r == 0) | (r == 1)):
        raise ValueError("binary outcome must contain only 0/1 values")
    if r.min() == r.max():
        raise ValueError("binary outcome has a single class; both classes are required")
    n = r.size

    rbar = float(np.mean(r))
    offset = float(special.ndtri(min(max(rbar, 1.0 / (n + 1)), n / (n + 1.0))))
    # latent scale convention: prior keeps the sum-of-trees within about +-3 of the offset
    leaf_sd = 3.0 / (config.leaf_sd_k * math.sqrt(config.num_trees))

    X_full, n_test = _stack_test(X, X_test)
    state = _init_state(X_full, n, np.zeros(n), 1.0, leaf_sd, 1.0, config, offset)

    total_sweeps, emit_at = _emission_schedule(config)
    emit_set = set(emit_at)
    S = config.num_draws
    fitted = np.empty((S, n))
    fitted_test = np.empty((S, n_test)) if n_test else None
    k = 0
    positive = r == 1
    total_fit = np.zeros(n)
    for sweep in range(total_sweeps):
        z = truncated_normal_vector(rng.generator, offset + total_fit, 1.0, positive)
        state.residuals = z - offset - total_fit
        for t in range(config.num_trees):
            partial = state.residuals + state.fits[t]
            mh_tree_update(state, t, rng, partial)
            gibbs_leaf_update(state, t, rng, partial)
        if config.sparse:
            gibbs_split_prob_update(state, rng)
        total_fit = z - offset - state.residuals
        if sweep in emit_set:
            fitted[k] = special.ndtr(offset + total_fit)
            if n_test:
                fitted_test[k] = special.ndtr(offset + _test_fits(state))
            k += 1
    acceptance = {m: tuple(v) for m, v in state.move_stats.items()}
    return PosteriorDraws(fitted, None, acceptance, fitted_test)
