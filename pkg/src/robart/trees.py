"""Binary decision trees with axis-aligned splits and the additive (sum-of-trees) learner.

Trees are stored as index-based parallel node arrays: node 0 is the root,
internal nodes carry a split rule ``x[var] <= value`` (ties route left), and
leaves carry a step height. Node count is always ``2 * n_leaves - 1``; pruning
compacts ids so the arrays stay dense. Trees are mutated only inside a single
sampler chain; once emitted they are treated as immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """Covariate vector/matrix width is incompatible with the tree's split rules."""


class StructureError(ValueError):
    """A structural invariant of the tree was violated."""


@dataclass(frozen=True)
class SplitRule:
    """Axis-aligned split ``x[var_index] <= split_value``."""

    var_index: int
    split_value: float


class Tree:
    """Mutable binary tree over numeric covariates.

    Parallel per-node lists: ``var`` (split variable, -1 for leaves),
    ``threshold``, ``left``/``right`` child ids (-1 for leaves), ``parent``
    (-1 for the root), ``leaf_value`` (meaningful for leaves only), ``depth``.
    """

    __slots__ = ("var", "threshold", "left", "right", "parent", "leaf_value", "depth")

    def __init__(self):
        self.var = [-1]
        self.threshold = [0.0]
        self.left = [-1]
        self.right = [-1]
        self.parent = [-1]
        self.leaf_value = [0.0]
        self.depth = [0]

    @classmethod
    def root_only(cls, leaf_value: float = 0.0) -> "Tree":
        t = cls()
        t.leaf_value[0] = float(leaf_value)
        return t

    # -- queries ------------------------------------------------------------

    @property
    def node_count(self) -> int:
        return len(self.var)

    def is_leaf(self, node_id: int) -> bool:
        return self.var[node_id] < 0

    def leaf_ids(self) -> list[int]:
        return [i for i, v in enumerate(self.var) if v < 0]

    def internal_ids(self) -> list[int]:
        return [i for i, v in enumerate(self.var) if v >= 0]

    def prunable_ids(self) -> list[int]:
        """Internal nodes whose children are both leaves."""
        return [
            i
            for i, v in enumerate(self.var)
            if v >= 0 and self.var[self.left[i]] < 0 and self.var[self.right[i]] < 0
        ]

    def num_leaves(self) -> int:
        return sum(1 for v in self.var if v < 0)

    def max_var_index(self) -> int:
        return max((v for v in self.var if v >= 0), default=-1)

    def rule(self, node_id: int) -> SplitRule:
        if self.is_leaf(node_id):
            raise StructureError(f"node {node_id} is a leaf and has no rule")
        return SplitRule(self.var[node_id], self.threshold[node_id])

    # -- mutation -----------------------------------------------------------

    def grow(self, leaf_id: int, rule: SplitRule) -> tuple[int, int]:
        """Split a leaf; returns the new (left, right) leaf ids."""
        if not self.is_leaf(leaf_id):
            raise StructureError(f"grow target {leaf_id} is not a leaf")
        d = self.depth[leaf_id] + 1
        left_id = len(self.var)
        right_id = left_id + 1
        for node in (left_id, right_id):
            self.var.append(-1)
            self.threshold.append(0.0)
            self.left.append(-1)
            self.right.append(-1)
            self.parent.append(leaf_id)
            self.leaf_value.append(0.0)
            self.depth.append(d)
        self.var[leaf_id] = rule.var_index
        self.threshold[leaf_id] = float(rule.split_value)
        self.left[leaf_id] = left_id
        self.right[leaf_id] = right_id
        return left_id, right_id

    def prune(self, node_id: int, leaf_value: float = 0.0) -> np.ndarray:
        """Collapse an internal node with two leaf children back into a leaf.

        Node ids are compacted; returns the old->new id map (-1 for removed
        ids) so callers can remap any row-assignment vectors.
        """
        if self.is_leaf(node_id):
            raise StructureError(f"prune target {node_id} is a leaf")
        c1, c2 = self.left[node_id], self.right[node_id]
        if not (self.is_leaf(c1) and self.is_leaf(c2)):
            raise StructureError(f"prune target {node_id} has non-leaf children")
        self.var[node_id] = -1
        self.left[node_id] = -1
        self.right[node_id] = -1
        self.leaf_value[node_id] = float(leaf_value)
        removed = {c1, c2}
        remap = np.full(len(self.var), -1, dtype=np.int64)
        keep = [i for i in range(len(self.var)) if i not in removed]
        for new_id, old_id in enumerate(keep):
            remap[old_id] = new_id
        for name in self.__slots__:
            arr = getattr(self, name)
            setattr(self, name, [arr[i] for i in keep])
        for i in range(len(self.var)):
            if self.var[i] >= 0:
                self.left[i] = int(remap[self.left[i]])
                self.right[i] = int(remap[self.right[i]])
            if self.parent[i] >= 0:
                self.parent[i] = int(remap[self.parent[i]])
        return remap

    def change_rule(self, node_id: int, rule: SplitRule) -> None:
        if self.is_leaf(node_id):
            raise StructureError(f"change target {node_id} is a leaf")
        self.var[node_id] = rule.var_index
        self.threshold[node_id] = float(rule.split_value)

    def copy(self) -> "Tree":
        t = Tree.__new__(Tree)
        for name in self.__slots__:
            setattr(t, name, list(getattr(self, name)))
        return t


@dataclass
class Forest:
    """Sum-of-trees regression function plus a centering offset."""

    trees: list
    outcome_offset: float = 0.0


# --------------------------------------------------------------------------
# Evaluation


def _check_dim(tree: Tree, width: int) -> None:
    if tree.max_var_index() >= width:
        raise DimensionMismatchError(
            f"tree splits on column {tree.max_var_index()} but input has width {width}"
        )


def evaluate_tree(tree: Tree, x) -> float:
    """Step height of the unique leaf containing x (x[j] <= value routes left)."""
    x = np.asarray(x, dtype=float)
    _check_dim(tree, x.shape[-1])
    node = 0
    while tree.var[node] >= 0:
        node = tree.left[node] if x[tree.var[node]] <= tree.threshold[node] else tree.right[node]
    return float(tree.leaf_value[node])


def evaluate_forest(forest: Forest, x) -> float:
    return forest.outcome_offset + sum(evaluate_tree(t, x) for t in forest.trees)


def leaf_assignments(tree: Tree, X) -> np.ndarray:
    """Leaf id per row of X, consistent with evaluate_tree routing."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatchError(f"X must be a 2-d matrix (got ndim={X.ndim})")
    _check_dim(tree, X.shape[1])
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        v = tree.var[node]
        if v < 0:
            out[rows] = node
        else:
            go_left = X[rows, v] <= tree.threshold[node]
            stack.append((tree.left[node], rows[go_left]))
            stack.append((tree.right[node], rows[~go_left]))
    return out


def predict_tree(tree: Tree, X) -> np.ndarray:
    """Vectorized evaluate_tree over the rows of X."""
    values = np.asarray(tree.leaf_value, dtype=float)
    return values[leaf_assignments(tree, X)]


def predict_forest(forest: Forest, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = np.full(X.shape[0], forest.outcome_offset, dtype=float)
    for t in forest.trees:
        out += predict_tree(t, X)
    return out


# --------------------------------------------------------------------------
# Split candidates


def split_value_candidates(values, min_node_size: int = 1) -> np.ndarray:
    """Observed values of one variable that are usable as split points.

    A value v is usable when both ``{x <= v}`` and ``{x > v}`` contain at
    least `min_node_size` of the given rows. Sorted ascending.
    """
    if min_node_size < 1:
        raise ValueError(f"min_node_size must be >= 1 (got {min_node_size})")
    vals, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    if vals.size < 2:
        return np.empty(0, dtype=float)
    cum = np.cumsum(counts)
    ok = (cum >= min_node_size) & ((cum[-1] - cum) >= min_node_size)
    return vals[ok]


def grow_candidates(tree: Tree, node_id: int, X, min_node_size: int = 1) -> list[SplitRule]:
    """All split rules at a leaf that leave >= min_node_size rows in each child.

    Deterministic order: ascending variable index, then ascending value.
    """
    if not tree.is_leaf(node_id):
        raise StructureError(f"node {node_id} is not a leaf")
    X = np.asarray(X, dtype=float)
    rows = np.flatnonzero(leaf_assignments(tree, X) == node_id)
    rules: list[SplitRule] = []
    for j in range(X.shape[1]):
        for v in split_value_candidates(X[rows, j], min_node_size):
            rules.append(SplitRule(j, float(v)))
    return rules


# --------------------------------------------------------------------------
# Validation and debug dump


def validate_tree(tree: Tree) -> None:
    """Raise StructureError if any structural invariant is broken."""
    n = tree.node_count
    seen_children = set()
    n_leaves = 0
    for i in range(n):
        if tree.is_leaf(i):
            n_leaves += 1
            if tree.left[i] != -1 or tree.right[i] != -1:
                raise StructureError(f"leaf {i} has children")
        else:
            l, r = tree.left[i], tree.right[i]
            for c in (l, r):
                if not 0 <= c < n:
                    raise StructureError(f"node {i} has out-of-range child {c}")
                if c in seen_children:
                    raise StructureError(f"node {c} has two parents")
                seen_children.add(c)
                if tree.parent[c] != i:
                    raise StructureError(f"parent pointer of {c} is not {i}")
                if tree.depth[c] != tree.depth[i] + 1:
                    raise StructureError(f"depth of child {c} is not parent depth + 1")
    if n != 2 * n_leaves - 1:
        raise StructureError(f"node count {n} != 2 * {n_leaves} - 1")
    roots = [i for i in range(n) if tree.parent[i] == -1]
    if roots != [0]:
        raise StructureError(f"expected the single root to be node 0 (roots: {roots})")
    if tree.depth[0] != 0:
        raise StructureError("root depth is not 0")


def tree_dump(tree: Tree) -> str:
    """One node per line: id, kind, rule or leaf value, children ids."""
    lines = []
    for i in range(tree.node_count):
        if tree.is_leaf(i):
            lines.append(f"{i} leaf value={tree.leaf_value[i]!r}")
        else:
            lines.append(
                f"{i} internal x{tree.var[i]}<={tree.threshold[i]!r} "
                f"left={tree.left[i]} right={tree.right[i]}"
            )
    return "\n".join(lines) + "\n"
