import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robart.trees import (
    DimensionMismatchError,
    Forest,
    SplitRule,
    StructureError,
    Tree,
    evaluate_forest,
    evaluate_tree,
    grow_candidates,
    leaf_assignments,
    predict_tree,
    split_value_candidates,
    tree_dump,
    validate_tree,
)


def build_random_tree(rng, X, max_grows=10):
    """Grow a random valid tree against X; every rule splits observed values."""
    tree = Tree.root_only(0.0)
    for _ in range(max_grows):
        leaves = tree.leaf_ids()
        leaf = leaves[rng.integers(len(leaves))]
        rules = grow_candidates(tree, leaf, X, 1)
        if not rules:
            continue
        tree.grow(leaf, rules[rng.integers(len(rules))])
    for i in tree.leaf_ids():
        tree.leaf_value[i] = float(rng.normal())
    return tree


def leaf_cell_bounds(tree):
    """Brute-force oracle: per-leaf axis-aligned box from the root path."""
    boxes = {}

    def walk(node, lo, hi):
        if tree.is_leaf(node):
            boxes[node] = (dict(lo), dict(hi))
            return
        j, v = tree.var[node], tree.threshold[node]
        lo_l, hi_l = dict(lo), dict(hi)
        hi_l[j] = min(hi_l.get(j, np.inf), v)
        walk(tree.left[node], lo_l, hi_l)
        lo_r, hi_r = dict(lo), dict(hi)
        lo_r[j] = max(lo_r.get(j, -np.inf), v)
        walk(tree.right[node], lo_r, hi_r)

    walk(0, {}, {})
    return boxes


def point_in_box(x, lo, hi):
    # left cells are closed above (x <= v), right cells open below (x > v)
    return all(x[j] <= b for j, b in hi.items()) and all(x[j] > b for j, b in lo.items())


def test_single_leaf_tree_returns_its_value():
    tree = Tree.root_only(0.7)
    assert evaluate_tree(tree, [1.0, -3.0]) == 0.7


def test_boundary_value_routes_left():
    tree = Tree.root_only()
    left, right = tree.grow(0, SplitRule(0, 0.5))
    tree.leaf_value[left] = -1.0
    tree.leaf_value[right] = 1.0
    assert evaluate_tree(tree, [0.5, 9.0]) == -1.0
    assert evaluate_tree(tree, [0.5000001, 9.0]) == 1.0


def test_random_tree_matches_cell_membership_oracle():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 4))
    tree = build_random_tree(rng, X, max_grows=8)
    validate_tree(tree)
    boxes = leaf_cell_bounds(tree)
    probe = rng.normal(size=(1000, 4))
    for x in probe:
        hits = [leaf for leaf, (lo, hi) in boxes.items() if point_in_box(x, lo, hi)]
        assert len(hits) == 1
        assert evaluate_tree(tree, x) == tree.leaf_value[hits[0]]


def test_partition_property_over_many_points():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(200, 3))
    tree = build_random_tree(rng, X, max_grows=12)
    boxes = leaf_cell_bounds(tree)
    probe = rng.uniform(-4, 4, size=(10_000, 3))
    membership = np.zeros(probe.shape[0], dtype=int)
    for lo, hi in boxes.values():
        inside = np.ones(probe.shape[0], dtype=bool)
        for j, b in hi.items():
            inside &= probe[:, j] <= b
        for j, b in lo.items():
            inside &= probe[:, j] > b
        membership += inside
    assert np.all(membership == 1)


def test_dimension_mismatch_raises():
    tree = Tree.root_only()
    tree.grow(0, SplitRule(3, 0.0))
    with pytest.raises(DimensionMismatchError):
        evaluate_tree(tree, [1.0, 2.0])
    with pytest.raises(DimensionMismatchError):
        leaf_assignments(tree, np.zeros((5, 2)))


def test_forest_of_constant_trees_returns_offset():
    trees = [Tree.root_only(0.0) for _ in range(7)]
    forest = Forest(trees, outcome_offset=2.5)
    assert evaluate_forest(forest, [0.0]) == 2.5


def test_forest_additivity():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 3))
    trees = [build_random_tree(rng, X, max_grows=4) for _ in range(3)]
    forest = Forest(trees, outcome_offset=-1.0)
    x = X[17]
    expected = -1.0 + sum(evaluate_tree(t, x) for t in trees)
    assert evaluate_forest(forest, x) == pytest.approx(expected, abs=1e-14)


def test_many_root_trees_reconstruct_mean_exactly():
    ybar = 3.141592653589793
    trees = [Tree.root_only(ybar / 200) for _ in range(200)]
    forest = Forest(trees, outcome_offset=0.0)
    assert abs(evaluate_forest(forest, [0.0]) - ybar) < 1e-12


def test_leaf_assignments_root_only():
    tree = Tree.root_only()
    assert np.array_equal(leaf_assignments(tree, np.zeros((4, 2))), np.zeros(4, dtype=int))


def test_leaf_assignments_counts_sum_to_n():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(101, 2))
    tree = Tree.root_only()
    tree.grow(0, SplitRule(0, float(np.median(X[:, 0]))))
    assign = leaf_assignments(tree, X)
    counts = np.bincount(assign, minlength=tree.node_count)
    assert counts[1] + counts[2] == 101


def test_leaf_assignments_match_per_row_evaluation():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(150, 5))
    tree = build_random_tree(rng, X, max_grows=10)
    assign = leaf_assignments(tree, X)
    values = np.asarray(tree.leaf_value)
    for i in range(X.shape[0]):
        assert values[assign[i]] == evaluate_tree(tree, X[i])
    assert np.array_equal(predict_tree(tree, X), values[assign])


def test_grow_candidates_single_row_leaf_is_empty():
    tree = Tree.root_only()
    X = np.array([[1.0, 2.0]])
    assert grow_candidates(tree, 0, X, 1) == []


def test_grow_candidates_enumerates_observed_values_dropping_max():
    tree = Tree.root_only()
    X = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    rules = grow_candidates(tree, 0, X, 1)
    assert rules == [SplitRule(0, 1.0), SplitRule(0, 2.0)]


def test_grow_candidates_duplicate_rows_only():
    tree = Tree.root_only()
    X = np.tile([[2.0, -1.0]], (6, 1))
    assert grow_candidates(tree, 0, X, 1) == []


def test_grow_candidates_respects_min_node_size():
    tree = Tree.root_only()
    X = np.array([[float(v)] for v in (1, 2, 3, 4)])
    assert [r.split_value for r in grow_candidates(tree, 0, X, 2)] == [2.0]


def test_split_value_candidates_with_duplicates_and_min_size():
    vals = np.array([1.0, 1.0, 2.0, 3.0, 3.0, 3.0])
    # counts per value: 1->2, 2->1, 3->3; left-side sizes 2, 3, 6
    assert list(split_value_candidates(vals, 1)) == [1.0, 2.0]
    assert list(split_value_candidates(vals, 2)) == [1.0, 2.0]
    assert list(split_value_candidates(vals, 3)) == [2.0]


def test_prune_restores_structure_and_compacts_ids():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(60, 2))
    tree = build_random_tree(rng, X, max_grows=6)
    n_before = tree.node_count
    target = tree.prunable_ids()[0]
    tree.prune(target)
    validate_tree(tree)
    assert tree.node_count == n_before - 2


def test_prune_remap_remaps_assignments_consistently():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(80, 3))
    tree = build_random_tree(rng, X, max_grows=6)
    assign = leaf_assignments(tree, X)
    node = tree.prunable_ids()[-1]
    c1, c2 = tree.left[node], tree.right[node]
    assign[(assign == c1) | (assign == c2)] = node
    remap = tree.prune(node)
    assert np.array_equal(remap[assign], leaf_assignments(tree, X))


def test_structure_errors():
    tree = Tree.root_only()
    with pytest.raises(StructureError):
        tree.prune(0)
    tree.grow(0, SplitRule(0, 0.0))
    with pytest.raises(StructureError):
        tree.grow(0, SplitRule(0, 1.0))


def test_node_count_invariant_after_mutations():
    rng = np.random.default_rng(23)
    X = rng.normal(size=(100, 3))
    tree = build_random_tree(rng, X, max_grows=9)
    assert tree.node_count == 2 * tree.num_leaves() - 1
    validate_tree(tree)


def test_tree_dump_golden():
    tree = Tree.root_only()
    left, right = tree.grow(0, SplitRule(1, 0.25))
    tree.leaf_value[left] = -1.5
    tree.leaf_value[right] = 0.5
    assert tree_dump(tree) == (
        "0 internal x1<=0.25 left=1 right=2\n1 leaf value=-1.5\n2 leaf value=0.5\n"
    )


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_trees_always_partition(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 2))
    tree = build_random_tree(rng, X, max_grows=5)
    validate_tree(tree)
    assign = leaf_assignments(tree, X)
    assert set(np.unique(assign)) <= set(tree.leaf_ids())
