"""CART decision trees, bagged forests, and the two-stage fit.

Trees are grown to purity (no depth limit, minimum node size 1) on a
bootstrap of the training rows, examining floor(sqrt(p)) candidate
features per node. Split quality is the weighted Gini decrease computed
in integer arithmetic until the final divisions, so results are exactly
reproducible against a scalar reference implementation.

The two-stage fit ranks features by Mean Decrease in Gini with a small
forest, keeps the top slice, and refits a larger forest on it.

Every tree draws from its own generator derived from (seed, tree index),
so a fitted forest is identical no matter how many worker threads ran.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .ingest import AnnotatedDataset, ExpressionMatrix
from .rng import substream


@dataclass
class TreeNode:
    """Internal node (feature/threshold/children) or leaf (class_index)."""

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    class_index: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.class_index is not None


@dataclass
class Forest:
    trees: list[TreeNode]
    mtry: int
    feature_ids: list[str]
    class_names: list[str]
    importances: np.ndarray  # per-feature mean decrease in Gini
    seed: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def gini(counts) -> float:
    """Gini impurity 1 - sum((c/t)^2), evaluated as (t^2 - sum(c^2))/t^2
    so everything stays integral until one exact division."""
    counts = np.asarray(counts, dtype=np.int64)
    t = int(counts.sum())
    if t < 1:
        raise DataError("gini of an empty node")
    ss = int((counts * counts).sum())
    return (t * t - ss) / (t * t)


def default_mtry(n_features: int) -> int:
    return max(1, int(np.sqrt(n_features)))


def best_split(x: np.ndarray, y: np.ndarray, candidates, n_classes: int):
    """Best (feature, threshold, gini decrease) over candidate features.

    Thresholds are midpoints between consecutive distinct sorted values;
    rows with value <= threshold go left. Ties prefer the lower feature
    index, then the lower threshold. Returns None when no split has a
    strictly positive decrease.
    """
    n = len(y)
    node_counts = np.bincount(y, minlength=n_classes).astype(np.int64)
    ss_node = int((node_counts * node_counts).sum())
    if n < 2 or ss_node == n * n:
        return None
    g_node = (n * n - ss_node) / (n * n)

    best = None  # (delta, feature, threshold)
    onehot = np.eye(n_classes, dtype=np.int64)
    for f in sorted(int(c) for c in candidates):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        v = col[order]
        boundaries = np.flatnonzero(v[:-1] != v[1:])
        if boundaries.size == 0:
            continue
        left_counts = onehot[y[order]].cumsum(axis=0)  # counts up to row i
        nl = boundaries + 1
        nr = n - nl
        cl = left_counts[boundaries]
        ss_l = (cl * cl).sum(axis=1)
        cr = node_counts - cl
        ss_r = (cr * cr).sum(axis=1)
        gl = (nl * nl - ss_l) / (nl * nl)
        gr = (nr * nr - ss_r) / (nr * nr)
        delta = g_node - (nl / n) * gl - (nr / n) * gr
        pick = int(np.argmax(delta))
        d = float(delta[pick])
        if d > 0 and (best is None or d > best[0]):
            i = boundaries[pick]
            thr = (v[i] + v[i + 1]) / 2
            best = (d, f, float(thr))
    if best is None:
        return None
    return best[1], best[2], best[0]


def fit_tree(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    mtry: int,
    rng: np.random.Generator,
    importance_out: np.ndarray | None = None,
) -> TreeNode:
    """Grow one tree on a bootstrap of the rows.

    The generator is consumed in a fixed order (bootstrap first, then a
    candidate-feature draw per internal node, depth-first, left before
    right), making the tree a pure function of the stream.
    """
    n, p = x.shape
    take = rng.integers(0, n, size=n)
    xb, yb = x[take], y[take]
    k = min(mtry, p)

    root = TreeNode()
    stack = [(root, np.arange(n))]
    while stack:
        node, rows = stack.pop()
        counts = np.bincount(yb[rows], minlength=n_classes).astype(np.int64)
        majority = int(np.argmax(counts))
        if len(rows) < 2 or int((counts * counts).sum()) == len(rows) * len(rows):
            node.class_index = majority
            continue
        candidates = rng.choice(p, size=k, replace=False)
        split = best_split(xb[rows], yb[rows], candidates, n_classes)
        if split is None:
            node.class_index = majority
            continue
        feature, threshold, delta = split
        if importance_out is not None:
            importance_out[feature] += (len(rows) / n) * delta
        go_left = xb[rows, feature] <= threshold
        node.feature = feature
        node.threshold = threshold
        node.left = TreeNode()
        node.right = TreeNode()
        # left is pushed last so it is grown first
        stack.append((node.right, rows[~go_left]))
        stack.append((node.left, rows[go_left]))
    return root


def _tree_predict(node: TreeNode, x: np.ndarray) -> np.ndarray:
    """Class index per row of x for a single tree."""
    out = np.empty(len(x), dtype=np.int64)
    stack = [(node, np.arange(len(x)))]
    while stack:
        nd, rows = stack.pop()
        if rows.size == 0:
            continue
        if nd.is_leaf:
            out[rows] = nd.class_index
            continue
        go_left = x[rows, nd.feature] <= nd.threshold
        stack.append((nd.left, rows[go_left]))
        stack.append((nd.right, rows[~go_left]))
    return out


def fit_forest(
    data: AnnotatedDataset,
    n_trees: int,
    mtry: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> Forest:
    """Fit a bagged forest; deterministic for a fixed seed at any thread
    count because each tree owns a stream derived from (seed, index)."""
    if n_trees < 1:
        raise ConfigError(f"n_trees must be >= 1, got {n_trees}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    x = data.sample_major()
    y = data.labels
    n_classes = data.n_classes
    p = x.shape[1]
    if mtry is None:
        mtry = default_mtry(p)
    if mtry < 1:
        raise ConfigError(f"mtry must be >= 1, got {mtry}")

    def one(i: int) -> tuple[TreeNode, np.ndarray]:
        imp = np.zeros(p)
        tree = fit_tree(x, y, n_classes, mtry, substream(seed, "tree", i), imp)
        return tree, imp

    if threads == 1:
        fitted = [one(i) for i in range(n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fitted = list(pool.map(one, range(n_trees)))

    trees = [t for t, _ in fitted]
    # summed in tree order so the total is schedule-independent
    importances = np.zeros(p)
    for _, imp in fitted:
        importances += imp
    importances /= n_trees
    return Forest(
        trees=trees,
        mtry=mtry,
        feature_ids=list(data.matrix.feature_ids),
        class_names=list(data.class_names),
        importances=importances,
        seed=seed,
    )


def predict_forest(forest: Forest, data) -> tuple[np.ndarray, np.ndarray]:
    """Majority-vote labels (ties to the lowest class index) and the
    per-class vote fractions."""
    if isinstance(data, ExpressionMatrix):
        if data.feature_ids != forest.feature_ids:
            raise DataError("matrix features do not match the fitted forest")
        x = data.sample_major()
    else:
        x = np.asarray(data, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != len(forest.feature_ids):
            raise DataError(
                f"input has shape {x.shape}, expected (n, {len(forest.feature_ids)})"
            )
    n_classes = len(forest.class_names)
    votes = np.zeros((len(x), n_classes), dtype=np.int64)
    for tree in forest.trees:
        pred = _tree_predict(tree, x)
        votes[np.arange(len(x)), pred] += 1
    labels = votes.argmax(axis=1)
    return labels, votes / forest.n_trees


@dataclass
class TwoStageResult:
    forest: Forest
    selected_feature_ids: list[str]  # importance rank order, best first
    kept_indices: np.ndarray  # into the input feature axis, matrix order
    stage1_importances: np.ndarray


def two_stage_fit(
    data: AnnotatedDataset,
    stage1_trees: int = 100,
    keep: int = 1000,
    stage2_trees: int = 500,
    seed: int = 0,
    threads: int = 1,
) -> TwoStageResult:
    """Rank features with a small forest, keep the top min(keep, p) by
    mean Gini decrease (ties to the lower index), refit a larger forest
    on the kept columns with mtry recomputed for the reduced width."""
    if keep < 1:
        raise ConfigError(f"keep must be >= 1, got {keep}")
    stage1 = fit_forest(data, stage1_trees, seed=seed, threads=threads)
    p = data.n_features
    k = min(keep, p)
    rank = sorted(range(p), key=lambda j: (-stage1.importances[j], j))[:k]
    kept = np.array(sorted(rank), dtype=np.int64)

    reduced = data.with_matrix(data.matrix.subset_features(kept))
    stage2 = fit_forest(
        reduced, stage2_trees, mtry=default_mtry(k), seed=seed, threads=threads
    )
    return TwoStageResult(
        forest=stage2,
        selected_feature_ids=[data.matrix.feature_ids[j] for j in rank],
        kept_indices=kept,
        stage1_importances=stage1.importances,
    )


def _node_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"leaf": node.class_index}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(doc: dict) -> TreeNode:
    if "leaf" in doc:
        return TreeNode(class_index=int(doc["leaf"]))
    return TreeNode(
        feature=int(doc["feature"]),
        threshold=float(doc["threshold"]),
        left=_node_from_dict(doc["left"]),
        right=_node_from_dict(doc["right"]),
    )


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format_version": 1,
        "kind": "rf",
        "mtry": forest.mtry,
        "seed": forest.seed,
        "feature_ids": list(forest.feature_ids),
        "class_names": list(forest.class_names),
        "importances": forest.importances.tolist(),
        "trees": [_node_to_dict(t) for t in forest.trees],
    }


def forest_from_dict(doc: dict) -> Forest:
    if doc.get("format_version") != 1 or doc.get("kind") != "rf":
        raise DataError("not a version-1 rf model document")
    return Forest(
        trees=[_node_from_dict(t) for t in doc["trees"]],
        mtry=int(doc["mtry"]),
        feature_ids=list(doc["feature_ids"]),
        class_names=list(doc["class_names"]),
        importances=np.array(doc["importances"], dtype=np.float64),
        seed=int(doc["seed"]),
    )


def serialize_forest(forest: Forest) -> str:
    return json.dumps(forest_to_dict(forest), sort_keys=True, separators=(",", ":"))


def deserialize_forest(text: str) -> Forest:
    return forest_from_dict(json.loads(text))
