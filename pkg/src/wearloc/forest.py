"""CART decision trees and a random-forest ensemble with class-probability leaves.

Trees are grown breadth first. Together with the per-tree seeding this gives
two exact identities that the grid search relies on:

* the first ``m`` trees of a forest are the forest trained with ``n_trees=m``;
* a tree grown without a depth limit, cut at depth ``d``, is the tree grown
  with ``max_depth=d`` (every node at depth < d consumes the same random
  draws in the same order, and nodes at depth d keep their class histogram).

See :meth:`RandomForestModel.prefix` and :meth:`RandomForestModel.truncate`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

SCHEMA_VERSION = 1
MODEL_KINDS = ("moving", "location")

# splits must reduce Gini impurity by more than this
_MIN_DECREASE = 1e-12
# gains closer than this count as a tie; the first candidate in (feature, threshold) order wins
_TIE_TOL = 1e-12
_NO_LIMIT = np.iinfo(np.int64).max


class ModelError(ValueError):
    """Base class for model construction, usage and file errors."""


class SchemaError(ModelError):
    pass


class VersionError(ModelError):
    pass


class DimensionError(ModelError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    features_per_split: Optional[int] = None  # None -> floor(sqrt(feature_dim))
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")

    def resolved_features(self, dim: int) -> int:
        k = self.features_per_split if self.features_per_split is not None else max(1, math.isqrt(dim))
        if not 1 <= k <= dim:
            raise ValueError(f"features_per_split={k} outside [1, {dim}]")
        return k

    def key(self) -> tuple:
        """Sort key used for canonical tie-breaking (unlimited depth sorts last)."""
        depth = math.inf if self.max_depth is None else self.max_depth
        return (self.n_trees, depth, self.min_samples_leaf)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sort_by_rank(rank, m, keys, tmp, pos, tmp_pos, n_ranks):
    # order positions 0..m-1 by rank; output rank values in keys, positions in pos.
    # Insertion sort for small nodes, LSD radix sort (8-bit digits) otherwise.
    if m <= 48:
        for i in range(m):
            keys[i] = rank[i]
            pos[i] = i
        for i in range(1, m):
            kv = keys[i]
            pv = pos[i]
            j = i - 1
            while j >= 0 and keys[j] > kv:
                keys[j + 1] = keys[j]
                pos[j + 1] = pos[j]
                j -= 1
            keys[j + 1] = kv
            pos[j + 1] = pv
        return
    for i in range(m):
        keys[i] = rank[i]
        pos[i] = i
    count = np.zeros(257, dtype=np.int64)
    shift = 0
    while (n_ranks - 1) >> shift > 0 or shift == 0:
        count[:] = 0
        for i in range(m):
            count[((keys[i] >> shift) & 255) + 1] += 1
        for b in range(256):
            count[b + 1] += count[b]
        for i in range(m):
            b = (keys[i] >> shift) & 255
            tmp[count[b]] = keys[i]
            tmp_pos[count[b]] = pos[i]
            count[b] += 1
        for i in range(m):
            keys[i] = tmp[i]
            pos[i] = tmp_pos[i]
        shift += 8


@njit(cache=True)
def _grow_tree(XT, RT, n_ranks, y, n_classes, seed, max_depth, min_leaf, k, bootstrap):
    d, n = XT.shape
    np.random.seed(seed)
    weight = np.zeros(n, dtype=np.int64)
    if bootstrap:
        for _ in range(n):
            weight[np.random.randint(0, n)] += 1
    else:
        weight[:] = 1

    n_unique = 0
    for i in range(n):
        if weight[i] > 0:
            n_unique += 1
    idx = np.empty(n_unique, dtype=np.int64)
    j = 0
    for i in range(n):
        if weight[i] > 0:
            idx[j] = i
            j += 1

    cap = 2 * n_unique + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    hist = np.zeros((cap, n_classes), dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    stop = np.zeros(cap, dtype=np.int64)

    stop[0] = n_unique
    n_nodes = 1
    perm = np.empty(d, dtype=np.int64)
    cand = np.empty(k, dtype=np.int64)
    rank = np.empty(n_unique, dtype=np.int64)
    keys = np.empty(n_unique, dtype=np.int64)
    tmp = np.empty(n_unique, dtype=np.int64)
    order = np.empty(n_unique, dtype=np.int64)
    tmp_pos = np.empty(n_unique, dtype=np.int64)
    ys = np.empty(n_unique, dtype=np.int64)
    ws = np.empty(n_unique, dtype=np.int64)
    cl = np.empty(n_classes, dtype=np.int64)

    node = 0
    while node < n_nodes:
        s, e = start[node], stop[node]
        for i in range(s, e):
            hist[node, y[idx[i]]] += weight[idx[i]]
        total = 0
        n_nonzero = 0
        parent_sq = 0.0
        for c in range(n_classes):
            total += hist[node, c]
            if hist[node, c] > 0:
                n_nonzero += 1
            parent_sq += float(hist[node, c]) * hist[node, c]
        if n_nonzero <= 1 or depth[node] >= max_depth or total < 2 * min_leaf:
            node += 1
            continue

        for f in range(d):
            perm[f] = f
        for j in range(k):
            r = np.random.randint(j, d)
            t_ = perm[j]
            perm[j] = perm[r]
            perm[r] = t_
        cand[:] = perm[:k]
        cand.sort()

        m = e - s
        for i in range(m):
            ys[i] = y[idx[s + i]]
            ws[i] = weight[idx[s + i]]
        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        parent_proxy = parent_sq / total
        for fi in range(k):
            f = cand[fi]
            for i in range(m):
                rank[i] = RT[f, idx[s + i]]
            _sort_by_rank(rank, m, keys, tmp, order, tmp_pos, n_ranks[f])
            if keys[0] == keys[m - 1]:
                continue
            cl[:] = 0
            n_left = 0
            for i in range(m - 1):
                o = order[i]
                cl[ys[o]] += ws[o]
                n_left += ws[o]
                if keys[i] == keys[i + 1]:
                    continue
                n_right = total - n_left
                if n_left < min_leaf or n_right < min_leaf:
                    continue
                sq_l = 0.0
                sq_r = 0.0
                for c in range(n_classes):
                    a = float(cl[c])
                    b = float(hist[node, c] - cl[c])
                    sq_l += a * a
                    sq_r += b * b
                gain = (sq_l / n_left + sq_r / n_right - parent_proxy) / total
                if gain > best_gain + _TIE_TOL:
                    best_gain = gain
                    best_f = f
                    lo = XT[f, idx[s + o]]
                    hi = XT[f, idx[s + order[i + 1]]]
                    thr = 0.5 * (lo + hi)
                    if not thr < hi:
                        thr = lo
                    best_thr = thr

        if best_f < 0 or best_gain <= _MIN_DECREASE:
            node += 1
            continue

        # partition idx[s:e] so that samples going left come first
        lo_i = s
        hi_i = e - 1
        while lo_i <= hi_i:
            if XT[best_f, idx[lo_i]] <= best_thr:
                lo_i += 1
            else:
                t_ = idx[lo_i]
                idx[lo_i] = idx[hi_i]
                idx[hi_i] = t_
                hi_i -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        start[n_nodes], stop[n_nodes] = s, lo_i
        start[n_nodes + 1], stop[n_nodes + 1] = lo_i, e
        depth[n_nodes] = depth[node] + 1
        depth[n_nodes + 1] = depth[node] + 1
        n_nodes += 2
        node += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), depth[:n_nodes].copy(), hist[:n_nodes].copy())


def _dense_ranks(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Feature-major dense ranks (equal values share a rank) and rank counts per feature."""
    ranks = np.empty((X.shape[1], X.shape[0]), dtype=np.int64)
    n_ranks = np.empty(X.shape[1], dtype=np.int64)
    for f in range(X.shape[1]):
        uniq, inv = np.unique(X[:, f], return_inverse=True)
        ranks[f] = inv
        n_ranks[f] = uniq.size
    return ranks, n_ranks


@njit(cache=True)
def _apply(feature, threshold, left, right, depth, X, max_depth):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0 and depth[node] < max_depth:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat breadth-first node arrays; ``feature == -1`` marks a leaf.

    ``hist`` holds the (bootstrap-weighted) class counts of the training
    samples routed to each node. Internal-node histograms are kept in memory
    for truncation but are not serialized.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    hist: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def max_depth(self) -> int:
        leaves = self.feature < 0
        return int(self.depth[leaves].max()) if leaves.any() else 0

    def leaves(self, X: np.ndarray, max_depth: Optional[int] = None) -> np.ndarray:
        limit = _NO_LIMIT if max_depth is None else max_depth
        return _apply(self.feature, self.threshold, self.left, self.right, self.depth,
                      np.ascontiguousarray(X, dtype=float), limit)

    def predict_proba(self, X: np.ndarray, max_depth: Optional[int] = None) -> np.ndarray:
        h = self.hist[self.leaves(X, max_depth)].astype(float)
        return h / h.sum(axis=1, keepdims=True)

    def truncate(self, max_depth: int) -> "DecisionTree":
        keep = self.depth <= max_depth
        n = int(keep.sum())  # breadth-first order makes this a prefix
        cut = self.depth[:n] >= max_depth
        feature = np.where(cut, -1, self.feature[:n])
        return DecisionTree(feature, np.where(cut, 0.0, self.threshold[:n]),
                            np.where(cut, -1, self.left[:n]), np.where(cut, -1, self.right[:n]),
                            self.depth[:n].copy(), self.hist[:n].copy())

    def to_nodes(self) -> list:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"hist": [int(c) for c in self.hist[i]]})
            else:
                nodes.append({"f": int(self.feature[i]), "thr": float(self.threshold[i]),
                              "l": int(self.left[i]), "r": int(self.right[i])})
        return nodes

    @classmethod
    def from_nodes(cls, nodes: list, n_classes: int, feature_dim: int) -> "DecisionTree":
        n = len(nodes)
        if n == 0:
            raise SchemaError("tree without nodes")
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        hist = np.zeros((n, n_classes), dtype=np.int64)
        for i, node in enumerate(nodes):
            if not isinstance(node, dict):
                raise SchemaError(f"node {i} is not an object")
            if "hist" in node:
                h = node["hist"]
                if (not isinstance(h, list) or len(h) != n_classes or sum(h) <= 0
                        or any(not isinstance(c, int) or c < 0 for c in h)):
                    raise SchemaError(f"node {i}: bad histogram")
                hist[i] = h
            elif {"f", "thr", "l", "r"} <= node.keys():
                f, l, r = node["f"], node["l"], node["r"]
                if not (isinstance(f, int) and 0 <= f < feature_dim):
                    raise SchemaError(f"node {i}: bad feature index")
                if not all(isinstance(c, int) and i < c < n for c in (l, r)):
                    raise SchemaError(f"node {i}: bad child index")
                if not isinstance(node["thr"], (int, float)) or not math.isfinite(node["thr"]):
                    raise SchemaError(f"node {i}: bad threshold")
                feature[i], threshold[i], left[i], right[i] = f, float(node["thr"]), l, r
            else:
                raise SchemaError(f"node {i}: neither leaf nor split")
        depth = np.zeros(n, dtype=np.int64)
        for i in range(n):
            if feature[i] >= 0:
                depth[left[i]] = depth[right[i]] = depth[i] + 1
        # children always follow their parent, so a reverse sweep rebuilds internal counts
        for i in range(n - 1, -1, -1):
            if feature[i] >= 0:
                hist[i] = hist[left[i]] + hist[right[i]]
        return cls(feature, threshold, left, right, depth, hist)


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    trees: Tuple[DecisionTree, ...]
    params: ForestParams
    label_vocabulary: Tuple[str, ...]
    feature_dim: int
    kind: str = "location"
    vru: Optional[str] = None

    @property
    def n_classes(self) -> int:
        return len(self.label_vocabulary)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_dim(X, self.feature_dim)
        total = np.zeros((X.shape[0], self.n_classes))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Labels and probabilities for a batch; argmax ties go to the lowest class index."""
        proba = self.predict_proba(X)
        labels = np.asarray(self.label_vocabulary)[np.argmax(proba, axis=1)]
        return labels, proba

    def prefix(self, n_trees: int) -> "RandomForestModel":
        if not 1 <= n_trees <= len(self.trees):
            raise ValueError("prefix length out of range")
        return replace(self, trees=self.trees[:n_trees], params=replace(self.params, n_trees=n_trees))

    def truncate(self, max_depth: Optional[int]) -> "RandomForestModel":
        if self.params.max_depth is not None and (max_depth is None or max_depth > self.params.max_depth):
            raise ValueError("cannot deepen a depth-limited forest")
        if max_depth is None:
            return self
        return replace(self, trees=tuple(t.truncate(max_depth) for t in self.trees),
                       params=replace(self.params, max_depth=max_depth))


def _check_dim(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionError(f"expected feature dimension {dim}, got {X.shape[-1]}")
    return X


def tree_seed(seed: int, index: int) -> int:
    # numba's generator takes a 32-bit seed
    return (seed + index) % (2 ** 32)


def train_forest(X: np.ndarray, labels: Sequence[str], params: ForestParams = ForestParams(),
                 vocabulary: Optional[Sequence[str]] = None, kind: str = "location",
                 vru: Optional[str] = None) -> RandomForestModel:
    """Grow ``params.n_trees`` Gini trees on bootstrap samples of ``(X, labels)``.

    Tree ``i`` draws its bootstrap sample and per-node feature subsets from a
    generator seeded with ``seed + i``. Candidate thresholds are midpoints
    between consecutive distinct values; ties in Gini decrease go to the
    lowest feature index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("training data contains non-finite values")
    labels = np.asarray(labels, dtype=str)
    if labels.shape != (X.shape[0],):
        raise DimensionError("labels and feature rows disagree in length")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    vocab = tuple(vocabulary) if vocabulary is not None else tuple(sorted(set(labels.tolist())))
    lookup = {c: i for i, c in enumerate(vocab)}
    try:
        y = np.array([lookup[v] for v in labels.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not in vocabulary") from None

    k = params.resolved_features(X.shape[1])
    depth = _NO_LIMIT if params.max_depth is None else params.max_depth
    XT = np.ascontiguousarray(X.T)
    ranks, n_ranks = _dense_ranks(X)
    trees = []
    for i in range(params.n_trees):
        arrays = _grow_tree(XT, ranks, n_ranks, y, len(vocab), tree_seed(params.seed, i), depth,
                            params.min_samples_leaf, k, params.bootstrap)
        trees.append(DecisionTree(*arrays))
    return RandomForestModel(tuple(trees), params, vocab, X.shape[1], kind, vru)


def predict(model: RandomForestModel, x) -> Tuple[str, np.ndarray]:
    """Label and class-probability vector for a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionError("predict takes one feature vector")
    labels, proba = model.predict(x)
    return str(labels[0]), proba[0]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_to_dict(model: RandomForestModel) -> dict:
    doc = {
        "version": SCHEMA_VERSION,
        "kind": model.kind,
        "label_vocabulary": list(model.label_vocabulary),
        "feature_dim": model.feature_dim,
        "params": asdict(model.params),
        "trees": [{"nodes": t.to_nodes()} for t in model.trees],
    }
    if model.vru is not None:
        doc["vru"] = model.vru
    return doc


def serialize(model: RandomForestModel) -> bytes:
    return json.dumps(model_to_dict(model), sort_keys=True, separators=(",", ":")).encode("utf-8")


def deserialize(data: bytes) -> RandomForestModel:
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("model document must be a JSON object")
    if "version" not in doc:
        raise SchemaError("missing version")
    if doc["version"] != SCHEMA_VERSION:
        raise VersionError(f"unsupported model version {doc['version']!r} (expected {SCHEMA_VERSION})")
    for key in ("kind", "label_vocabulary", "feature_dim", "params", "trees"):
        if key not in doc:
            raise SchemaError(f"missing field {key!r}")
    if doc["kind"] not in MODEL_KINDS:
        raise SchemaError(f"bad kind {doc['kind']!r}")
    vocab = doc["label_vocabulary"]
    if not isinstance(vocab, list) or not vocab or not all(isinstance(v, str) for v in vocab):
        raise SchemaError("bad label_vocabulary")
    dim = doc["feature_dim"]
    if not isinstance(dim, int) or dim < 1:
        raise SchemaError("bad feature_dim")
    try:
        params = ForestParams(**doc["params"])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad params: {exc}") from None
    trees = doc["trees"]
    if not isinstance(trees, list) or len(trees) != params.n_trees:
        raise SchemaError("tree count does not match params.n_trees")
    parsed = []
    for t in trees:
        if not isinstance(t, dict) or not isinstance(t.get("nodes"), list):
            raise SchemaError("bad tree entry")
        parsed.append(DecisionTree.from_nodes(t["nodes"], len(vocab), dim))
    return RandomForestModel(tuple(parsed), params, tuple(vocab), dim, doc["kind"], doc.get("vru"))


def save_model(model: RandomForestModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> RandomForestModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
