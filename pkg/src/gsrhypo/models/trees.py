"""Random forest (weighted Gini) and gradient-boosted trees (logistic loss).

Both grow depth-limited binary trees level by level. Each feature is
argsorted once per fit; at every level the active samples are regrouped by
node with a stable sort, so each node sees its samples in feature order and
all candidate thresholds of a level are scored in one vectorized pass.

A fitted tree is four parallel node arrays: ``feature`` (-1 on leaves),
``threshold``, ``left``/``right`` child indices and ``value``. Samples go
left when ``x[feature] <= threshold``. Forests and boosted ensembles store
all trees concatenated with ``offsets`` marking each tree's root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ConfigError, InsufficientClassError, InvalidSplitError, NumericalError
from ..seeds import derive_seed
from .base import BCE_EPS, EarlyStopper, Family, TrainConfig, TrainedModel, check_layout


def gini_impurity(class_counts) -> float:
    """``1 - sum(p_c^2)`` for (possibly weighted) class counts."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise InvalidSplitError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise InvalidSplitError("cannot compute impurity of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


# --------------------------------------------------------------------------
# tree growing


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _traverse(self.feature, self.threshold, self.left, self.right, self.value,
                         np.zeros((len(X), 1), dtype=np.int64), X)[:, 0]


# score(l0, l1, r0, r1) -> quality of a split, larger is better, where
# (l0, l1) and (r0, r1) are the summed per-sample statistics of each child
SplitScore = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _best_splits(Xt, order_by_feature, s0, s1, node_of, n_nodes, allowed, score, valid_child):
    """Best (feature, threshold, score) for each of ``n_nodes`` nodes.

    ``Xt`` is the transposed feature matrix. ``node_of`` holds each
    sample's node index at this level (-1 when the sample is out of play).
    ``allowed`` is a (n_nodes, d) feature mask. Ties keep the lowest
    feature index and the lowest threshold.
    """
    best_score = np.full(n_nodes, -np.inf)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    live = node_of >= 0
    t0 = np.bincount(node_of[live], weights=s0[live], minlength=n_nodes)
    t1 = np.bincount(node_of[live], weights=s1[live], minlength=n_nodes)
    key_dtype = np.int8 if n_nodes < 2 ** 7 else np.int64
    nodes = np.arange(n_nodes)
    for f in range(Xt.shape[0]):
        if not allowed[:, f].any():
            continue
        order = order_by_feature[f]
        nid = node_of[order]
        order = order[nid >= 0]
        nid = nid[nid >= 0]
        if n_nodes > 1:
            perm = np.argsort(nid.astype(key_dtype), kind="stable")
            order, nid = order[perm], nid[perm]
        x = Xt[f][order]
        c0 = np.cumsum(s0[order])
        c1 = np.cumsum(s1[order])
        # candidate split after position j keeps j and everything before it
        # (within the same node) on the left
        ok = (nid[:-1] == nid[1:]) & (x[:-1] < x[1:])
        if not allowed[:, f].all():
            ok &= allowed[nid[:-1], f]
        j = np.flatnonzero(ok)
        if len(j) == 0:
            continue
        starts = np.searchsorted(nid, nodes)
        prev = np.maximum(starts - 1, 0)
        b0 = np.where(starts > 0, c0[prev], 0.0)
        b1 = np.where(starts > 0, c1[prev], 0.0)
        nj = nid[j]
        l0 = c0[j] - b0[nj]
        l1 = c1[j] - b1[nj]
        r0 = t0[nj] - l0
        r1 = t1[nj] - l1
        sc = score(l0, l1, r0, r1)
        sc[~valid_child(l0, l1, r0, r1)] = -np.inf
        # nj is sorted, so each node's candidates form one contiguous run
        seg_nodes, seg_start = np.unique(nj, return_index=True)
        seg_max = np.maximum.reduceat(sc, seg_start)
        node_max = np.full(n_nodes, -np.inf)
        node_max[seg_nodes] = seg_max
        hit = np.flatnonzero((sc == node_max[nj]) & np.isfinite(sc))
        nodes_hit, first = np.unique(nj[hit], return_index=True)
        pick = j[hit[first]]
        better = node_max[nodes_hit] > best_score[nodes_hit]
        nodes_hit, pick = nodes_hit[better], pick[better]
        lo, hi = x[pick], x[pick + 1]
        thr = 0.5 * (lo + hi)
        thr = np.where((thr >= hi) | ~np.isfinite(thr), lo, thr)
        best_score[nodes_hit] = node_max[nodes_hit]
        best_feat[nodes_hit] = f
        best_thr[nodes_hit] = thr
    return best_feat, best_thr, best_score, np.column_stack([t0, t1])


def grow_tree(
    X: np.ndarray,
    order_by_feature: np.ndarray,
    stats: np.ndarray,
    active: np.ndarray,
    max_depth: int,
    score: SplitScore,
    leaf_value: Callable[[np.ndarray], np.ndarray],
    min_gain: Callable[[np.ndarray], np.ndarray],
    valid_child: Callable[..., np.ndarray],
    feature_mask: Callable[[int], np.ndarray] | None = None,
    stop: Callable[[np.ndarray], np.ndarray] | None = None,
    Xt: np.ndarray | None = None,
) -> Tree:
    """Grow one tree breadth-first.

    ``stats`` is a per-sample (n, 2) statistic matrix that the callbacks
    consume: ``score`` rates a candidate split from summed child stats,
    ``min_gain`` gives the parent-only term a split must beat,
    ``leaf_value`` maps summed (k, 2) node stats to node values and
    ``stop`` marks nodes that must not split (for example, pure ones).
    """
    n, d = X.shape
    Xt = np.ascontiguousarray(X.T) if Xt is None else Xt
    s0 = np.ascontiguousarray(stats[:, 0])
    s1 = np.ascontiguousarray(stats[:, 1])
    feature, threshold, left, right, totals = [-1], [0.0], [-1], [-1], [None]
    node_of = np.where(active, 0, -1).astype(np.int64)
    level = [0]
    for depth in range(max_depth + 1):
        k = len(level)
        allowed = feature_mask(k) if feature_mask is not None else np.ones((k, d), dtype=bool)
        if depth == max_depth:
            allowed = np.zeros((k, d), dtype=bool)
        best_feat, best_thr, best_score, node_total = _best_splits(
            Xt, order_by_feature, s0, s1, node_of, k, allowed, score, valid_child)
        for a, gid in enumerate(level):
            totals[gid] = node_total[a]
        split = (best_feat >= 0) & (best_score > min_gain(node_total))
        if stop is not None:
            split &= ~stop(node_total)
        if not split.any():
            break
        next_level = []
        child_local = np.full(k, -1, dtype=np.int64)
        for a in np.flatnonzero(split):
            gid = level[a]
            feature[gid], threshold[gid] = int(best_feat[a]), float(best_thr[a])
            left[gid], right[gid] = len(feature), len(feature) + 1
            child_local[a] = len(next_level)
            next_level += [left[gid], right[gid]]
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            totals += [None, None]
        live = np.flatnonzero(node_of >= 0)
        local = node_of[live]
        goes = split[local]
        node_of[live[~goes]] = -1
        rows = live[goes]
        a = local[goes]
        go_right = X[rows, best_feat[a]] > best_thr[a]
        node_of[rows] = child_local[a] + go_right
        level = next_level
    tot = np.array([t if t is not None else np.zeros(2) for t in totals])
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        leaf_value(tot),
    )


def _traverse(feature, threshold, left, right, value, roots: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Leaf values reached from each root for each row; ``roots`` is (n, T)."""
    node = roots.copy()
    rows = np.arange(len(X))[:, None]
    while True:
        f = feature[node]
        inner = f >= 0
        if not inner.any():
            break
        xv = X[rows, np.where(inner, f, 0)]
        nxt = np.where(xv <= threshold[node], left[node], right[node])
        node = np.where(inner, nxt, node)
    return value[node]


def _pack(trees: list[Tree]) -> dict[str, np.ndarray]:
    sizes = [t.n_nodes for t in trees]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    shift = lambda arr, off: np.where(arr >= 0, arr + off, -1)
    return {
        "offsets": offsets.astype(np.float64),
        "feature": np.concatenate([t.feature for t in trees]).astype(np.float64),
        "threshold": np.concatenate([t.threshold for t in trees]),
        "left": np.concatenate([shift(t.left, o) for t, o in zip(trees, offsets)]).astype(np.float64),
        "right": np.concatenate([shift(t.right, o) for t, o in zip(trees, offsets)]).astype(np.float64),
        "value": np.concatenate([t.value for t in trees]),
    }


def unpack_trees(params: dict[str, np.ndarray]) -> list[Tree]:
    offsets = params["offsets"].astype(np.int64)
    ends = np.append(offsets[1:], len(params["feature"]))
    out = []
    for o, e in zip(offsets, ends):
        unshift = lambda arr: np.where(arr >= 0, arr - o, -1).astype(np.int64)
        out.append(Tree(params["feature"][o:e].astype(np.int64), params["threshold"][o:e].copy(),
                        unshift(params["left"][o:e]), unshift(params["right"][o:e]),
                        params["value"][o:e].copy()))
    return out


def ensemble_leaf_values(params: dict[str, np.ndarray], X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """(n, n_trees) matrix of leaf values."""
    feature = params["feature"].astype(np.int64)
    left = params["left"].astype(np.int64)
    right = params["right"].astype(np.int64)
    offsets = params["offsets"].astype(np.int64)
    out = np.empty((len(X), len(offsets)))
    for a in range(0, len(X), chunk):
        xs = X[a:a + chunk]
        roots = np.broadcast_to(offsets, (len(xs), len(offsets)))
        out[a:a + chunk] = _traverse(feature, params["threshold"], left, right, params["value"], roots, xs)
    return out


def _presort(X: np.ndarray) -> np.ndarray:
    return np.argsort(X, axis=0, kind="stable").T.copy()


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ConfigError(f"expected a 2-D feature matrix matching {len(y)} labels, got {X.shape}")
    if len(y) == 0:
        raise InsufficientClassError("no training samples")
    if not np.all(np.isfinite(X)):
        raise NumericalError("feature matrix contains non-finite values")
    return X, y


# --------------------------------------------------------------------------
# random forest


def _gini_score(l0, l1, r0, r1) -> np.ndarray:
    """Negated weighted child impurity, up to a per-node constant:
    ``sum_c L_c^2 / |L| + sum_c R_c^2 / |R|``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return (l0 * l0 + l1 * l1) / (l0 + l1) + (r0 * r0 + r1 * r1) / (r0 + r1)


def _gini_parent(total: np.ndarray) -> np.ndarray:
    w = total.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        base = (total * total).sum(axis=1) / w
    # a split must strictly reduce weighted impurity
    return base * (1.0 + 1e-12) + 1e-300


def _hypo_fraction(total: np.ndarray) -> np.ndarray:
    w = total.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(w > 0, total[:, 0] / np.where(w > 0, w, 1.0), 0.0)


def fit_random_forest(X, y, n_trees: int = 100, cfg: TrainConfig | None = None) -> TrainedModel:
    """Bagged Gini trees; each node considers ``floor(sqrt(d))`` random features.

    Bootstrap multiplicities and class weights enter as sample weights, so
    impurities and leaf fractions are weighted. A single-class training set
    yields constant trees predicting that class with probability 1.
    """
    cfg = cfg or TrainConfig()
    X, y = _check_xy(X, y)
    if n_trees < 1:
        raise ConfigError("n_trees must be at least 1")
    n, d = X.shape
    weights = cfg.weights()
    cw = np.where(y == 1, weights.w_hypo, weights.w_normo)
    order = _presort(X)
    Xt = np.ascontiguousarray(X.T)
    mtry = max(1, int(math.isqrt(d)))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(derive_seed(cfg.seed, "rf", t))
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        w = counts * cw
        stats = np.column_stack([w * y, w * (1.0 - y)])

        def feature_mask(k, rng=rng):
            pick = np.argsort(rng.random((k, d)), axis=1)[:, :mtry]
            mask = np.zeros((k, d), dtype=bool)
            np.put_along_axis(mask, pick, True, axis=1)
            return mask

        trees.append(grow_tree(
            X, order, stats, counts > 0, cfg.max_depth, _gini_score, _hypo_fraction, _gini_parent,
            lambda l0, l1, r0, r1: (l0 + l1 > 0) & (r0 + r1 > 0),
            feature_mask=feature_mask, Xt=Xt,
            stop=lambda tot: (tot[:, 0] <= 0) | (tot[:, 1] <= 0),
        ))
    params = _pack(trees)
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "n_trees": n_trees, "max_features": mtry}
    return TrainedModel(Family.RF, (d,), params, meta, cfg.threshold)


def tree_probabilities(model: TrainedModel, X) -> np.ndarray:
    """Per-tree Hypo probabilities, shape (n, n_trees)."""
    X = check_layout(model, X)
    return ensemble_leaf_values(model.params, X)


def predict_forest(model: TrainedModel, X) -> np.ndarray:
    return tree_probabilities(model, X).mean(axis=1)


# --------------------------------------------------------------------------
# gradient-boosted trees


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _gbdt_sample_weights(y: np.ndarray, scale_pos_weight: float) -> np.ndarray:
    return np.where(y == 1, scale_pos_weight, 1.0)


def _bce(p: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def initial_score(y, sample_weights) -> float:
    """Log-odds of the weighted positive rate."""
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(sample_weights, dtype=np.float64)
    rate = float(np.sum(w * y) / np.sum(w))
    rate = min(max(rate, BCE_EPS), 1.0 - BCE_EPS)
    return math.log(rate / (1.0 - rate))


def fit_gbdt(X, y, cfg: TrainConfig | None = None, scale_pos_weight: float | None = None,
             X_val=None, y_val=None) -> TrainedModel:
    """Second-order boosting of depth-limited regression trees on logistic loss.

    Positive samples carry weight ``scale_pos_weight`` in the gradients,
    the hessians, the initial score and the validation loss. When it is not
    given it comes from ``cfg.class_weights`` (or is 1 with class weights
    switched off). Training stops once the validation loss has not improved
    for ``cfg.gbdt_patience`` rounds and keeps the best prefix of trees.
    """
    cfg = cfg or TrainConfig()
    X, y = _check_xy(X, y)
    if X_val is None or y_val is None or len(y_val) == 0:
        raise ConfigError("gradient boosting needs a non-empty validation set")
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if y.min() == y.max():
        raise InsufficientClassError("gradient boosting needs both classes in training")
    if scale_pos_weight is None:
        scale_pos_weight = cfg.class_weights.scale_pos_weight if cfg.use_class_weights else 1.0
    if not scale_pos_weight > 0:
        raise ConfigError("scale_pos_weight must be positive")
    lam, mcw, eta = cfg.gbdt_lambda, cfg.gbdt_min_child_weight, cfg.gbdt_eta

    w = _gbdt_sample_weights(y, scale_pos_weight)
    w_val = _gbdt_sample_weights(y_val, scale_pos_weight)
    base = initial_score(y, w)
    margin = np.full(len(y), base)
    margin_val = np.full(len(y_val), base)
    order = _presort(X)
    Xt = np.ascontiguousarray(X.T)
    active = np.ones(len(y), dtype=bool)

    def score(g_l, h_l, g_r, h_r):
        return g_l * g_l / (h_l + lam) + g_r * g_r / (h_r + lam)

    def parent(total):
        return total[:, 0] ** 2 / (total[:, 1] + lam) + 1e-12 * np.abs(total[:, 0]) + 1e-300

    def leaf(total):
        return -total[:, 0] / (total[:, 1] + lam)

    def valid(g_l, h_l, g_r, h_r):
        return (h_l >= mcw) & (h_r >= mcw)

    stopper = EarlyStopper(cfg.gbdt_patience)
    stopper.step(0, _bce(_sigmoid(margin_val), y_val, w_val))
    history = [stopper.best]
    trees: list[Tree] = []
    for r in range(1, cfg.gbdt_rounds + 1):
        p = _sigmoid(margin)
        stats = np.column_stack([w * (p - y), w * p * (1.0 - p)])
        tree = grow_tree(X, order, stats, active, cfg.max_depth, score, leaf, parent, valid, Xt=Xt)
        trees.append(tree)
        margin += eta * tree.predict(X)
        margin_val += eta * tree.predict(X_val)
        loss = _bce(_sigmoid(margin_val), y_val, w_val)
        if not math.isfinite(loss):
            raise NumericalError(f"gbdt: non-finite validation loss at round {r}")
        history.append(loss)
        if stopper.step(r, loss):
            break
    kept = trees[:stopper.best_round]
    params = _pack(kept) if kept else _pack([Tree(np.array([-1]), np.zeros(1), np.array([-1]),
                                                   np.array([-1]), np.zeros(1))])
    params["base_score"] = np.array([base])
    params["eta"] = np.array([eta])
    params["n_used"] = np.array([float(len(kept))])
    meta = {
        "config": cfg.to_dict(), "seed": cfg.seed, "scale_pos_weight": float(scale_pos_weight),
        "rounds_run": len(trees), "best_round": stopper.best_round,
        "best_val_loss": stopper.best, "val_history": history,
    }
    return TrainedModel(Family.GBDT, (X.shape[1],), params, meta, cfg.threshold)


def gbdt_margin(model: TrainedModel, X) -> np.ndarray:
    X = check_layout(model, X)
    p = model.params
    out = np.full(len(X), float(p["base_score"][0]))
    if p["n_used"][0] > 0:
        out += float(p["eta"][0]) * ensemble_leaf_values(p, X).sum(axis=1)
    return out


def predict_gbdt(model: TrainedModel, X) -> np.ndarray:
    return _sigmoid(gbdt_margin(model, X))

