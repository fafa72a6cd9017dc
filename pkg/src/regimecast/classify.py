"""Scaling, temporal splits and the trading-decision classifiers."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ModelError, SplitError
from .labeling import CLASSES

N_CLASSES = len(CLASSES)
SCALER_KINDS = ("none", "minmax", "zscore")
TEST_FRACTIONS = (0.2, 0.3, 0.4)


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

@dataclass
class Scaler:
    """Per-feature affine map estimated on training rows.

    ``minmax`` sends the training range to [0, 1]; ``zscore`` uses the
    population standard deviation. Degenerate features map to 0.5 and 0
    respectively. ``none`` is the identity.
    """

    kind: str
    center: np.ndarray
    scale: np.ndarray
    degenerate: np.ndarray

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "none":
            return X.copy()
        safe = np.where(self.degenerate, 1.0, self.scale)
        out = (X - self.center) / safe
        fill = 0.5 if self.kind == "minmax" else 0.0
        out[..., self.degenerate] = fill
        return out

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(),
                "scale": self.scale.tolist(), "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["kind"], np.array(doc["center"], dtype=np.float64),
                   np.array(doc["scale"], dtype=np.float64),
                   np.array(doc["degenerate"], dtype=bool))


def fit_scaler(train_features, kind="minmax") -> Scaler:
    X = np.asarray(train_features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_scaler needs a non-empty 2-D array")
    d = X.shape[1]
    if kind == "none":
        return Scaler(kind, np.zeros(d), np.ones(d), np.zeros(d, dtype=bool))
    if kind == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        return Scaler(kind, lo, hi - lo, hi == lo)
    if kind == "zscore":
        mu, sd = X.mean(axis=0), X.std(axis=0)
        return Scaler(kind, mu, sd, sd == 0)
    raise ValueError(f"unknown scaler kind {kind!r}")


def apply_scaler(scaler: Scaler, features):
    return scaler.transform(features)


# --------------------------------------------------------------------------
# temporal split
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float

    def boundary(self, n):
        """Training size ``ceil(n * (1 - f))``, computed in exact arithmetic."""
        return math.ceil(n * (1 - Fraction(str(self.test_fraction))))


def temporal_split(observations, spec: SplitSpec):
    """First ``ceil(n(1-f))`` rows train, the rest test; never shuffled.

    Works on anything sliceable or on a ``FeatureTable``.
    """
    n = len(observations)
    if n < 5:
        raise SplitError(f"need at least 5 observations to split, got {n}")
    b = spec.boundary(n)
    if b >= n:
        raise SplitError(f"test fraction {spec.test_fraction} leaves no test rows (n={n})")
    if hasattr(observations, "take"):
        return observations.take(np.arange(b)), observations.take(np.arange(b, n))
    return observations[:b], observations[b:]


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

def _class_priority(y):
    """Class codes ordered by training frequency, most frequent first;
    equal counts fall back to code order."""
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=N_CLASSES)
    return [int(c) for c in sorted(range(N_CLASSES), key=lambda c: (-counts[c], c))]


@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int = 5
    metric: str = "euclidean"
    algorithm = "knn"

    def hyperparameters(self):
        return {"k": self.k, "metric": self.metric}

    def _sqdist(self, q):
        # accumulate feature by feature so the summation order is fixed
        d2 = np.zeros(len(self.X))
        for j in range(self.X.shape[1]):
            diff = self.X[:, j] - q[j]
            d2 += diff * diff
        return d2

    def predict_one(self, q):
        d2 = self._sqdist(np.asarray(q, dtype=np.float64))
        nearest = np.argsort(d2, kind="stable")[: self.k]
        labels = self.y[nearest]
        votes = np.bincount(labels.astype(np.int64), minlength=N_CLASSES)
        top = votes.max()
        tied = {c for c in range(N_CLASSES) if votes[c] == top}
        for lab in labels:          # nearest first
            if int(lab) in tied:
                return int(lab)
        raise AssertionError("unreachable")

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.array([self.predict_one(q) for q in X], dtype=np.int8)

    def to_dict(self):
        return {"algorithm": self.algorithm, "hyperparameters": self.hyperparameters(),
                "state": {"X": self.X.tolist(), "y": self.y.tolist()}}


def knn_train(X, y, k=5, metric="euclidean") -> KnnModel:
    """Store the exemplars. Neighbour distance ties go to the earlier
    training row; vote ties go to whichever tied class has the nearest
    member."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ModelError("KNN needs at least one training exemplar")
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    if not 1 <= k <= len(X):
        raise ModelError(f"k={k} must lie in [1, {len(X)}]")
    return KnnModel(X.copy(), np.asarray(y, dtype=np.int8).copy(), int(k), metric)


def knn_predict(model: KnnModel, feature_vector) -> int:
    return model.predict_one(feature_vector)


@dataclass
class Tree:
    """Flat array representation; ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.left[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.left[node] >= 0
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def to_dict(self):
        return {k: getattr(self, k).tolist()
                for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["feature"], dtype=np.int64),
                   np.array(doc["threshold"], dtype=np.float64),
                   np.array(doc["left"], dtype=np.int64),
                   np.array(doc["right"], dtype=np.int64),
                   np.array(doc["value"], dtype=np.int8))


def _best_split(x, y_onehot):
    """Lowest weighted-Gini split of one feature.

    Returns ``(impurity, threshold)`` or ``None`` if ``x`` is constant.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    n = len(xs)
    left = np.cumsum(y_onehot[order], axis=0)[:-1]          # (n-1, C)
    right = left[-1] + y_onehot[order[-1]] - left
    nl = np.arange(1, n, dtype=np.float64)
    nr = n - nl
    gl = nl - (left * left).sum(axis=1) / nl                  # nl * gini_left
    gr = nr - (right * right).sum(axis=1) / nr
    score = np.where(valid, (gl + gr) / n, np.inf)
    i = int(np.argmin(score))
    thr = 0.5 * (xs[i] + xs[i + 1])
    if not xs[i] <= thr < xs[i + 1]:
        thr = xs[i]
    return float(score[i]), float(thr)


def grow_tree(X, y, max_features, rng, priority):
    """CART grown to purity with random feature subsets per split.

    When none of the sampled features can split an impure node the
    remaining features are tried in random order.
    """
    d = X.shape[1]
    onehot = np.eye(N_CLASSES)[y.astype(np.int64)]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                       (value, -1)):
            lst.append(v)
        return len(feature) - 1

    def majority(idx):
        counts = np.bincount(y[idx].astype(np.int64), minlength=N_CLASSES)
        top = counts.max()
        return next(c for c in priority if counts[c] == top)

    root = new_node()
    stack = [(root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        ys = y[idx]
        value[node] = majority(idx)
        if len(idx) < 2 or np.all(ys == ys[0]):
            continue
        perm = rng.permutation(d)
        best = None
        for pos, f in enumerate(perm):
            if pos >= max_features and best is not None:
                break
            res = _best_split(X[idx, f], onehot[idx])
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], int(f), res[1])
        if best is None:
            continue
        _, f, thr = best
        mask = X[idx, f] <= thr
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, li, ri
        stack.append((ri, idx[~mask]))
        stack.append((li, idx[mask]))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.int8))


@dataclass
class RandomForestModel:
    trees: list
    priority: list
    n_trees: int
    seed: int
    max_features: int
    algorithm = "random_forest"

    def hyperparameters(self):
        return {"n_trees": self.n_trees, "max_features": self.max_features}

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        votes = np.zeros((len(X), N_CLASSES), dtype=np.int64)
        rows = np.arange(len(X))
        for t in self.trees:
            np.add.at(votes, (rows, t.predict(X).astype(np.int64)), 1)
        out = np.empty(len(X), dtype=np.int8)
        for i, v in enumerate(votes):
            top = v.max()
            out[i] = next(c for c in self.priority if v[c] == top)
        return out

    def to_dict(self):
        return {"algorithm": self.algorithm, "hyperparameters": self.hyperparameters(),
                "seed": self.seed,
                "state": {"priority": self.priority,
                          "trees": [t.to_dict() for t in self.trees]}}


def rf_train(X, y, n_trees=300, seed=0, max_features=None, n_jobs=1) -> RandomForestModel:
    """Bootstrap-aggregated CART trees (Gini, grown to purity).

    Tree ``i`` is grown from ``numpy.random.default_rng(seed + i)``, so
    the forest does not depend on ``n_jobs``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int8)
    if len(X) == 0:
        raise ModelError("random forest needs training data")
    n, d = X.shape
    m = max_features or math.ceil(math.sqrt(d))
    priority = _class_priority(y)

    def one(i):
        rng = np.random.default_rng(seed + i)
        boot = rng.integers(n, size=n)
        return grow_tree(X[boot], y[boot], m, rng, priority)

    if n_jobs == 1:
        trees = [one(i) for i in range(n_trees)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, range(n_trees)))
    return RandomForestModel(trees, priority, n_trees, seed, m)


def rf_predict(model: RandomForestModel, feature_vector) -> int:
    return int(model.predict(np.asarray(feature_vector)[None, :])[0])


def random_policy_predict(n, seed):
    """``n`` i.i.d. uniform decision codes; ignores all features."""
    if n < 1:
        raise ValueError("n must be positive")
    return np.random.default_rng(seed).integers(N_CLASSES, size=n).astype(np.int8)


@dataclass
class RandomPolicyModel:
    seed: int
    algorithm = "random_policy"

    def hyperparameters(self):
        return {}

    def predict(self, X):
        return random_policy_predict(len(X), self.seed)

    def to_dict(self):
        return {"algorithm": self.algorithm, "hyperparameters": {}, "seed": self.seed,
                "state": {}}


ALGORITHMS = ("knn", "random_forest", "random_policy")


def train(algorithm, X, y, seed=0, **hyper):
    if algorithm == "knn":
        return knn_train(X, y, **hyper)
    if algorithm == "random_forest":
        return rf_train(X, y, seed=seed, **hyper)
    if algorithm == "random_policy":
        return RandomPolicyModel(seed)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def model_from_dict(doc):
    algo, hyper, state = doc["algorithm"], doc["hyperparameters"], doc["state"]
    if algo == "knn":
        return KnnModel(np.array(state["X"], dtype=np.float64),
                        np.array(state["y"], dtype=np.int8), hyper["k"], hyper["metric"])
    if algo == "random_forest":
        return RandomForestModel([Tree.from_dict(t) for t in state["trees"]],
                                 state["priority"], hyper["n_trees"], doc["seed"],
                                 hyper["max_features"])
    if algo == "random_policy":
        return RandomPolicyModel(doc["seed"])
    raise ValueError(f"unknown algorithm {algo!r}")
