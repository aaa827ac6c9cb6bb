"""Small from-scratch learners: Gaussian naive Bayes, logistic regression, CART tree.

All of them are deterministic: no random initialisation, fixed iteration
counts, and ties in tree splits broken by column order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

KINDS = ("naive-bayes", "logistic", "tree")
REGRESSOR_KINDS = ("logistic-on-threshold", "tree")


class DegenerateModelError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != len(y):
            raise ValueError(f"{X.shape[0]} rows but {len(y)} targets")
        if X.shape[1] != len(self.columns):
            raise SchemaError(f"{X.shape[1]} columns but {len(self.columns)} names")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        bad = ~np.isfinite(X)
        if bad.any():
            # impute 0 and add an indicator column for every affected feature
            cols = list(self.columns)
            flags = []
            for j in np.flatnonzero(bad.any(axis=0)):
                flags.append(bad[:, j].astype(float))
                cols.append(f"{self.columns[j]}_missing")
            X[bad] = 0.0
            X = np.column_stack([X] + flags)
            object.__setattr__(self, "columns", tuple(cols))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(eq=False)
class Model:
    kind: str
    columns: tuple[str, ...]
    params: dict = field(default_factory=dict)
    threshold: float | None = None  # logistic-on-threshold: models P(target > threshold)

    def _matrix(self, rows) -> np.ndarray:
        if isinstance(rows, Mapping):
            if set(rows) != set(self.columns):
                raise SchemaError(f"row keys {sorted(rows)} do not match {list(self.columns)}")
            rows = [rows[c] for c in self.columns]
        X = np.asarray(rows, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.columns):
            raise SchemaError(f"expected {len(self.columns)} features, got {X.shape[1]}")
        return X

    def predict_score(self, rows) -> np.ndarray:
        """Probability-like score in [0,1] for each row."""
        X = self._matrix(rows)
        if self.kind == "naive-bayes":
            return _nb_posterior(self.params, X)[:, 1]
        if self.kind in ("logistic", "logistic-on-threshold"):
            return _logistic_predict(self.params, X)
        if self.kind == "tree":
            return np.clip(_tree_predict(self.params["nodes"], X), 0.0, 1.0)
        raise ValueError(f"unknown model kind {self.kind!r}")

    def predict(self, rows) -> np.ndarray:
        """Raw prediction: leaf mean for trees, score otherwise."""
        X = self._matrix(rows)
        if self.kind == "tree":
            return _tree_predict(self.params["nodes"], X)
        return self.predict_score(X)

    def class_scores(self, rows) -> np.ndarray:
        X = self._matrix(rows)
        if self.kind == "naive-bayes":
            return _nb_posterior(self.params, X)
        p = self.predict_score(X)
        return np.column_stack([1.0 - p, p])

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, list):
                return [enc(x) for x in v]
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            return v
        return {"kind": self.kind, "columns": list(self.columns), "threshold": self.threshold,
                "params": enc(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "Model":
        params = dict(d["params"])
        for k in ("mean", "var", "log_prior", "w", "mu", "sd"):
            if k in params:
                params[k] = np.asarray(params[k], dtype=float)
        return cls(d["kind"], tuple(d["columns"]), params, d.get("threshold"))


def dump_model(model: Model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path: str | Path) -> Model:
    return Model.from_dict(json.loads(Path(path).read_text()))


def predict_score(model: Model, row) -> float | np.ndarray:
    s = model.predict_score(row)
    return float(s[0]) if np.ndim(row) == 1 or isinstance(row, Mapping) else s


# ---------------------------------------------------------------------------
# Gaussian naive Bayes
# ---------------------------------------------------------------------------

VAR_FLOOR = 1e-9


def _train_nb(X: np.ndarray, y: np.ndarray) -> dict:
    mean = np.zeros((2, X.shape[1]))
    var = np.zeros((2, X.shape[1]))
    prior = np.zeros(2)
    for c in (0, 1):
        Xc = X[y == c]
        prior[c] = len(Xc) / len(X)
        mean[c] = Xc.mean(axis=0)
        var[c] = np.maximum(Xc.var(axis=0), VAR_FLOOR)
    return {"mean": mean, "var": var, "log_prior": np.log(prior)}


def _nb_posterior(params: dict, X: np.ndarray) -> np.ndarray:
    mean, var = params["mean"], params["var"]
    const = params["log_prior"] - 0.5 * np.log(2 * np.pi * var).sum(axis=1)
    ll = np.empty((X.shape[0], 2))
    for c in (0, 1):
        d = X - mean[c]
        ll[:, c] = const[c] - 0.5 * ((d * d) @ (1.0 / var[c]))
    ll -= ll.max(axis=1, keepdims=True)
    p = np.exp(ll)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

def logistic_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                       l2: float = 0.0) -> tuple[float, np.ndarray, float]:
    """Mean log-loss (plus 0.5*l2*|w|^2) and its gradient with respect to w and b."""
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w)
    r = sigmoid(z) - y
    gw = X.T @ r / len(y) + l2 * w
    gb = float(r.mean())
    return float(loss), gw, gb


def _standardize_params(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def _train_logistic(X: np.ndarray, y: np.ndarray, iterations: int = 500, learning_rate: float = 0.1,
                    l2: float = 0.0) -> dict:
    mu, sd = _standardize_params(X)
    Xs = (X - mu) / sd
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(iterations):
        _, gw, gb = logistic_loss_grad(w, b, Xs, y, l2)
        w -= learning_rate * gw
        b -= learning_rate * gb
    return {"w": w, "b": b, "mu": mu, "sd": sd}


def _logistic_predict(params: dict, X: np.ndarray) -> np.ndarray:
    Xs = (X - params["mu"]) / params["sd"]
    return sigmoid(Xs @ params["w"] + params["b"])


# ---------------------------------------------------------------------------
# Depth-limited regression tree (squared-error splits; leaf = mean target)
# ---------------------------------------------------------------------------

def _best_split(X: np.ndarray, y: np.ndarray, min_leaf: int):
    n = len(y)
    total, total_sq = y.sum(), (y * y).sum()
    parent_sse = total_sq - total * total / n
    best = (0.0, -1, 0.0)  # gain, column, threshold
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order]
        cs = np.cumsum(ys)[:-1]
        cq = np.cumsum(ys * ys)[:-1]
        nl = np.arange(1, n)
        valid = xs[1:] > xs[:-1]
        valid &= (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        nr = n - nl
        sse = (cq - cs * cs / nl) + ((total_sq - cq) - (total - cs) ** 2 / nr)
        sse = np.where(valid, sse, np.inf)
        k = int(np.argmin(sse))
        gain = parent_sse - sse[k]
        if gain > best[0] + 1e-12:
            best = (gain, j, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _train_tree(X: np.ndarray, y: np.ndarray, max_depth: int = 6, min_leaf: int = 5) -> dict:
    nodes: list[list] = []  # [column, threshold, left, right, value, count]

    def grow(rows: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        ys = y[rows]
        nodes.append([-1, 0.0, -1, -1, float(ys.mean()), int(len(rows))])
        if depth >= max_depth or len(rows) < 2 * min_leaf or np.all(ys == ys[0]):
            return node_id
        gain, col, thr = _best_split(X[rows], ys, min_leaf)
        if col < 0:
            return node_id
        go_left = X[rows, col] <= thr
        nodes[node_id][0] = col
        nodes[node_id][1] = float(thr)
        nodes[node_id][2] = grow(rows[go_left], depth + 1)
        nodes[node_id][3] = grow(rows[~go_left], depth + 1)
        return node_id

    grow(np.arange(len(y)), 0)
    return {"nodes": nodes}


def _tree_predict(nodes: list, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        nid, rows = stack.pop()
        col, thr, left, right, value, _ = nodes[nid]
        if col < 0:
            out[rows] = value
            continue
        go_left = X[rows, col] <= thr
        stack.append((left, rows[go_left]))
        stack.append((right, rows[~go_left]))
    return out


def tree_leaf_ids(model: Model, rows) -> np.ndarray:
    X = model._matrix(rows)
    nodes = model.params["nodes"]
    out = np.empty(X.shape[0], dtype=int)
    for i, x in enumerate(X):
        nid = 0
        while nodes[nid][0] >= 0:
            nid = nodes[nid][2] if x[nodes[nid][0]] <= nodes[nid][1] else nodes[nid][3]
        out[i] = nid
    return out


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def _check_rows(data: Dataset) -> None:
    if len(data) < 2:
        raise DegenerateModelError(f"need at least 2 rows, got {len(data)}")


def train(kind: str, data: Dataset, **hyper) -> Model:
    """Fit a binary classifier; ``data.y`` must already be 0/1 with both classes present."""
    _check_rows(data)
    y = data.y
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification targets must be 0/1")
    if y.min() == y.max():
        raise DegenerateModelError(f"training set holds a single class ({int(y[0])})")
    if kind == "naive-bayes":
        params = _train_nb(data.X, y)
    elif kind == "logistic":
        params = _train_logistic(data.X, y, **hyper)
    elif kind == "tree":
        params = _train_tree(data.X, y, **hyper)
    else:
        raise ValueError(f"unknown learner kind {kind!r}; expected one of {KINDS}")
    return Model(kind, data.columns, params)


def train_regressor(kind: str, data: Dataset, threshold: float = 0.5, **hyper) -> Model:
    """Fit a model of a non-negative target.

    ``tree`` predicts leaf means of the raw target; ``logistic-on-threshold``
    predicts P(target > threshold).
    """
    _check_rows(data)
    if np.any(data.y < 0):
        raise ValueError("regression target must be non-negative")
    if kind == "tree":
        return Model("tree", data.columns, _train_tree(data.X, data.y, **hyper))
    if kind == "logistic-on-threshold":
        yb = (data.y > threshold).astype(float)
        if yb.min() == yb.max():
            raise DegenerateModelError(f"every target is on one side of {threshold}")
        return Model("logistic-on-threshold", data.columns, _train_logistic(data.X, yb, **hyper), threshold)
    raise ValueError(f"unknown regressor kind {kind!r}; expected one of {REGRESSOR_KINDS}")


def train_classifier_on_rows(kind: str, X: np.ndarray, y: np.ndarray, columns: Sequence[str], **hyper) -> Model:
    return train(kind, Dataset(X, y, tuple(columns)), **hyper)
