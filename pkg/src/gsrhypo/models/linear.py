"""L2-regularised, class-weighted logistic regression and k-nearest neighbours."""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import ConfigError, InsufficientClassError, NumericalError
from ..windowing import ClassWeights
from .base import BCE_EPS, AdamState, Family, TrainConfig, TrainedModel, adam_step, check_layout


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logreg_objective(params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray,
                     weights: ClassWeights, l2: float) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted BCE plus ``l2 * |w|^2 / 2`` and its analytic gradient.

    The bias is not penalised.
    """
    z = X @ params["w"] + params["b"][0]
    p = _sigmoid(z)
    sw = weights.per_sample(y)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = len(y)
    loss = -np.sum(sw * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / n
    loss += 0.5 * l2 * float(params["w"] @ params["w"])
    r = sw * (p - y) / n
    grads = {"w": X.T @ r + l2 * params["w"], "b": np.array([r.sum()])}
    return float(loss), grads


def fit_logreg(X, y, cfg: TrainConfig) -> TrainedModel:
    """Full-batch Adam until the gradient norm drops below ``cfg.logreg_tol``
    or ``cfg.logreg_max_iter`` steps have run."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.min() == y.max():
        raise InsufficientClassError("logistic regression needs both classes")
    params = {"w": np.zeros(X.shape[1]), "b": np.zeros(1)}
    weights = cfg.weights()
    state = AdamState()
    steps, gnorm, loss = 0, math.inf, math.inf
    for steps in range(1, cfg.logreg_max_iter + 1):
        loss, grads = logreg_objective(params, X, y, weights, cfg.l2_lambda)
        gnorm = math.sqrt(sum(float(g @ g) for g in grads.values()))
        if not math.isfinite(loss):
            raise NumericalError("logistic regression loss diverged")
        if gnorm < cfg.logreg_tol:
            break
        adam_step(params, grads, state, cfg.logreg_learning_rate)
    return TrainedModel(
        Family.LR, (X.shape[1],), params,
        {"config": cfg.to_dict(), "seed": cfg.seed, "steps": steps, "grad_norm": gnorm, "train_loss": loss},
        cfg.threshold,
    )


def predict_logreg(model: TrainedModel, X) -> np.ndarray:
    X = check_layout(model, X)
    return _sigmoid(X @ model.params["w"] + model.params["b"][0])


def fit_knn(X, y, k: int = 5, cfg: TrainConfig | None = None) -> TrainedModel:
    """Store the training set; prediction votes among the ``k`` nearest."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if k < 1 or len(X) < k:
        raise ConfigError(f"KNN needs at least k={k} training points, got {len(X)}")
    meta = {"k": k, "seed": cfg.seed if cfg else 0}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    return TrainedModel(Family.KNN, tuple(X.shape[1:]), {"X": X, "y": y, "k": np.array([float(k)])},
                        meta, cfg.threshold if cfg else 0.5)


def knn_vote(train_X: np.ndarray, train_y: np.ndarray, queries: np.ndarray, k: int,
             chunk: int = 256) -> np.ndarray:
    """Fraction of Hypo labels among the ``k`` nearest training points by
    Euclidean distance. Distance ties at the k-th slot go to the lower
    training index."""
    out = np.empty(len(queries))
    for a in range(0, len(queries), chunk):
        d = cdist(queries[a:a + chunk], train_X, "sqeuclidean")
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        less = d < kth
        need = k - less.sum(axis=1, keepdims=True)
        eq = d == kth
        chosen = less | (eq & (np.cumsum(eq, axis=1) <= need))
        out[a:a + chunk] = (chosen @ train_y) / k
    return out


def predict_knn(model: TrainedModel, X) -> np.ndarray:
    X = check_layout(model, X)
    return knn_vote(model.params["X"], model.params["y"], X, int(model.params["k"][0]))
