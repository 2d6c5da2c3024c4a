"""Shared model plumbing: configs, the trained-model container, loss,
optimizer, early stopping and feature layouts."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from ..errors import NumericalError, ShapeError
from ..windowing import UNIT_WEIGHTS, ClassWeights, GlycemicLabel, WindowSet, static_features

BCE_EPS = 1e-7


class Family(str, enum.Enum):
    LR = "lr"
    KNN = "knn"
    RF = "rf"
    GBDT = "gbdt"
    MLP = "mlp"
    CNN = "cnn"
    LSTM = "lstm"

    @property
    def neural(self) -> bool:
        return self in (Family.MLP, Family.CNN, Family.LSTM)

    @property
    def sequential(self) -> bool:
        return self in (Family.CNN, Family.LSTM)


class FeatureMode(str, enum.Enum):
    SEQUENCE = "sequence"
    STATIC = "static"


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 3
    dropout_rate: float = 0.3
    l2_lambda: float = 1e-4
    class_weights: ClassWeights = UNIT_WEIGHTS
    use_class_weights: bool = True
    balanced_batches: bool = True
    min_minority_fraction: float = 0.25
    threshold: float = 0.5
    # neural widths
    mlp_hidden: tuple[int, int] = (32, 16)
    cnn_channels: tuple[int, int] = (16, 32)
    cnn_kernel: int = 3
    lstm_hidden: int = 32
    lstm_head: int = 16
    lstm_relu_on_output: bool = False
    # logistic regression
    logreg_learning_rate: float = 0.05
    logreg_max_iter: int = 1500
    logreg_tol: float = 1e-6
    # trees
    n_trees: int = 100
    max_depth: int = 6
    gbdt_eta: float = 0.1
    gbdt_rounds: int = 200
    gbdt_lambda: float = 1.0
    gbdt_min_child_weight: float = 1.0
    gbdt_patience: int = 10
    # knn
    knn_k: int = 5

    def weights(self) -> ClassWeights:
        return self.class_weights if self.use_class_weights else UNIT_WEIGHTS

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["class_weights"] = asdict(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("class_weights"), dict):
            d["class_weights"] = ClassWeights(**d["class_weights"])
        for key in ("mlp_hidden", "cnn_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(eq=False)
class TrainedModel:
    family: Family
    input_shape: tuple[int, ...]
    params: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    threshold: float = 0.5


@dataclass(frozen=True)
class ScoredPrediction:
    probability_hypo: float
    predicted_label: GlycemicLabel


# --------------------------------------------------------------------------
# features


def features_for(family: Family, ws: WindowSet, mode: FeatureMode) -> np.ndarray:
    """Model input for a window set.

    Sequence mode gives CNN/LSTM a (n, 12, 1) tensor and flattens the 12
    steps for everyone else. Static mode reduces each window to its mean;
    CNN/LSTM then see that mean held constant over the 12 steps so the
    architecture is unchanged while the input carries no temporal shape.
    """
    mode = FeatureMode(mode)
    family = Family(family)
    if mode is FeatureMode.SEQUENCE:
        x = ws.gsr
    else:
        x = static_features(ws)
        if family.sequential:
            x = np.repeat(x, ws.width, axis=1)
    if family.sequential:
        return x[:, :, None].astype(np.float64)
    return np.ascontiguousarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# loss and optimizer


def weighted_bce(probabilities, labels, weights: ClassWeights = UNIT_WEIGHTS, eps: float = BCE_EPS) -> float:
    """Mean class-weighted binary cross-entropy (Hypo = 1)."""
    p = np.asarray(probabilities, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    p = np.clip(p, eps, 1.0 - eps)
    w = weights.per_sample(y)
    return float(-np.mean(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    t: int | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place; returns both."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


class EarlyStopper:
    """Tracks the best validation loss; ``step`` returns True when training
    should stop because ``patience`` rounds passed without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_round = 0
        self.bad = 0

    def step(self, round_: int, loss: float) -> bool:
        if loss < self.best:
            self.best, self.best_round, self.bad = loss, round_, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def check_layout(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if tuple(X.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"{model.family.value} model expects rows of shape {model.input_shape}, got {X.shape[1:]}"
        )
    if not np.all(np.isfinite(X)):
        raise ShapeError("feature matrix contains non-finite values")
    return X
