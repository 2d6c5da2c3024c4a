"""Seven classifier families behind one fit / score contract."""

from __future__ import annotations

import numpy as np

from ..windowing import GlycemicLabel, WindowSet
from .base import (
    AdamState,
    EarlyStopper,
    Family,
    FeatureMode,
    ScoredPrediction,
    TrainConfig,
    TrainedModel,
    adam_step,
    features_for,
    weighted_bce,
)
from .linear import fit_knn, fit_logreg, predict_knn, predict_logreg
from .neural import fit_cnn, fit_lstm, fit_mlp, fit_neural, predict_neural
from .persist import config_digest, load_model, save_model
from .trees import fit_gbdt, fit_random_forest, gini_impurity, predict_forest, predict_gbdt


def fit_model(family: Family | str, train: WindowSet, val: WindowSet, mode: FeatureMode | str,
              cfg: TrainConfig) -> TrainedModel:
    """Build the family's feature layout from window sets and fit it."""
    family = Family(family)
    X, y = features_for(family, train, mode), train.labels.astype(np.float64)
    Xv, yv = features_for(family, val, mode), val.labels.astype(np.float64)
    if family is Family.LR:
        model = fit_logreg(X, y, cfg)
    elif family is Family.KNN:
        model = fit_knn(X, y, cfg.knn_k, cfg)
    elif family is Family.RF:
        model = fit_random_forest(X, y, cfg.n_trees, cfg)
    elif family is Family.GBDT:
        model = fit_gbdt(X, y, cfg, None, Xv, yv)
    else:
        model = fit_neural(family, X, y, cfg, Xv, yv)
    model.meta["feature_mode"] = FeatureMode(mode).value
    return model


def predict_scores(model: TrainedModel, X) -> np.ndarray:
    """Hypo probabilities as an array; inference mode throughout."""
    family = model.family
    if family is Family.LR:
        return predict_logreg(model, X)
    if family is Family.KNN:
        return predict_knn(model, X)
    if family is Family.RF:
        return predict_forest(model, X)
    if family is Family.GBDT:
        return predict_gbdt(model, X)
    return predict_neural(model, X)


def predict_proba(model: TrainedModel, X) -> list[ScoredPrediction]:
    p = predict_scores(model, X)
    return [
        ScoredPrediction(float(v), GlycemicLabel.HYPO if v >= model.threshold else GlycemicLabel.NORMO)
        for v in p
    ]


def knn_predict(model: TrainedModel, x) -> ScoredPrediction:
    """Score a single query row."""
    return predict_proba(model, np.asarray(x, dtype=np.float64)[None, ...])[0]


__all__ = [
    "AdamState", "EarlyStopper", "Family", "FeatureMode", "ScoredPrediction", "TrainConfig",
    "TrainedModel", "adam_step", "config_digest", "features_for", "fit_cnn", "fit_gbdt", "fit_knn",
    "fit_logreg", "fit_lstm", "fit_mlp", "fit_model", "fit_neural", "fit_random_forest",
    "gini_impurity", "knn_predict", "load_model", "predict_proba", "predict_scores", "save_model",
    "weighted_bce",
]
