"""MLP, 1-D CNN and LSTM classifiers on top of the autodiff engine."""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericalError, ShapeError
from ..seeds import derive_seed
from ..windowing import BalancedBatchSampler, shuffled_batches
from . import autodiff as ad
from .autodiff import Tensor
from .base import EarlyStopper, Family, TrainConfig, TrainedModel, AdamState, adam_step, check_layout

# --------------------------------------------------------------------------
# tensor primitives


def dense_forward(x, w, b) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def conv1d_forward(x, w, b) -> Tensor:
    return ad.conv1d(x, w, b)


def global_max_pool(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float).reshape(1, -1, 1))
    return ad.max_over_time(x)


def lstm_cell(x, h, c, wx, wh, b) -> tuple[Tensor, Tensor]:
    """Standard four-gate LSTM step. Gate blocks in ``wx``/``wh``/``b`` are
    ordered input, forget, output, candidate."""
    n = wh.shape[0]
    z = ad.add(ad.add(ad.matmul(x, wx), ad.matmul(h, wh)), b)
    i = ad.sigmoid(z[:, :n])
    f = ad.sigmoid(z[:, n:2 * n])
    o = ad.sigmoid(z[:, 2 * n:3 * n])
    g = ad.tanh(z[:, 3 * n:])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def lstm_unrolled(x, wx, wh, b) -> Tensor:
    """Final hidden state by chaining :func:`lstm_cell`; reference path for
    the fused :func:`autodiff.lstm_sequence`."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = wh.shape[0]
    h = Tensor(np.zeros((x.shape[0], n)))
    c = Tensor(np.zeros((x.shape[0], n)))
    for t in range(x.shape[1]):
        h, c = lstm_cell(x[:, t, :], h, c, wx, wh, b)
    return h


def dropout_forward(x, rate: float, rng, training: bool) -> Tensor:
    return ad.dropout(x, rate, rng, training)


# --------------------------------------------------------------------------
# architectures


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def init_params(family: Family, input_shape: tuple[int, ...], cfg: TrainConfig, rng) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    if family is Family.MLP:
        (d,) = input_shape
        h1, h2 = cfg.mlp_hidden
        dims = [(d, h1), (h1, h2), (h2, 1)]
        for k, (a, b) in enumerate(dims):
            p[f"dense{k}.w"] = _he_uniform(rng, a, (a, b))
            p[f"dense{k}.b"] = np.zeros(b)
    elif family is Family.CNN:
        _, c_in = input_shape
        c1, c2 = cfg.cnn_channels
        k = cfg.cnn_kernel
        p["conv0.w"] = _he_uniform(rng, k * c_in, (k, c_in, c1))
        p["conv0.b"] = np.zeros(c1)
        p["conv1.w"] = _he_uniform(rng, k * c1, (k, c1, c2))
        p["conv1.b"] = np.zeros(c2)
        p["dense0.w"] = _he_uniform(rng, c2, (c2, 1))
        p["dense0.b"] = np.zeros(1)
    elif family is Family.LSTM:
        _, c_in = input_shape
        h, head = cfg.lstm_hidden, cfg.lstm_head
        p["lstm.wx"] = _he_uniform(rng, c_in, (c_in, 4 * h))
        p["lstm.wh"] = _he_uniform(rng, h, (h, 4 * h))
        p["lstm.b"] = np.zeros(4 * h)
        p["dense0.w"] = _he_uniform(rng, h, (h, head))
        p["dense0.b"] = np.zeros(head)
        p["dense1.w"] = _he_uniform(rng, head, (head, 1))
        p["dense1.b"] = np.zeros(1)
    else:
        raise ValueError(f"{family} is not a neural family")
    return p


def forward(family: Family, params: dict[str, Tensor], x: np.ndarray, cfg: TrainConfig,
            training: bool = False, rng=None) -> Tensor:
    """Hypo probabilities, shape (batch,)."""
    x = Tensor(x)
    if family is Family.MLP:
        a = ad.relu(dense_forward(x, params["dense0.w"], params["dense0.b"]))
        a = dropout_forward(a, cfg.dropout_rate, rng, training)
        a = ad.relu(dense_forward(a, params["dense1.w"], params["dense1.b"]))
        z = dense_forward(a, params["dense2.w"], params["dense2.b"])
    elif family is Family.CNN:
        a = ad.relu(conv1d_forward(x, params["conv0.w"], params["conv0.b"]))
        a = ad.relu(conv1d_forward(a, params["conv1.w"], params["conv1.b"]))
        z = dense_forward(global_max_pool(a), params["dense0.w"], params["dense0.b"])
    elif family is Family.LSTM:
        h = ad.lstm_sequence(x, params["lstm.wx"], params["lstm.wh"], params["lstm.b"])
        if cfg.lstm_relu_on_output:
            h = ad.relu(h)
        a = ad.relu(dense_forward(h, params["dense0.w"], params["dense0.b"]))
        z = dense_forward(a, params["dense1.w"], params["dense1.b"])
    else:
        raise ValueError(f"{family} is not a neural family")
    return ad.sigmoid(ad.reshape(z, (z.shape[0],)))


def loss_and_grads(family: Family, params: dict[str, np.ndarray], x, y, w, cfg: TrainConfig,
                   training: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    leaves = {k: Tensor(v, name=k) for k, v in params.items()}
    loss = ad.weighted_bce(forward(family, leaves, x, cfg, training, rng), y, w)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def predict_neural(model: TrainedModel, X: np.ndarray, cfg: TrainConfig | None = None,
                   chunk: int = 8192) -> np.ndarray:
    X = check_layout(model, X)
    cfg = cfg or TrainConfig.from_dict(model.meta["config"])
    leaves = {k: Tensor(v) for k, v in model.params.items()}
    out = [forward(model.family, leaves, X[a:a + chunk], cfg, training=False).data
           for a in range(0, len(X), chunk)]
    return np.concatenate(out) if out else np.empty(0)


# --------------------------------------------------------------------------
# training


def _check_input(family: Family, X: np.ndarray):
    want = 3 if family.sequential else 2
    if X.ndim != want:
        raise ShapeError(f"{family.value} expects a {want}-D feature array, got shape {X.shape}")


def fit_neural(family: Family, X: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               X_val: np.ndarray, y_val: np.ndarray) -> TrainedModel:
    """Mini-batch Adam on class-weighted BCE with early stopping on the
    validation loss; the best epoch's weights are returned."""
    family = Family(family)
    X = np.asarray(X, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    _check_input(family, X)
    _check_input(family, X_val)
    if len(X_val) == 0:
        raise ShapeError("validation set is empty")
    input_shape = tuple(X.shape[1:])
    weights = cfg.weights()
    w_train = weights.per_sample(y)
    w_val = weights.per_sample(y_val)

    params = init_params(family, input_shape, cfg, np.random.default_rng(derive_seed(cfg.seed, "init")))
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    sampler_seed = derive_seed(cfg.seed, "batches")
    sampler = (BalancedBatchSampler(y, cfg.batch_size, cfg.min_minority_fraction, sampler_seed)
               if cfg.balanced_batches else None)
    state = AdamState()
    stopper = EarlyStopper(cfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    history = []
    model = TrainedModel(family, input_shape, params, {"config": cfg.to_dict()}, cfg.threshold)

    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        batches = sampler.epoch(epoch) if sampler else shuffled_batches(len(y), cfg.batch_size, sampler_seed, epoch)
        for idx in batches:
            loss, grads = loss_and_grads(family, params, X[idx], y[idx], w_train[idx], cfg, True, drop_rng)
            if not math.isfinite(loss):
                raise NumericalError(f"{family.value}: non-finite training loss at epoch {epoch}")
            adam_step(params, grads, state, cfg.learning_rate)
        epochs_run = epoch + 1
        p_val = predict_neural(model, X_val, cfg)
        val_loss = float(ad.weighted_bce(p_val, y_val, w_val).data)
        if not math.isfinite(val_loss):
            raise NumericalError(f"{family.value}: non-finite validation loss at epoch {epoch}")
        history.append(val_loss)
        if val_loss < stopper.best:
            best = {k: v.copy() for k, v in params.items()}
        if stopper.step(epoch + 1, val_loss):
            break

    model.params = best
    model.meta.update(
        seed=cfg.seed,
        epochs_run=epochs_run,
        best_epoch=stopper.best_round,
        best_val_loss=stopper.best,
        val_history=history,
    )
    return model


def fit_mlp(X, y, cfg: TrainConfig, X_val, y_val) -> TrainedModel:
    return fit_neural(Family.MLP, X, y, cfg, X_val, y_val)


def fit_cnn(X, y, cfg: TrainConfig, X_val, y_val) -> TrainedModel:
    return fit_neural(Family.CNN, X, y, cfg, X_val, y_val)


def fit_lstm(X, y, cfg: TrainConfig, X_val, y_val) -> TrainedModel:
    return fit_neural(Family.LSTM, X, y, cfg, X_val, y_val)
