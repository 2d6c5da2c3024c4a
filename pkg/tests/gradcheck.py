"""Central finite-difference oracle shared by the model and acceptance tests."""

import numpy as np

from gsrhypo.models import Family, TrainConfig
from gsrhypo.models.linear import logreg_objective
from gsrhypo.models.neural import init_params, loss_and_grads
from gsrhypo.windowing import ClassWeights

STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    den = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / den))


def numeric_grads(loss, params: dict[str, np.ndarray], step: float = STEP) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = loss(params)
            flat[i] = keep - step
            down = loss(params)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * step)
        out[name] = g
    return out


SMALL = TrainConfig(mlp_hidden=(6, 4), cnn_channels=(3, 4), lstm_hidden=4, lstm_head=3, dropout_rate=0.0)
WEIGHTS = ClassWeights(3.0, 0.6, 5.0)


def family_case(family: Family, seed: int, n: int = 8, steps: int = 12):
    """Random parameters and a batch of ``n`` windows for ``family``."""
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(n // 2), np.zeros(n - n // 2)]
    w = WEIGHTS.per_sample(y)
    if family is Family.LR:
        x = rng.normal(size=(n, steps))
        params = {"w": rng.normal(scale=0.5, size=steps), "b": rng.normal(size=1)}
        return params, x, y, w
    shape = (steps, 1) if family.sequential else (steps,)
    x = rng.normal(size=(n, *shape))
    params = init_params(family, shape, SMALL, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    return params, x, y, w


def check_family(family: Family, seed: int) -> dict[str, float]:
    """Max relative error per parameter block."""
    params, x, y, w = family_case(family, seed)
    if family is Family.LR:
        l2 = 0.3
        _, analytic = logreg_objective(params, x, y, WEIGHTS, l2)
        loss = lambda p: logreg_objective(p, x, y, WEIGHTS, l2)[0]
    else:
        _, analytic = loss_and_grads(family, params, x, y, w, SMALL)
        loss = lambda p: loss_and_grads(family, p, x, y, w, SMALL)[0]
    numeric = numeric_grads(loss, params)
    return {k: relative_error(analytic[k], numeric[k]) for k in params}
