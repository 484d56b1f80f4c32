"""Comparison methods: Deep-ITE and a synthetic-control adaptation.

Deep-ITE is the K=1 degeneration of the cluster-EM trainer: one network
mapping (x, t) to y, so the factual outcome never enters prediction. The
synthetic-control predictor matches a query unit against train-split donors
whose treatments lie near the queried t', with simplex-constrained weights
fit on covariates and factual outcome jointly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .model import CfqpConfig, em_train, features_at, train_init
from .nn import Mlp


def deep_ite_fit(data: Dataset, cfg: CfqpConfig) -> Mlp:
    """Train the direct (x, t) -> y regressor with the full epoch budget.

    Shares the cluster-EM code path at K=1, which reduces to plain continued
    training of the init model on all samples.
    """
    m0 = train_init(data, cfg)
    return em_train(data, m0, cfg.replace(k=1)).models[0]


def deep_ite_predict(m0: Mlp, x: np.ndarray, t_prime) -> np.ndarray:
    """m0(x, t'); the factual outcome is ignored by construction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t_prime = np.broadcast_to(np.asarray(t_prime, dtype=np.float64).reshape(-1),
                              (x.shape[0],))
    return m0.forward(features_at(x, t_prime))


@dataclass
class ScModel:
    donor_x: np.ndarray       # [m, d_x]
    donor_y: np.ndarray       # [m, d_y]
    donor_t: np.ndarray       # [m]
    window: float = 0.1       # treatment-distance radius for the donor pool
    tol: float = 1e-10
    max_iter: int = 2000

    def __post_init__(self):
        m = self.donor_x.shape[0]
        if m == 0:
            raise ValueError("donor pool is empty")
        if self.donor_y.shape[0] != m or self.donor_t.shape[0] != m:
            raise ValueError("donor arrays disagree on length")
        if self.window <= 0:
            raise ValueError("window must be > 0")


def sc_fit(data: Dataset, window: float = 0.1) -> ScModel:
    """Donor pool = the train split."""
    tr = data.indices("train")
    return ScModel(donor_x=data.x[tr].astype(np.float64),
                   donor_y=data.y[tr].astype(np.float64),
                   donor_t=data.t[tr].astype(np.float64),
                   window=window)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort method)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    cum = np.cumsum(u) - 1.0
    j = np.arange(1, v.size + 1)
    rho = np.nonzero(u - cum / j > 0)[0][-1]
    theta = cum[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def solve_simplex_weights(donors: np.ndarray, target: np.ndarray,
                          tol: float = 1e-10, max_iter: int = 2000) -> np.ndarray:
    """argmin_w ||target - donors^T w||^2 over the simplex, projected gradient.

    Step size 1/L with L the largest eigenvalue of 2 * donors donors^T keeps
    every iteration non-increasing in the objective.
    """
    d = np.asarray(donors, dtype=np.float64)       # [m, p]
    a = np.asarray(target, dtype=np.float64).reshape(-1)
    m = d.shape[0]
    w = np.full(m, 1.0 / m)
    if m == 1:
        return np.ones(1)
    lip = 2.0 * float(np.linalg.norm(d @ d.T, ord=2))
    if lip == 0.0:
        return w
    step = 1.0 / lip
    for _ in range(max_iter):
        grad = 2.0 * (d @ (d.T @ w - a))
        w_next = project_simplex(w - step * grad)
        if float(np.abs(w_next - w).max()) <= tol:
            w = w_next
            break
        w = w_next
    return w


def donor_window(sc: ScModel, t_prime: float) -> np.ndarray:
    """Indices with |t_i - t'| <= window, doubling the radius until non-empty."""
    radius = sc.window
    span = float(np.abs(sc.donor_t - t_prime).max())
    while True:
        idx = np.nonzero(np.abs(sc.donor_t - t_prime) <= radius)[0]
        if idx.size:
            return idx
        if radius > span:
            raise ValueError("no donors available at any window size")
        radius *= 2.0


def sc_predict(sc: ScModel, x: np.ndarray, y: np.ndarray, t: float, t_prime) -> np.ndarray:
    """Weighted donor outcome at treatments near t'.

    Weights minimize the match between [x; y] and the donors' [x_i; y_i];
    the prediction is the same convex combination of donor outcomes, which
    approximate outcomes at t' because the pool is filtered to t_i near t'.
    """
    t_prime = float(t_prime)
    idx = donor_window(sc, t_prime)
    feats = np.concatenate([sc.donor_x[idx], sc.donor_y[idx]], axis=1)
    target = np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1),
                             np.asarray(y, dtype=np.float64).reshape(-1)])
    w = solve_simplex_weights(feats, target, tol=sc.tol, max_iter=sc.max_iter)
    return w @ sc.donor_y[idx]


def sc_predict_batch(sc: ScModel, x: np.ndarray, y: np.ndarray, t: np.ndarray,
                     t_prime: np.ndarray) -> np.ndarray:
    preds = [sc_predict(sc, x[i], y[i], float(t[i]), float(t_prime[i]))
             for i in range(x.shape[0])]
    return np.stack(preds)
