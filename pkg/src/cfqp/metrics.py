"""Evaluation quantities: counterfactual MSE, PEHE, SSIM, and exact W1.

All metrics are pure functions of numpy arrays. The Wasserstein-1 distance
is exact (a transportation LP solved to a vertex), not entropic, because the
identifiability bound check needs exactness on small atom sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

W1_MAX_SUPPORT = 32


def cf_mse(truth: np.ndarray, pred: np.ndarray) -> float:
    """Mean squared counterfactual error, averaged per dimension.

    Equals mean over samples of ||y' - yhat'||^2 / d, i.e. the plain mean of
    squared entries. Per-dimension normalization keeps magnitudes comparable
    across datasets with very different output widths.
    """
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
    return float(np.mean((truth - pred) ** 2))


def pehe(y_t1: np.ndarray, y_t2: np.ndarray, yhat_t1: np.ndarray, yhat_t2: np.ndarray) -> float:
    """Root-mean-square error of the predicted effect difference.

    PEHE(t', t'') = sqrt(mean(((y_t'' - y_t') - (yhat_t'' - yhat_t'))^2)),
    with the mean over samples and output dimensions. Swapping the roles of
    t' and t'' flips the sign inside the square, so the value is unchanged.
    """
    arrs = [np.asarray(a, dtype=float) for a in (y_t1, y_t2, yhat_t1, yhat_t2)]
    if not (arrs[0].shape == arrs[1].shape == arrs[2].shape == arrs[3].shape):
        raise ValueError("pehe: all four arrays must share a shape")
    effect = arrs[1] - arrs[0]
    effect_hat = arrs[3] - arrs[2]
    return float(np.sqrt(np.mean((effect - effect_hat) ** 2)))


def _window_slices(n: int, window: int) -> list[slice]:
    # Non-overlapping tiling; a trailing remainder of >= 2 pixels is kept as a
    # smaller window so boundary pixels still contribute.
    slices = []
    for start in range(0, n, window):
        stop = min(start + window, n)
        if stop - start >= 2:
            slices.append(slice(start, stop))
    return slices or [slice(0, n)]


def ssim(img_a: np.ndarray, img_b: np.ndarray, window: int = 8, data_range: float = 1.0,
         c1: float | None = None, c2: float | None = None) -> float:
    """Structural similarity averaged over non-overlapping windows and channels.

    Accepts [H, W] or [C, H, W] arrays with dynamic range `data_range`
    (default 1.0). c1/c2 default to (0.01 L)^2 and (0.03 L)^2. Note the
    luminance term makes SSIM sensitive to common offsets; only ssim(x, x) = 1
    is offset-invariant.
    """
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ValueError("ssim expects [H, W] or [C, H, W] images")
    h, w = a.shape[1:]
    if h < max(window, 2) or w < max(window, 2):
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")
    if c1 is None:
        c1 = (0.01 * data_range) ** 2
    if c2 is None:
        c2 = (0.03 * data_range) ** 2
    vals = []
    for chan in range(a.shape[0]):
        for rs in _window_slices(h, window):
            for cs in _window_slices(w, window):
                pa = a[chan, rs, cs].ravel()
                pb = b[chan, rs, cs].ravel()
                mu_a, mu_b = pa.mean(), pb.mean()
                var_a = pa.var()
                var_b = pb.var()
                cov = np.mean((pa - mu_a) * (pb - mu_b))
                num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
                vals.append(num / den)
    return float(np.mean(vals))


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite discrete distribution: atoms [m, d] with simplex weights [m]."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)
        if atoms.shape[0] != weights.shape[0]:
            raise ValueError("atoms and weights disagree on support size")
        if atoms.shape[0] < 1:
            raise ValueError("support must hold at least one atom")
        if np.any(weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {weights.sum():.12f}, not 1 within 1e-9")

    @property
    def m(self) -> int:
        return self.atoms.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]


def _transport_cost(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray) -> float:
    """Exact transportation LP: min <cost, plan> s.t. marginals (supply, demand)."""
    m, n = cost.shape
    # Row-sum and column-sum constraints; drop one redundant equality.
    a_eq = np.zeros((m + n - 1, m * n))
    b_eq = np.zeros(m + n - 1)
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
        b_eq[i] = supply[i]
    for j in range(n - 1):
        a_eq[m + j, j::n] = 1.0
        b_eq[m + j] = demand[j]
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover - LP on the transportation polytope is always feasible
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def w1_discrete(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """Exact Wasserstein-1 between small discrete distributions.

    Euclidean ground metric; solved as a transportation problem. Supports are
    capped at 32 atoms each, which covers every mixture this package builds.
    """
    if p.d != q.d:
        raise ValueError(f"atom dimension mismatch: {p.d} vs {q.d}")
    if p.m > W1_MAX_SUPPORT or q.m > W1_MAX_SUPPORT:
        raise ValueError(f"support larger than {W1_MAX_SUPPORT} atoms")
    diff = p.atoms[:, None, :] - q.atoms[None, :, :]
    cost = np.sqrt(np.sum(diff**2, axis=2))
    return _transport_cost(cost, p.weights, q.weights)


def w1_atoms_to_cloud(atoms: np.ndarray, weights: np.ndarray, cloud: np.ndarray,
                      cloud_weights: np.ndarray | None = None) -> float:
    """Exact W1 between a small atom set and a larger weighted sample cloud.

    Used by the bound check, where one side is the discrete counterfactual
    estimate (<= 32 atoms) and the other a stratified ground-truth sample.
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    weights = np.asarray(weights, dtype=float).ravel()
    if atoms.shape[0] > W1_MAX_SUPPORT:
        raise ValueError(f"atom side larger than {W1_MAX_SUPPORT}")
    if cloud_weights is None:
        cloud_weights = np.full(cloud.shape[0], 1.0 / cloud.shape[0])
    else:
        cloud_weights = np.asarray(cloud_weights, dtype=float).ravel()
    diff = atoms[:, None, :] - cloud[None, :, :]
    cost = np.sqrt(np.sum(diff**2, axis=2))
    return _transport_cost(cost, weights, cloud_weights)
