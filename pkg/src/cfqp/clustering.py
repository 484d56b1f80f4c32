"""Residual-space clustering: k-means and a diagonal Gaussian mixture.

The cluster-EM trainer uses `kmeans_fit` on full residual vectors for its
initial expectation step and may swap in `gmm_fit` (fitted on a random
subsample, then evaluated on all points). Tie-breaking is lowest-index
everywhere so runs reproduce exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-6


@dataclass
class KmeansResult:
    centroids: np.ndarray   # [k, d]
    assignment: np.ndarray  # [N] ints in [0, k)
    inertia: float
    n_iter: int
    inertia_trace: np.ndarray  # cost at the start of each Lloyd iteration


@dataclass
class GmmResult:
    weights: np.ndarray           # [k] on the simplex
    means: np.ndarray             # [k, d]
    variances: np.ndarray         # [k, d], >= VAR_FLOOR
    responsibilities: np.ndarray  # [N, k], rows sum to 1
    log_likelihood: float


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # [N, k] squared Euclidean distances
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass on duplicates; pick uniformly
            centers[j] = points[int(rng.integers(n))]
        else:
            r = rng.uniform(0, total)
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
            centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    n, k = points.shape[0], centers.shape[0]
    assignment = None
    n_iter = 0
    trace = []
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        new_assignment = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), new_assignment].sum()))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        n_iter += 1
        for j in range(k):
            mask = assignment == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
            else:
                # dead centroid: reseed at the point farthest from its center
                centers[j] = points[int(np.argmax(d2[np.arange(n), assignment]))]
    d2 = _sq_dists(points, centers)
    assignment = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    return centers, assignment, inertia, n_iter, np.array(trace)


def kmeans_fit(points: np.ndarray, k: int, restarts: int = 10,
               iters: int = 100, seed: int = 0) -> KmeansResult:
    """Best-inertia k-means over `restarts` k-means++ initializations."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    best = None
    master = np.random.default_rng(seed)
    for _ in range(restarts):
        rng = np.random.default_rng(master.integers(2**63))
        centers = _kmeans_pp_init(points, k, rng)
        centers, assignment, inertia, n_iter, trace = _lloyd(points, centers.copy(), iters)
        if best is None or inertia < best.inertia:
            best = KmeansResult(centers, assignment, inertia, n_iter, trace)
    return best


def _log_gauss_diag(points: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # [N, k] log densities of diagonal Gaussians
    diff2 = (points[:, None, :] - means[None, :, :]) ** 2
    return -0.5 * (
        (diff2 / variances[None]).sum(axis=2)
        + np.log(2 * np.pi * variances).sum(axis=1)[None, :]
    )


def _responsibilities(points, weights, means, variances):
    log_p = _log_gauss_diag(points, means, variances) + np.log(weights)[None, :]
    shift = log_p.max(axis=1, keepdims=True)
    p = np.exp(log_p - shift)
    norm = p.sum(axis=1, keepdims=True)
    resp = p / norm
    ll = float((np.log(norm[:, 0]) + shift[:, 0]).sum())
    return resp, ll


def gmm_fit(points: np.ndarray, k: int, max_subsample: int = 1000,
            iters: int = 100, seed: int = 0) -> GmmResult:
    """Diagonal-covariance EM, fitted on a random subsample of <= 1000 points.

    Initialization is k-means on the subsample. The log-likelihood over the
    subsample is non-decreasing across EM iterations; a component whose
    weight collapses below 1e-6 is re-seeded from the farthest point.
    Responsibilities are evaluated for every input point at the end.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    if n > max_subsample:
        sub = points[rng.choice(n, size=max_subsample, replace=False)]
    else:
        sub = points

    km = kmeans_fit(sub, k, restarts=4, iters=50, seed=int(rng.integers(2**63)))
    means = km.centroids.copy()
    variances = np.zeros((k, points.shape[1]))
    weights = np.zeros(k)
    for j in range(k):
        mask = km.assignment == j
        weights[j] = max(mask.mean(), 1.0 / sub.shape[0])
        variances[j] = sub[mask].var(axis=0) if mask.any() else sub.var(axis=0)
    weights /= weights.sum()
    variances = np.maximum(variances, VAR_FLOOR)

    prev_ll = -np.inf
    for _ in range(iters):
        resp, ll = _responsibilities(sub, weights, means, variances)
        mass = resp.sum(axis=0)
        for j in range(k):
            if mass[j] / sub.shape[0] < 1e-6:
                # degenerate component: re-seed at the point farthest from
                # the mixture mean, give it a fresh full-data variance
                mix_mean = (weights[:, None] * means).sum(axis=0)
                far = int(np.argmax(((sub - mix_mean) ** 2).sum(axis=1)))
                means[j] = sub[far]
                variances[j] = np.maximum(sub.var(axis=0), VAR_FLOOR)
                weights[j] = 1.0 / sub.shape[0]
                weights /= weights.sum()
                resp, ll = _responsibilities(sub, weights, means, variances)
                mass = resp.sum(axis=0)
        weights = mass / sub.shape[0]
        means = (resp.T @ sub) / mass[:, None]
        diff2 = (sub[:, None, :] - means[None, :, :]) ** 2
        variances = np.maximum(
            (resp[:, :, None] * diff2).sum(axis=0) / mass[:, None], VAR_FLOOR
        )
        if abs(ll - prev_ll) < 1e-10 * max(1.0, abs(ll)):
            prev_ll = ll
            break
        prev_ll = ll

    resp_all, _ = _responsibilities(points, weights, means, variances)
    return GmmResult(weights, means, variances, resp_all, prev_ll)


def gmm_loglik_trace(points: np.ndarray, k: int, iters: int = 30, seed: int = 0) -> np.ndarray:
    """Subsample log-likelihood after each EM iteration (monotonicity probe)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    trace = []
    for i in range(1, iters + 1):
        trace.append(gmm_fit(points, k, iters=i, seed=seed).log_likelihood)
    return np.array(trace)


def assign_by_residual(y: np.ndarray, preds: np.ndarray) -> int:
    """argmin_j ||y - preds[j]||^2 with ties resolved to the lowest index."""
    y = np.asarray(y, dtype=float).ravel()
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    if preds.shape[0] < 1:
        raise ValueError("need at least one model prediction")
    d2 = ((preds - y[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d2))
