"""Constructive identifiability checks for the categorical-background model.

At a fixed design point (x, t) the outcome law is a finite mixture over the
background class. This module fits that mixture pointwise, computes posterior
class weights from a factual outcome, builds the discrete counterfactual
estimate (mass on the class means at t'), transports abducted noise exactly
in the additive case, tracks component identity along a treatment path, and
checks the resulting expected-W1 bound against the empirical class spread.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clustering import VAR_FLOOR, _log_gauss_diag, gmm_fit
from .datagen import cardio_outcome_batch, oscillator_outcome
from .metrics import DiscreteDistribution, w1_atoms_to_cloud, w1_discrete
from .odesim import CvParams, f_hr, r_tpr

MIN_SAMPLES_PER_COMPONENT = 10
MAX_PATH_HALVINGS = 10      # adaptive grid cap: 2**10 intervals


class AlignmentError(RuntimeError):
    """Components along the path cannot be tracked unambiguously."""


@dataclass(frozen=True)
class PointwiseMixture:
    """Outcome mixture at one (x, t): weights, means, diagonal covariances."""
    weights: np.ndarray   # [k] on the simplex
    means: np.ndarray     # [k, d]
    variances: np.ndarray  # [k, d], >= VAR_FLOOR
    x: object = None      # location tag, not used in computation
    t: float | None = None

    def __post_init__(self):
        k = self.weights.shape[0]
        if k < 1 or self.means.shape[0] != k or self.variances.shape[0] != k:
            raise ValueError("component counts disagree")
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances disagree on dimension")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must lie on the simplex")

    @property
    def k(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class AlignmentMap:
    """Component tracking along a path.

    perms[s][j] is the component index at grid point s of the component that
    carries label j at the first point; perms[0] is the identity.
    """
    points: tuple
    perms: tuple

    def __post_init__(self):
        k = len(self.perms[0])
        for s, p in enumerate(self.perms):
            if sorted(p) != list(range(k)):
                raise ValueError(f"entry {s} is not a permutation of [0, {k})")


def fit_pointwise(y: np.ndarray, k: int, x=None, t=None, seed: int = 0) -> PointwiseMixture:
    """Diagonal-covariance mixture fit on outcome draws at one design point."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[0] < MIN_SAMPLES_PER_COMPONENT * k:
        raise ValueError(
            f"need at least {MIN_SAMPLES_PER_COMPONENT} samples per component, "
            f"got {y.shape[0]} for k={k}")
    g = gmm_fit(y, k, max_subsample=y.shape[0], seed=seed)
    return PointwiseMixture(g.weights, g.means, g.variances, x=x,
                            t=None if t is None else float(t))


def posterior_weights(y: np.ndarray, mix: PointwiseMixture) -> np.ndarray:
    """P(class | y) under the fitted mixture, computed in log space."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    logs = np.log(np.maximum(mix.weights, 1e-300)) + \
        _log_gauss_diag(y, mix.means, mix.variances)[0]
    if not np.any(np.isfinite(logs)):
        warnings.warn("all component densities underflow; returning uniform weights")
        return np.full(mix.k, 1.0 / mix.k)
    logs = logs - logs.max()
    w = np.exp(logs)
    return w / w.sum()


def cf_estimator_discrete(posterior: np.ndarray,
                          means_t_prime: np.ndarray) -> DiscreteDistribution:
    """Mass `posterior[k]` on the class-k mean response at t'."""
    return DiscreteDistribution(np.asarray(means_t_prime, dtype=np.float64),
                                np.asarray(posterior, dtype=np.float64))


def cf_estimator_additive(y: np.ndarray, mix_t: PointwiseMixture,
                          mix_t_prime: PointwiseMixture) -> DiscreteDistribution:
    """Class-conditional noise transport for additive structural equations.

    Per class: abduct u = (y - mu_k(t)) / scale_k(t), then place an atom at
    mu_k(t') + scale_k(t') * u, weighted by the class posterior at (t, y).
    The two mixtures must share component labels (see align_components).
    """
    if mix_t.k != mix_t_prime.k:
        raise ValueError("mixtures disagree on component count")
    for mix in (mix_t, mix_t_prime):
        if np.any(mix.variances < VAR_FLOOR * (1 - 1e-9)):
            raise ValueError("component covariance below the invertibility floor")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    scale_t = np.sqrt(mix_t.variances)
    scale_tp = np.sqrt(mix_t_prime.variances)
    u = (y[None, :] - mix_t.means) / scale_t
    atoms = mix_t_prime.means + scale_tp * u
    return DiscreteDistribution(atoms, posterior_weights(y, mix_t))


def _greedy_match(prev_means: np.ndarray, cur_means: np.ndarray):
    """match[i] = index of cur component nearest to prev component i,
    assigned greedily by globally smallest distance; returns (match, drift)."""
    k = prev_means.shape[0]
    dists = np.sqrt(((prev_means[:, None, :] - cur_means[None, :, :]) ** 2).sum(axis=2))
    match = np.full(k, -1, dtype=np.int64)
    taken = np.zeros(k, dtype=bool)
    masked = dists.copy()
    for _ in range(k):
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        match[i] = j
        taken[j] = True
        masked[i, :] = np.inf
        masked[:, j] = np.inf
    drift = float(dists[np.arange(k), match].max())
    return match, drift


def align_components(points, mixtures) -> AlignmentMap:
    """Track component identity across consecutive mixtures on a path.

    Requires every step's largest matched drift to stay below the smallest
    inter-component separation at the destination point; otherwise two
    components could claim the same successor and the step is ambiguous.
    """
    points = list(points)
    mixtures = list(mixtures)
    if len(points) != len(mixtures) or not mixtures:
        raise ValueError("need one mixture per grid point")
    k = mixtures[0].k
    perms = [np.arange(k)]
    for s in range(1, len(mixtures)):
        if mixtures[s].k != k:
            raise ValueError("component count changes along the path")
        match, drift = _greedy_match(mixtures[s - 1].means, mixtures[s].means)
        if k > 1:
            cur = mixtures[s].means
            sep = np.sqrt(((cur[:, None, :] - cur[None, :, :]) ** 2).sum(axis=2))
            sep = float(sep[~np.eye(k, dtype=bool)].min())
            if drift >= sep:
                raise AlignmentError(
                    f"drift {drift:.4g} >= separation {sep:.4g} at grid index {s}")
        perms.append(match[perms[-1]])
    return AlignmentMap(tuple(points), tuple(p.copy() for p in perms))


# ---------------------------------------------------------------------------
# ground-truth sites: a generator pinned at one latent design point

@dataclass
class OscillatorSite:
    """Additive oscillator at a fixed phase latent.

    The covariate path is determined by phi, classes are equiprobable, and
    outcomes are the class response plus isotropic Gaussian noise, so class
    densities and noise transport are available in closed form.
    """
    phi: float = 0.3
    sigma: float = 0.05
    k0: int = 3
    additive: bool = field(default=True, init=False)

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.k0, 1.0 / self.k0)

    @property
    def x_repr(self):
        return float(self.phi)

    def class_mean(self, t: float, z: int) -> np.ndarray:
        return oscillator_outcome(self.phi, t, z).ravel()

    def class_means(self, t: float) -> np.ndarray:
        return np.stack([self.class_mean(t, z) for z in range(self.k0)])

    def sample_classes(self, t: float, z: np.ndarray, rng) -> np.ndarray:
        means = self.class_means(t)[np.asarray(z, dtype=int)]
        return means + rng.normal(0.0, self.sigma, size=means.shape)

    def sample_mixture(self, t: float, n: int, rng):
        z = rng.integers(0, self.k0, size=n)
        return self.sample_classes(t, z, rng), z

    def true_posterior(self, y: np.ndarray, t: float) -> np.ndarray:
        means = self.class_means(t)
        if self.sigma == 0.0:
            out = np.zeros(self.k0)
            out[int(np.argmin(((means - y) ** 2).sum(axis=1)))] = 1.0
            return out
        var = np.full_like(means, self.sigma ** 2)
        logs = np.log(self.prior) + _log_gauss_diag(y.reshape(1, -1), means, var)[0]
        logs -= logs.max()
        w = np.exp(logs)
        return w / w.sum()

    def transport_atoms(self, y: np.ndarray, t: float, t_prime: float) -> np.ndarray:
        means_t = self.class_means(t)
        means_tp = self.class_means(t_prime)
        return y[None, :] - means_t + means_tp


@dataclass
class CardioSite:
    """Cardiovascular simulator at a fixed initial state.

    The pre-treatment trajectory (hence x) is deterministic given the
    initial state; class z scales the fluid dose. Additive mode adds
    Gaussian observation noise to the sampled pressures; non-additive mode
    perturbs the dose schedule itself, so class densities are approximated
    by moment matching on simulated draws.
    """
    init: tuple = ()
    sigma: float = 0.01
    noise_mode: str = "additive"
    k0: int = 2
    params: CvParams = field(default_factory=CvParams.default)
    cloud_seed: int = 977
    _clouds: dict = field(default_factory=dict, repr=False)
    _means: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.init:
            pa0, pv0, s0 = 0.765, 0.30, 0.5
            sv0 = (pa0 - pv0) / (r_tpr(s0, self.params) * f_hr(s0, self.params))
            self.init = (sv0, pa0, pv0, s0)
        if self.noise_mode not in ("additive", "non_additive"):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")

    @property
    def additive(self) -> bool:
        return self.noise_mode == "additive"

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.k0, 1.0 / self.k0)

    @property
    def x_repr(self):
        return [float(v) for v in self.init]

    def _simulate(self, t: float, z: np.ndarray, u_eta=None) -> np.ndarray:
        z = np.asarray(z, dtype=int).reshape(-1)
        init = np.tile(np.asarray(self.init, dtype=float), (z.size, 1))
        y = cardio_outcome_batch(init, np.full(z.size, t), z, u_eta,
                                 params=self.params)
        return y.reshape(z.size, -1)

    def class_cloud(self, t: float, z: int, m: int) -> np.ndarray:
        """Simulated draws of Y(t)|z with fresh dose noise; cached per (t, z)."""
        key = (round(float(t), 12), int(z), m)
        if key not in self._clouds:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.cloud_seed, int(z), m]))
            u_eta = rng.normal(0.0, self.sigma, size=(m, 41))
            self._clouds[key] = self._simulate(t, np.full(m, z), u_eta)
        return self._clouds[key]

    def class_mean(self, t: float, z: int) -> np.ndarray:
        key = (round(float(t), 12), int(z))
        if key not in self._means:
            if self.additive:
                self._means[key] = self._simulate(t, np.array([z]))[0]
            else:
                self._means[key] = self.class_cloud(t, z, 2000).mean(axis=0)
        return self._means[key]

    def class_means(self, t: float) -> np.ndarray:
        return np.stack([self.class_mean(t, z) for z in range(self.k0)])

    def sample_classes(self, t: float, z: np.ndarray, rng) -> np.ndarray:
        z = np.asarray(z, dtype=int).reshape(-1)
        if self.additive:
            means = self.class_means(t)[z]
            return means + rng.normal(0.0, self.sigma, size=means.shape)
        u_eta = rng.normal(0.0, self.sigma, size=(z.size, 41))
        return self._simulate(t, z, u_eta)

    def sample_mixture(self, t: float, n: int, rng):
        z = rng.integers(0, self.k0, size=n)
        return self.sample_classes(t, z, rng), z

    def _class_moments(self, t: float):
        """(means, variances) of Y(t)|z; exact in the additive case."""
        if self.additive:
            means = self.class_means(t)
            var = np.full_like(means, max(self.sigma ** 2, VAR_FLOOR))
            return means, var
        clouds = [self.class_cloud(t, z, 2000) for z in range(self.k0)]
        means = np.stack([c.mean(axis=0) for c in clouds])
        var = np.maximum(np.stack([c.var(axis=0) for c in clouds]), VAR_FLOOR)
        return means, var

    def true_posterior(self, y: np.ndarray, t: float) -> np.ndarray:
        means, var = self._class_moments(t)
        if self.additive and self.sigma == 0.0:
            out = np.zeros(self.k0)
            out[int(np.argmin(((means - y) ** 2).sum(axis=1)))] = 1.0
            return out
        logs = np.log(self.prior) + _log_gauss_diag(y.reshape(1, -1), means, var)[0]
        logs -= logs.max()
        w = np.exp(logs)
        return w / w.sum()

    def transport_atoms(self, y: np.ndarray, t: float, t_prime: float) -> np.ndarray:
        if not self.additive:
            raise ValueError("noise transport needs the additive structural form")
        return y[None, :] - self.class_means(t) + self.class_means(t_prime)


def make_site(generator: str, sigma: float, noise_mode: str = "additive", **kwargs):
    """Ground-truth site for a generator at a canonical latent design point."""
    if generator == "oscillator":
        if noise_mode != "additive":
            raise ValueError("the oscillator site requires additive noise; the "
                             "non-additive variant has no fixed-covariate law")
        return OscillatorSite(sigma=sigma, **kwargs)
    if generator == "cardio":
        return CardioSite(sigma=sigma, noise_mode=noise_mode, **kwargs)
    raise ValueError(f"no ground-truth site for generator {generator!r}")


# ---------------------------------------------------------------------------
# empirical bound check

REPORT_FIELDS = {"x": (list, float), "t": float, "t_prime": float, "n": int,
                 "n_eval": int, "ground_truth": str, "e_w1": float,
                 "delta_hat": float, "ci_low": float, "ci_high": float,
                 "pass": bool}


def validate_report(report: dict) -> None:
    """Raise ValueError unless `report` matches the emitted schema exactly."""
    if set(report) != set(REPORT_FIELDS):
        raise ValueError(f"report keys {sorted(report)} do not match schema")
    for key, types in REPORT_FIELDS.items():
        types = types if isinstance(types, tuple) else (types,)
        value = report[key]
        if key == "x" and isinstance(value, list):
            ok = all(isinstance(v, (int, float)) for v in value)
        else:
            ok = isinstance(value, types) and not (
                isinstance(value, bool) and bool not in types)
        if not ok:
            raise ValueError(f"report field {key!r} has type {type(value).__name__}")


def _weighted_deviation(samples: np.ndarray, mix: PointwiseMixture) -> float:
    """max_k responsibility-weighted mean ||y - mu_k|| over the fit samples."""
    from .clustering import _responsibilities
    resp, _ = _responsibilities(samples, mix.weights, mix.means, mix.variances)
    dists = np.sqrt(((samples[:, None, :] - mix.means[None, :, :]) ** 2).sum(axis=2))
    mass = resp.sum(axis=0)
    dev = (resp * dists).sum(axis=0) / np.maximum(mass, 1e-12)
    return float(dev[mass > 0].max())


def bound_check(site, t: float, t_prime: float, n_samples: int, k: int,
                n_eval: int = 64, cloud_per_class: int = 2000,
                bootstrap: int = 1000, seed: int = 0, out=None) -> dict:
    """Monte-Carlo check of E_Y[W1(true CF law, discrete CF estimate)] <= delta.

    Mixtures are fitted from fresh generator draws at grid points between t
    and t', starting from the two endpoints and halving the grid until
    component tracking is unambiguous. delta_hat is the empirical class
    spread (the clusterability constant) at the endpoints; the check passes
    when the expected W1 stays below it up to the bootstrap margin of the
    Monte-Carlo mean.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0]))
    fit_cache = {}

    def fitted(tv: float, order: int):
        key = round(float(tv), 12)
        if key not in fit_cache:
            y, _ = site.sample_mixture(float(tv), n_samples, rng)
            fit_cache[key] = (fit_pointwise(y, k, x=site.x_repr, t=tv,
                                            seed=seed + order), y)
        return fit_cache[key]

    last_err = None
    for level in range(MAX_PATH_HALVINGS + 1):
        points = np.linspace(t, t_prime, 2 ** level + 1)
        mixes = [fitted(tv, i)[0] for i, tv in enumerate(points)]
        try:
            amap = align_components(points, mixes)
            break
        except AlignmentError as err:
            last_err = err
    else:
        raise last_err
    mix_t, samples_t = fitted(points[0], 0)
    mix_tp, samples_tp = fitted(points[-1], len(points) - 1)
    atoms_tp = mix_tp.means[amap.perms[-1]]

    delta_hat = max(_weighted_deviation(samples_t, mix_t),
                    _weighted_deviation(samples_tp, mix_tp))

    if not site.additive:
        clouds = [site.class_cloud(t_prime, z, cloud_per_class)
                  for z in range(site.k0)]
        cloud = np.concatenate(clouds, axis=0)

    eval_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1]))
    z_eval = eval_rng.integers(0, site.k0, size=n_eval)
    y_eval = site.sample_classes(t, z_eval, eval_rng)
    w1s = np.zeros(n_eval)
    for i in range(n_eval):
        y = y_eval[i]
        nu_hat = cf_estimator_discrete(posterior_weights(y, mix_t), atoms_tp)
        p_true = site.true_posterior(y, t)
        if site.additive:
            nu_true = DiscreteDistribution(site.transport_atoms(y, t, t_prime),
                                           p_true)
            w1s[i] = w1_discrete(nu_hat, nu_true)
        else:
            cw = np.repeat(p_true / cloud_per_class, cloud_per_class)
            w1s[i] = w1_atoms_to_cloud(nu_hat.atoms, nu_hat.weights, cloud, cw)

    e_w1 = float(w1s.mean())
    boot_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB5]))
    boot = boot_rng.choice(w1s, size=(bootstrap, n_eval), replace=True).mean(axis=1)
    ci_low, ci_high = (float(v) for v in np.percentile(boot, [2.5, 97.5]))
    margin = (ci_high - ci_low) / 2.0

    if site.additive:
        truth = "closed-form noise transport at the true class posterior"
    else:
        truth = (f"per-class latent resampling, {cloud_per_class} draws per "
                 "class, weighted by the true class posterior")
    report = {"x": site.x_repr, "t": float(t), "t_prime": float(t_prime),
              "n": int(n_samples), "n_eval": int(n_eval), "ground_truth": truth,
              "e_w1": e_w1, "delta_hat": float(delta_hat),
              "ci_low": ci_low, "ci_high": ci_high,
              "pass": bool(e_w1 <= delta_hat + margin)}
    validate_report(report)
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=2) + "\n")
    return report
