"""Fixed-step integration of the four-state cardiovascular system.

State is (SV, P_a, P_v, S): stroke volume, arterial and venous pressure,
and baroreflex tone. Peripheral resistance and heart rate are affine in S.
Numeric constants live in cv_params.json (versioned, config-overridable);
they follow the normalized-pressure regime of the cited four-state model,
so acceptance-level behavior depends only on relative dose/class response.

The integrator is classical RK4 with a fixed step so stored noise latents
align with steps deterministically; no adaptive stepping.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

STATE_NAMES = ("sv", "p_a", "p_v", "s")


class OdeError(RuntimeError):
    """Non-finite derivative or state during integration."""


@dataclass(frozen=True)
class CvParams:
    c_a: float
    c_v: float
    r_tpr_min: float
    r_tpr_max: float
    r_tpr_mod: float
    f_hr_min: float
    f_hr_max: float
    tau_baro: float
    k_width: float
    p_a_set: float
    sv_init: float
    p_a_init: float
    p_v_init: float
    s_init: float

    def __post_init__(self):
        for name in ("c_a", "c_v", "r_tpr_min", "r_tpr_max", "f_hr_min", "f_hr_max",
                     "tau_baro", "k_width", "p_a_set", "sv_init", "p_a_init", "p_v_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"CvParams.{name} must be positive")
        if self.r_tpr_mod < 0:
            raise ValueError("CvParams.r_tpr_mod must be nonnegative (0 disables it)")
        if not self.f_hr_max > self.f_hr_min:
            raise ValueError("f_hr_max must exceed f_hr_min")
        if not self.r_tpr_max > self.r_tpr_min:
            raise ValueError("r_tpr_max must exceed r_tpr_min")
        if not 0.0 <= self.s_init <= 1.0:
            raise ValueError("s_init must lie in [0, 1]")

    @staticmethod
    def default() -> "CvParams":
        return _default_params()

    def replace(self, **kwargs) -> "CvParams":
        return dataclasses.replace(self, **kwargs)


@lru_cache(maxsize=1)
def _default_params() -> CvParams:
    raw = json.loads(resources.files("cfqp").joinpath("cv_params.json").read_text())
    raw.pop("version", None)
    raw.pop("comment", None)
    return CvParams(**raw)


@dataclass
class CvState:
    sv: float
    p_a: float
    p_v: float
    s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.sv, self.p_a, self.p_v, self.s], dtype=float)

    @staticmethod
    def from_array(arr) -> "CvState":
        sv, p_a, p_v, s = (float(v) for v in arr)
        return CvState(sv, p_a, p_v, s)


def r_tpr(s, p: CvParams):
    return s * (p.r_tpr_max - p.r_tpr_min) + p.r_tpr_min + p.r_tpr_mod


def f_hr(s, p: CvParams):
    return s * (p.f_hr_max - p.f_hr_min) + p.f_hr_min


def _logistic(u):
    return 1.0 / (1.0 + np.exp(-u))


def cv_derivative(state, t: float, input_fn, p: CvParams):
    """Right-hand sides of the four-state system at time t.

    `state` is a CvState or an array [4, ...] (vectorized over trailing
    axes); `input_fn(t)` returns the external fluid rate, scalar or
    broadcastable to the state batch. Returns the same kind as `state`.
    """
    as_state = isinstance(state, CvState)
    arr = state.as_array() if as_state else np.asarray(state, dtype=float)
    sv, p_a, p_v, s = arr[0], arr[1], arr[2], arr[3]
    i_ext = np.asarray(input_fn(t), dtype=float)

    d_sv = i_ext
    d_p_a = (sv * f_hr(s, p) - (p_a - p_v) / r_tpr(s, p)) / p.c_a
    d_p_v = (-p.c_a * d_p_a + i_ext) / p.c_v
    d_s = (1.0 - _logistic(p.k_width * (p_a - p.p_a_set)) - s) / p.tau_baro

    rates = (d_sv, d_p_a, d_p_v, d_s)
    for name, term in zip(STATE_NAMES, rates):
        if not np.all(np.isfinite(term)):
            raise OdeError(f"non-finite d{name}/dt at t={float(t):.6f}")
    out = np.stack(np.broadcast_arrays(*rates))
    return CvState.from_array(out) if as_state else out


def rk4_integrate(f, y0, t0: float, t1: float, dt: float = 0.01,
                  sample_dt: float = 1.0, post_step=None):
    """Classical RK4 from t0 to t1; returns (times, trajectory).

    `f(t, y)` maps an array state to its derivative; `dt` must divide the
    sampling interval `sample_dt` (default 1 s) and is capped at 0.05. The
    trajectory has (t1 - t0) / sample_dt + 1 rows including y(t0). An
    optional `post_step(y)` hook runs after every step (the cardiovascular
    wrapper clamps S there).
    """
    if dt <= 0 or dt > 0.05 + 1e-12:
        raise ValueError(f"dt={dt} outside (0, 0.05]")
    steps_per_sample = round(sample_dt / dt)
    if abs(steps_per_sample * dt - sample_dt) > 1e-9:
        raise ValueError(f"dt={dt} does not divide the sampling interval {sample_dt}")
    n_samples = round((t1 - t0) / sample_dt)
    if abs(t0 + n_samples * sample_dt - t1) > 1e-9 or n_samples < 0:
        raise ValueError(f"span ({t0}, {t1}) is not a whole number of sampling intervals")

    y = np.array(y0, dtype=float)
    times = t0 + sample_dt * np.arange(n_samples + 1)
    traj = np.zeros((n_samples + 1,) + y.shape)
    traj[0] = y
    for k in range(n_samples):
        for j in range(steps_per_sample):
            t = t0 + (k * steps_per_sample + j) * dt
            k1 = f(t, y)
            k2 = f(t + dt / 2, y + (dt / 2) * k1)
            k3 = f(t + dt / 2, y + (dt / 2) * k2)
            k4 = f(t + dt, y + dt * k3)
            y = y + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if post_step is not None:
                y = post_step(y)
            if not np.all(np.isfinite(y)):
                raise OdeError(f"non-finite state at t={t + dt:.6f}")
        traj[k + 1] = y
    return times, traj


def _clamp_s(y: np.ndarray) -> np.ndarray:
    y[3] = np.clip(y[3], 0.0, 1.0)
    return y


def integrate_cv(p: CvParams, input_fn, y0, t0: float, t1: float,
                 dt: float = 0.01, sample_dt: float = 1.0):
    """Integrate the circulation model; `y0` is [4] or [4, N] (batched)."""
    f = lambda t, y: cv_derivative(y, t, input_fn, p)
    return rk4_integrate(f, np.asarray(y0, dtype=float), t0, t1, dt,
                         sample_dt=sample_dt, post_step=_clamp_s)


def equilibrium_state(p: CvParams, p_a: float | None = None, p_v: float | None = None) -> np.ndarray:
    """The resting state consistent with (p_a, p_v): all four rates vanish.

    S sits at the baroreflex fixed point of p_a and SV balances the flow
    through the peripheral resistance, so with zero input the trajectory is
    constant. Any (p_a > p_v) pair yields an equilibrium; volume is conserved.
    """
    p_a = p.p_a_init if p_a is None else float(p_a)
    p_v = p.p_v_init if p_v is None else float(p_v)
    if p_a <= p_v:
        raise ValueError("equilibrium needs p_a > p_v")
    s = 1.0 - _logistic(p.k_width * (p_a - p.p_a_set))
    sv = (p_a - p_v) / (r_tpr(s, p) * f_hr(s, p))
    return np.array([sv, p_a, p_v, s])
