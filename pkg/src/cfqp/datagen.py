"""Synthetic benchmark generation with replayable latents.

Three generators share one discipline: every stochastic draw a sample needs
(class, phase, noise sequences, initial ODE state, ...) is stored in float32
alongside the data, and outcomes are computed by pure functions of those
stored draws plus the treatment. Re-running the outcome function with a new
treatment therefore yields the exact ground-truth counterfactual, and
re-running with the original treatment reproduces y bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .odesim import CvParams, OdeError, _logistic, f_hr, integrate_cv, r_tpr

GENERATORS = ("oscillator", "cardio", "images")
NOISE_MODES = ("additive", "non_additive")
SPLITS = ("train", "val", "test")

T_TREAT = 20.0
OSC_GRID = np.arange(41.0)        # shared observation grid, 1 unit apart
RAMP_SATURATION = 3.0             # treatment effect ramps up over 3 steps

CARDIO_FLUID_SCALE = 6e-3         # rate units per formula unit; keeps the
                                  # dose inside the model's stable envelope
CARDIO_PA0_RANGE = (0.745, 0.785)
CARDIO_PV0_RANGE = (0.28, 0.32)
CARDIO_S0_RANGE = (0.3, 0.7)      # initial baroreflex tone, off resting point
CARDIO_SV_JITTER = (0.7, 1.3)     # stroke volume about the flow-balance value

GLYPH_BASE_INTENSITY = 0.68
IMAGE_BRIGHT_MID = 33.0           # sigmoid center/scale of the treatment
IMAGE_BRIGHT_SCALE = 11.0         # confounder, in 0..255 pixel units

_CF_STREAM = 0xCF                 # rng stream tag for t' redraws


@dataclass(frozen=True)
class GenConfig:
    generator: str
    n_train: int
    n_val: int
    n_test: int
    sigma: float
    noise_mode: str = "additive"
    k0: int = 3
    rho: float = 0.0
    seed: int = 0
    image_size: int = 14
    rotation_scale: float = 10.0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train == 0:
            raise ValueError("split sizes must be non-negative with n_train > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.k0 < 1:
            raise ValueError("k0 must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0 <= self.seed < 2**63:
            raise ValueError("seed must be a non-negative 63-bit integer")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def replace(self, **kwargs) -> "GenConfig":
        return replace(self, **kwargs)


@dataclass
class Dataset:
    config: GenConfig
    x: np.ndarray        # [N, d_x] float32
    t: np.ndarray        # [N] float32
    y: np.ndarray        # [N, d_y] float32
    u_z: np.ndarray      # [N] int
    x_shape: tuple
    y_shape: tuple
    latents: dict | None = field(repr=False, default=None)

    def __post_init__(self):
        n = self.x.shape[0]
        for name, arr in (("t", self.t), ("y", self.y), ("u_z", self.u_z)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.latents is not None:
            for name, arr in self.latents.items():
                if arr.shape[0] != n:
                    raise ValueError(f"latent {name!r} has {arr.shape[0]} rows, expected {n}")
        if n != self.config.n_total:
            raise ValueError(f"{n} rows but config promises {self.config.n_total}")
        if self.u_z.min() < 0 or self.u_z.max() >= self.config.k0:
            raise ValueError("u_z outside [0, k0)")
        for arr in (self.x, self.t, self.y, self.u_z):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def indices(self, split: str) -> np.ndarray:
        """Row indices of one split; samples are stored train|val|test."""
        cfg = self.config
        bounds = {"train": (0, cfg.n_train),
                  "val": (cfg.n_train, cfg.n_train + cfg.n_val),
                  "test": (cfg.n_train + cfg.n_val, cfg.n_total)}
        if split not in bounds:
            raise ValueError(f"unknown split {split!r}")
        lo, hi = bounds[split]
        return np.arange(lo, hi)

    def split_of(self, index: int) -> str:
        cfg = self.config
        if not 0 <= index < self.n:
            raise IndexError(f"sample index {index} out of range")
        if index < cfg.n_train:
            return "train"
        if index < cfg.n_train + cfg.n_val:
            return "val"
        return "test"


@dataclass(frozen=True)
class CfTuple:
    x: np.ndarray
    t: float
    y: np.ndarray
    t_prime: float
    y_prime: np.ndarray
    u_z: int


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # counter-based per-sample stream: order of generation never matters
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


# ---------------------------------------------------------------- oscillator

def oscillator_ramp(t_grid: np.ndarray) -> np.ndarray:
    """Treatment-response ramp: 0 at onset, saturating at 1 after 3 steps."""
    return np.minimum(t_grid - T_TREAT, RAMP_SATURATION) / RAMP_SATURATION


def oscillator_covariates(phi, eta_x=None) -> np.ndarray:
    """x [..., 2, 20] from the phase latents.

    `phi` is a scalar phase, a batch of scalar phases [...], or a
    per-timestep phase whose trailing axis has length 41.
    """
    phi = np.asarray(phi, dtype=float)
    tx = OSC_GRID[:20]
    ph = phi[..., None] if phi.ndim == 0 or phi.shape[-1] != OSC_GRID.size else phi[..., :20]
    x = np.stack([np.sin(0.5 * tx + ph), np.sin(0.5 * tx + 2 * ph)], axis=-2)
    if eta_x is not None:
        x = x + np.asarray(eta_x, dtype=float)
    return x


def oscillator_outcome(phi, t, u_z: int, eta_y=None) -> np.ndarray:
    """y [..., 2, 21]: the phased sinusoid pair plus the class response.

    Class 0 shifts channel 0, class 1 shifts channel 1, class 2 shifts both;
    the shift is ramp(t_grid) * t.
    """
    phi = np.asarray(phi, dtype=float)
    ty = OSC_GRID[20:]
    ph = phi[..., None] if phi.ndim == 0 or phi.shape[-1] != OSC_GRID.size else phi[..., 20:]
    delta = oscillator_ramp(ty) * float(t)
    d0 = delta if u_z in (0, 2) else np.zeros_like(ty)
    d1 = delta if u_z in (1, 2) else np.zeros_like(ty)
    y = np.stack([np.sin(0.5 * ty + ph) + d0, np.sin(0.5 * ty + 2 * ph) + d1], axis=-2)
    if eta_y is not None:
        y = y + np.asarray(eta_y, dtype=float)
    return y


def gen_oscillator(cfg: GenConfig) -> Dataset:
    if cfg.k0 != 3:
        raise ValueError("the oscillator benchmark has exactly 3 latent classes")
    n = cfg.n_total
    additive = cfg.noise_mode == "additive"
    u_z = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.float32)
    phi = np.zeros((n, 1) if additive else (n, OSC_GRID.size), dtype=np.float32)
    eta_x = np.zeros((n, 2, 20), dtype=np.float32) if additive else None
    eta_y = np.zeros((n, 2, 21), dtype=np.float32) if additive else None
    for i in range(n):
        rng = _sample_rng(cfg.seed, i)
        u_z[i] = rng.integers(0, 3)
        t[i] = rng.uniform(0.2, 1.0)
        if additive:
            phi[i] = rng.normal(0.0, 1.0)
            eta_x[i] = rng.normal(0.0, cfg.sigma, size=(2, 20))
            eta_y[i] = rng.normal(0.0, cfg.sigma, size=(2, 21))
        else:
            phi[i] = rng.normal(0.0, cfg.sigma, size=OSC_GRID.size)

    x = np.zeros((n, 2, 20), dtype=np.float32)
    y = np.zeros((n, 2, 21), dtype=np.float32)
    for i in range(n):
        ph = phi[i, 0] if additive else phi[i]
        x[i] = oscillator_covariates(ph, None if eta_x is None else eta_x[i])
        y[i] = oscillator_outcome(ph, t[i], int(u_z[i]), None if eta_y is None else eta_y[i])

    latents = {"phi": phi}
    if additive:
        latents.update(eta_x=eta_x, eta_y=eta_y)
    return Dataset(cfg, x.reshape(n, -1), t, y.reshape(n, -1), u_z,
                   x_shape=(2, 20), y_shape=(2, 21), latents=latents)


# -------------------------------------------------------------------- cardio

def cardio_dose_gain(pa0) -> np.ndarray:
    """Confounding gain f(P_a(0)): initial pressure modulates the dose."""
    x = 0.5 + (np.asarray(pa0, dtype=float) - 0.75) / 0.1
    return 0.02 * (np.cos(5 * x - 0.2) * (5 - x) ** 2) ** 2


def _cardio_input_fn(amp: np.ndarray, u_z: np.ndarray, u_eta):
    """Fluid schedule: a Gaussian bump after the treatment time, scaled by
    (1 + 2 u_z + u_eta(t)) with u_eta piecewise-constant per second."""
    amp = np.asarray(amp, dtype=float)
    factor = 1.0 + 2.0 * np.asarray(u_z, dtype=float)

    def input_fn(time: float):
        # small slack so accumulated grid-time rounding cannot leak a dose
        # into the pre-treatment window
        if time <= T_TREAT + 1e-9:
            return np.zeros_like(amp)
        bump = math.exp(-(((time - T_TREAT - 5.0) / 5.0) ** 2))
        f = factor
        if u_eta is not None:
            sec = min(int(time), u_eta.shape[-1] - 1)
            f = f + np.asarray(u_eta, dtype=float)[..., sec]
        return amp * f * bump

    return input_fn


def cardio_trajectories(init, t, u_z, u_eta=None, params: CvParams | None = None) -> np.ndarray:
    """Integrate a batch of patients; returns the sampled states [41, 4, m].

    `init` is [m, 4] (sv, p_a, p_v, s); `t` and `u_z` are [m]; `u_eta` is an
    optional [m, 41] per-second amplitude noise.
    """
    p = params or CvParams.default()
    init = np.atleast_2d(np.asarray(init, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1)
    u_z = np.asarray(u_z).reshape(-1)
    amp = t * 5.0 * cardio_dose_gain(init[:, 1]) * CARDIO_FLUID_SCALE
    input_fn = _cardio_input_fn(amp, u_z, u_eta)
    _, traj = integrate_cv(p, input_fn, init.T, 0.0, 40.0)
    return traj


def cardio_outcome_batch(init, t, u_z, u_eta=None, eta_y=None,
                         params: CvParams | None = None) -> np.ndarray:
    """y [m, 2, 21]: observed (P_a, P_v) on the treated window."""
    traj = cardio_trajectories(init, t, u_z, u_eta, params)
    y = traj[20:, 1:3, :].transpose(2, 1, 0)
    if eta_y is not None:
        y = y + np.asarray(eta_y, dtype=float)
    return y


def gen_cardio(cfg: GenConfig, params: CvParams | None = None) -> Dataset:
    if cfg.k0 != 2:
        raise ValueError("the cardiovascular benchmark has exactly 2 latent classes")
    p = params or CvParams.default()
    n = cfg.n_total
    additive = cfg.noise_mode == "additive"
    u_z = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.float32)
    init = np.zeros((n, 4), dtype=np.float32)
    eta = np.zeros((n, 2, 41), dtype=np.float32) if additive else None
    u_eta = None if additive else np.zeros((n, 41), dtype=np.float32)
    for i in range(n):
        rng = _sample_rng(cfg.seed, i)
        u_z[i] = rng.integers(0, 2)
        t[i] = rng.uniform(0.6, 1.0)
        pa0 = np.float32(rng.uniform(*CARDIO_PA0_RANGE))
        pv0 = np.float32(rng.uniform(*CARDIO_PV0_RANGE))
        # patients arrive mid-transient: baroreflex tone and stroke volume are
        # drawn off the resting point, so the pre-treatment pressures carry a
        # relaxation transient that only implicitly encodes the full state
        s0 = np.float32(rng.uniform(*CARDIO_S0_RANGE))
        sv0 = np.float32((float(pa0) - float(pv0))
                         / (r_tpr(float(s0), p) * f_hr(float(s0), p))
                         * rng.uniform(*CARDIO_SV_JITTER))
        init[i] = (sv0, pa0, pv0, s0)
        if additive:
            eta[i] = rng.normal(0.0, cfg.sigma, size=(2, 41))
        else:
            u_eta[i] = rng.normal(0.0, cfg.sigma, size=41)

    try:
        traj = cardio_trajectories(init, t, u_z, u_eta, p)
    except OdeError:
        for i in range(n):  # re-run one by one to name the culprit
            try:
                cardio_trajectories(init[i:i + 1], t[i:i + 1], u_z[i:i + 1],
                                    None if u_eta is None else u_eta[i:i + 1], p)
            except OdeError as exc:
                raise OdeError(f"sample {i}: {exc}") from exc
        raise
    bad = np.argwhere(~np.isfinite(traj).all(axis=(0, 1)))
    if bad.size:
        raise OdeError(f"sample {int(bad[0, 0])}: non-finite trajectory")

    x = traj[:20, 1:3, :].transpose(2, 1, 0)
    y = traj[20:, 1:3, :].transpose(2, 1, 0)
    if additive:
        x = x + eta[:, :, :20]
        y = y + eta[:, :, 20:]
    latents = {"init": init, "eta": eta} if additive else {"init": init, "u_eta": u_eta}
    return Dataset(cfg, _f32(x).reshape(n, -1), t, _f32(y).reshape(n, -1), u_z,
                   x_shape=(2, 20), y_shape=(2, 21), latents=latents)


# -------------------------------------------------------------------- images

MARKER_RING = ((0, 0), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1),
               (1, 0), (1, -1), (0, -1), (-2, 0))


def render_glyph(digit: int, size: int) -> np.ndarray:
    """Digit mask in {0,1}: a shared rotation-asymmetric chassis plus one
    digit-keyed marker dot on a one-pixel ring around the image center.

    All ten classes share ~90% of their lit pixels and the marker sits at the
    rotation center, so the per-class regression task stays comparable no
    matter which labels a cluster holds or how far the treatment rotates the
    glyph; the marker still keeps every label recoverable from the pixels.
    """
    th = max(1, round(size / 7))
    r0 = 2 * size // 14
    r2 = size - r0 - th
    rm = (r0 + r2) // 2
    c0, c1 = 3 * size // 14, size - 3 * size // 14
    img = np.zeros((size, size))
    chassis = ((r0, r0 + th, c0, c1),        # top bar
               (r0, rm + th, c0, c0 + th),   # upper-left post
               (r2, r2 + th, c0, c1))        # bottom bar
    for ra, rb, ca, cb in chassis:
        img[ra:rb, ca:cb] = 1.0
    q = max(1, size // 14)
    dr, dc = MARKER_RING[int(digit) % 10]
    ra = (size - th) // 2 + q * dr
    ca = (size - th) // 2 + q * dc
    img[ra:ra + th, ca:ca + th] = 1.0
    return img


def hue_rgb(k: int, k0: int) -> np.ndarray:
    """RGB of the k-th of k0 equally spaced, fully saturated hues."""
    h = 6.0 * (k % k0) / k0
    frac = h - math.floor(h)
    chans = {0: (1, frac, 0), 1: (1 - frac, 1, 0), 2: (0, 1, frac),
             3: (0, 1 - frac, 1), 4: (frac, 0, 1), 5: (1, 0, 1 - frac)}
    return np.array(chans[int(h) % 6], dtype=float)


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, zero outside."""
    size = img.shape[0]
    theta = math.radians(degrees)
    c = (size - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(size) - c, np.arange(size) - c, indexing="ij")
    src_r = c + math.cos(theta) * rows + math.sin(theta) * cols
    src_c = c - math.sin(theta) * rows + math.cos(theta) * cols
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    fr, fc = src_r - r0, src_c - c0
    out = np.zeros_like(img, dtype=float)
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        out[inside] += w[inside] * img[rr[inside], cc[inside]]
    return out


def gaussian_blur5(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 5-tap Gaussian blur with zero padding, per channel."""
    taps = np.exp(-np.arange(-2.0, 3.0) ** 2 / (2.0 * max(float(sigma), 1e-3) ** 2))
    taps /= taps.sum()
    out = np.asarray(img, dtype=float)
    for axis in (-2, -1):
        padded = np.zeros(out.shape[:axis % out.ndim] + (out.shape[axis] + 4,)
                          + out.shape[axis % out.ndim + 1:])
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(2, 2 + out.shape[axis])
        padded[tuple(sl)] = out
        acc = np.zeros_like(out)
        for j, w in enumerate(taps):
            sl[axis] = slice(j, j + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Downscale/upscale a square image by bilinear interpolation."""
    n = img.shape[0]
    pos = (np.arange(size) + 0.5) * n / size - 0.5
    p0 = np.clip(np.floor(pos).astype(int), 0, n - 1)
    p1 = np.clip(p0 + 1, 0, n - 1)
    f = np.clip(pos - p0, 0.0, 1.0)
    rows = (1 - f)[:, None] * img[p0] + f[:, None] * img[p1]
    return (1 - f)[None, :] * rows[:, p0] + f[None, :] * rows[:, p1]


def image_mean255(x_img: np.ndarray) -> float:
    """Mean pixel on the 0..255 scale that drives the treatment confounder."""
    return float(np.asarray(x_img, dtype=float).mean() * 255.0)


def image_treatment(x_img: np.ndarray, uniform_part: float) -> float:
    arg = (image_mean255(x_img) - IMAGE_BRIGHT_MID) / IMAGE_BRIGHT_SCALE
    return float(uniform_part + 5.0 / (1.0 + math.exp(-arg)))


def image_class_probs(label: int, k0: int, rho: float) -> np.ndarray:
    """Class law p(U_Z | label): mass ((1-p0) rho + p0) on label mod k0."""
    p0 = 1.0 / k0
    hit = (1.0 - p0) * rho + p0
    probs = np.full(k0, (1.0 - hit) / (k0 - 1) if k0 > 1 else 0.0)
    probs[label % k0] = hit
    return probs


def image_outcome(x_img: np.ndarray, t, u_z: int, k0: int, rotation_scale: float,
                  noise_mode: str, pixel_noise=None, blur_sigma=None) -> np.ndarray:
    """y [3, S, S]: rotate by rotation_scale*t degrees, tint with the class
    hue, then add pixel noise (additive) or blur (non-additive); clip to [0,1]."""
    rot = rotate_bilinear(np.asarray(x_img, dtype=float), float(rotation_scale) * float(t))
    colored = rot[None, :, :] * hue_rgb(u_z, k0)[:, None, None]
    if noise_mode == "additive":
        if pixel_noise is not None:
            colored = colored + np.asarray(pixel_noise, dtype=float)
    else:
        colored = gaussian_blur5(colored, float(blur_sigma))
    return np.clip(colored, 0.0, 1.0)


def gen_images(cfg: GenConfig, source=None) -> Dataset:
    """Procedural glyphs by default; `source` = (images [m,r,c], labels [m])
    swaps in an external digit corpus (pixels 0..255)."""
    n = cfg.n_total
    s = cfg.image_size
    additive = cfg.noise_mode == "additive"
    if source is not None:
        src_images, src_labels = source
        src_images = np.asarray(src_images)
        src_labels = np.asarray(src_labels)
        if src_images.shape[0] != src_labels.shape[0]:
            raise ValueError("digit corpus images and labels disagree in length")

    u_z = np.zeros(n, dtype=np.int64)
    t = np.zeros(n, dtype=np.float32)
    label = np.zeros((n, 1), dtype=np.float32)
    x = np.zeros((n, s, s), dtype=np.float32)
    pixel_noise = np.zeros((n, 3, s, s), dtype=np.float32) if additive else None
    blur_sigma = None if additive else np.zeros((n, 1), dtype=np.float32)
    for i in range(n):
        rng = _sample_rng(cfg.seed, i)
        if source is None:
            digit = int(rng.integers(0, 10))
            glyph = render_glyph(digit, s) * (GLYPH_BASE_INTENSITY * rng.uniform(0.7, 1.0))
            shift_r, shift_c = int(rng.integers(-1, 2)), int(rng.integers(-1, 2))
            x[i] = np.roll(np.roll(glyph, shift_r, axis=0), shift_c, axis=1)
        else:
            pick = int(rng.integers(0, src_images.shape[0]))
            digit = int(src_labels[pick])
            x[i] = resize_bilinear(src_images[pick].astype(float) / 255.0, s)
        label[i] = digit
        t[i] = image_treatment(x[i], rng.uniform(0.0, 0.3))
        u_z[i] = rng.choice(cfg.k0, p=image_class_probs(digit, cfg.k0, cfg.rho))
        if additive:
            pixel_noise[i] = rng.normal(0.0, cfg.sigma, size=(3, s, s))
        else:
            blur_sigma[i] = max(1.0 + rng.normal(0.0, cfg.sigma), 0.05)

    y = np.zeros((n, 3, s, s), dtype=np.float32)
    for i in range(n):
        y[i] = image_outcome(x[i], t[i], int(u_z[i]), cfg.k0, cfg.rotation_scale,
                             cfg.noise_mode,
                             None if pixel_noise is None else pixel_noise[i],
                             None if blur_sigma is None else float(blur_sigma[i, 0]))
    latents = {"label": label}
    latents.update({"pixel_noise": pixel_noise} if additive else {"blur_sigma": blur_sigma})
    return Dataset(cfg, x.reshape(n, -1), t, y.reshape(n, -1), u_z,
                   x_shape=(1, s, s), y_shape=(3, s, s), latents=latents)


# ------------------------------------------------------- regeneration and t'

def generate(cfg: GenConfig, source=None) -> Dataset:
    if cfg.generator == "oscillator":
        return gen_oscillator(cfg)
    if cfg.generator == "cardio":
        return gen_cardio(cfg)
    return gen_images(cfg, source=source)


def regen_outcomes(ds: Dataset, indices, t_prime) -> np.ndarray:
    """Ground-truth outcomes [m, d_y] for the given samples under new
    treatments, replayed from the stored latents (any split)."""
    if ds.latents is None:
        raise ValueError("dataset was loaded without latents; cannot regenerate")
    indices = np.asarray(indices, dtype=int).reshape(-1)
    t_prime = _f32(np.broadcast_to(np.asarray(t_prime, dtype=np.float32),
                                   indices.shape)).reshape(-1)
    cfg = ds.config
    m = indices.size
    out = np.zeros((m, int(np.prod(ds.y_shape))), dtype=np.float32)
    if cfg.generator == "oscillator":
        phi = ds.latents["phi"]
        additive = cfg.noise_mode == "additive"
        for j, i in enumerate(indices):
            ph = phi[i, 0] if additive else phi[i]
            eta = ds.latents["eta_y"][i] if additive else None
            out[j] = _f32(oscillator_outcome(ph, t_prime[j], int(ds.u_z[i]), eta)).ravel()
    elif cfg.generator == "cardio":
        init = ds.latents["init"][indices]
        u_eta = None if cfg.noise_mode == "additive" else ds.latents["u_eta"][indices]
        eta_y = ds.latents["eta"][indices][:, :, 20:] if cfg.noise_mode == "additive" else None
        y = cardio_outcome_batch(init, t_prime, ds.u_z[indices], u_eta, eta_y)
        out[:] = _f32(y).reshape(m, -1)
    else:
        s = cfg.image_size
        for j, i in enumerate(indices):
            noise = ds.latents["pixel_noise"][i] if cfg.noise_mode == "additive" else None
            blur = None if cfg.noise_mode == "additive" else float(ds.latents["blur_sigma"][i, 0])
            y = image_outcome(ds.x[i].reshape(s, s), t_prime[j], int(ds.u_z[i]),
                              cfg.k0, cfg.rotation_scale, cfg.noise_mode, noise, blur)
            out[j] = _f32(y).ravel()
    return out


def regen_counterfactual(ds: Dataset, index: int, t_prime: float) -> CfTuple:
    """Ground-truth counterfactual tuple for one test sample."""
    if ds.split_of(int(index)) != "test":
        raise ValueError(f"sample {index} is not in the test split")
    t_p = float(np.float32(t_prime))
    y_prime = regen_outcomes(ds, [index], [t_p])[0]
    return CfTuple(x=ds.x[index], t=float(ds.t[index]), y=ds.y[index],
                   t_prime=t_p, y_prime=y_prime, u_z=int(ds.u_z[index]))


def draw_t_prime(ds: Dataset, indices, seed: int) -> np.ndarray:
    """Evaluation treatments: fresh draws from the generator's own law.

    For images the confounded brightness term is deterministic given x, so
    only the uniform component is redrawn.
    """
    indices = np.asarray(indices, dtype=int).reshape(-1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _CF_STREAM]))
    gen = ds.config.generator
    if gen == "oscillator":
        return _f32(rng.uniform(0.2, 1.0, size=indices.size))
    if gen == "cardio":
        return _f32(rng.uniform(0.6, 1.0, size=indices.size))
    u = rng.uniform(0.0, 0.3, size=indices.size)
    return _f32([image_treatment(ds.x[i], u[j]) for j, i in enumerate(indices)])


def cf_tuples(ds: Dataset, seed: int = 0):
    """(indices, t', y') over the whole test split."""
    indices = ds.indices("test")
    t_prime = draw_t_prime(ds, indices, seed)
    return indices, t_prime, regen_outcomes(ds, indices, t_prime)
