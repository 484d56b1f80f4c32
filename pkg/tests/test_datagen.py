"""Generator tests: exact outcome identities, replay fidelity, and the
clusterability / continuity / mixture-form witnesses behind the method."""
import numpy as np
import pytest
from scipy import stats

from cfqp.datagen import (
    GenConfig,
    OSC_GRID,
    cardio_outcome_batch,
    cardio_trajectories,
    cf_tuples,
    gaussian_blur5,
    gen_cardio,
    gen_images,
    gen_oscillator,
    generate,
    hue_rgb,
    image_class_probs,
    image_outcome,
    image_treatment,
    oscillator_outcome,
    oscillator_ramp,
    regen_counterfactual,
    regen_outcomes,
    render_glyph,
    resize_bilinear,
    rotate_bilinear,
    _cardio_input_fn,
)


def osc_cfg(**kw):
    base = dict(generator="oscillator", n_train=64, n_val=32, n_test=64,
                sigma=0.05, noise_mode="additive", k0=3, seed=1)
    base.update(kw)
    return GenConfig(**base)


def cardio_cfg(**kw):
    base = dict(generator="cardio", n_train=40, n_val=20, n_test=60,
                sigma=0.01, noise_mode="additive", k0=2, seed=3)
    base.update(kw)
    return GenConfig(**base)


def img_cfg(**kw):
    base = dict(generator="images", n_train=80, n_val=40, n_test=80,
                sigma=0.01, noise_mode="additive", k0=6, rho=0.5, seed=7)
    base.update(kw)
    return GenConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        osc_cfg(generator="nope")
    with pytest.raises(ValueError):
        osc_cfg(sigma=-0.1)
    with pytest.raises(ValueError):
        osc_cfg(rho=1.5)
    with pytest.raises(ValueError):
        osc_cfg(noise_mode="multiplicative")
    with pytest.raises(ValueError):
        img_cfg(image_size=4)


def test_oscillator_ranges_and_classes():
    ds = gen_oscillator(osc_cfg(n_train=128, n_val=16, n_test=16))
    assert ds.x.shape == (160, 40) and ds.y.shape == (160, 42)
    assert ds.x_shape == (2, 20) and ds.y_shape == (2, 21)
    assert 0.2 <= ds.t.min() and ds.t.max() <= 1.0
    assert set(np.unique(ds.u_z)) == {0, 1, 2}


def test_oscillator_rejects_wrong_k0():
    with pytest.raises(ValueError):
        gen_oscillator(osc_cfg(k0=4))
    with pytest.raises(ValueError):
        gen_cardio(cardio_cfg(k0=3))


def test_oscillator_noiseless_class1_channel0_is_pure_sine():
    ds = gen_oscillator(osc_cfg(sigma=0.0))
    i = int(np.flatnonzero(ds.u_z == 1)[0])
    phi = float(ds.latents["phi"][i, 0])
    expected = np.sin(0.5 * OSC_GRID[20:] + phi).astype(np.float32)
    assert np.array_equal(ds.y[i].reshape(2, 21)[0], expected)


def test_oscillator_zero_treatment_is_untreated():
    for u_z in range(3):
        y = oscillator_outcome(0.7, 0.0, u_z)
        base = np.stack([np.sin(0.5 * OSC_GRID[20:] + 0.7),
                         np.sin(0.5 * OSC_GRID[20:] + 1.4)])
        assert np.array_equal(y, base)


def test_oscillator_effect_linear_in_treatment():
    phi, t = 0.37, 0.45
    for u_z in range(3):
        low = oscillator_outcome(phi, t, u_z)
        high = oscillator_outcome(phi, 2 * t, u_z)
        base = oscillator_outcome(phi, 0.0, u_z)
        assert np.allclose(high - low, low - base, rtol=0, atol=1e-12)


def test_oscillator_ramp_saturates():
    grid = OSC_GRID[20:]
    ramp = oscillator_ramp(grid)
    assert ramp[0] == 0.0
    assert np.all(ramp[3:] == 1.0)
    assert np.allclose(ramp[:4], [0, 1 / 3, 2 / 3, 1])


def test_regen_identity_bit_exact_all_modes():
    for cfg in (osc_cfg(), osc_cfg(noise_mode="non_additive"),
                cardio_cfg(), cardio_cfg(noise_mode="non_additive"),
                img_cfg(n_train=30, n_val=10, n_test=30),
                img_cfg(n_train=30, n_val=10, n_test=30, noise_mode="non_additive", sigma=0.05)):
        ds = generate(cfg)
        idx = ds.indices("test")
        assert np.array_equal(regen_outcomes(ds, idx, ds.t[idx]), ds.y[idx]), cfg.generator


def test_regen_counterfactual_requires_test_split():
    ds = gen_oscillator(osc_cfg())
    with pytest.raises(ValueError):
        regen_counterfactual(ds, 0, 0.5)
    tup = regen_counterfactual(ds, int(ds.indices("test")[0]), 0.5)
    assert tup.t_prime == pytest.approx(0.5)
    assert tup.y_prime.shape == (42,)


def test_regen_requires_latents():
    ds = gen_oscillator(osc_cfg())
    stripped = gen_oscillator(osc_cfg())
    stripped.latents = None
    with pytest.raises(ValueError):
        regen_outcomes(stripped, ds.indices("test"), 0.5)


def test_generation_deterministic():
    a, b = gen_cardio(cardio_cfg()), gen_cardio(cardio_cfg())
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.array_equal(a.latents["init"], b.latents["init"])


def test_cardio_input_zero_before_treatment():
    fn = _cardio_input_fn(np.array([1.0]), np.array([1]), None)
    assert fn(19.5) == 0.0 and fn(20.0) == 0.0
    assert fn(25.0) > 0.0


def test_cardio_input_class_ratio_exactly_three():
    amp = np.array([0.002])
    lo = _cardio_input_fn(amp, np.array([0]), None)(25.0)
    hi = _cardio_input_fn(amp, np.array([1]), None)(25.0)
    assert hi / lo == 3.0


def test_cardio_pretreatment_window_ignores_treatment():
    init = np.array([[0.19, 0.76, 0.30, 0.52]])
    a = cardio_trajectories(init, [0.6], [0])
    b = cardio_trajectories(init, [1.0], [1])
    assert np.array_equal(a[:21], b[:21])
    assert not np.array_equal(a[21:], b[21:])


def test_cardio_dataset_shapes_and_noise():
    ds = gen_cardio(cardio_cfg())
    assert ds.x_shape == (2, 20) and ds.y_shape == (2, 21)
    assert 0.6 <= ds.t.min() and ds.t.max() <= 1.0
    assert set(np.unique(ds.u_z)) == {0, 1}
    # observation noise really is on the stored arrays
    clean = cardio_outcome_batch(ds.latents["init"][:5], ds.t[:5], ds.u_z[:5])
    noisy = ds.y[:5].reshape(5, 2, 21)
    diff = noisy - clean
    assert 0.004 < np.abs(diff).mean() < 0.02


def test_image_class_probs():
    assert np.allclose(image_class_probs(4, 6, 0.0), np.full(6, 1 / 6))
    p = image_class_probs(7, 6, 1.0)
    assert p[7 % 6] == 1.0 and p.sum() == pytest.approx(1.0)
    p = image_class_probs(2, 6, 0.5)
    assert p[2] == pytest.approx((1 - 1 / 6) * 0.5 + 1 / 6)
    assert p.sum() == pytest.approx(1.0)


def test_image_treatment_sigmoid_center():
    const = np.full((14, 14), 33.0 / 255.0)
    assert image_treatment(const, 0.0) == pytest.approx(2.5)
    assert image_treatment(const, 0.3) == pytest.approx(2.8)


def test_image_dataset_basics():
    ds = gen_images(img_cfg())
    assert ds.x_shape == (1, 14, 14) and ds.y_shape == (3, 14, 14)
    assert ds.x.min() >= 0.0 and ds.x.max() <= 1.0
    assert ds.y.min() >= 0.0 and ds.y.max() <= 1.0
    assert ds.u_z.max() < 6
    # confounding: treatment is the uniform part plus brightness sigmoid
    m = ds.x.reshape(-1, 196).mean(axis=1) * 255.0
    sig = 5.0 / (1.0 + np.exp(-(m - 33.0) / 11.0))
    assert np.all(ds.t >= sig - 1e-5) and np.all(ds.t <= sig + 0.3 + 1e-5)


def test_image_rho_one_ties_class_to_label():
    ds = gen_images(img_cfg(rho=1.0))
    labels = ds.latents["label"][:, 0].astype(int)
    assert np.array_equal(ds.u_z, labels % 6)


def test_glyphs_distinct_and_translatable():
    glyphs = [render_glyph(d, 14) for d in range(10)]
    for i in range(10):
        for j in range(i):
            assert not np.array_equal(glyphs[i], glyphs[j])
        assert glyphs[i].sum() > 0
        # a one-pixel border stays clear so translation jitter cannot clip
        assert glyphs[i][0].sum() == 0 and glyphs[i][-1].sum() == 0
        assert glyphs[i][:, 0].sum() == 0 and glyphs[i][:, -1].sum() == 0


def test_hue_palette_endpoints():
    assert np.allclose(hue_rgb(0, 6), [1, 0, 0])
    assert np.allclose(hue_rgb(1, 6), [1, 1, 0])
    assert np.allclose(hue_rgb(2, 6), [0, 1, 0])
    assert np.allclose(hue_rgb(4, 6), [0, 0, 1])


def test_rotation_identity_and_quarter_turn():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(9, 9))
    assert np.allclose(rotate_bilinear(img, 0.0), img, atol=1e-12)
    quarter = rotate_bilinear(img, 90.0)
    assert np.allclose(quarter, np.rot90(img), atol=1e-9) or \
        np.allclose(quarter, np.rot90(img, -1), atol=1e-9)


def test_blur_preserves_interior_mass():
    img = np.zeros((11, 11))
    img[5, 5] = 1.0
    out = gaussian_blur5(img, 1.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(out, out[::-1, ::-1])  # symmetric kernel, centered dot


def test_resize_identity():
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(14, 14))
    assert np.allclose(resize_bilinear(img, 14), img, atol=1e-12)
    small = resize_bilinear(img, 7)
    assert small.shape == (7, 7)
    assert 0 <= small.min() and small.max() <= 1.0


def test_cf_tuples_cover_test_split():
    ds = gen_oscillator(osc_cfg())
    idx, t_prime, y_prime = cf_tuples(ds, seed=11)
    assert np.array_equal(idx, ds.indices("test"))
    assert t_prime.shape == (64,) and y_prime.shape == (64, 42)
    assert 0.2 <= t_prime.min() and t_prime.max() <= 1.0
    again = cf_tuples(ds, seed=11)
    assert np.array_equal(again[1], t_prime) and np.array_equal(again[2], y_prime)


def test_continuity_in_treatment():
    # Assumption-2 witness: outcomes move continuously with the treatment.
    eps = 1e-3
    d_osc = np.linalg.norm(oscillator_outcome(0.37, 0.6 + eps, 2)
                           - oscillator_outcome(0.37, 0.6, 2))
    init = np.array([[0.19, 0.76, 0.30, 0.52]])
    d_cv = np.linalg.norm(cardio_outcome_batch(init, [0.8 + eps], [1])
                          - cardio_outcome_batch(init, [0.8], [1]))
    glyph = render_glyph(8, 14) * 0.4
    d_img = np.linalg.norm(image_outcome(glyph, 2.0 + eps, 3, 6, 10.0, "additive")
                           - image_outcome(glyph, 2.0, 3, 6, 10.0, "additive"))
    # observed: 0.0061 / 0.0013 / 0.0016
    assert d_osc < 0.05 and d_cv < 0.05 and d_img < 0.05


def test_class_separation_witness():
    # Assumption-3 witness: at a fixed site the class-conditional means sit
    # more than 6 per-dim standard deviations apart on the treated window.
    rng = np.random.default_rng(0)
    window = OSC_GRID[20:] >= 23.0

    def sep_ratio(means, spreads):
        seps = [np.linalg.norm(means[i] - means[j])
                for i in range(len(means)) for j in range(i)]
        return min(seps) / (6.0 * max(spreads))

    mus, spread = [], []
    for k in range(3):
        eta = rng.normal(0, 0.05, size=(1000, 2, 21)).astype(np.float32)
        ys = oscillator_outcome(0.3, 0.6, k, eta)[:, :, window].reshape(1000, -1)
        mus.append(ys.mean(axis=0))
        spread.append(ys.std(axis=0).max())
    assert sep_ratio(mus, spread) > 1.0  # observed ratio ≈ 8

    init = np.array([[0.19, 0.76, 0.30, 0.52]], dtype=np.float32)
    mus, spread = [], []
    for k in range(2):
        eta = rng.normal(0, 0.01, size=(1000, 2, 21)).astype(np.float32)
        ys = (cardio_outcome_batch(init, [0.8], [k]) + eta).reshape(1000, -1)
        mus.append(ys.mean(axis=0))
        spread.append(ys.std(axis=0).max())
    assert sep_ratio(mus, spread) > 1.0  # observed ratio ≈ 14


def test_mixture_form_witness():
    # Marginalizing the class matches the weighted mixture of per-class laws
    # (two-sample chi-square on a 1-D projection).
    rng = np.random.default_rng(42)
    phi, t, sig, n = 0.3, 0.6, 0.05, 4000

    def project(u_z, count, gen):
        eta = gen.normal(0, sig, size=(count, 2, 21)).astype(np.float32)
        return oscillator_outcome(phi, t, u_z, eta)[:, 0, -1]

    full = np.concatenate([project(int(k), 1, rng) for k in rng.integers(0, 3, size=n)])
    counts = rng.multinomial(n, [1 / 3] * 3)
    stratified = np.concatenate([project(k, counts[k], rng) for k in range(3)])

    bins = np.quantile(np.concatenate([full, stratified]), np.linspace(0, 1, 13)[1:-1])
    table = np.stack([np.histogram(full, np.r_[-np.inf, bins, np.inf])[0],
                      np.histogram(stratified, np.r_[-np.inf, bins, np.inf])[0]])
    _, p, _, _ = stats.chi2_contingency(table)
    assert p > 0.01
