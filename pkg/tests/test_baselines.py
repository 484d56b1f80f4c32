"""Baseline tests: Deep-ITE identities and synthetic-control weight oracles."""
import numpy as np
import pytest

from cfqp.baselines import (
    ScModel,
    deep_ite_fit,
    deep_ite_predict,
    donor_window,
    project_simplex,
    sc_fit,
    sc_predict,
    solve_simplex_weights,
)
from cfqp.datagen import cf_tuples
from cfqp.metrics import cf_mse
from cfqp.model import CfqpConfig, features_at, fit, predict_cf_batch
from conftest import MODEL_CFG


def simplex_grid_optimum(donors: np.ndarray, target: np.ndarray, step: float = 1e-3):
    """Exhaustive search over 3-donor simplex weights at fixed resolution.

    Scans w1 and w2 on the grid with w3 = 1 - w1 - w2; independent of the
    projected-gradient solver.
    """
    assert donors.shape[0] == 3
    ticks = np.arange(0.0, 1.0 + step / 2, step)
    best_w, best_obj = None, np.inf
    for w1 in ticks:
        w2 = ticks[ticks <= 1.0 - w1 + step / 2]
        w3 = 1.0 - w1 - w2
        w3[np.abs(w3) < step / 2] = 0.0
        keep = w3 >= 0.0
        w = np.stack([np.full(keep.sum(), w1), w2[keep], w3[keep]], axis=1)
        resid = w @ donors - target
        obj = (resid ** 2).sum(axis=1)
        j = int(obj.argmin())
        if obj[j] < best_obj:
            best_obj, best_w = float(obj[j]), w[j]
    return best_w, best_obj


# ---------------------------------------------------------------------------
# Deep-ITE

def test_deep_ite_equals_k1_cfqp(osc_data, osc_deep_ite):
    model = fit(osc_data, MODEL_CFG.replace(k=1))
    te = osc_data.indices("test")[:32]
    _, t_prime, _ = cf_tuples(osc_data)
    k1_pred = predict_cf_batch(model, osc_data.x[te], osc_data.t[te],
                               osc_data.y[te], t_prime[:32])
    dite_pred = deep_ite_predict(osc_deep_ite, osc_data.x[te], t_prime[:32])
    assert np.array_equal(k1_pred, dite_pred)


def test_deep_ite_ignores_factual_outcome(osc_data, osc_deep_ite):
    # deep_ite_predict takes no factual outcome at all; via the K=1 route,
    # perturbing y must leave the prediction bit-identical.
    from cfqp.model import CfqpModel
    n_train = len(osc_data.indices("train"))
    model = CfqpModel([osc_deep_ite], MODEL_CFG.replace(k=1),
                      np.zeros(n_train, dtype=np.int64), [0])
    te = osc_data.indices("test")[:8]
    rng = np.random.default_rng(13)
    y_perturbed = osc_data.y[te] + rng.normal(0, 1, size=osc_data.y[te].shape)
    a = predict_cf_batch(model, osc_data.x[te], osc_data.t[te],
                         osc_data.y[te], osc_data.t[te])
    b = predict_cf_batch(model, osc_data.x[te], osc_data.t[te],
                         y_perturbed, osc_data.t[te])
    assert np.array_equal(a, b)
    assert np.array_equal(a, deep_ite_predict(osc_deep_ite, osc_data.x[te],
                                              osc_data.t[te]))


def test_deep_ite_oscillator_error_band(osc_data, osc_deep_ite):
    te = osc_data.indices("test")
    _, t_prime, y_cf = cf_tuples(osc_data)
    pred = deep_ite_predict(osc_deep_ite, osc_data.x[te], t_prime)
    err = cf_mse(y_cf, pred)
    assert 0.10 <= err <= 0.35  # paper-scale value 0.187


def test_deep_ite_fit_runs_shared_path():
    from cfqp.datagen import GenConfig, generate
    cfg = GenConfig("oscillator", 32, 16, 16, sigma=0.05,
                    noise_mode="additive", k0=3, seed=5)
    ds = generate(cfg)
    mcfg = CfqpConfig(k=3, epochs0=5, epochs1=5, delta=5, seed=1)
    m = deep_ite_fit(ds, mcfg)
    pred = deep_ite_predict(m, ds.x[:4], ds.t[:4])
    assert pred.shape == (4, ds.y.shape[1])
    assert np.all(np.isfinite(pred))


# ---------------------------------------------------------------------------
# simplex projection and weight solver

def test_project_simplex_closed_forms():
    assert np.allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    assert np.allclose(project_simplex(np.array([0.3, 0.3])), [0.5, 0.5])
    w = np.array([0.2, 0.5, 0.3])
    assert np.allclose(project_simplex(w), w)  # fixed point on the simplex


def test_project_simplex_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(0, 3, size=int(rng.integers(1, 9)))
        w = project_simplex(v)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.allclose(project_simplex(w), w, atol=1e-12)


def test_solver_weights_on_simplex_and_beat_uniform():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m, p = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        donors = rng.normal(size=(m, p))
        target = rng.normal(size=p)
        w = solve_simplex_weights(donors, target)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-8
        uniform = np.full(m, 1.0 / m)
        obj = ((w @ donors - target) ** 2).sum()
        obj_u = ((uniform @ donors - target) ** 2).sum()
        assert obj <= obj_u + 1e-12


def test_solver_single_donor_weight_is_one():
    w = solve_simplex_weights(np.array([[3.0, 1.0]]), np.array([0.0, 0.0]))
    assert np.array_equal(w, np.ones(1))


def test_solver_matches_three_donor_grid_oracle():
    rng = np.random.default_rng(2)
    for trial in range(5):
        donors = rng.normal(size=(3, 4))
        target = rng.normal(size=4)
        w = solve_simplex_weights(donors, target)
        w_grid, obj_grid = simplex_grid_optimum(donors, target)
        obj = ((w @ donors - target) ** 2).sum()
        assert obj <= obj_grid + 1e-9       # at least as good as the grid
        assert np.abs(w - w_grid).max() <= 2e-3


# ---------------------------------------------------------------------------
# synthetic control prediction

def toy_sc(seed=0, m=40, d_x=3, d_y=4, window=0.1) -> ScModel:
    rng = np.random.default_rng(seed)
    return ScModel(donor_x=rng.normal(size=(m, d_x)),
                   donor_y=rng.normal(size=(m, d_y)),
                   donor_t=rng.uniform(0.2, 1.0, size=m),
                   window=window)


def test_sc_duplicate_donor_gets_full_weight():
    sc = toy_sc(seed=3)
    j = 7
    pred = sc_predict(sc, sc.donor_x[j], sc.donor_y[j],
                      float(sc.donor_t[j]), float(sc.donor_t[j]))
    assert np.allclose(pred, sc.donor_y[j], atol=1e-6)


def test_sc_single_donor_returns_its_outcome():
    sc = toy_sc(m=1)
    pred = sc_predict(sc, np.zeros(3), np.zeros(4), 0.5, float(sc.donor_t[0]))
    assert np.array_equal(pred, sc.donor_y[0])


def test_sc_window_widens_until_donors_found():
    sc = ScModel(donor_x=np.zeros((3, 2)), donor_y=np.eye(3),
                 donor_t=np.array([0.0, 0.02, 0.05]), window=0.1)
    idx = donor_window(sc, 0.9)
    assert idx.size == 3  # radius doubled past the whole pool
    near = donor_window(sc, 0.04)
    assert near.size == 3  # all within the base window already


def test_sc_model_validation():
    with pytest.raises(ValueError):
        ScModel(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        ScModel(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        ScModel(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2), window=0.0)


def test_sc_fit_uses_train_split(osc_data):
    sc = sc_fit(osc_data, window=0.1)
    tr = osc_data.indices("train")
    assert sc.donor_x.shape == (len(tr), osc_data.x.shape[1])
    _, t_prime, y_cf = cf_tuples(osc_data)
    te = osc_data.indices("test")[:20]
    preds = np.stack([sc_predict(sc, osc_data.x[i], osc_data.y[i],
                                 float(osc_data.t[i]), float(t_prime[j]))
                      for j, i in enumerate(te)])
    assert np.all(np.isfinite(preds))
