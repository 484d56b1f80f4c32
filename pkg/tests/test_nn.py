"""MLP unit tests: forward oracle, finite-difference gradients, Adam, training."""
from __future__ import annotations

import numpy as np
import pytest

from cfqp.nn import AdamState, Mlp, adam_step, load_model, save_model, train_epochs


def forward_oracle(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Straight-line reimplementation: explicit matrix products, no shared code."""
    h = np.asarray(x, dtype=float)
    n_layers = len(model.weights)
    for i in range(n_layers):
        h = h @ model.weights[i] + model.biases[i]
        if i < n_layers - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def fd_gradients(model: Mlp, x: np.ndarray, y: np.ndarray, h: float = 1e-4):
    """Central finite differences on every parameter entry."""
    grads = []
    for li in range(len(model.weights)):
        pair = []
        for arr in (model.weights[li], model.biases[li]):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + h
                up, _ = model.mse_and_grad(x, y)
                arr[idx] = old - h
                down, _ = model.mse_and_grad(x, y)
                arr[idx] = old
                g[idx] = (up - down) / (2 * h)
                it.iternext()
            pair.append(g)
        grads.append(tuple(pair))
    return grads


def max_rel_err(analytic, numeric) -> float:
    worst = 0.0
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        for a, n in ((aw, nw), (ab, nb)):
            rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
            worst = max(worst, float(rel.max()))
    return worst


def test_forward_zero_weights_gives_bias():
    m = Mlp([4, 6, 3], seed=0)
    for w in m.weights:
        w[:] = 0.0
    m.biases[-1][:] = np.array([1.0, -2.0, 0.5])
    out = m.forward(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.allclose(out, np.tile([1.0, -2.0, 0.5], (5, 1)))


def test_forward_identity_layer():
    m = Mlp([3, 3], seed=0)
    m.weights[0][:] = np.eye(3)
    m.biases[0][:] = 0.0
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(m.forward(x), x)


def test_forward_matches_reimplementation_oracle():
    rng = np.random.default_rng(2)
    m = Mlp([5, 8, 3], seed=7)
    x = rng.normal(size=(6, 5))
    assert np.allclose(m.forward(x), forward_oracle(m, x), atol=0, rtol=0)


def test_forward_shape_errors():
    m = Mlp([4, 2], seed=0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((3, 5)))


def test_mse_zero_at_target():
    m = Mlp([3, 6, 2], seed=3)
    x = np.random.default_rng(4).normal(size=(5, 3))
    y = m.forward(x)
    loss, grads = m.mse_and_grad(x, y)
    assert loss == 0.0
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in grads)


def test_mse_quadratic_scaling():
    m = Mlp([3, 6, 2], seed=5)
    x = np.random.default_rng(6).normal(size=(5, 3))
    y = m.forward(x)
    loss1, _ = m.mse_and_grad(x, y + 0.1)
    loss2, _ = m.mse_and_grad(x, y + 0.2)
    assert loss2 == pytest.approx(4 * loss1, rel=1e-12)


def test_gradcheck_three_layer_net():
    rng = np.random.default_rng(11)
    m = Mlp([5, 8, 8, 3], seed=13)
    x = rng.normal(size=(4, 5))
    y = rng.normal(size=(4, 3))
    _, analytic = m.mse_and_grad(x, y)
    numeric = fd_gradients(m, x, y)
    assert max_rel_err(analytic, numeric) < 1e-4


def preactivations_clear_of_kinks(model: Mlp, x: np.ndarray, margin: float) -> bool:
    """True when no hidden preactivation sits within `margin` of zero.

    Central differences are only a valid oracle on a locally linear piece;
    a draw that lands a ReLU input inside the probe window is redrawn.
    """
    h = np.asarray(x, dtype=float)
    for i in range(len(model.weights) - 1):
        z = h @ model.weights[i] + model.biases[i]
        if np.any(np.abs(z) < margin):
            return False
        h = np.maximum(z, 0.0)
    return True


def test_gradcheck_100_random_draws():
    # the acceptance-gate gradient sweep: 100 kink-free (net, batch) draws
    rng = np.random.default_rng(2024)
    worst = 0.0
    done = 0
    while done < 100:
        sizes = [int(rng.integers(2, 6)), int(rng.integers(3, 9)),
                 int(rng.integers(3, 9)), int(rng.integers(1, 4))]
        m = Mlp(sizes, seed=int(rng.integers(0, 2**31)))
        x = rng.normal(size=(int(rng.integers(2, 5)), sizes[0]))
        y = rng.normal(size=(x.shape[0], sizes[-1]))
        if not preactivations_clear_of_kinks(m, x, margin=5e-3):
            continue
        _, analytic = m.mse_and_grad(x, y)
        numeric = fd_gradients(m, x, y)
        worst = max(worst, max_rel_err(analytic, numeric))
        done += 1
    assert worst < 1e-4


def test_adam_zero_gradient_keeps_params():
    m = Mlp([2, 3], seed=0)
    st = AdamState(m, lr=0.1)
    w_before = [w.copy() for w in m.weights]
    zero = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(m.weights, m.biases)]
    adam_step(m, zero, st)
    assert all(np.array_equal(a, b) for a, b in zip(w_before, m.weights))
    assert st.step == 1


def test_adam_single_step_from_zero_state():
    # hand evaluation: one step gives -lr * g / (|g| + eps')
    m = Mlp([1, 1], seed=0)
    m.weights[0][:] = 0.0
    m.biases[0][:] = 0.0
    st = AdamState(m, lr=0.01)
    g = 0.7
    grads = [(np.array([[g]]), np.array([0.0]))]
    adam_step(m, grads, st)
    mhat = g  # m1 / (1 - beta1)
    vhat = g * g
    expected = -st.lr * mhat / (np.sqrt(vhat) + st.eps)
    assert m.weights[0][0, 0] == pytest.approx(expected, rel=1e-12)


def test_adam_constant_gradient_update_magnitude_approaches_lr():
    m = Mlp([1, 1], seed=0)
    st = AdamState(m, lr=0.003)
    g = [(np.array([[2.5]]), np.array([0.0]))]
    prev = m.weights[0][0, 0]
    for _ in range(400):
        prev = m.weights[0][0, 0]
        adam_step(m, g, st)
    last_update = abs(m.weights[0][0, 0] - prev)
    assert last_update == pytest.approx(st.lr, rel=1e-4)


def test_train_epochs_recovers_linear_map():
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, size=(256, 1))
    y = 2.0 * x
    m = Mlp([1, 32, 1], seed=9)
    train_epochs(m, x, y, epochs=500, batch_size=64, lr=1e-3, seed=10)
    x_val = rng.uniform(-1, 1, size=(128, 1))
    mse = float(np.mean((m.forward(x_val) - 2.0 * x_val) ** 2))
    assert mse < 1e-3


def test_train_epochs_zero_epochs_and_empty_data():
    m = Mlp([2, 4, 1], seed=0)
    before = [w.copy() for w in m.weights]
    trace, _ = train_epochs(m, np.zeros((3, 2)), np.zeros((3, 1)), epochs=0)
    assert trace.shape == (0,)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.weights))
    with pytest.raises(ValueError):
        train_epochs(m, np.zeros((0, 2)), np.zeros((0, 1)), epochs=1)


def test_train_epochs_deterministic_bitwise():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(64, 3))
    y = rng.normal(size=(64, 2))
    runs = []
    for _ in range(2):
        m = Mlp([3, 16, 2], seed=21)
        trace, _ = train_epochs(m, x, y, epochs=20, batch_size=16, lr=1e-3, seed=22)
        runs.append((trace, m))
    assert np.array_equal(runs[0][0], runs[1][0])
    for w0, w1 in zip(runs[0][1].weights, runs[1][1].weights):
        assert np.array_equal(w0, w1)


def test_full_batch_epoch_loss_permutation_invariant():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=(40, 2))
    perm = rng.permutation(40)
    m1 = Mlp([3, 8, 2], seed=31)
    m2 = m1.copy()
    t1, _ = train_epochs(m1, x, y, epochs=1, batch_size=40, lr=1e-3, seed=0)
    t2, _ = train_epochs(m2, x[perm], y[perm], epochs=1, batch_size=40, lr=1e-3, seed=0)
    assert t1[0] == t2[0]  # exact: full-batch loss reduction is order-free


def test_checkpoint_roundtrip(tmp_path):
    m = Mlp([4, 8, 3], seed=17)
    x = np.random.default_rng(18).normal(size=(10, 4))
    y = np.random.default_rng(19).normal(size=(10, 3))
    train_epochs(m, x, y, epochs=5, batch_size=4, seed=20)
    stem = tmp_path / "ckpt"
    save_model(m, stem)
    loaded = load_model(stem)
    assert loaded.layer_sizes == m.layer_sizes
    assert loaded.step == m.step
    for w_orig, w_load in zip(m.weights, loaded.weights):
        assert np.array_equal(w_orig.astype(np.float32).astype(float), w_load)
    # forward pass agrees to float32 resolution
    assert np.allclose(loaded.forward(x), m.forward(x), atol=1e-5)
