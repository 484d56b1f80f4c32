"""Minimal feed-forward regressor with hand-written gradients and Adam.

Every base model m_k(x, t) is an instance of `Mlp`: ReLU hidden layers,
identity output, trained on flattened covariates concatenated with the
scalar treatment. Reverse-mode gradients are written out explicitly; the
numerics core has no dependencies beyond numpy.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


class Mlp:
    """Fully connected ReLU network with an identity output layer.

    Parameters are float64 throughout; checkpoints round to float32.
    Initialization is He-uniform with fan-in scaling, derived from `seed`.
    """

    def __init__(self, layer_sizes: list[int], seed: int = 0):
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(s < 1 for s in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        self.seed = int(seed)
        self.step = 0  # optimizer updates applied so far
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-1.0, 1.0, size=fan_out) / math.sqrt(fan_in))

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.layer_sizes = list(self.layer_sizes)
        other.seed = self.seed
        other.step = self.step
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.d_in:
            raise ValueError(f"input width {x.shape[1]} != d_in {self.d_in}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def mse_and_grad(self, x: np.ndarray, y_target: np.ndarray):
        """Mean squared error over batch and output dims, with gradients.

        Returns (loss, grads) where grads is a list of (dW, db) per layer.
        The loss reduction sums per-sample means with math.fsum, so a
        full-batch loss is exactly invariant to sample order.
        """
        x = self._check_input(x)
        y_target = np.asarray(y_target, dtype=float)
        if y_target.ndim == 1:
            y_target = y_target[None, :]
        if y_target.shape != (x.shape[0], self.d_out):
            raise ValueError(f"target shape {y_target.shape} != {(x.shape[0], self.d_out)}")
        n, d = y_target.shape

        activations = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i != last else z
            activations.append(h)

        resid = activations[-1] - y_target
        loss = math.fsum((resid**2).mean(axis=1)) / n

        delta = (2.0 / (n * d)) * resid
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        for i in range(last, -1, -1):
            grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0.0)
        return float(loss), grads


class AdamState:
    """First/second moment accumulators plus hyper-parameters for Adam."""

    def __init__(self, model: Mlp, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(model.weights, model.biases)]
        self.v = [(np.zeros_like(w), np.zeros_like(b))
                  for w, b in zip(model.weights, model.biases)]


def adam_step(model: Mlp, grads, state: AdamState):
    """One Adam update in place; step increments before bias correction."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (dw, db) in enumerate(grads):
        for j, g in enumerate((dw, db)):
            m = state.m[i][j]
            v = state.v[i][j]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            target = model.weights[i] if j == 0 else model.biases[i]
            target -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.step += 1
    return model, state


def train_epochs(model: Mlp, x: np.ndarray, y: np.ndarray, epochs: int,
                 batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
                 state: AdamState | None = None):
    """Shuffled mini-batch training; returns (loss trace, AdamState).

    The trace holds one value per epoch: the size-weighted mean of batch
    losses, each evaluated before its update. Passing `state` continues a
    previous optimizer run (the cluster-EM loop relies on this).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x and y must be 2-d with matching sample counts")
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training data")
    if state is None:
        state = AdamState(model, lr=lr)
    else:
        state.lr = float(lr)
    rng = np.random.default_rng(seed)
    trace = np.zeros(int(epochs))
    for epoch in range(int(epochs)):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = model.mse_and_grad(x[idx], y[idx])
            adam_step(model, grads, state)
            total += loss * idx.size
        trace[epoch] = total / n
    return trace, state


def save_model(model: Mlp, stem: str | Path) -> Path:
    """Write `<stem>.json` (sizes, seed, step) plus `<stem>.bin` (LE float32)."""
    stem = Path(stem)
    header = {
        "format": "mlp-v1",
        "layer_sizes": model.layer_sizes,
        "seed": model.seed,
        "step": model.step,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")
    flat = np.concatenate(
        [np.concatenate([w.ravel(), b.ravel()])
         for w, b in zip(model.weights, model.biases)]
    ).astype("<f4")
    stem.with_suffix(".bin").write_bytes(flat.tobytes())
    return stem.with_suffix(".json")


def load_model(stem: str | Path) -> Mlp:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("format") != "mlp-v1":
        raise ValueError(f"unrecognized checkpoint header in {stem}.json")
    model = Mlp(header["layer_sizes"], seed=header["seed"])
    model.step = int(header["step"])
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f4").astype(float)
    if blob.size != model.n_params:
        raise ValueError(f"parameter blob holds {blob.size} values, expected {model.n_params}")
    pos = 0
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        model.weights[i] = blob[pos:pos + w.size].reshape(w.shape).copy()
        pos += w.size
        model.biases[i] = blob[pos:pos + b.size].copy()
        pos += b.size
    return model
