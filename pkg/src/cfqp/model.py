"""Cluster-EM counterfactual predictor.

One shared model m0 learns the average treatment response; residuals
y - m0(x, t) are clustered into K groups; each group gets its own copy of
m0 fine-tuned on its members, with hard reassignment every delta epochs.
A counterfactual query (x, t, y, t') first infers the cluster from the
factual outcome, then evaluates that cluster's model at t'.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .clustering import assign_by_residual, gmm_fit, kmeans_fit
from .datagen import Dataset
from .nn import Mlp, load_model, save_model, train_epochs

CLUSTERERS = ("kmeans", "gmm")

# rng stream tags for seed derivation
_MODEL_STREAM, _INIT_STREAM, _ROUND_STREAM, _CLUSTER_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class CfqpConfig:
    k: int = 1
    delta: int = 20
    epochs0: int = 500
    epochs1: int = 500
    lr: float = 1e-3
    batch_size: int = 128
    clusterer: str = "kmeans"
    seed: int = 0
    hidden_sizes: tuple = (64,)
    early_stop: bool = False
    reset_adam: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if min(self.epochs0, self.epochs1) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be > 0 and batch_size >= 1")
        if self.clusterer not in CLUSTERERS:
            raise ValueError(f"unknown clusterer {self.clusterer!r}")
        if len(self.hidden_sizes) == 0 or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be non-empty positive ints")

    def replace(self, **kwargs) -> "CfqpConfig":
        return replace(self, **kwargs)


@dataclass
class CfqpModel:
    models: list
    config: CfqpConfig
    assignment: np.ndarray          # final train-set cluster per sample
    change_counts: list             # samples reassigned at each EM round
    loss_traces: list = field(default_factory=list)  # per-model epoch losses

    def __post_init__(self):
        if len(self.models) != self.config.k:
            raise ValueError(f"expected {self.config.k} models, got {len(self.models)}")
        if self.assignment.size and not (0 <= self.assignment.min()
                                         and self.assignment.max() < self.config.k):
            raise ValueError("assignment entries outside [0, k)")


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def features(ds: Dataset, indices=None) -> np.ndarray:
    """Model inputs [n, d_x + 1]: covariates with the treatment appended."""
    idx = slice(None) if indices is None else np.asarray(indices)
    return np.concatenate([ds.x[idx], ds.t[idx, None]], axis=1).astype(float)


def features_at(x: np.ndarray, t) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t_col = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
    return np.concatenate([x, t_col], axis=1)


def reassign_by_distance(dists: np.ndarray) -> np.ndarray:
    """Row-wise argmin with lowest-index ties; dists is [n, k] squared error."""
    return np.argmin(dists, axis=1)


def _distances(models, feats, y) -> np.ndarray:
    d = np.empty((feats.shape[0], len(models)))
    for j, m in enumerate(models):
        d[:, j] = ((y - m.forward(feats)) ** 2).sum(axis=1)
    return d


def train_init(data: Dataset, cfg: CfqpConfig) -> Mlp:
    """m0: one model for the conditional average response, epochs0 epochs."""
    idx = data.indices("train")
    if idx.size == 0:
        raise ValueError("train split is empty")
    feats = features(data, idx)
    targets = data.y[idx].astype(float)
    m0 = Mlp([feats.shape[1], *cfg.hidden_sizes, targets.shape[1]],
             seed=_derived_seed(cfg.seed, _MODEL_STREAM))
    train_epochs(m0, feats, targets, cfg.epochs0, batch_size=cfg.batch_size,
                 lr=cfg.lr, seed=_derived_seed(cfg.seed, _INIT_STREAM))
    return m0


def initial_cluster(data: Dataset, m0: Mlp, cfg: CfqpConfig) -> np.ndarray:
    """Cluster the full residual vectors y - m0(x, t) of the train split."""
    idx = data.indices("train")
    residuals = data.y[idx].astype(float) - m0.forward(features(data, idx))
    if cfg.k == 1:
        return np.zeros(idx.size, dtype=np.int64)
    seed = _derived_seed(cfg.seed, _CLUSTER_STREAM)
    if cfg.clusterer == "kmeans":
        return kmeans_fit(residuals, cfg.k, seed=seed).assignment.astype(np.int64)
    return gmm_fit(residuals, cfg.k, seed=seed).responsibilities.argmax(axis=1).astype(np.int64)


def em_train(data: Dataset, m0: Mlp, cfg: CfqpConfig) -> CfqpModel:
    """Alternate delta epochs of per-cluster fine-tuning with reassignment.

    Every model starts as a copy of m0. A cluster left empty by a
    reassignment keeps its frozen model and stays a candidate. With
    early_stop the loop ends once a reassignment changes nothing; the
    default runs the full epochs1 budget.
    """
    idx = data.indices("train")
    feats = features(data, idx)
    targets = data.y[idx].astype(float)
    assignment = initial_cluster(data, m0, cfg)

    models = [m0.copy() for _ in range(cfg.k)]
    states = [None] * cfg.k
    traces = [[] for _ in range(cfg.k)]
    change_counts = []
    epochs_done, round_idx = 0, 0
    while epochs_done < cfg.epochs1:
        step = min(cfg.delta, cfg.epochs1 - epochs_done)
        for j in range(cfg.k):
            mask = assignment == j
            if not mask.any():
                continue
            trace, states[j] = train_epochs(
                models[j], feats[mask], targets[mask], step,
                batch_size=cfg.batch_size, lr=cfg.lr,
                seed=_derived_seed(cfg.seed, _ROUND_STREAM, round_idx, j),
                state=None if cfg.reset_adam else states[j])
            traces[j].extend(trace)
        epochs_done += step
        round_idx += 1
        new_assignment = reassign_by_distance(_distances(models, feats, targets))
        changes = int((new_assignment != assignment).sum())
        change_counts.append(changes)
        assignment = new_assignment
        if cfg.early_stop and changes == 0:
            break
    return CfqpModel(models, cfg, assignment, change_counts, traces)


def fit(data: Dataset, cfg: CfqpConfig) -> CfqpModel:
    return em_train(data, train_init(data, cfg), cfg)


def infer_cluster(model: CfqpModel, x, t, y) -> int:
    """argmin_j ||y - m_j(x, t)||^2 for a single factual observation."""
    feats = features_at(x, t)
    preds = np.stack([m.forward(feats)[0] for m in model.models])
    return assign_by_residual(np.asarray(y, dtype=float).ravel(), preds)


def infer_clusters(model: CfqpModel, x, t, y) -> np.ndarray:
    feats = features_at(x, t)
    return reassign_by_distance(_distances(model.models, feats, np.asarray(y, dtype=float)))


def predict_cf(model: CfqpModel, x, t, y, t_prime) -> np.ndarray:
    """Counterfactual estimate m_k(x, t') with k inferred from (x, t, y)."""
    k = infer_cluster(model, x, t, y)
    return model.models[k].forward(features_at(x, t_prime))[0]


def predict_cf_batch(model: CfqpModel, x, t, y, t_prime) -> np.ndarray:
    ks = infer_clusters(model, x, t, y)
    feats = features_at(x, t_prime)
    out = np.zeros((feats.shape[0], model.models[0].d_out))
    for j in np.unique(ks):
        mask = ks == j
        out[mask] = model.models[j].forward(feats[mask])
    return out


def validation_mse(model: CfqpModel, data: Dataset, split: str = "val") -> float:
    """Factual reconstruction error with the cluster inferred per sample."""
    idx = data.indices(split)
    y = data.y[idx].astype(float)
    recon = predict_cf_batch(model, data.x[idx], data.t[idx], y, data.t[idx])
    return float(((y - recon) ** 2).mean())


def select_k(data: Dataset, cfg: CfqpConfig, k_range) -> tuple:
    """Train one model per K (sharing m0) and pick the lowest validation
    factual MSE; returns (best_k, rows of {k, val_mse, model})."""
    k_range = list(k_range)
    if not k_range:
        raise ValueError("k_range is empty")
    m0 = train_init(data, cfg)
    table = []
    for k in k_range:
        model = em_train(data, m0, cfg.replace(k=int(k)))
        table.append({"k": int(k), "val_mse": validation_mse(model, data),
                      "model": model})
    best = min(table, key=lambda row: row["val_mse"])
    return best["k"], table


def save_cfqp(model: CfqpModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, m in enumerate(model.models):
        save_model(m, out / f"model_{j}")
    meta = {
        "format": "cfqp-v1",
        "config": asdict(model.config),
        "assignment": model.assignment.tolist(),
        "change_counts": list(model.change_counts),
        "loss_traces": [list(map(float, tr)) for tr in model.loss_traces],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def load_cfqp(in_dir) -> CfqpModel:
    src = Path(in_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("format") != "cfqp-v1":
        raise ValueError(f"unrecognized checkpoint format {meta.get('format')!r}")
    raw_cfg = meta["config"]
    raw_cfg["hidden_sizes"] = tuple(raw_cfg["hidden_sizes"])
    cfg = CfqpConfig(**raw_cfg)
    models = [load_model(src / f"model_{j}") for j in range(cfg.k)]
    return CfqpModel(models, cfg, np.asarray(meta["assignment"], dtype=np.int64),
                     meta["change_counts"], meta["loss_traces"])
