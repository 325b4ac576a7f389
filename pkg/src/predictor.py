#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Channel prediction. The DLPDN maps the last w_step real-stacked estimates
# zeta(H_hat(t - i)), most recent first, to the current matrix through a
# per-slot conv/pool stack, two LSTM layers, dropout and a dense head. An
# LSTM-only variant and a per-entry linear-regression baseline share the same
# sample assembly and NMSE metric.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import json
import os
from dataclasses import dataclass, field

import numpy as np

from src import layers as ly
from src import nn_core as nn
from src.checkpoint import read_checkpoint, save_checkpoint
from src.logger import log_info, log_warning
from src.optim import fit
from src.settings import PredictorHyper
from src.utils import ShapeError, complex_to_real, derive_seed, make_rng, real_to_complex

#===============================================================================
# MACROS
#===============================================================================
EVAL_BATCH = 512

#===============================================================================
# Samples
#===============================================================================
@dataclass
class PredictorSamples:
    inputs: np.ndarray      # (N, w, 2M, K), most recent slot first
    targets: np.ndarray     # (N, 2M, K)
    H_true: np.ndarray      # (N, M, K)
    H_hat: np.ndarray       # (N, M, K)
    episode: np.ndarray     # (N,)

    def __len__(self):
        return len(self.inputs)

    def take(self, indices):
        return PredictorSamples(self.inputs[indices], self.targets[indices], self.H_true[indices],
                                self.H_hat[indices], self.episode[indices])

def preprocess(H_hat):
    return complex_to_real(H_hat)

def assemble_samples(ds, w_step, target="estimated", start=None):
    if target not in ("estimated", "true"):
        raise ValueError(f"unknown prediction target '{target}'")
    start = w_step if start is None else max(start, w_step)
    if ds.n_slots <= start:
        raise ValueError(f"episodes of {ds.n_slots} slots are too short for w_step={w_step}")
    real_hat = preprocess(ds.H_hat)
    real_true = preprocess(ds.H)
    inputs, targets, H_true, H_hat, episode = [], [], [], [], []
    for e in range(ds.n_episodes):
        for t in range(start, ds.n_slots):
            inputs.append(real_hat[e, t - w_step:t][::-1])
            targets.append(real_hat[e, t] if target == "estimated" else real_true[e, t])
            H_true.append(ds.H[e, t])
            H_hat.append(ds.H_hat[e, t])
            episode.append(e)
    return PredictorSamples(np.array(inputs), np.array(targets), np.array(H_true),
                            np.array(H_hat), np.array(episode))

#===============================================================================
# Metrics
#===============================================================================
def nmse(H_ref, H_pred):
    H_ref, H_pred = np.asarray(H_ref), np.asarray(H_pred)
    if H_ref.shape != H_pred.shape:
        raise ShapeError(f"NMSE operands differ in shape: {H_ref.shape} vs {H_pred.shape}")
    reference = np.linalg.norm(H_ref) ** 2
    if reference == 0:
        raise ValueError("NMSE is undefined for an all-zero reference matrix")
    return float(np.linalg.norm(H_ref - H_pred) ** 2 / reference)

def nmse_db(value):
    return float(10.0 * np.log10(value)) if value > 0 else float("-inf")

"""Mean per-sample NMSE over (N, M, K) stacks, linear and dB."""
def nmse_report(H_ref, H_pred):
    values = [nmse(r, p) for r, p in zip(H_ref, H_pred)]
    mean = float(np.mean(values))
    return {"nmse": mean, "nmse_db": nmse_db(mean)}

def prediction_error(H_hat, H_tilde):
    return np.asarray(H_hat) - np.asarray(H_tilde)

#===============================================================================
# Networks
#===============================================================================
def _conv_rows(rows, hyper):
    for kernel in hyper.kernels:
        if hyper.padding == "valid":
            rows = rows - kernel[0] + 1
        rows = rows // hyper.pool[0]
        if rows <= 0:
            raise ShapeError(f"conv stack {hyper.kernels} leaves no rows for this antenna count")
    return rows

def build_network(M, K, w_step, hyper):
    net = ly.Sequential()
    rows = 2 * M
    if hyper.variant == "dlpdn":
        net.add("to_slots", ly.reshape((-1, 1, rows, K)))
        channels = 1
        for i, (filters, kernel) in enumerate(zip(hyper.filters, hyper.kernels)):
            net.add(f"conv{i + 1}", ly.conv2d(channels, filters, kernel, hyper.padding), activation="relu")
            net.add(f"pool{i + 1}", ly.maxpool(hyper.pool))
            channels = filters
        kw = K if hyper.padding == "same" else K - sum(k[1] - 1 for k in hyper.kernels)
        features = channels * _conv_rows(rows, hyper) * (kw // hyper.pool[1] ** len(hyper.kernels))
    else:
        features = rows * K
    net.add("to_sequence", ly.reshape((-1, w_step, features)))
    first, second = hyper.lstm_units
    net.add("lstm1", ly.lstm(features, first, return_sequences=True))
    net.add("lstm2", ly.lstm(first, second))
    net.add("dropout", ly.dropout(hyper.dropout))
    net.add("head", ly.dense(second, rows * K))
    return net


@dataclass
class DlpdnModel:
    net: ly.Sequential
    M: int
    K: int
    w_step: int
    hyper: PredictorHyper
    meta: dict = field(default_factory=dict)

    """Per-sample, per-device RMS of the history, shaped (N, 1, K)."""
    def scale(self, inputs):
        rms = np.sqrt(np.mean(inputs ** 2, axis=(1, 2)))[:, None, :]
        return np.where(rms > 0, rms, 1.0)

    def base(self, inputs):
        if not self.hyper.residual:
            return np.zeros(inputs.shape[:1] + inputs.shape[2:])
        return inputs[:, 0]

    def forward(self, inputs, training=False, rng=None):
        x = inputs / self.scale(inputs)[:, None]
        # Most recent slot first on input; the LSTM runs oldest to newest.
        return self.net(np.ascontiguousarray(x[:, ::-1]), training=training, rng=rng)

    def to_network_units(self, inputs, targets):
        scaled = (targets - self.base(inputs)) / self.scale(inputs)
        return scaled.reshape(len(inputs), -1)

    def from_network_units(self, inputs, out):
        return out.reshape(-1, 2 * self.M, self.K) * self.scale(inputs) + self.base(inputs)

def init_model(M, K, w_step, hyper, seed):
    net = build_network(M, K, w_step, hyper).init(make_rng(derive_seed(seed, "dlpdn-init")))
    if hyper.residual:
        # An untrained residual predictor repeats the most recent estimate.
        net.set_parameters({name: np.zeros(t.shape) for name, t in net.parameters().items()
                            if name.startswith("head.")})
    return DlpdnModel(net, M, K, w_step, hyper)

def predict(inputs, model):
    inputs = np.asarray(inputs, dtype=np.float64)
    single = inputs.ndim == 3
    if single:
        inputs = inputs[None]
    expected = (model.w_step, 2 * model.M, model.K)
    if inputs.shape[1:] != expected:
        raise ShapeError(f"predictor expects inputs of shape {expected}, got {inputs.shape[1:]}")
    outputs = []
    for start in range(0, len(inputs), EVAL_BATCH):
        batch = inputs[start:start + EVAL_BATCH]
        outputs.append(model.from_network_units(batch, model.forward(batch).data))
    H_tilde = real_to_complex(np.concatenate(outputs))
    return H_tilde[0] if single else H_tilde

#===============================================================================
# Training
#===============================================================================
"""Hold out whole episodes so validation never sees a training trajectory."""
def split_by_episode(episodes, val_split, rng):
    episodes = np.asarray(episodes)
    labels = np.unique(episodes)
    if len(labels) < 2:
        log_warning("Predictor: a single episode, falling back to a per-sample validation split.")
        order = rng.permutation(len(episodes))
        n_val = max(1, int(round(len(episodes) * val_split))) if len(episodes) > 1 else 0
        return np.sort(order[n_val:]), np.sort(order[:n_val])
    n_val = min(len(labels) - 1, max(1, int(round(len(labels) * val_split))))
    held_out = rng.permutation(labels)[:n_val]
    mask = np.isin(episodes, held_out)
    return np.flatnonzero(~mask), np.flatnonzero(mask)

def _mse(model, inputs, targets):
    total = 0.0
    for start in range(0, len(inputs), EVAL_BATCH):
        batch = inputs[start:start + EVAL_BATCH]
        out = model.forward(batch).data
        total += float(np.sum((out - model.to_network_units(batch, targets[start:start + EVAL_BATCH])) ** 2))
    return total / targets.size

def train_dlpdn(samples, hyper, seed=0):
    if len(samples) == 0:
        raise ValueError("cannot train a predictor on an empty dataset")
    M, K = samples.H_hat.shape[1:]
    w_step = samples.inputs.shape[1]
    if w_step != hyper.w_step:
        raise ShapeError(f"samples carry w_step={w_step}, hyper-parameters ask for {hyper.w_step}")
    rng = make_rng(derive_seed(seed, "dlpdn-train"))
    train_idx, val_idx = split_by_episode(samples.episode, hyper.val_split, rng)
    model = init_model(M, K, w_step, hyper, seed)
    x_train, y_train = samples.inputs[train_idx], samples.targets[train_idx]
    x_val, y_val = samples.inputs[val_idx], samples.targets[val_idx]

    def batch_loss(indices, batch_rng):
        out = model.forward(x_train[indices], training=True, rng=batch_rng)
        diff = out - model.to_network_units(x_train[indices], y_train[indices])
        return nn.mean(diff * diff)

    def val_loss():
        return _mse(model, x_val, y_val) if len(val_idx) else _mse(model, x_train, y_train)

    log_info(f"Training {hyper.variant} predictor: {len(train_idx)} train / {len(val_idx)} validation "
             f"samples, M={M}, K={K}, w_step={w_step}.")
    curve = fit(model.net, batch_loss, len(train_idx), val_loss, hyper, rng, f"predictor[{hyper.variant}]")
    val_samples = samples.take(val_idx) if len(val_idx) else samples.take(train_idx)
    reference = val_samples.H_hat if hyper.target == "estimated" else val_samples.H_true
    report = nmse_report(reference, predict(val_samples.inputs, model))
    model.meta = {"curve": curve, "seed": seed, "epochs": len(curve["train_loss"]),
                  "val_nmse": report["nmse"], "val_nmse_db": report["nmse_db"],
                  "val_episodes": sorted(int(e) for e in np.unique(val_samples.episode))}
    log_info(f"Predictor validation NMSE {report['nmse_db']:.2f} dB after {model.meta['epochs']} epochs.")
    return model

def evaluate_predictor(model, samples):
    reference = samples.H_hat if model.hyper.target == "estimated" else samples.H_true
    return nmse_report(reference, predict(samples.inputs, model))

def collect_errors(H_hat, H_tilde):
    e2 = prediction_error(H_hat, H_tilde)
    return np.transpose(e2, (0, 2, 1)).reshape(-1, e2.shape[1])

#===============================================================================
# Checkpoints
#===============================================================================
def save_predictor(path, model):
    meta = dict(model.meta)
    meta.update({"kind": "predictor", "M": model.M, "K": model.K, "w_step": model.w_step,
                 "hyper": model.hyper.model_dump()})
    return save_checkpoint(path, model.net, meta)

def load_predictor(path):
    params, buffers, meta = read_checkpoint(path)
    if meta.get("kind") != "predictor":
        raise ValueError(f"'{path}' is not a predictor checkpoint")
    hyper = PredictorHyper.model_validate(meta["hyper"])
    net = build_network(meta["M"], meta["K"], meta["w_step"], hyper)
    net.set_parameters(params)
    net.set_buffers(buffers)
    extra = {k: v for k, v in meta.items() if k not in ("kind", "M", "K", "w_step", "hyper")}
    return DlpdnModel(net, meta["M"], meta["K"], meta["w_step"], hyper, extra)

#===============================================================================
# Linear-regression baseline
#===============================================================================
@dataclass
class LrModel:
    coef: np.ndarray        # (D, w_step + 1): lag weights, most recent first, then intercept
    w_step: int
    shape: tuple

def _design(history):
    n, w = history.shape[:2]
    flat = history.reshape(n, w, -1)
    return np.concatenate([flat, np.ones((n, 1, flat.shape[2]))], axis=1)

"""Per-entry least squares of the next value on the w_step previous values."""
def fit_lr(inputs, targets, ridge=1e-8):
    inputs, targets = np.asarray(inputs, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("cannot fit the LR baseline on an empty dataset")
    design = _design(inputs)
    y = targets.reshape(len(targets), -1)
    cols = design.shape[1]
    coef = np.empty((y.shape[1], cols))
    fallbacks = 0
    for d in range(y.shape[1]):
        X = design[:, :, d]
        solution, _, rank, _ = np.linalg.lstsq(X, y[:, d], rcond=None)
        if rank < cols:
            gram = X.T @ X
            lam = ridge * max(1.0, float(np.trace(gram)) / cols)
            solution = np.linalg.solve(gram + lam * np.eye(cols), X.T @ y[:, d])
            fallbacks += 1
        coef[d] = solution
    if fallbacks:
        log_warning(f"LR baseline: {fallbacks} rank-deficient entries solved with a ridge fallback.")
    return LrModel(coef, inputs.shape[1], targets.shape[1:])

"""
Predict from (N, w, 2M, K) or (w, 2M, K) histories. lr_model is a fitted LrModel,
or a ridge weight together with train=(inputs, targets) to fit on first.
"""
def lr_predict(history, lr_model, train=None):
    if not isinstance(lr_model, LrModel):
        if train is None:
            raise ValueError("lr_predict with a ridge weight needs train=(inputs, targets)")
        lr_model = fit_lr(*train, ridge=float(lr_model))
    history = np.asarray(history, dtype=np.float64)
    single = history.ndim == 3
    if single:
        history = history[None]
    if history.shape[1] != lr_model.w_step:
        raise ShapeError(f"LR model uses {lr_model.w_step} lags, history has {history.shape[1]}")
    design = _design(history)
    out = np.einsum("nwd,dw->nd", design, lr_model.coef).reshape((len(history),) + tuple(lr_model.shape))
    H_tilde = real_to_complex(out)
    return H_tilde[0] if single else H_tilde

def save_lr(path, lr_model):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"kind": "lr", "w_step": lr_model.w_step, "shape": list(lr_model.shape),
                   "coef": lr_model.coef.tolist()}, f)
    return path

def load_lr(path):
    with open(path, "r") as f:
        blob = json.load(f)
    if blob.get("kind") != "lr":
        raise ValueError(f"'{path}' is not an LR baseline file")
    return LrModel(np.array(blob["coef"]), blob["w_step"], tuple(blob["shape"]))
