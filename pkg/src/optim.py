#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Adam with bias correction, the plateau learning-rate schedule, early
# stopping, and the mini-batch loop shared by every trainer in the package.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
from dataclasses import dataclass, field

import numpy as np

from src import nn_core as nn
from src.logger import log_info, log_warning
from src.utils import TrainingDivergedError

#===============================================================================
# Adam
#===============================================================================
@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params, lr=1e-3, **kwargs):
        state = cls(lr=lr, **kwargs)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state

"""One Adam update in place. grads defaults to the .grad of each tensor."""
def adam_step(state, params, grads=None):
    if grads is None:
        grads = {name: tensor.grad for name, tensor in params.items()}
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(f"missing gradients for {missing}")
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        if state.m[name].shape != tensor.shape:
            raise ValueError(f"moment shape {state.m[name].shape} does not match {name} {tensor.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params

#===============================================================================
# Schedules
#===============================================================================
class ReduceLROnPlateau:
    def __init__(self, factor=0.3, patience=10, min_delta=1e-4, min_lr=1e-7):
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.best = np.inf
        self.wait = 0

    def step(self, value, lr):
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            new_lr = max(lr * self.factor, self.min_lr)
            if new_lr < lr:
                log_info(f"Validation loss plateaued; learning rate {lr:.3g} -> {new_lr:.3g}")
            return new_lr
        return lr


class EarlyStopping:
    def __init__(self, patience=20, min_delta=1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def step(self, value):
        if value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience

#===============================================================================
# Training loop
#===============================================================================
def _snapshot(model):
    return ({k: t.data.copy() for k, t in model.parameters().items()},
            {k: np.array(b, copy=True) for k, b in model.buffers().items()})

# batch_loss(indices, rng) returns the scalar training loss of one mini-batch;
# val_loss() returns the current validation loss as a float. The best
# validation snapshot is restored before returning the curve.
def fit(model, batch_loss, n_train, val_loss, hyper, rng, name):
    if n_train <= 0:
        raise ValueError(f"{name}: empty training set")
    state = OptimizerState.for_parameters(model.parameters(), lr=hyper.learning_rate)
    plateau = ReduceLROnPlateau(hyper.plateau_factor, hyper.plateau_patience, hyper.min_delta)
    stopper = EarlyStopping(hyper.patience, hyper.min_delta)
    curve = {"train_loss": [], "val_loss": [], "lr": []}
    # The starting parameters compete with every epoch.
    best_val, best_epoch, best_state = float(val_loss()), 0, _snapshot(model)
    if not np.isfinite(best_val):
        raise TrainingDivergedError(f"{name}: initial validation loss {best_val}")
    curve["initial_val_loss"] = best_val

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, hyper.batch_size):
            indices = order[start:start + hyper.batch_size]
            model.zero_grad()
            loss = batch_loss(indices, rng)
            try:
                nn.backward(loss)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"{name} diverged at epoch {epoch}: {e}") from e
            adam_step(state, model.parameters())
            total += loss.item() * len(indices)
        train = total / n_train
        val = float(val_loss())
        if not np.isfinite(val):
            raise TrainingDivergedError(f"{name} diverged at epoch {epoch}: validation loss {val}")
        curve["train_loss"].append(train)
        curve["val_loss"].append(val)
        curve["lr"].append(state.lr)
        log_info(f"{name} epoch {epoch}: train {train:.6g}, val {val:.6g}, lr {state.lr:.3g}")

        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, _snapshot(model)
        state.lr = plateau.step(val, state.lr)
        if stopper.step(val):
            log_info(f"{name}: early stopping at epoch {epoch} (best epoch {best_epoch}).")
            break

    if best_epoch == 0:
        log_warning(f"{name}: validation loss never improved; keeping initial parameters.")
    model.set_parameters(best_state[0])
    model.set_buffers(best_state[1])
    curve["best_epoch"] = best_epoch
    curve["best_val_loss"] = best_val
    return curve
