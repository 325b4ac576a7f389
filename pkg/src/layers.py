#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Layer kinds used by the prediction, precoding and VAE networks, built on the
# nn_core Tensor. A layer is plain data (LayerParams); layer_forward dispatches
# on its kind. Sequential chains named layers and owns the parameter order that
# checkpoints rely on.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from src import nn_core as nn
from src.logger import log_warning
from src.utils import ShapeError

#===============================================================================
# MACROS
#===============================================================================
LAYER_KINDS = ("dense", "conv2d", "maxpool", "lstm", "dropout", "flatten",
               "reshape", "batchnorm", "lambda-power")
LSTM_GATES = ("f", "i", "C", "o")

#===============================================================================
# Layer data
#===============================================================================
@dataclass
class LayerParams:
    kind: str
    params: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind '{self.kind}'")

def dense(in_dim, out_dim):
    return LayerParams("dense", {"W": nn.parameter(np.zeros((in_dim, out_dim))),
                                 "b": nn.parameter(np.zeros(out_dim))},
                       {"in_dim": in_dim, "out_dim": out_dim})

def conv2d(in_channels, out_channels, kernel, padding="valid"):
    kh, kw = kernel
    if padding == "same":
        pad = ((kh - 1) // 2, (kw - 1) // 2)
    elif padding == "valid":
        pad = (0, 0)
    else:
        raise ValueError(f"unknown padding '{padding}'")
    return LayerParams("conv2d",
                       {"W": nn.parameter(np.zeros((out_channels, in_channels, kh, kw))),
                        "b": nn.parameter(np.zeros(out_channels))},
                       {"kernel": (kh, kw), "padding": pad, "stride": 1,
                        "in_channels": in_channels, "out_channels": out_channels})

def maxpool(pool=(2, 1)):
    return LayerParams("maxpool", hyper={"pool": tuple(pool)})

# Gate weights act on [m_prev; x_t], so each W_* is (units, units + in_dim).
def lstm(in_dim, units, return_sequences=False):
    params = {}
    for gate in LSTM_GATES:
        params[f"W_{gate}"] = nn.parameter(np.zeros((units, units + in_dim)))
        params[f"b_{gate}"] = nn.parameter(np.zeros(units))
    return LayerParams("lstm", params, {"in_dim": in_dim, "units": units,
                                        "return_sequences": return_sequences})

def dropout(rate=0.2):
    _check_rate(rate)
    return LayerParams("dropout", hyper={"rate": float(rate)})

def flatten():
    return LayerParams("flatten")

def reshape(shape):
    return LayerParams("reshape", hyper={"shape": tuple(shape)})

def batchnorm(dim, momentum=0.99, eps=1e-3):
    return LayerParams("batchnorm",
                       {"gamma": nn.parameter(np.ones(dim)), "beta": nn.parameter(np.zeros(dim))},
                       {"dim": dim, "momentum": momentum, "eps": eps},
                       {"running_mean": np.zeros(dim), "running_var": np.ones(dim)})

def lambda_power(total_power, fallback=None):
    return LayerParams("lambda-power", hyper={"total_power": float(total_power),
                                              "fallback": fallback})

def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")

#===============================================================================
# Initialization
#===============================================================================
def _fans(name, shape, kind):
    if kind == "conv2d":
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if kind == "lstm":
        return shape[1], shape[0]
    return shape[0], shape[1]

"""Uniform Xavier/Glorot weights in +-sqrt(6/(fan_in+fan_out)); biases zeroed."""
def xavier_init(p, rng):
    params = OrderedDict()
    for name, tensor in p.params.items():
        if name.startswith("W"):
            fan_in, fan_out = _fans(name, tensor.shape, p.kind)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = nn.parameter(rng.uniform(-limit, limit, size=tensor.shape))
        elif name.startswith("b") and p.kind != "batchnorm":
            params[name] = nn.parameter(np.zeros(tensor.shape))
        else:
            params[name] = nn.parameter(tensor.data)
    return replace(p, params=params)

#===============================================================================
# Forward passes
#===============================================================================
def _promote(t):
    return (nn.reshape(t, (1, t.shape[0])), True) if t.ndim == 1 else (t, False)

def lstm_gates(x_t, m_prev, p):
    x_t, m_prev = nn.as_tensor(x_t), nn.as_tensor(m_prev)
    units, width = p.params["W_f"].shape
    if m_prev.shape[-1] != units or x_t.shape[-1] + units != width:
        raise ShapeError(f"LSTM expects state {units} and input {width - units}, "
                         f"got {m_prev.shape[-1]} and {x_t.shape[-1]}")
    z = nn.concat([m_prev, x_t], axis=-1)
    pre = {g: z @ nn.transpose(p.params[f"W_{g}"]) + p.params[f"b_{g}"] for g in LSTM_GATES}
    return {"f": nn.sigmoid(pre["f"]), "i": nn.sigmoid(pre["i"]),
            "C": nn.tanh(pre["C"]), "o": nn.sigmoid(pre["o"])}

# C_t = f*C_prev + i*C~ ; m_t = o*tanh(C_t), all elementwise.
def lstm_cell_forward(x_t, m_prev, C_prev, p):
    x_t, m_prev, C_prev = nn.as_tensor(x_t), nn.as_tensor(m_prev), nn.as_tensor(C_prev)
    if m_prev.shape != C_prev.shape:
        raise ShapeError(f"LSTM state shapes differ: m {m_prev.shape}, C {C_prev.shape}")
    x_t, vector = _promote(x_t)
    m_prev, _ = _promote(m_prev)
    C_prev, _ = _promote(C_prev)
    gates = lstm_gates(x_t, m_prev, p)
    C_t = gates["f"] * C_prev + gates["i"] * gates["C"]
    m_t = gates["o"] * nn.tanh(C_t)
    if vector:
        return nn.reshape(m_t, (m_t.shape[-1],)), nn.reshape(C_t, (C_t.shape[-1],))
    return m_t, C_t

def _lstm_forward(x, p):
    if x.ndim != 3:
        raise ShapeError(f"LSTM layer expects (batch, time, features), got {x.shape}")
    batch, steps = x.shape[:2]
    units = p.hyper["units"]
    m = nn.Tensor(np.zeros((batch, units)))
    C = nn.Tensor(np.zeros((batch, units)))
    outputs = []
    for t in range(steps):
        m, C = lstm_cell_forward(x[:, t, :], m, C, p)
        outputs.append(m)
    return nn.stack(outputs, axis=1) if p.hyper["return_sequences"] else m

def _batchnorm_forward(x, p, training):
    eps = p.hyper["eps"]
    if training:
        mu = nn.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = nn.mean(centered * centered, axis=0, keepdims=True)
        momentum = p.hyper["momentum"]
        p.buffers["running_mean"] = momentum * p.buffers["running_mean"] + (1 - momentum) * mu.data[0]
        p.buffers["running_var"] = momentum * p.buffers["running_var"] + (1 - momentum) * var.data[0]
        normed = centered / nn.sqrt(var + eps)
    else:
        normed = (x - p.buffers["running_mean"]) / np.sqrt(p.buffers["running_var"] + eps)
    return normed * p.params["gamma"] + p.params["beta"]

# Rows with zero norm are replaced by the fallback direction before scaling.
def _lambda_forward(x, p):
    total_power = p.hyper["total_power"]
    norms = np.sqrt((x.data ** 2).sum(axis=1))
    zero_rows = norms == 0
    if np.any(zero_rows):
        fallback = p.hyper.get("fallback")
        if fallback is None:
            fallback = np.ones(x.shape[1])
        log_warning(f"Lambda layer received {int(zero_rows.sum())} zero vector(s); using uniform beams.")
        x = x + np.outer(zero_rows, fallback)
    norm = nn.sqrt(nn.tsum(x * x, axis=1, keepdims=True))
    return x * (np.sqrt(total_power) / norm)

def layer_forward(input, p, training=False, rng=None):
    x = nn.as_tensor(input)
    kind = p.kind
    if kind == "dense":
        if x.shape[-1] != p.hyper["in_dim"]:
            raise ShapeError(f"dense expects {p.hyper['in_dim']} features, got {x.shape[-1]}")
        return x @ p.params["W"] + p.params["b"]
    if kind == "conv2d":
        return nn.conv2d(x, p.params["W"], p.params["b"], padding=p.hyper["padding"])
    if kind == "maxpool":
        return nn.maxpool2d(x, p.hyper["pool"])
    if kind == "lstm":
        return _lstm_forward(x, p)
    if kind == "dropout":
        rate = p.hyper["rate"]
        _check_rate(rate)
        if not training or rate == 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * keep
    if kind == "flatten":
        return nn.reshape(x, (x.shape[0], -1))
    if kind == "reshape":
        return nn.reshape(x, p.hyper["shape"])
    if kind == "batchnorm":
        return _batchnorm_forward(x, p, training)
    if kind == "lambda-power":
        return _lambda_forward(x, p)
    raise ValueError(f"unknown layer kind '{kind}'")

def relu_after(p):
    return p.hyper.get("activation") == "relu"

#===============================================================================
# Sequential model
#===============================================================================
class Sequential:
    def __init__(self, layers=None):
        self.layers = OrderedDict()
        for name, layer in (layers or []):
            self.add(name, layer)

    def add(self, name, layer, activation=None):
        if name in self.layers:
            raise ValueError(f"duplicate layer name '{name}'")
        if activation is not None:
            layer.hyper["activation"] = activation
        self.layers[name] = layer
        return self

    def forward(self, x, training=False, rng=None):
        for layer in self.layers.values():
            x = layer_forward(x, layer, training=training, rng=rng)
            if relu_after(layer):
                x = nn.relu(x)
        return x

    __call__ = forward

    def init(self, rng):
        for name, layer in self.layers.items():
            self.layers[name] = xavier_init(layer, rng)
        return self

    def parameters(self):
        named = OrderedDict()
        for layer_name, layer in self.layers.items():
            for param_name, tensor in layer.params.items():
                named[f"{layer_name}.{param_name}"] = tensor
        return named

    def buffers(self):
        named = OrderedDict()
        for layer_name, layer in self.layers.items():
            for buffer_name, array in layer.buffers.items():
                named[f"{layer_name}.{buffer_name}"] = array
        return named

    def set_parameters(self, values):
        for full_name, array in values.items():
            layer_name, param_name = full_name.rsplit(".", 1)
            layer = self.layers[layer_name]
            expected = layer.params[param_name].shape
            if tuple(np.shape(array)) != tuple(expected):
                raise ShapeError(f"{full_name}: expected {expected}, got {np.shape(array)}")
            layer.params[param_name] = nn.parameter(array)

    def set_buffers(self, values):
        for full_name, array in values.items():
            layer_name, buffer_name = full_name.rsplit(".", 1)
            self.layers[layer_name].buffers[buffer_name] = np.array(array, dtype=np.float64)

    def zero_grad(self):
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def count_parameters(self):
        return int(sum(t.size for t in self.parameters().values()))
