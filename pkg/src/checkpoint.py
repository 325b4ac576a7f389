#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Versioned JSON checkpoints: an ordered list of (name, shape, values) for the
# parameters, the same for layer buffers, and a free-form metadata block
# (architecture, training curve, seed). Floats are written through repr so a
# save/load cycle is bit-exact.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import json
import os
from collections import OrderedDict

import numpy as np

from src.logger import log_info
from src.utils import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, DatasetFormatError

#===============================================================================
# Internal Functions
#===============================================================================
def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value

def _entries(named):
    return [{"name": name, "shape": list(np.shape(array)),
             "values": np.asarray(array, dtype=np.float64).reshape(-1).tolist()}
            for name, array in named.items()]

def _arrays(entries):
    named = OrderedDict()
    for entry in entries:
        values = np.array(entry["values"], dtype=np.float64)
        named[entry["name"]] = values.reshape(entry["shape"])
    return named

#===============================================================================
# Main Functions
#===============================================================================
def checkpoint_to_dict(model, meta=None):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "parameters": _entries(OrderedDict((k, t.data) for k, t in model.parameters().items())),
        "buffers": _entries(model.buffers()),
        "meta": _jsonable(meta or {}),
    }

def checkpoint_from_dict(blob):
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DatasetFormatError(f"not a leo-beam checkpoint (format {blob.get('format')!r})")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"unsupported checkpoint version {blob.get('version')}")
    return _arrays(blob["parameters"]), _arrays(blob.get("buffers", [])), blob.get("meta", {})

def save_checkpoint(path, model, meta=None):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(checkpoint_to_dict(model, meta), f)
    log_info(f"Saved checkpoint '{path}' ({model.count_parameters()} parameters).")
    return path

def read_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "r") as f:
        try:
            blob = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"checkpoint '{path}' is not valid JSON: {e}") from e
    return checkpoint_from_dict(blob)

"""Load parameters and buffers into an already built model; returns the meta block."""
def load_into(model, path):
    params, buffers, meta = read_checkpoint(path)
    expected = list(model.parameters())
    if list(params) != expected:
        raise DatasetFormatError(f"checkpoint '{path}' parameter order does not match the model")
    model.set_parameters(params)
    model.set_buffers(buffers)
    return meta
