#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Utility module providing common constants, exceptions and small helpers
# shared by the channel, learning and harness modules: unit conversions,
# the complex/real stacking operator, seed derivation and config hashing.
# ===============================================================================

#===============================================================================
# Imports
#===============================================================================
import hashlib
import json

import numpy as np

#===============================================================================
# MACROS
#===============================================================================
SPEED_OF_LIGHT = 299792458.0
CHECKPOINT_FORMAT = "leo-beam-ckpt"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"LEOBEAM\x00"
DATASET_VERSION = 1

PROVENANCE_TAGS = ("channel", "vae", "gaussian", "estimation", "prediction", "composed")

#===============================================================================
# Exceptions
#===============================================================================
class LeoBeamError(Exception):
    pass

class ShapeError(LeoBeamError, ValueError):
    pass

class ConfigError(LeoBeamError, ValueError):
    pass

class TrainingDivergedError(LeoBeamError, RuntimeError):
    pass

class DatasetFormatError(LeoBeamError, ValueError):
    pass

class StageError(LeoBeamError, RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage

#===============================================================================
# Unit conversions
#===============================================================================
def db_to_linear(value_db):
    return 10.0 ** (np.asarray(value_db, dtype=np.float64) / 10.0)

def linear_to_db(value):
    return 10.0 * np.log10(value)

def dbm_to_watt(value_dbm):
    return 10.0 ** ((value_dbm - 30.0) / 10.0)

def dbw_to_watt(value_dbw):
    return 10.0 ** (value_dbw / 10.0)

#===============================================================================
# Complex <-> real stacking
#===============================================================================
# zeta(H) = [Re H; Im H] along the row axis (second to last).
def complex_to_real(H):
    H = np.asarray(H)
    return np.concatenate([H.real, H.imag], axis=-2).astype(np.float64)

def real_to_complex(R):
    R = np.asarray(R, dtype=np.float64)
    rows = R.shape[-2]
    if rows % 2:
        raise ShapeError(f"real-stacked matrix needs an even row count, got {rows}")
    half = rows // 2
    return R[..., :half, :] + 1j * R[..., half:, :]

# Vectors: [Re e; Im e] along the last axis.
def complex_vec_to_real(e):
    e = np.asarray(e)
    return np.concatenate([e.real, e.imag], axis=-1).astype(np.float64)

def real_vec_to_complex(r):
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] % 2:
        raise ShapeError(f"real-stacked vector needs an even length, got {r.shape[-1]}")
    half = r.shape[-1] // 2
    return r[..., :half] + 1j * r[..., half:]

#===============================================================================
# Seeds and hashing
#===============================================================================
def derive_seed(master_seed, *indices):
    payload = ":".join(str(v) for v in (master_seed,) + indices).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")

def make_rng(seed):
    return np.random.default_rng(seed)

def _canonical(value):
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, np.ndarray):
        return _canonical(value.tolist())
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value

# Key order never matters; every value does (floats hashed through repr).
def config_hash(config):
    text = json.dumps(_canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
