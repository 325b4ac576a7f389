#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Pilot transmission and MMSE channel estimation. The satellite sends a
# normalized pilot X (L x M, X^H X = I); each device observes
# y = sqrt(P_1 M L) X h + n and forms the MMSE estimate from the channel
# correlation R_h, together with the correction matrix xi such that
# h = xi h_hat + e_1 with e_1 ~ CN(0, v I), v = sigma_0^2 / (P_1 M L).
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
from dataclasses import dataclass

import numpy as np
from scipy.linalg import dft

from src.logger import log_warning
from src.utils import ShapeError

#===============================================================================
# MACROS
#===============================================================================
RIDGE_FRACTION = 1e-9
MAX_CONDITION = 1e12

#===============================================================================
# Domain types
#===============================================================================
@dataclass
class PilotConfig:
    X: np.ndarray
    power: float
    noise_power: float

    @property
    def L(self):
        return self.X.shape[0]

    @property
    def M(self):
        return self.X.shape[1]

    @property
    def amplitude(self):
        return np.sqrt(self.power * self.M * self.L)

    @property
    def error_var(self):
        return self.noise_power / (self.power * self.M * self.L)


@dataclass
class EstimateBundle:
    h_hat: np.ndarray
    xi: np.ndarray
    error_var: float
    regularized: bool = False

    @property
    def error_cov(self):
        return self.error_var * np.eye(len(self.h_hat))

#===============================================================================
# Pilots
#===============================================================================
"""First M columns of the unitary L-point DFT matrix."""
def make_pilot(n_antennas, length=None):
    length = length or n_antennas
    if length < n_antennas:
        raise ValueError(f"pilot length {length} shorter than {n_antennas} antennas")
    return dft(length, scale="sqrtn")[:, :n_antennas]

def pilot_config(cfg):
    return PilotConfig(make_pilot(cfg.M, cfg.L), cfg.pilot_power, cfg.noise_power)

def receive_pilot(h, pc, rng):
    clean = pc.amplitude * (pc.X @ h)
    if pc.noise_power == 0:
        return clean
    noise = np.sqrt(pc.noise_power / 2.0) * (rng.standard_normal(clean.shape)
                                             + 1j * rng.standard_normal(clean.shape))
    return clean + noise

#===============================================================================
# Estimation
#===============================================================================
def _ridge(R):
    trace = float(np.real(np.trace(R)))
    return RIDGE_FRACTION * trace / R.shape[0] if trace > 0 else RIDGE_FRACTION

def empirical_autocorrelation(samples):
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("autocorrelation needs a non-empty (N, M) history")
    R = samples.T @ samples.conj() / samples.shape[0]
    return R + _ridge(R) * np.eye(R.shape[0])

def mmse_estimate(y, pc, R_h):
    R_h = np.asarray(R_h, dtype=np.complex128)
    if R_h.shape != (pc.M, pc.M):
        raise ShapeError(f"R_h must be {pc.M}x{pc.M}, got {R_h.shape}")
    regularized = False
    if not np.all(np.isfinite(R_h)) or np.linalg.cond(R_h) > MAX_CONDITION:
        ridge = _ridge(R_h)
        log_warning(f"Singular channel correlation; adding ridge {ridge:.3g} to R_h.")
        R_h = R_h + ridge * np.eye(pc.M)
        regularized = True
    v = pc.error_var
    h_ls = pc.X.conj().T @ y / pc.amplitude
    A = R_h + v * np.eye(pc.M)
    # R A^{-1} h_ls, using the symmetry of R and A.
    h_hat = R_h @ np.linalg.solve(A, h_ls)
    xi = A @ np.linalg.inv(R_h)
    return EstimateBundle(h_hat, xi, v, regularized)

def estimate_nmse(h, h_hat):
    return float(np.linalg.norm(h - h_hat) ** 2 / np.linalg.norm(h) ** 2)

#===============================================================================
# Episode-level estimation
#===============================================================================
# Per device, R_h comes from the episode's own channel history; the pilot is
# then observed and estimated slot by slot. Returns H_hat (T, M, K) and the
# per-device xi (K, M, M), which is constant within the episode.
def estimate_episode(slots, pc, rng):
    n_slots, M, K = slots.shape
    R = [empirical_autocorrelation(slots[:, :, k]) for k in range(K)]
    H_hat = np.empty_like(slots)
    xi = np.empty((K, M, M), dtype=np.complex128)
    regularized = 0
    for t in range(n_slots):
        Y = receive_pilot(slots[t], pc, rng)
        for k in range(K):
            bundle = mmse_estimate(Y[:, k], pc, R[k])
            H_hat[t, :, k] = bundle.h_hat
            xi[k] = bundle.xi
            regularized += bundle.regularized
    if regularized:
        log_warning(f"{regularized} estimates needed a regularized R_h.")
    return H_hat, xi
