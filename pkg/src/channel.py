#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Time-slotted downlink channel generator for a multibeam LEO satellite with a
# uniform circular array: Bessel transmit pattern, free-space loss, log-normal
# rain attenuation, and a Rician mix of a LOS phase term with Doppler-shifted
# NLOS paths. One episode fixes the device geometry and paths and advances
# time by one slot per matrix.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import bisect
from scipy.special import jv

from config.config import CARRIER_FREQ_HZ
from src.logger import log_debug
from src.utils import SPEED_OF_LIGHT, ShapeError, make_rng

#===============================================================================
# MACROS
#===============================================================================
# Below this argument the pattern uses its Taylor series 1 - 5*phi^2/64.
SERIES_SWITCH = 1e-3
# Search interval for the half-power argument; the pattern is monotone there.
HALF_POWER_BRACKET = (1e-6, 3.0)

#===============================================================================
# Domain types
#===============================================================================
@dataclass
class DeviceGeometry:
    theta: float
    phi: float
    rain: float
    gains: np.ndarray
    dopplers: np.ndarray
    delays: np.ndarray

    @property
    def n_paths(self):
        return len(self.gains)


@dataclass
class ChannelEpisode:
    slots: np.ndarray
    times: np.ndarray
    devices: list
    config: dict = field(default_factory=dict)
    seed: object = None

    @property
    def n_slots(self):
        return self.slots.shape[0]

#===============================================================================
# Antenna pattern
#===============================================================================
def pattern_amplitude(x):
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < SERIES_SWITCH
    safe = np.where(small, 1.0, x)
    bessel = jv(1, safe) / (2.0 * safe) + 36.0 * jv(3, safe) / safe ** 3
    series = 1.0 - 5.0 * x ** 2 / 64.0
    return np.where(small, series, bessel)

@lru_cache(maxsize=64)
def _half_power_argument():
    return bisect(lambda x: float(pattern_amplitude(x)) ** 2 - 0.5, *HALF_POWER_BRACKET, xtol=1e-15)

"""Array diameter d_s such that the pattern drops to half power at theta_3db."""
@lru_cache(maxsize=64)
def calibrate_diameter(carrier_freq_hz, theta_3db):
    x = _half_power_argument()
    diameter = x * SPEED_OF_LIGHT / (math.pi * carrier_freq_hz * math.sin(theta_3db))
    log_debug(f"Calibrated array diameter {diameter:.6g} m for f_c={carrier_freq_hz:.4g} Hz.")
    return diameter

def bessel_argument(theta, cfg):
    return math.pi * cfg.array_diameter * cfg.carrier_freq_hz * np.sin(theta) / SPEED_OF_LIGHT

def tx_antenna_gain(theta, cfg):
    return cfg.sat_gain * pattern_amplitude(bessel_argument(theta, cfg)) ** 2

#===============================================================================
# Array response and large-scale fading
#===============================================================================
def uca_response(x, azimuth, n_antennas):
    eta = 2.0 * np.pi * np.arange(n_antennas) / n_antennas
    return np.exp(1j * x * np.cos(azimuth - eta))

def array_response(theta, phi, cfg):
    return uca_response(bessel_argument(theta, cfg), phi, cfg.M)

def sample_rain(rng, cfg):
    x = rng.normal(cfg.rain_mean_db, math.sqrt(cfg.rain_var_db))
    rain_db = math.exp(x)
    return 10.0 ** (rain_db / 20.0)

def free_space_gain(cfg):
    return (SPEED_OF_LIGHT / (4.0 * math.pi * cfg.carrier_freq_hz * cfg.altitude_m)) ** 2

def large_scale_gain(device, cfg):
    omega = tx_antenna_gain(device.theta, cfg)
    return math.sqrt(free_space_gain(cfg) * cfg.device_gain * omega / cfg.thermal_noise / device.rain)

# Doppler bounds are quoted at the reference carrier and scale with f_c.
def device_doppler_max(cfg):
    return cfg.dev_doppler_max_hz * cfg.carrier_freq_hz / CARRIER_FREQ_HZ

def satellite_doppler(cfg):
    return cfg.sat_doppler_hz * cfg.carrier_freq_hz / CARRIER_FREQ_HZ

#===============================================================================
# Small-scale components
#===============================================================================
def sample_device(rng, cfg):
    theta = rng.uniform(0.0, cfg.theta_max_factor * cfg.theta_3db)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    rain = sample_rain(rng, cfg)
    L = cfg.n_paths
    gains = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / math.sqrt(2.0)
    nu_max = device_doppler_max(cfg)
    dopplers = rng.uniform(-nu_max, nu_max, size=L)
    delays = rng.uniform(0.0, cfg.max_excess_delay_s, size=L)
    delays = delays - delays.min()
    return DeviceGeometry(theta, phi, rain, gains, dopplers, delays)

def nlos_component(t, device, cfg):
    steering = array_response(device.theta, device.phi, cfg)
    phases = np.exp(2j * np.pi * t * device.dopplers) * np.exp(2j * np.pi * cfg.carrier_freq_hz * device.delays)
    return np.sum(device.gains * phases) / math.sqrt(device.n_paths) * steering

def los_component(t, device, cfg):
    steering = array_response(device.theta, device.phi, cfg)
    phase = 2.0 * np.pi * (t * satellite_doppler(cfg) - cfg.carrier_freq_hz * cfg.min_delay_s)
    return np.exp(1j * phase) * steering

def rician_weights(rician_factor):
    if math.isinf(rician_factor):
        return 1.0, 0.0
    return math.sqrt(rician_factor / (rician_factor + 1.0)), math.sqrt(1.0 / (rician_factor + 1.0))

def channel_realization(t, device, cfg):
    w_los, w_nlos = rician_weights(cfg.rician_factor)
    h = w_los * los_component(t, device, cfg)
    if w_nlos:
        h = h + w_nlos * nlos_component(t, device, cfg)
    return large_scale_gain(device, cfg) * h

#===============================================================================
# Episodes
#===============================================================================
# rng may be a numpy Generator or an integer seed (recorded on the episode).
def generate_episode(cfg, n_slots, rng, w_step=1):
    if n_slots < w_step + 1:
        raise ValueError(f"an episode needs at least w_step + 1 = {w_step + 1} slots, got {n_slots}")
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed, rng = rng, make_rng(rng)
    devices = [sample_device(rng, cfg) for _ in range(cfg.K)]
    times = np.arange(n_slots) * cfg.slot_s
    slots = np.empty((n_slots, cfg.M, cfg.K), dtype=np.complex128)
    for t_index, t in enumerate(times):
        for k, device in enumerate(devices):
            slots[t_index, :, k] = channel_realization(t, device, cfg)
    if not np.all(np.isfinite(slots)):
        raise ShapeError("episode contains non-finite channel entries")
    return ChannelEpisode(slots, times, devices, cfg.model_dump(), seed)

def regenerate_slot(episode, t_index, cfg):
    t = episode.times[t_index]
    return np.stack([channel_realization(t, d, cfg) for d in episode.devices], axis=1)

"""Mean normalized inner product between consecutive slots, per device."""
def slot_correlation(slots):
    a, b = slots[:-1], slots[1:]
    inner = np.abs(np.sum(np.conj(a) * b, axis=1))
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return float(np.mean(inner / norms))
