#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Validated configuration models. SystemConfig carries the physical and
# simulation parameters (physical defaults from config/config.py); the *Hyper
# models carry per-stage training settings; RunConfig bundles them; and
# ExperimentSpec describes a sweep. JSON files are validated against these
# schemas by load_config / load_experiment.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import json
import math
import os
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import config as defaults
from src.logger import log_info, log_warning
from src.utils import ConfigError, db_to_linear, dbm_to_watt, dbw_to_watt

PerDevice = Union[float, List[float]]

#===============================================================================
# System parameters
#===============================================================================
class SystemConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_antennas: int = Field(defaults.N_ANTENNAS, ge=1)
    n_devices: int = Field(defaults.N_DEVICES, ge=1)
    carrier_freq_hz: float = Field(defaults.CARRIER_FREQ_HZ, gt=0)
    altitude_m: float = Field(defaults.ALTITUDE_M, gt=0)
    bandwidth_hz: float = Field(defaults.BANDWIDTH_HZ, gt=0)
    noise_temp_k: float = Field(defaults.NOISE_TEMP_K, gt=0)
    boltzmann: float = Field(defaults.BOLTZMANN, gt=0)
    sat_gain_dbi: float = defaults.SAT_GAIN_DBI
    device_gain_dbi: float = defaults.DEVICE_GAIN_DBI
    rain_mean_db: float = defaults.RAIN_MEAN_DB
    rain_var_db: float = Field(defaults.RAIN_VAR_DB, ge=0)
    rician_factor: float = Field(defaults.RICIAN_FACTOR, ge=0)
    n_paths: int = Field(defaults.N_PATHS, ge=1)
    sat_doppler_hz: float = Field(defaults.SAT_DOPPLER_HZ, ge=0)
    dev_doppler_max_hz: float = Field(defaults.DEV_DOPPLER_MAX_HZ, ge=0)
    min_delay_s: float = Field(defaults.MIN_DELAY_S, ge=0)
    slot_s: float = Field(defaults.SLOT_S, gt=0)
    max_excess_delay_s: float = Field(defaults.MAX_EXCESS_DELAY_S, ge=0)
    theta_max_factor: float = Field(defaults.THETA_MAX_FACTOR, gt=0)
    noise_power_dbm: float = defaults.NOISE_POWER_DBM
    pilot_power_dbw: float = defaults.PILOT_POWER_DBW
    pilot_length: Optional[int] = Field(None, ge=1)
    total_power_dbw: float = defaults.TOTAL_POWER_DBW
    beamwidth_3db_deg: float = Field(defaults.BEAMWIDTH_3DB_DEG, gt=0, lt=90)
    device_weights: PerDevice = defaults.DEVICE_WEIGHT
    sinr_threshold_db: PerDevice = defaults.SINR_THRESHOLD_DB
    outage_prob: PerDevice = defaults.OUTAGE_PROB
    seed: int = 0

    @field_validator("outage_prob")
    @classmethod
    def check_outage(cls, value):
        for p in np.atleast_1d(value):
            if not 0.0 < float(p) < 1.0:
                raise ValueError(f"outage probability must lie in (0, 1), got {p}")
        return value

    @field_validator("device_weights")
    @classmethod
    def check_weights(cls, value):
        if np.any(np.atleast_1d(value) <= 0):
            raise ValueError("device weights must be strictly positive")
        return value

    @model_validator(mode="after")
    def check_dimensions(self):
        for name in ("device_weights", "sinr_threshold_db", "outage_prob"):
            value = getattr(self, name)
            if isinstance(value, list) and len(value) != self.n_devices:
                raise ValueError(f"{name} has {len(value)} entries for {self.n_devices} devices")
        if self.pilot_length is not None and self.pilot_length < self.n_antennas:
            raise ValueError("pilot_length must be at least n_antennas for a normalized pilot")
        if self.n_devices > self.n_antennas:
            log_warning(f"K={self.n_devices} exceeds M={self.n_antennas}; ZFBF falls back to a ridge inverse.")
        return self

    # Derived linear quantities
    @property
    def M(self):
        return self.n_antennas

    @property
    def K(self):
        return self.n_devices

    @property
    def L(self):
        return self.pilot_length or self.n_antennas

    @property
    def sat_gain(self):
        return float(db_to_linear(self.sat_gain_dbi))

    @property
    def device_gain(self):
        return float(db_to_linear(self.device_gain_dbi))

    # kappa B T, the unit the channel gains are normalised by
    @property
    def thermal_noise(self):
        return self.boltzmann * self.bandwidth_hz * self.noise_temp_k

    @property
    def noise_power_w(self):
        return dbm_to_watt(self.noise_power_dbm)

    # Receiver noise in the same kappa B T units as H, so SINR is dimensionless.
    @property
    def noise_power(self):
        return self.noise_power_w / self.thermal_noise

    @property
    def pilot_power(self):
        return dbw_to_watt(self.pilot_power_dbw)

    @property
    def total_power(self):
        return dbw_to_watt(self.total_power_dbw)

    @property
    def theta_3db(self):
        return math.radians(self.beamwidth_3db_deg)

    def _per_device(self, value):
        return np.broadcast_to(np.asarray(value, dtype=np.float64), (self.n_devices,)).copy()

    @property
    def alpha(self):
        return self._per_device(self.device_weights)

    @property
    def gamma(self):
        return db_to_linear(self._per_device(self.sinr_threshold_db))

    @property
    def p_out(self):
        return self._per_device(self.outage_prob)

    # Calibrated from the 3 dB beamwidth, never configured.
    @property
    def array_diameter(self):
        from src.channel import calibrate_diameter
        return calibrate_diameter(self.carrier_freq_hz, self.theta_3db)

    # sigma_0^2 / (P_1 M L): variance of the estimation error per antenna
    @property
    def estimation_error_var(self):
        return self.noise_power / (self.pilot_power * self.M * self.L)

#===============================================================================
# Stage hyper-parameters
#===============================================================================
class DataHyper(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(16000, ge=1)
    n_test: int = Field(4000, ge=1)
    slots_per_episode: int = Field(100, ge=2)
    error_set_size: int = Field(10000, ge=1)
    composed_set_size: int = Field(100000, ge=1)


# Shared optimizer, early-stopping and plateau settings; stages override defaults.
class TrainingHyper(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(500, ge=1)
    patience: int = Field(20, ge=1)
    min_delta: float = Field(1e-4, ge=0)
    plateau_factor: float = Field(0.3, gt=0, lt=1)
    plateau_patience: int = Field(10, ge=1)
    val_split: float = Field(0.2, gt=0, lt=1)


class PredictorHyper(TrainingHyper):
    variant: Literal["dlpdn", "lstm"] = "dlpdn"
    target: Literal["estimated", "true"] = "estimated"
    w_step: int = Field(4, ge=1)
    filters: Tuple[int, ...] = (8, 4, 2)
    kernels: Tuple[Tuple[int, int], ...] = ((5, 1), (3, 1), (3, 1))
    pool: Tuple[int, int] = (2, 1)
    padding: Literal["same", "valid"] = "same"
    lstm_units: Tuple[int, int] = (128, 128)
    dropout: float = Field(0.2, ge=0, lt=1)
    ridge: float = Field(1e-8, gt=0)
    # Learn the change from the most recent slot instead of the matrix itself.
    residual: bool = True

    @model_validator(mode="after")
    def check_stack(self):
        if len(self.filters) != len(self.kernels):
            raise ValueError("filters and kernels must have the same length")
        return self


class VaeHyper(TrainingHyper):
    epochs: int = Field(200, ge=1)
    latent_dim: Optional[int] = Field(None, ge=1)
    hidden_factor: int = Field(3, ge=1)
    min_samples: int = Field(100, ge=1)


class PrecoderHyper(TrainingHyper):
    batch_size: int = Field(1024, ge=1)
    epochs: int = Field(1000, ge=1)
    variant: Literal["cnn", "mlp"] = "cnn"
    robust: Literal["vae", "gaussian", "nonrobust"] = "vae"
    filters: Tuple[int, ...] = (8, 4, 2)
    kernels: Tuple[Tuple[int, int], ...] = ((5, 3), (5, 1), (3, 1))
    dense_factors: Tuple[int, ...] = (8, 4, 2, 2)
    penalty: float = Field(10.0, ge=0)
    n_aug: int = Field(10000, ge=1)

    @model_validator(mode="after")
    def check_stack(self):
        if len(self.filters) != len(self.kernels):
            raise ValueError("filters and kernels must have the same length")
        if not self.dense_factors or self.dense_factors[-1] != 2:
            raise ValueError("the last dense layer must have width 2MK (factor 2)")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: str = "desk"
    system: SystemConfig = Field(default_factory=SystemConfig)
    data: DataHyper = Field(default_factory=DataHyper)
    predictor: PredictorHyper = Field(default_factory=PredictorHyper)
    vae: VaeHyper = Field(default_factory=VaeHyper)
    precoder: PrecoderHyper = Field(default_factory=PrecoderHyper)

#===============================================================================
# Profiles
#===============================================================================
PROFILES: Dict[str, dict] = {
    "full": {},
    "desk": {
        "system": {"n_antennas": 8, "n_devices": 4},
        "data": {"n_train": 4000, "n_test": 1000, "error_set_size": 1000,
                 "composed_set_size": 20000},
        "predictor": {"epochs": 60},
        "vae": {"epochs": 100},
        "precoder": {"batch_size": 256, "epochs": 100, "n_aug": 256},
    },
}

def merge_overrides(base, override):
    merged = dict(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged

def build_run_config(profile="desk", overrides=None):
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}' (known: {sorted(PROFILES)})")
    payload = merge_overrides(PROFILES[profile], overrides or {})
    payload["profile"] = profile
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(str(e)) from e

def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    profile = data.pop("profile", "desk")
    run_config = build_run_config(profile, data)
    log_info(f"Loaded config '{path}' (profile {profile}).")
    return run_config

def with_seed(run_config, seed):
    if seed is None:
        return run_config
    system = run_config.system.model_copy(update={"seed": int(seed)})
    return run_config.model_copy(update={"system": system})

#===============================================================================
# Experiments
#===============================================================================
AXES = ("P_2", "w_step", "f_c", "d_0", "K", "M", "gamma", "p_out", "P_1")

# Axis values are given in natural units: P_2/P_1 in dBW, f_c in GHz,
# d_0 in km, gamma in dB.
AXIS_FIELDS = {
    "P_2": ("system", "total_power_dbw", float),
    "P_1": ("system", "pilot_power_dbw", float),
    "w_step": ("predictor", "w_step", int),
    "f_c": ("system", "carrier_freq_hz", lambda v: float(v) * 1e9),
    "d_0": ("system", "altitude_m", lambda v: float(v) * 1e3),
    "K": ("system", "n_devices", int),
    "M": ("system", "n_antennas", int),
    "gamma": ("system", "sinr_threshold_db", float),
    "p_out": ("system", "outage_prob", float),
}

SCHEMES = ("dlpdn", "lstm", "lr", "dlpcn", "dlpcn_gaussian", "dlpcn_nonrobust", "mlp", "zfbf")


class ExperimentSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    profile: str = "desk"
    overrides: dict = Field(default_factory=dict)
    axis: Optional[Literal["P_2", "w_step", "f_c", "d_0", "K", "M", "gamma", "p_out", "P_1"]] = None
    values: List[float] = Field(default_factory=list)
    schemes: List[str] = Field(default_factory=lambda: ["dlpdn", "lr", "dlpcn", "zfbf"])
    replications: int = Field(1, ge=1)
    master_seed: int = 0
    output: str = "metrics.csv"

    @field_validator("values")
    @classmethod
    def strictly_increasing(cls, values):
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError("axis values must be strictly increasing")
        return values

    @field_validator("schemes")
    @classmethod
    def known_schemes(cls, schemes):
        unknown = [s for s in schemes if s not in SCHEMES]
        if unknown:
            raise ValueError(f"unknown schemes {unknown} (known: {list(SCHEMES)})")
        return schemes

    @model_validator(mode="after")
    def axis_needs_values(self):
        if self.axis is not None and not self.values:
            raise ValueError(f"axis '{self.axis}' declared without values")
        return self

    def run_config(self, axis_value=None, seed=None):
        overrides = merge_overrides({}, self.overrides)
        if self.axis is not None and axis_value is not None:
            section, field, cast = AXIS_FIELDS[self.axis]
            overrides = merge_overrides(overrides, {section: {field: cast(axis_value)}})
        run_config = build_run_config(self.profile, overrides)
        return with_seed(run_config, seed)

def load_experiment(path):
    if not os.path.exists(path):
        raise ConfigError(f"experiment file not found: {path}")
    with open(path, "r") as f:
        data = json.load(f)
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
