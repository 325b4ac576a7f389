#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Channel datasets and their binary file format.
#
# File layout (little-endian):
#   8 bytes   magic b"LEOBEAM\0"
#   4 bytes   uint32 header length n
#   n bytes   UTF-8 JSON header: version, config hash, provenance, M, K,
#             n_slots, and for every array its name, shape and kind
#   payload   arrays in header order; complex arrays as interleaved
#             (re, im) float64 pairs, real arrays as float64
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import csv
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config.config import THREADS
from src.channel import generate_episode
from src.estimation import estimate_episode, pilot_config
from src.logger import log_info
from src.utils import (DATASET_MAGIC, DATASET_VERSION, PROVENANCE_TAGS,
                       DatasetFormatError, config_hash, derive_seed, make_rng)

#===============================================================================
# Binary arrays
#===============================================================================
def write_arrays(path, arrays, provenance, meta=None):
    if provenance not in PROVENANCE_TAGS:
        raise ValueError(f"unknown provenance '{provenance}'")
    entries = []
    for name, array in arrays.items():
        kind = "complex" if np.iscomplexobj(array) else "real"
        entries.append({"name": name, "shape": list(array.shape), "kind": kind})
    header = dict(meta or {})
    header.update({"version": DATASET_VERSION, "provenance": provenance, "arrays": entries})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for entry in entries:
            array = arrays[entry["name"]]
            dtype = "<c16" if entry["kind"] == "complex" else "<f8"
            f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return header

def read_arrays(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, "rb") as f:
        if f.read(len(DATASET_MAGIC)) != DATASET_MAGIC:
            raise DatasetFormatError(f"'{path}' is not a leo-beam dataset")
        raw = f.read(4)
        if len(raw) != 4:
            raise DatasetFormatError(f"'{path}' has a truncated header")
        (length,) = struct.unpack("<I", raw)
        try:
            header = json.loads(f.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"'{path}' has a corrupt header: {e}") from e
        if header.get("version") != DATASET_VERSION:
            raise DatasetFormatError(f"unsupported dataset version {header.get('version')}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype("<c16" if entry["kind"] == "complex" else "<f8")
            count = int(np.prod(entry["shape"]))
            data = f.read(count * dtype.itemsize)
            if len(data) != count * dtype.itemsize:
                raise DatasetFormatError(f"'{path}' payload ends inside '{entry['name']}'")
            arrays[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(entry["shape"]).astype(
                np.complex128 if entry["kind"] == "complex" else np.float64)
    return header, arrays

#===============================================================================
# Channel datasets
#===============================================================================
@dataclass
class ChannelDataset:
    H: np.ndarray          # (E, T, M, K) true channels
    H_hat: np.ndarray      # (E, T, M, K) MMSE estimates
    xi: np.ndarray         # (E, K, M, M) per-episode correction matrices
    seeds: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def n_episodes(self):
        return self.H.shape[0]

    @property
    def n_slots(self):
        return self.H.shape[1]

    @property
    def M(self):
        return self.H.shape[2]

    @property
    def K(self):
        return self.H.shape[3]

    def select(self, episodes):
        episodes = list(episodes)
        return ChannelDataset(self.H[episodes], self.H_hat[episodes], self.xi[episodes],
                              [self.seeds[e] for e in episodes] if self.seeds else [],
                              self.config, self.config_hash)

def _episode_job(cfg, n_slots, master_seed, index, w_step):
    seed = derive_seed(master_seed, "episode", index)
    episode = generate_episode(cfg, n_slots, seed, w_step=w_step)
    H_hat, xi = estimate_episode(episode.slots, pilot_config(cfg),
                                 make_rng(derive_seed(master_seed, "pilot", index)))
    return episode.slots, H_hat, xi, seed

def build_dataset(cfg, n_episodes, n_slots, master_seed=None, w_step=1, workers=None):
    master_seed = cfg.seed if master_seed is None else master_seed
    workers = workers or THREADS
    jobs = [(cfg, n_slots, master_seed, e, w_step) for e in range(n_episodes)]
    if workers > 1 and n_episodes > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_episode_job, *zip(*jobs)))
    else:
        results = [_episode_job(*job) for job in jobs]
    H = np.stack([r[0] for r in results])
    H_hat = np.stack([r[1] for r in results])
    xi = np.stack([r[2] for r in results])
    config = cfg.model_dump()
    log_info(f"Built dataset: {n_episodes} episodes x {n_slots} slots, M={cfg.M}, K={cfg.K}.")
    return ChannelDataset(H, H_hat, xi, [r[3] for r in results], config, config_hash(config))

def episodes_for(n_samples, n_slots, w_step):
    per_episode = n_slots - w_step
    if per_episode <= 0:
        raise ValueError(f"{n_slots} slots leave no samples for w_step={w_step}")
    return math.ceil(n_samples / per_episode)

def save_dataset(path, ds):
    meta = {"config_hash": ds.config_hash, "config": ds.config, "seeds": [str(s) for s in ds.seeds],
            "M": ds.M, "K": ds.K, "n_slots": ds.n_slots}
    write_arrays(path, {"H": ds.H, "H_hat": ds.H_hat, "xi": ds.xi}, "channel", meta)
    log_info(f"Saved channel dataset '{path}'.")
    return path

def load_dataset(path):
    header, arrays = read_arrays(path)
    if header.get("provenance") != "channel":
        raise DatasetFormatError(f"'{path}' holds a '{header.get('provenance')}' set, not channels")
    for name in ("H", "H_hat", "xi"):
        if name not in arrays:
            raise DatasetFormatError(f"'{path}' is missing array '{name}'")
    return ChannelDataset(arrays["H"], arrays["H_hat"], arrays["xi"],
                          [int(s) for s in header.get("seeds", [])],
                          header.get("config", {}), header.get("config_hash", ""))

#===============================================================================
# CSV export
#===============================================================================
def export_csv(path, ds):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["episode", "slot", "device", "antenna", "h_re", "h_im", "h_hat_re", "h_hat_im"])
        for e in range(ds.n_episodes):
            for t in range(ds.n_slots):
                for k in range(ds.K):
                    for m in range(ds.M):
                        h, h_hat = ds.H[e, t, m, k], ds.H_hat[e, t, m, k]
                        writer.writerow([e, t, k, m, repr(float(h.real)), repr(float(h.imag)),
                                         repr(float(h_hat.real)), repr(float(h_hat.imag))])
    log_info(f"Exported dataset to CSV '{path}'.")
    return path

def export_error_csv(path, errors):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample", "antenna", "e_re", "e_im"])
        for n, vector in enumerate(errors):
            for m, value in enumerate(vector):
                writer.writerow([n, m, repr(float(value.real)), repr(float(value.imag))])
    return path
