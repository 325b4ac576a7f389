#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Robust multibeam precoding. The DLPCN maps a predicted channel matrix to a
# precoding matrix through a small conv stack, batch-normalized dense layers
# and the Lambda power layer. It is trained without labels: the loss is the
# negative weighted sum rate over channels augmented with sampled errors,
# plus a hinge penalty on the per-device SINR quantile that keeps the outage
# probability below p_out. ZFBF and a dense-only network serve as baselines.
#
# Precoder vector layout (2MK reals): [Re w_1; ...; Re w_K; Im w_1; ...; Im w_K]
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import math
import time
from dataclasses import dataclass, field

import numpy as np

from src import layers as ly
from src import nn_core as nn
from src.checkpoint import read_checkpoint, save_checkpoint
from src.logger import log_debug, log_info, log_warning
from src.optim import fit
from src.settings import PrecoderHyper
from src.utils import ShapeError, complex_to_real, derive_seed, make_rng
from src.vae_augment import ErrorSet

#===============================================================================
# MACROS
#===============================================================================
EVAL_BATCH = 64
RIDGE_FRACTION = 1e-9
MAX_CONDITION = 1e12
LN2 = math.log(2.0)

#===============================================================================
# Domain types
#===============================================================================
@dataclass
class PrecodingMatrix:
    W: np.ndarray
    # Set when a recovery path produced the matrix (ridge inverse or uniform beams).
    fallback: bool = False

    @property
    def total_power(self):
        return float(np.sum(np.abs(self.W) ** 2))

    @property
    def K(self):
        return self.W.shape[1]


@dataclass
class LossReport:
    wsr: np.ndarray           # (B,) mean weighted sum rate per sample
    quantiles: np.ndarray     # (B, K) selected SINR order statistics
    penalties: np.ndarray     # (B, K) hinge activations max(gamma - Q, 0)
    total: float
    loss: nn.Tensor = None
    select: np.ndarray = None  # (B, 1, K) augmented-channel index behind each quantile

#===============================================================================
# SINR and rate
#===============================================================================
def sinr(h_k, W, k, noise_power):
    gains = np.abs(np.asarray(h_k).conj() @ np.asarray(W)) ** 2
    return float(gains[k] / (np.sum(np.delete(gains, k)) + noise_power))

"""All per-device SINRs for stacks of channels and precoders (..., M, K)."""
def sinr_all(H, W, noise_power):
    G = np.swapaxes(np.asarray(H).conj(), -1, -2) @ np.asarray(W)
    power = np.abs(G) ** 2
    signal = np.diagonal(power, axis1=-2, axis2=-1)
    interference = np.maximum(power.sum(axis=-1) - signal, 0.0)
    return signal / (interference + noise_power)

def wsr(H, W, alpha, noise_power):
    rates = np.asarray(alpha) * np.log2(1.0 + sinr_all(H, W, noise_power))
    total = rates.sum(axis=-1)
    return float(total) if np.ndim(total) == 0 else total

#===============================================================================
# Quantiles
#===============================================================================
def _order_index(eps, n):
    # Rounding guards ceil against products like 0.07 * 100 = 7.000000000000001.
    return max(1, math.ceil(round(eps * n, 9))) - 1

"""Lower empirical eps-quantile: the ceil(eps * N)-th smallest value."""
def empirical_quantile(values, eps):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("quantile of an empty set")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {eps}")
    return float(np.sort(values)[_order_index(eps, values.size)])

#===============================================================================
# Precoder layout and power normalization
#===============================================================================
def unpack_precoder(w_real, n_devices):
    w_real = np.asarray(w_real, dtype=np.float64)
    width = w_real.shape[-1]
    if width % (2 * n_devices):
        raise ShapeError(f"precoder vector of length {width} does not split into 2 x {n_devices} beams")
    M = width // (2 * n_devices)
    parts = w_real.reshape(w_real.shape[:-1] + (2, n_devices, M))
    return np.swapaxes(parts[..., 0, :, :] + 1j * parts[..., 1, :, :], -1, -2)

def pack_precoder(W):
    W = np.swapaxes(np.asarray(W), -1, -2)
    lead = W.shape[:-2]
    return np.concatenate([W.real.reshape(lead + (-1,)), W.imag.reshape(lead + (-1,))], axis=-1)

def uniform_fallback(n_antennas, n_devices):
    return np.concatenate([np.ones(n_antennas * n_devices), np.zeros(n_antennas * n_devices)])

def lambda_power_layer(w_real, total_power, n_devices):
    w_real = np.asarray(w_real, dtype=np.float64).reshape(-1)
    if w_real.size == 0 or w_real.size % (2 * n_devices):
        raise ShapeError(f"precoder vector of length {w_real.size} does not fit {n_devices} devices")
    fallback = False
    norm = np.linalg.norm(w_real)
    if norm == 0:
        log_warning("Lambda layer received a zero precoder vector; using uniform beams.")
        w_real = uniform_fallback(w_real.size // (2 * n_devices), n_devices)
        norm = np.linalg.norm(w_real)
        fallback = True
    scaled = math.sqrt(total_power) * w_real / norm
    return PrecodingMatrix(unpack_precoder(scaled, n_devices), fallback)

#===============================================================================
# Channel augmentation
#===============================================================================
def _error_bank(errors, M, K):
    if isinstance(errors, ErrorSet):
        errors = errors.vectors
    bank = np.asarray(errors, dtype=np.complex128)
    if bank.ndim == 2:
        bank = np.broadcast_to(bank, (K,) + bank.shape)
    if bank.ndim != 3 or bank.shape[0] != K or bank.shape[2] != M:
        raise ShapeError(f"error set of shape {bank.shape} does not match M={M}, K={K}")
    if bank.shape[1] == 0:
        raise ValueError("channel augmentation needs a non-empty error set")
    return bank

# errors: one shared (S, M) set, an ErrorSet, or per-device (K, S, M) sets.
# n=None uses every error once, in order; otherwise n are drawn per device.
def augment_channels(H_tilde, errors, xi=None, n=None, rng=None):
    H_tilde = np.asarray(H_tilde, dtype=np.complex128)
    M, K = H_tilde.shape[-2:]
    bank = _error_bank(errors, M, K)
    lead = H_tilde.shape[:-2]
    if xi is None:
        centre = H_tilde
    else:
        xi = np.asarray(xi, dtype=np.complex128)
        if xi.shape != (K, M, M):
            raise ShapeError(f"xi must be ({K}, {M}, {M}), got {xi.shape}")
        centre = np.einsum("kmn,...nk->...mk", xi, H_tilde)
    size = bank.shape[1]
    if n is None:
        picks = np.broadcast_to(np.arange(size)[:, None], lead + (size, K))
    else:
        if rng is None:
            raise ValueError("sampling augmented channels needs an rng")
        picks = rng.integers(0, size, size=lead + (n, K))
    sampled = bank[np.arange(K), picks]
    return centre[..., None, :, :] + np.swapaxes(sampled, -1, -2)

#===============================================================================
# Loss
#===============================================================================
def _sinr_tensor(w, H_aug, noise_power):
    B = w.shape[0]
    M, K = H_aug.shape[-2:]
    parts = nn.reshape(w, (B, 2, K, M))
    Wr = nn.reshape(nn.transpose(parts[:, 0], (0, 2, 1)), (B, 1, M, K))
    Wi = nn.reshape(nn.transpose(parts[:, 1], (0, 2, 1)), (B, 1, M, K))
    Ht = np.swapaxes(H_aug, -1, -2)
    Hr, Hi = np.ascontiguousarray(Ht.real), np.ascontiguousarray(Ht.imag)
    # h_k^H w_j split into real and imaginary parts.
    Gr = nn.matmul(Hr, Wr) + nn.matmul(Hi, Wi)
    Gi = nn.matmul(Hr, Wi) - nn.matmul(Hi, Wr)
    power = Gr * Gr + Gi * Gi
    eye = np.eye(K)
    signal = nn.tsum(power * eye, axis=-1)
    interference = nn.tsum(power * (1.0 - eye), axis=-1)
    return signal / (interference + noise_power)

"""
Loss of a batch of normalized precoder vectors w (B, 2MK) over augmented
channels H_aug (B, N, M, K). select freezes the order statistic chosen for
each quantile; by default it is recomputed from the current SINRs.
"""
def penalty_terms(w, H_aug, alpha, gamma, p_out, mu, noise_power, select=None):
    w = nn.as_tensor(w)
    H_aug = np.asarray(H_aug, dtype=np.complex128)
    if H_aug.ndim != 4 or H_aug.shape[0] != w.shape[0]:
        raise ShapeError(f"augmented channels {H_aug.shape} do not match {w.shape[0]} precoders")
    B, N, _, K = H_aug.shape
    p_out = np.broadcast_to(np.asarray(p_out, dtype=np.float64), (K,))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (K,))
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (K,))

    sinr_t = _sinr_tensor(w, H_aug, noise_power)
    rate = nn.log(1.0 + sinr_t) * (1.0 / LN2)
    sample_wsr = nn.tsum(nn.mean(rate, axis=1) * np.asarray(alpha, dtype=np.float64), axis=1)

    if select is None:
        ranks = np.array([_order_index(p, N) for p in p_out])
        order = np.argsort(sinr_t.data, axis=1, kind="stable")
        select = np.take_along_axis(order, np.broadcast_to(ranks, (B, 1, K)), axis=1)
    quantiles = nn.reshape(nn.take_along_axis(sinr_t, select, axis=1), (B, K))
    hinge = nn.relu(gamma - quantiles)
    per_sample = nn.tsum(hinge * mu, axis=1) - sample_wsr
    loss = nn.mean(per_sample)
    return LossReport(sample_wsr.data, quantiles.data, hinge.data, loss.item(), loss, select)

"""Augment, precode and score one batch of predicted channels."""
def penalty_loss(H_tilde, model, errors, cfg, xi=None, n_aug=None, rng=None, mu=None, training=False, select=None):
    H_tilde = np.asarray(H_tilde, dtype=np.complex128)
    H_aug = augment_channels(H_tilde, errors, xi, n_aug, rng)
    w = model.forward(H_tilde, training=training, rng=rng)
    mu = model.hyper.penalty if mu is None else mu
    return penalty_terms(w, H_aug, cfg.alpha, cfg.gamma, cfg.p_out, mu, cfg.noise_power, select)

#===============================================================================
# Networks
#===============================================================================
def build_dlpcn(M, K, hyper, total_power):
    net = ly.Sequential()
    rows, cols = 2 * M, K
    MK = M * K
    if hyper.variant == "cnn":
        net.add("to_image", ly.reshape((-1, 1, rows, cols)))
        channels = 1
        for i, (filters, kernel) in enumerate(zip(hyper.filters, hyper.kernels)):
            kh, kw = min(kernel[0], rows), min(kernel[1], cols)
            if (kh, kw) != tuple(kernel):
                log_debug(f"conv{i + 1}: kernel {tuple(kernel)} clipped to {(kh, kw)} for a {rows}x{cols} input")
            net.add(f"conv{i + 1}", ly.conv2d(channels, filters, (kh, kw), "valid"), activation="relu")
            rows, cols, channels = rows - kh + 1, cols - kw + 1, filters
        features = channels * rows * cols
    else:
        features = rows * cols
    net.add("flatten", ly.flatten())
    for i, factor in enumerate(hyper.dense_factors[:-1]):
        net.add(f"fc{i + 1}", ly.dense(features, factor * MK))
        net.add(f"bn{i + 1}", ly.batchnorm(factor * MK), activation="relu")
        features = factor * MK
    net.add("out", ly.dense(features, 2 * MK))
    net.add("power", ly.lambda_power(total_power, uniform_fallback(M, K)))
    return net


@dataclass
class DlpcnModel:
    net: ly.Sequential
    M: int
    K: int
    hyper: PrecoderHyper
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def total_power(self):
        return self.net.layers["power"].hyper["total_power"]

    # Evaluating at another P_2 only rescales the Lambda layer.
    def set_total_power(self, total_power):
        self.net.layers["power"].hyper["total_power"] = float(total_power)

    def forward(self, H_tilde, training=False, rng=None):
        x = complex_to_real(H_tilde) / self.scale
        return self.net(x, training=training, rng=rng)

    def precode(self, H_tilde):
        H_tilde = np.asarray(H_tilde, dtype=np.complex128)
        single = H_tilde.ndim == 2
        if single:
            H_tilde = H_tilde[None]
        if H_tilde.shape[1:] != (self.M, self.K):
            raise ShapeError(f"precoder expects ({self.M}, {self.K}) channels, got {H_tilde.shape[1:]}")
        outputs = [self.forward(H_tilde[s:s + EVAL_BATCH]).data for s in range(0, len(H_tilde), EVAL_BATCH)]
        W = unpack_precoder(np.concatenate(outputs), self.K)
        return W[0] if single else W

def init_dlpcn(M, K, hyper, total_power, seed=0):
    net = build_dlpcn(M, K, hyper, total_power).init(make_rng(derive_seed(seed, "dlpcn-init")))
    return DlpcnModel(net, M, K, hyper)

#===============================================================================
# Training
#===============================================================================
def _split(n, val_split, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_split))) if n > 1 else 0
    return order[n_val:], order[:n_val]

def _input_scale(H_tilde):
    scale = float(np.std(complex_to_real(H_tilde)))
    return scale if scale > 0 else 1.0

# Validation augmentations are re-drawn from a fixed seed per chunk so every
# epoch scores the same channels.
def _mean_loss(model, H_tilde, bank, cfg, xi, n_aug, mu, seed):
    total, rate = 0.0, 0.0
    for c, start in enumerate(range(0, len(H_tilde), EVAL_BATCH)):
        chunk = H_tilde[start:start + EVAL_BATCH]
        report = penalty_loss(chunk, model, bank, cfg, xi, n_aug, make_rng(derive_seed(seed, c)), mu=mu)
        total += report.total * len(chunk)
        rate += float(report.wsr.sum())
    return total / len(H_tilde), rate / len(H_tilde)

def train_dlpcn(H_tilde, errors, cfg, hyper, xi=None, seed=0):
    H_tilde = np.asarray(H_tilde, dtype=np.complex128)
    if H_tilde.ndim != 3 or len(H_tilde) == 0:
        raise ValueError("precoder training needs a non-empty (N, M, K) set of predicted channels")
    N, M, K = H_tilde.shape
    if (M, K) != (cfg.M, cfg.K):
        raise ShapeError(f"channels are {M}x{K}, config is {cfg.M}x{cfg.K}")
    if hyper.robust == "nonrobust":
        errors, mu = np.zeros((1, M)), 0.0
    else:
        mu = hyper.penalty
    bank = _error_bank(errors, M, K)

    rng = make_rng(derive_seed(seed, "dlpcn-train"))
    train_idx, val_idx = _split(N, hyper.val_split, rng)
    H_train = H_tilde[train_idx]
    H_val = H_tilde[val_idx] if len(val_idx) else H_train
    model = init_dlpcn(M, K, hyper, cfg.total_power, seed)
    model.scale = _input_scale(H_train)
    val_seed = derive_seed(seed, "dlpcn-val")

    def batch_loss(indices, batch_rng):
        report = penalty_loss(H_train[indices], model, bank, cfg, xi, hyper.n_aug, batch_rng, mu=mu, training=True)
        return report.loss

    def val_loss():
        return _mean_loss(model, H_val, bank, cfg, xi, hyper.n_aug, mu, val_seed)[0]

    name = f"precoder[{hyper.variant}/{hyper.robust}]"
    log_info(f"Training {name}: {len(train_idx)} train / {len(val_idx)} validation samples, "
             f"M={M}, K={K}, {hyper.n_aug} augmentations from {bank.shape[1]} errors, mu={mu}.")
    curve = fit(model.net, batch_loss, len(train_idx), val_loss, hyper, rng, name)
    loss, rate = _mean_loss(model, H_val, bank, cfg, xi, hyper.n_aug, mu, val_seed)
    model.meta = {"curve": curve, "seed": seed, "epochs": len(curve["train_loss"]),
                  "val_loss": loss, "val_wsr": rate, "mu": mu}
    log_info(f"{name} validation WSR {rate:.4f} bit/s/Hz after {model.meta['epochs']} epochs.")
    return model

#===============================================================================
# Baselines
#===============================================================================
def zfbf_precoder(H_tilde, total_power):
    H = np.asarray(H_tilde, dtype=np.complex128)
    if H.ndim != 2:
        raise ShapeError(f"ZFBF expects an (M, K) channel matrix, got {H.shape}")
    M, K = H.shape
    gram = H.conj().T @ H
    fallback = False
    if K > M or not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > MAX_CONDITION:
        trace = float(np.real(np.trace(gram)))
        ridge = RIDGE_FRACTION * trace / K if trace > 0 else RIDGE_FRACTION
        log_warning(f"ZFBF: rank-deficient channel; using a ridge inverse ({ridge:.3g}).")
        gram = gram + ridge * np.eye(K)
        fallback = True
    # H (H^H H)^-1, via the Hermitian solve.
    W = np.linalg.solve(gram, H.conj().T).conj().T
    norms = np.linalg.norm(W, axis=0)
    zero = norms == 0
    if np.any(zero):
        log_warning(f"ZFBF: {int(zero.sum())} null beam(s); using uniform beams.")
        W[:, zero] = 1.0
        norms = np.linalg.norm(W, axis=0)
        fallback = True
    W = W / norms * math.sqrt(total_power / K)
    return PrecodingMatrix(W, fallback)

def zfbf_batch(H_tilde, total_power):
    H_tilde = np.asarray(H_tilde, dtype=np.complex128)
    if H_tilde.ndim == 2:
        return zfbf_precoder(H_tilde, total_power).W
    return np.stack([zfbf_precoder(H, total_power).W for H in H_tilde])

#===============================================================================
# Evaluation
#===============================================================================
"""Per-device fraction of augmented channels with SINR at or below gamma."""
def empirical_outage(W, H_tilde, errors, xi, gamma, noise_power, n=None, rng=None):
    H_aug = augment_channels(H_tilde, errors, xi, n, rng)
    W = np.asarray(W)[..., None, :, :]
    values = sinr_all(H_aug, W, noise_power)
    return np.mean(values <= np.asarray(gamma), axis=-2)

def evaluate_precoder(precode, H_tilde, H_true, errors, cfg, xi=None, n_aug=None, seed=0):
    H_tilde = np.asarray(H_tilde, dtype=np.complex128)
    started = time.perf_counter()
    W = precode(H_tilde)
    elapsed = time.perf_counter() - started
    if not np.allclose(np.sum(np.abs(W) ** 2, axis=(-2, -1)), cfg.total_power, rtol=1e-9):
        log_warning("Precoder output violates the total power constraint.")
    true_rate = float(np.mean(wsr(H_true, W, cfg.alpha, cfg.noise_power)))

    bank = _error_bank(errors, cfg.M, cfg.K)
    rate, outage = 0.0, np.zeros(cfg.K)
    for c, start in enumerate(range(0, len(H_tilde), EVAL_BATCH)):
        rng = make_rng(derive_seed(seed, "evaluate", c))
        H_aug = augment_channels(H_tilde[start:start + EVAL_BATCH], bank, xi, n_aug, rng)
        values = sinr_all(H_aug, W[start:start + EVAL_BATCH, None], cfg.noise_power)
        rate += float(np.sum(np.mean(np.log2(1.0 + values), axis=1) @ cfg.alpha))
        outage += np.sum(np.mean(values <= cfg.gamma, axis=1), axis=0)
    n = len(H_tilde)
    return {"wsr": rate / n, "wsr_true": true_rate, "outage": (outage / n).tolist(),
            "wall_time_ms": 1000.0 * elapsed / n}

#===============================================================================
# Checkpoints
#===============================================================================
def save_precoder(path, model):
    meta = dict(model.meta)
    meta.update({"kind": "precoder", "M": model.M, "K": model.K, "hyper": model.hyper.model_dump(),
                 "scale": model.scale, "total_power": model.total_power})
    return save_checkpoint(path, model.net, meta)

def load_precoder(path):
    params, buffers, meta = read_checkpoint(path)
    if meta.get("kind") != "precoder":
        raise ValueError(f"'{path}' is not a precoder checkpoint")
    hyper = PrecoderHyper.model_validate(meta["hyper"])
    net = build_dlpcn(meta["M"], meta["K"], hyper, meta["total_power"])
    net.set_parameters(params)
    net.set_buffers(buffers)
    extra = {k: v for k, v in meta.items() if k not in ("kind", "M", "K", "hyper", "scale", "total_power")}
    return DlpcnModel(net, meta["M"], meta["K"], hyper, float(meta["scale"]), extra)
