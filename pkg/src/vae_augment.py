#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Channel-error augmentation. A VAE with separate mean and log-variance
# encoders learns the law of the prediction errors e_2 from a small sample;
# after training only the decoder is used, turning N(0, I) latents into new
# error vectors. Error sets are composed with the estimation error as
# e = e_1 + xi e_2, and a Gaussian generator serves as the comparison baseline.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
from dataclasses import dataclass, field

import numpy as np

from src import layers as ly
from src import nn_core as nn
from src.checkpoint import read_checkpoint, save_checkpoint
from src.dataset import read_arrays, write_arrays
from src.logger import log_info
from src.optim import fit
from src.settings import VaeHyper
from src.utils import (PROVENANCE_TAGS, DatasetFormatError, ShapeError, complex_vec_to_real,
                       derive_seed, make_rng, real_vec_to_complex)

#===============================================================================
# MACROS
#===============================================================================
DECODER_VAR = 0.5

#===============================================================================
# Error sets
#===============================================================================
@dataclass
class ErrorSet:
    vectors: np.ndarray
    provenance: str
    seed: object = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.complex128))
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance '{self.provenance}'")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("error set contains non-finite entries")

    @property
    def size(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.size

def save_error_set(path, error_set):
    write_arrays(path, {"errors": error_set.vectors}, error_set.provenance,
                 {"seed": None if error_set.seed is None else str(error_set.seed),
                  "size": error_set.size, "M": error_set.dim})
    log_info(f"Saved {error_set.provenance} error set '{path}' ({error_set.size} vectors).")
    return path

def load_error_set(path):
    header, arrays = read_arrays(path)
    if "errors" not in arrays:
        raise DatasetFormatError(f"'{path}' holds no error vectors")
    return ErrorSet(arrays["errors"], header["provenance"], header.get("seed"))

#===============================================================================
# Model
#===============================================================================
@dataclass
class VaeModel:
    mean_encoder: ly.Sequential
    var_encoder: ly.Sequential
    decoder: ly.Sequential
    input_dim: int
    latent_dim: int
    hidden: int
    center: np.ndarray = None
    scale: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.zeros(self.input_dim) if self.center is None else np.asarray(self.center)
        self.scale = np.ones(self.input_dim) if self.scale is None else np.asarray(self.scale)

    def parameters(self):
        named = {}
        for prefix, net in (("mean", self.mean_encoder), ("var", self.var_encoder), ("dec", self.decoder)):
            for name, tensor in net.parameters().items():
                named[f"{prefix}/{name}"] = tensor
        return named


class _VaeNets:
    # Adapter so optim.fit sees the three networks as one parameter set.
    def __init__(self, model):
        self.model = model
        self.nets = {"mean": model.mean_encoder, "var": model.var_encoder, "dec": model.decoder}

    def parameters(self):
        return self.model.parameters()

    def buffers(self):
        return {}

    def zero_grad(self):
        for net in self.nets.values():
            net.zero_grad()

    def set_parameters(self, values):
        for full_name, array in values.items():
            prefix, name = full_name.split("/", 1)
            self.nets[prefix].set_parameters({name: array})

    def set_buffers(self, values):
        pass

    def count_parameters(self):
        return int(sum(t.size for t in self.parameters().values()))

def _mlp(sizes):
    net = ly.Sequential()
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        net.add(f"fc{i + 1}", ly.dense(fan_in, fan_out), activation=None if last else "relu")
    return net

def build_vae(input_dim, hyper, seed=0):
    latent = hyper.latent_dim or input_dim
    hidden = hyper.hidden_factor * input_dim
    rng = make_rng(derive_seed(seed, "vae-init"))
    return VaeModel(_mlp([input_dim, hidden, latent]).init(rng),
                    _mlp([input_dim, hidden, latent]).init(rng),
                    _mlp([latent, hidden, input_dim]).init(rng),
                    input_dim, latent, hidden)

#===============================================================================
# Operations
#===============================================================================
def _encode(x, model):
    return model.mean_encoder(x), model.var_encoder(x)

def encode(e, model):
    x = (np.atleast_2d(np.asarray(e, dtype=np.float64)) - model.center) / model.scale
    mu, logvar = _encode(x, model)
    mu, var = mu.data, np.exp(logvar.data)
    if np.ndim(e) == 1:
        return mu[0], var[0]
    return mu, var

# z = mu + sigma * eps; Tensor inputs keep the gradient path to mu and sigma.
def reparameterize(mu, var, rng):
    mu, var = nn.as_tensor(mu), nn.as_tensor(var)
    eps = rng.standard_normal(mu.shape)
    return mu + nn.sqrt(var) * eps

"""Sum over the last axis of 1/2 (mu^2 + sigma^2 - ln sigma^2 - 1)."""
def kl_gaussian(mu, var, axis=-1):
    mu, var = nn.as_tensor(mu), nn.as_tensor(var)
    axis = axis if mu.ndim else None
    return nn.tsum(0.5 * (mu * mu + var - nn.log(var) - 1.0), axis=axis)

def vae_terms(batch, model, rng):
    x = nn.as_tensor(batch)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"VAE batch must be a non-empty (B, {model.input_dim}) array, got {x.shape}")
    mu, logvar = _encode(x, model)
    z = mu + nn.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
    recon = model.decoder(z)
    diff = x - recon
    reconstruction = nn.mean(nn.tsum(diff * diff, axis=1))
    # Log-variance form of kl_gaussian.
    kl = nn.mean(nn.tsum(0.5 * (mu * mu + nn.exp(logvar) - logvar - 1.0), axis=1))
    return reconstruction, kl

def vae_loss(batch, model, rng):
    reconstruction, kl = vae_terms(batch, model, rng)
    return reconstruction + kl

def train_vae(error_samples, hyper, seed=0):
    vectors = error_samples.vectors if isinstance(error_samples, ErrorSet) else np.asarray(error_samples)
    if len(vectors) < hyper.min_samples:
        raise ValueError(f"VAE training needs at least {hyper.min_samples} samples, got {len(vectors)}")
    x = complex_vec_to_real(vectors)
    model = build_vae(x.shape[1], hyper, seed)
    rng = make_rng(derive_seed(seed, "vae-train"))
    order = rng.permutation(len(x))
    n_val = max(1, int(round(len(x) * hyper.val_split)))
    train, val = x[order[n_val:]], x[order[:n_val]]
    model.center = train.mean(axis=0)
    std = train.std(axis=0)
    model.scale = np.where(std > 0, std, 1.0)
    train = (train - model.center) / model.scale
    val = (val - model.center) / model.scale
    recon_curve = []

    def batch_loss(indices, batch_rng):
        return vae_loss(train[indices], model, batch_rng)

    def val_loss():
        reconstruction, kl = vae_terms(val, model, make_rng(derive_seed(seed, "vae-val")))
        recon_curve.append(reconstruction.item())
        return reconstruction.item() + kl.item()

    log_info(f"Training VAE on {len(train)} error vectors (latent {model.latent_dim}, hidden {model.hidden}).")
    curve = fit(_VaeNets(model), batch_loss, len(train), val_loss, hyper, rng, "vae")
    # The first entry scores the initial parameters.
    curve["reconstruction"] = recon_curve[1:]
    model.meta = {"curve": curve, "seed": seed, "epochs": len(curve["train_loss"])}
    return model

# The squared-error reconstruction term is a Gaussian decoder likelihood with
# variance DECODER_VAR per standardized component; decoder_noise=False returns
# the decoder means only.
def generate_errors(model, n, rng, seed=None, decoder_noise=True):
    decoder = model.decoder
    z = rng.standard_normal((n, model.latent_dim))
    out = decoder(z).data
    if decoder_noise:
        out = out + np.sqrt(DECODER_VAR) * rng.standard_normal(out.shape)
    out = out * model.scale + model.center
    return ErrorSet(real_vec_to_complex(out), "vae", seed)

#===============================================================================
# Error-set composition and baselines
#===============================================================================
# size=None forms the full cross product (e_1 major); otherwise `size` pairs
# are drawn uniformly with rng.
def compose_error_set(S_e1, S_e2, xi, size=None, rng=None):
    e1, e2 = _vectors(S_e1), _vectors(S_e2)
    xi = np.asarray(xi)
    if len(e1) == 0 or len(e2) == 0:
        raise ValueError("cannot compose from an empty error set")
    if e1.shape[1] != e2.shape[1] or xi.shape != (e2.shape[1], e2.shape[1]):
        raise ShapeError(f"dimension mismatch: e_1 {e1.shape[1]}, e_2 {e2.shape[1]}, xi {xi.shape}")
    mapped = e2 @ xi.T
    if size is None:
        vectors = (e1[:, None, :] + mapped[None, :, :]).reshape(-1, e1.shape[1])
    else:
        if rng is None:
            raise ValueError("sampled composition needs an rng")
        i = rng.integers(0, len(e1), size=size)
        j = rng.integers(0, len(e2), size=size)
        vectors = e1[i] + mapped[j]
    return ErrorSet(vectors, "composed")

def _vectors(error_set):
    return error_set.vectors if isinstance(error_set, ErrorSet) else np.atleast_2d(np.asarray(error_set))

def gaussian_error_set(cov, n, rng, provenance="gaussian", seed=None):
    cov = np.asarray(cov, dtype=np.complex128)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.conj().T):
        raise ValueError("covariance is not Hermitian")
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10 * max(1.0, abs(eigvals.max())):
        raise ValueError(f"covariance is not positive semidefinite (min eigenvalue {eigvals.min():.3g})")
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    white = (rng.standard_normal((n, cov.shape[0])) + 1j * rng.standard_normal((n, cov.shape[0]))) / np.sqrt(2.0)
    return ErrorSet(white @ root.T, provenance, seed)

def estimation_error_set(error_var, n_antennas, n, rng):
    return gaussian_error_set(error_var * np.eye(n_antennas), n, rng, provenance="estimation")

def sample_covariance(errors):
    e = _vectors(errors)
    return e.T @ e.conj() / len(e)

#===============================================================================
# Discrete check of the evidence decomposition
#===============================================================================
# For a discrete latent with prior p(z), likelihood p(e|z) of one observed e
# and variational q(z), returns KL(q || p(z|e)) and
# KL(q || p(z)) - E_q[ln p(e|z)] + ln p(e); the two are equal.
def discrete_kl_decomposition(q, prior, likelihood):
    q, prior, likelihood = (np.asarray(a, dtype=np.float64) for a in (q, prior, likelihood))
    evidence = float(np.sum(prior * likelihood))
    posterior = prior * likelihood / evidence
    direct = float(np.sum(q * np.log(q / posterior)))
    kl_prior = float(np.sum(q * np.log(q / prior)))
    expected_loglik = float(np.sum(q * np.log(likelihood)))
    return direct, kl_prior - expected_loglik + np.log(evidence)

#===============================================================================
# Checkpoints
#===============================================================================
def save_vae(path, model):
    meta = dict(model.meta)
    meta.update({"kind": "vae", "input_dim": model.input_dim, "latent_dim": model.latent_dim,
                 "hidden": model.hidden, "center": model.center, "scale": model.scale})
    return save_checkpoint(path, _VaeNets(model), meta)

def load_vae(path):
    params, _, meta = read_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"'{path}' is not a VAE checkpoint")
    hyper = VaeHyper(latent_dim=meta["latent_dim"], hidden_factor=meta["hidden"] // meta["input_dim"])
    model = build_vae(meta["input_dim"], hyper)
    _VaeNets(model).set_parameters(params)
    model.center, model.scale = np.array(meta["center"]), np.array(meta["scale"])
    model.meta = {k: v for k, v in meta.items()
                  if k not in ("kind", "input_dim", "latent_dim", "hidden", "center", "scale")}
    return model
