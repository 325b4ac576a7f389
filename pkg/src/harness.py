#!/usr/bin/env python3
# ==============================================================================
# Copyright (c) 2025, Seventh State
# ==============================================================================
# Experiment orchestration. A pipeline runs the stages
#   gen-data -> train-predictor -> collect-errors -> train-vae ->
#   compose-errors -> train-precoder -> evaluate
# under WORKDIR, one directory per (stage, content key). A stage is skipped
# when its key matches a finished manifest whose outputs still exist; once a
# stage reruns, every later stage reruns too. Sweeps repeat the pipeline per
# axis value and replication and aggregate metric rows into one CSV with a
# JSON sidecar.
# ==============================================================================

#===============================================================================
# Imports
#===============================================================================
import csv
import json
import os
import statistics
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from config.config import CODE_VERSION, THREADS, WORKDIR
from src import predictor as pred
from src import precoder as prec
from src import vae_augment as vae
from src.dataset import build_dataset, episodes_for, load_dataset, read_arrays, save_dataset, write_arrays
from src.logger import log_error, log_info
from src.settings import ExperimentSpec
from src.utils import ShapeError, StageError, config_hash, derive_seed, make_rng

#===============================================================================
# MACROS
#===============================================================================
STAGES = ("gen-data", "train-predictor", "collect-errors", "train-vae",
          "compose-errors", "train-precoder", "evaluate")
PREDICTOR_SCHEMES = ("dlpdn", "lstm", "lr")
PRECODER_SCHEMES = {
    "dlpcn": {"variant": "cnn", "robust": "vae"},
    "dlpcn_gaussian": {"variant": "cnn", "robust": "gaussian"},
    "dlpcn_nonrobust": {"variant": "cnn", "robust": "nonrobust"},
    "mlp": {"variant": "mlp", "robust": "vae"},
}
MANIFEST = "stage.json"
TIMING_REPEATS = 30

# Fields of SystemConfig that only matter once a precoder is trained or scored.
PRECODING_FIELDS = ("total_power_dbw", "device_weights", "sinr_threshold_db", "outage_prob")

#===============================================================================
# Metrics
#===============================================================================
@dataclass
class MetricsRow:
    scheme: str
    metric: str
    value: float
    axis: str = ""
    axis_value: float = None
    replication: int = 0
    seed: int = 0
    p2_dbw: float = None

METRIC_FIELDS = [f for f in MetricsRow.__dataclass_fields__]

PREDICTOR_TABLE_FIELDS = ["w_step", "scheme", "NMSE_dB"]

def precoder_table_fields(K):
    return ["scheme", "P2_dBW", "WSR"] + [f"outage_{k}" for k in range(K)] + ["wall_time_ms"]

"""One CSV record per dict, columns in fieldnames order, plus an optional JSON sidecar."""
def write_table(path, fieldnames, records, sidecar=None):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for record in records:
            writer.writerow(record)
    if sidecar is not None:
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True, default=str)
    return path

def write_metrics(path, rows, sidecar=None):
    write_table(path, METRIC_FIELDS, [asdict(row) for row in rows], sidecar)
    log_info(f"Wrote {len(rows)} metric rows to '{path}'.")
    return path

def read_metrics(path):
    rows = []
    with open(path, "r", newline="") as f:
        for record in csv.DictReader(f):
            rows.append(MetricsRow(
                scheme=record["scheme"], metric=record["metric"], value=float(record["value"]),
                axis=record["axis"],
                axis_value=float(record["axis_value"]) if record["axis_value"] else None,
                replication=int(record["replication"]), seed=int(record["seed"]),
                p2_dbw=float(record["p2_dbw"]) if record["p2_dbw"] else None))
    return rows

#===============================================================================
# Stage bookkeeping
#===============================================================================
@dataclass
class StageResult:
    stage: str
    key: str
    path: str
    cached: bool
    outputs: list = field(default_factory=list)

    def output(self, name):
        return os.path.join(self.path, name)


def stage_key(stage, config_subset, upstream_keys):
    return config_hash({"stage": stage, "upstream": list(upstream_keys),
                        "config": config_subset, "code": CODE_VERSION})

def _manifest_ok(path, key):
    manifest = os.path.join(path, MANIFEST)
    if not os.path.exists(manifest):
        return None
    with open(manifest, "r") as f:
        blob = json.load(f)
    if blob.get("key") != key:
        return None
    outputs = blob.get("outputs", [])
    if not all(os.path.exists(os.path.join(path, name)) for name in outputs):
        return None
    return outputs

"""
Run one stage, or reuse its cached outputs. build(path) writes the stage's
files into path and returns their names; any failure surfaces as StageError.
"""
def run_stage(stage, config_subset, upstream, build, workdir, force=False):
    key = stage_key(stage, config_subset, [u.key for u in upstream])
    path = os.path.join(workdir, stage, key[:16])
    force = force or any(not u.cached for u in upstream)
    outputs = None if force else _manifest_ok(path, key)
    if outputs is not None:
        log_info(f"Stage {stage}: cache hit ({key[:12]}).")
        return StageResult(stage, key, path, True, outputs)

    log_info(f"Stage {stage}: running ({key[:12]}).")
    os.makedirs(path, exist_ok=True)
    started = time.perf_counter()
    try:
        outputs = list(build(path))
    except StageError:
        raise
    except Exception as e:
        log_error(f"Stage {stage} failed: {e}")
        raise StageError(stage, str(e)) from e
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump({"stage": stage, "key": key, "outputs": outputs, "config": config_subset},
                  f, indent=2, sort_keys=True, default=str)
    log_info(f"Stage {stage}: done in {time.perf_counter() - started:.1f}s.")
    return StageResult(stage, key, path, False, outputs)

#===============================================================================
# Stage builders
#===============================================================================
def _system_subset(run_config, precoding=False):
    system = run_config.system.model_dump()
    if not precoding:
        for name in PRECODING_FIELDS:
            system.pop(name)
    return system

def _samples(ds, run_config, limit=None):
    samples = pred.assemble_samples(ds, run_config.predictor.w_step, run_config.predictor.target)
    if limit is not None and len(samples) > limit:
        samples = samples.take(np.arange(limit))
    return samples

def _predictor_hyper(run_config, variant):
    return run_config.predictor.model_copy(update={"variant": variant})

def _subsample(vectors, n, rng):
    if len(vectors) <= n:
        return vectors
    return vectors[rng.choice(len(vectors), size=n, replace=False)]

def _gen_data(run_config):
    cfg, data, w_step = run_config.system, run_config.data, run_config.predictor.w_step

    def build(path):
        for name, n_samples in (("train", data.n_train), ("test", data.n_test)):
            n_episodes = episodes_for(n_samples, data.slots_per_episode, w_step)
            ds = build_dataset(cfg, n_episodes, data.slots_per_episode,
                               derive_seed(cfg.seed, name), w_step, workers=1)
            save_dataset(os.path.join(path, f"{name}.bin"), ds)
        return ["train.bin", "test.bin"]
    return build

def _train_predictor(run_config, data_stage, schemes):
    cfg = run_config.system

    def build(path):
        train = _samples(load_dataset(data_stage.output("train.bin")), run_config, run_config.data.n_train)
        outputs = []
        variants = [run_config.predictor.variant]
        variants += [v for v in ("dlpdn", "lstm") if v in schemes and v not in variants]
        for variant in variants:
            model = pred.train_dlpdn(train, _predictor_hyper(run_config, variant), seed=cfg.seed)
            pred.save_predictor(os.path.join(path, f"{variant}.json"), model)
            outputs.append(f"{variant}.json")
        if "lr" in schemes:
            lr_model = pred.fit_lr(train.inputs, train.targets, run_config.predictor.ridge)
            pred.save_lr(os.path.join(path, "lr.json"), lr_model)
            outputs.append("lr.json")
        return outputs
    return build

def _collect_errors(run_config, data_stage, predictor_stage):
    cfg, data = run_config.system, run_config.data

    def build(path):
        model = pred.load_predictor(predictor_stage.output(f"{run_config.predictor.variant}.json"))
        train_ds = load_dataset(data_stage.output("train.bin"))
        train = _samples(train_ds, run_config, data.n_train)
        test = _samples(load_dataset(data_stage.output("test.bin")), run_config, data.n_test)
        H_tilde_train = pred.predict(train.inputs, model)
        H_tilde_test = pred.predict(test.inputs, model)
        rng = make_rng(derive_seed(cfg.seed, "collect-errors"))

        e2 = _subsample(pred.collect_errors(train.H_hat, H_tilde_train), data.error_set_size, rng)
        e2_test = pred.collect_errors(test.H_hat, H_tilde_test)
        e1 = vae.estimation_error_set(cfg.estimation_error_var, cfg.M, data.error_set_size, rng)
        vae.save_error_set(os.path.join(path, "e2.bin"), vae.ErrorSet(e2, "prediction", cfg.seed))
        vae.save_error_set(os.path.join(path, "e2_test.bin"), vae.ErrorSet(e2_test, "prediction", cfg.seed))
        vae.save_error_set(os.path.join(path, "e1.bin"), e1)
        # xi is constant per episode; composition uses its mean over training episodes.
        write_arrays(os.path.join(path, "csi.bin"),
                     {"H_tilde_train": H_tilde_train, "H_tilde_test": H_tilde_test,
                      "H_true_test": test.H_true, "xi": train_ds.xi.mean(axis=0)},
                     "prediction", {"seed": str(cfg.seed)})
        return ["e2.bin", "e2_test.bin", "e1.bin", "csi.bin"]
    return build

def _train_vae(run_config, errors_stage):
    def build(path):
        e2 = vae.load_error_set(errors_stage.output("e2.bin"))
        model = vae.train_vae(e2, run_config.vae, seed=run_config.system.seed)
        vae.save_vae(os.path.join(path, "vae.json"), model)
        return ["vae.json"]
    return build

def _per_device(e1, e2, xi, size, rng):
    return np.stack([vae.compose_error_set(e1, e2, xi[k], size, rng).vectors for k in range(len(xi))])

def _compose_errors(run_config, errors_stage, vae_stage):
    cfg, data = run_config.system, run_config.data

    def build(path):
        rng = make_rng(derive_seed(cfg.seed, "compose-errors"))
        e1 = vae.load_error_set(errors_stage.output("e1.bin"))
        e2 = vae.load_error_set(errors_stage.output("e2.bin"))
        _, csi = read_arrays(errors_stage.output("csi.bin"))
        model = vae.load_vae(vae_stage.output("vae.json"))
        generated = vae.generate_errors(model, data.error_set_size, rng, cfg.seed)
        gaussian = vae.gaussian_error_set(vae.sample_covariance(e2), data.error_set_size, rng, seed=cfg.seed)
        for name, source in (("vae", generated), ("gaussian", gaussian)):
            bank = _per_device(e1, source, csi["xi"], data.composed_set_size, rng)
            write_arrays(os.path.join(path, f"composed_{name}.bin"), {"errors": bank}, "composed",
                         {"source": name, "seed": str(cfg.seed)})
        return ["composed_vae.bin", "composed_gaussian.bin"]
    return build

def _load_bank(path):
    _, arrays = read_arrays(path)
    return arrays["errors"]

def _train_precoder(run_config, errors_stage, compose_stage, schemes):
    cfg = run_config.system

    def build(path):
        _, csi = read_arrays(errors_stage.output("csi.bin"))
        outputs = []
        for scheme in schemes:
            if scheme not in PRECODER_SCHEMES:
                continue
            hyper = run_config.precoder.model_copy(update=PRECODER_SCHEMES[scheme])
            source = "gaussian" if hyper.robust == "gaussian" else "vae"
            bank = _load_bank(compose_stage.output(f"composed_{source}.bin"))
            model = prec.train_dlpcn(csi["H_tilde_train"], bank, cfg, hyper, csi["xi"], seed=cfg.seed)
            prec.save_precoder(os.path.join(path, f"{scheme}.json"), model)
            outputs.append(f"{scheme}.json")
        return outputs
    return build

def _evaluation_bank(errors_stage, csi, cfg, size, rng):
    # Measured test prediction errors, composed with fresh estimation errors.
    e1 = vae.load_error_set(errors_stage.output("e1.bin"))
    e2_test = vae.load_error_set(errors_stage.output("e2_test.bin"))
    return _per_device(e1, e2_test, csi["xi"], size, rng)

def _evaluate(run_config, stages, schemes):
    cfg, data = run_config.system, run_config.data
    data_stage, predictor_stage, errors_stage = stages["gen-data"], stages["train-predictor"], stages["collect-errors"]

    def build(path):
        rows = []
        test = _samples(load_dataset(data_stage.output("test.bin")), run_config, data.n_test)
        for scheme in schemes:
            if scheme in ("dlpdn", "lstm"):
                model = pred.load_predictor(predictor_stage.output(f"{scheme}.json"))
                report = pred.evaluate_predictor(model, test)
                rows.append(MetricsRow(scheme, "NMSE_dB", report["nmse_db"]))
                rows.append(MetricsRow(scheme, "loss", model.meta["curve"]["best_val_loss"]))
            elif scheme == "lr":
                lr_model = pred.load_lr(predictor_stage.output("lr.json"))
                reference = test.H_hat if run_config.predictor.target == "estimated" else test.H_true
                report = pred.nmse_report(reference, pred.lr_predict(test.inputs, lr_model))
                rows.append(MetricsRow(scheme, "NMSE_dB", report["nmse_db"]))

        precoders = [s for s in schemes if s in PRECODER_SCHEMES or s == "zfbf"]
        if precoders:
            _, csi = read_arrays(errors_stage.output("csi.bin"))
            rng = make_rng(derive_seed(cfg.seed, "evaluation-errors"))
            bank = _evaluation_bank(errors_stage, csi, cfg, data.composed_set_size, rng)
            models = {s: prec.load_precoder(stages["train-precoder"].output(f"{s}.json"))
                      for s in precoders if s in PRECODER_SCHEMES}
            p2_dbw = cfg.total_power_dbw
            for scheme in precoders:
                if scheme == "zfbf":
                    precode = lambda H: prec.zfbf_batch(H, cfg.total_power)
                else:
                    precode = models[scheme].precode
                result = prec.evaluate_precoder(precode, csi["H_tilde_test"], csi["H_true_test"], bank,
                                                cfg, csi["xi"], run_config.precoder.n_aug,
                                                derive_seed(cfg.seed, "evaluate", scheme))
                rows.append(MetricsRow(scheme, "WSR", result["wsr"], p2_dbw=p2_dbw))
                rows.append(MetricsRow(scheme, "WSR_true", result["wsr_true"], p2_dbw=p2_dbw))
                for k, value in enumerate(result["outage"]):
                    rows.append(MetricsRow(scheme, f"outage_{k}", value, p2_dbw=p2_dbw))
                rows.append(MetricsRow(scheme, "wall_time_ms", result["wall_time_ms"], p2_dbw=p2_dbw))
                if scheme in models:
                    rows.append(MetricsRow(scheme, "loss", models[scheme].meta["val_loss"], p2_dbw=p2_dbw))
        with open(os.path.join(path, "rows.json"), "w") as f:
            json.dump([asdict(r) for r in rows], f)
        return ["rows.json"]
    return build

#===============================================================================
# Pipeline
#===============================================================================
def _needs(schemes):
    precoding = any(s in PRECODER_SCHEMES or s == "zfbf" for s in schemes)
    learned = any(s in PRECODER_SCHEMES for s in schemes)
    return precoding, learned

def run_stages(run_config, schemes, workdir=None):
    workdir = workdir or WORKDIR
    schemes = list(schemes)
    precoding, learned = _needs(schemes)
    rc = run_config
    stages = OrderedDict()

    stages["gen-data"] = run_stage(
        "gen-data", {"system": _system_subset(rc), "data": rc.data.model_dump(), "w_step": rc.predictor.w_step},
        [], _gen_data(rc), workdir)
    stages["train-predictor"] = run_stage(
        "train-predictor", {"predictor": rc.predictor.model_dump(), "schemes": sorted(schemes)},
        [stages["gen-data"]], _train_predictor(rc, stages["gen-data"], schemes), workdir)
    if precoding:
        stages["collect-errors"] = run_stage(
            "collect-errors", {"system": _system_subset(rc), "data": rc.data.model_dump()},
            [stages["train-predictor"]],
            _collect_errors(rc, stages["gen-data"], stages["train-predictor"]), workdir)
    if learned:
        stages["train-vae"] = run_stage(
            "train-vae", {"vae": rc.vae.model_dump()}, [stages["collect-errors"]],
            _train_vae(rc, stages["collect-errors"]), workdir)
        stages["compose-errors"] = run_stage(
            "compose-errors", {"composed_set_size": rc.data.composed_set_size},
            [stages["train-vae"]], _compose_errors(rc, stages["collect-errors"], stages["train-vae"]), workdir)
        stages["train-precoder"] = run_stage(
            "train-precoder", {"system": _system_subset(rc, precoding=True),
                               "precoder": rc.precoder.model_dump(), "schemes": sorted(schemes)},
            [stages["compose-errors"]],
            _train_precoder(rc, stages["collect-errors"], stages["compose-errors"], schemes), workdir)
    stages["evaluate"] = run_stage(
        "evaluate", {"system": _system_subset(rc, precoding=True), "schemes": list(schemes),
                     "n_aug": rc.precoder.n_aug},
        list(stages.values()), _evaluate(rc, stages, schemes), workdir)
    return stages

def _stage_rows(stages):
    with open(stages["evaluate"].output("rows.json"), "r") as f:
        return [MetricsRow(**r) for r in json.load(f)]

def replication_seed(spec, replication):
    return derive_seed(spec.master_seed, "replication", replication) % (2 ** 31)

def at_power(run_config, p2_dbw):
    system = run_config.system.model_copy(update={"total_power_dbw": float(p2_dbw)})
    return run_config.model_copy(update={"system": system})

# Each power level trains its own precoders; data and predictor stages are shared
# through the cache.
def pipeline_rows(spec, axis_value=None, replication=0, workdir=None, powers=None):
    seed = replication_seed(spec, replication)
    base = spec.run_config(axis_value, seed)
    configs = [at_power(base, p) for p in powers] if powers else [base]
    rows = []
    for i, run_config in enumerate(configs):
        for row in _stage_rows(run_stages(run_config, spec.schemes, workdir)):
            # Predictor rows do not depend on P_2.
            if row.p2_dbw is None and i > 0:
                continue
            row.axis = spec.axis or ""
            row.axis_value = row.p2_dbw if spec.axis == "P_2" and row.p2_dbw is not None else axis_value
            row.replication, row.seed = replication, seed
            rows.append(row)
    return rows

def metrics_sidecar(spec):
    return {"spec": spec.model_dump(), "resolved": spec.run_config().model_dump(), "code_version": CODE_VERSION}

def run_pipeline(spec, workdir=None, output=None):
    rows = pipeline_rows(spec, workdir=workdir)
    return write_metrics(output or spec.output, rows, metrics_sidecar(spec))

#===============================================================================
# Sweeps
#===============================================================================
def _sweep_job(spec_json, axis_value, replication, workdir, powers):
    spec = ExperimentSpec.model_validate_json(spec_json)
    return pipeline_rows(spec, axis_value, replication, workdir, powers)

def sweep_jobs(spec):
    if spec.axis is None:
        raise ValueError(f"experiment '{spec.name}' declares no sweep axis")
    return [(value, r, None) for r in range(spec.replications) for value in spec.values]

def sweep(spec, workdir=None, workers=None, output=None):
    workers = workers or THREADS
    jobs = sweep_jobs(spec)
    workdir = workdir or WORKDIR
    log_info(f"Sweep '{spec.name}' over {spec.axis}: {len(jobs)} pipeline run(s), {workers} worker(s).")
    if workers > 1 and len(jobs) > 1:
        # The first job fills the stages later jobs share (all but training the
        # precoders on a P_2 sweep) before the workers start.
        batches = [pipeline_rows(spec, *jobs[0][:2], workdir, jobs[0][2])]
        payload = spec.model_dump_json()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_job, payload, v, r, workdir, p) for v, r, p in jobs[1:]]
            batches += [f.result() for f in futures]
    else:
        batches = [pipeline_rows(spec, v, r, workdir, p) for v, r, p in jobs]
    rows = [row for batch in batches for row in batch]
    rows.sort(key=lambda r: (r.axis_value if r.axis_value is not None else float("-inf"),
                             r.replication, r.scheme, r.metric))
    return write_metrics(output or spec.output, rows, metrics_sidecar(spec))

#===============================================================================
# Timing
#===============================================================================
def _timed(call, repeats):
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        call()
        samples.append(time.perf_counter() - started)
    return 1000.0 * statistics.median(samples)

def _check_size(checkpoint, M, K, trained):
    if trained != (M, K):
        raise ShapeError(f"checkpoint '{checkpoint}' was trained for M={trained[0]}, K={trained[1]}; "
                         f"it cannot be timed at M={M}, K={K}. Time it at its own size or omit --ckpt.")

def _inference_call(scheme, run_config, checkpoint, rng):
    cfg = run_config.system
    M, K = cfg.M, cfg.K
    H = (rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K))) / np.sqrt(2.0)
    if scheme == "zfbf":
        return lambda: prec.zfbf_precoder(H, cfg.total_power)
    if scheme in PRECODER_SCHEMES:
        if checkpoint:
            model = prec.load_precoder(checkpoint)
            _check_size(checkpoint, M, K, (model.M, model.K))
        else:
            hyper = run_config.precoder.model_copy(update=PRECODER_SCHEMES[scheme])
            model = prec.init_dlpcn(M, K, hyper, cfg.total_power, cfg.seed)
        return lambda: model.precode(H)
    w_step = run_config.predictor.w_step
    history = rng.standard_normal((w_step, 2 * M, K))
    if scheme == "lr":
        lr_model = pred.load_lr(checkpoint) if checkpoint else pred.LrModel(
            np.zeros((2 * M * K, w_step + 1)), w_step, (2 * M, K))
        if checkpoint:
            _check_size(checkpoint, M, K, (lr_model.shape[0] // 2, lr_model.shape[1]))
        return lambda: pred.lr_predict(history, lr_model)
    if checkpoint:
        model = pred.load_predictor(checkpoint)
        _check_size(checkpoint, M, K, (model.M, model.K))
    else:
        model = pred.init_model(M, K, w_step, _predictor_hyper(run_config, scheme), cfg.seed)
    return lambda: pred.predict(history, model)

"""Median wall time of single-instance inference, one row per antenna count."""
def time_scheme(scheme, sizes, run_config, checkpoint=None, repeats=TIMING_REPEATS):
    if repeats < 1:
        raise ValueError("timing needs at least one repeat")
    rows = []
    for M in sizes:
        system = run_config.system.model_copy(update={"n_antennas": int(M)})
        sized = run_config.model_copy(update={"system": system})
        rng = make_rng(derive_seed(run_config.system.seed, "timing", scheme, M))
        call = _inference_call(scheme, sized, checkpoint, rng)
        call()
        median_ms = _timed(call, repeats)
        rows.append(MetricsRow(scheme, "wall_time_ms", median_ms, axis="M", axis_value=float(M),
                               seed=run_config.system.seed))
        log_info(f"Timing {scheme} at M={M}: median {median_ms:.3f} ms over {repeats} calls.")
    return rows

def summarize(rows):
    groups = OrderedDict()
    for row in rows:
        groups.setdefault((row.scheme, row.metric, row.axis_value), []).append(row.value)
    return [{"scheme": s, "metric": m, "axis_value": v, "mean": float(np.mean(values)),
             "std": float(np.std(values)), "n": len(values)}
            for (s, m, v), values in groups.items()]