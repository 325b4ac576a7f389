#!/usr/bin/env python3
#=============================================================================
# Copyright (c) 2025, Seventh State
#=============================================================================
# CLI for the LEO joint prediction / precoding lab.

import argparse
import json
import sys

import numpy as np
from colorama import Fore, Style, init as colorama_init
from rich import box
from rich.console import Console
from rich.table import Table

from src import harness
from src import predictor as pred
from src import precoder as prec
from src import vae_augment as vae
from src.checkpoint import read_checkpoint
from src.dataset import (build_dataset, episodes_for, export_csv, export_error_csv, load_dataset,
                         read_arrays, save_dataset, write_arrays)
from src.logger import log_error, log_info, log_warning
from src.settings import build_run_config, merge_overrides, load_config, load_experiment, with_seed
from src.utils import LeoBeamError, derive_seed, make_rng

colorama_init(autoreset=True)
console = Console()

#=============================================================================
# Internal Functions
#=============================================================================
def _run_config(args):
    run_config = load_config(args.config) if args.config else build_run_config("desk")
    return with_seed(run_config, args.seed)

def _experiment(args):
    spec = load_experiment(args.experiment)
    update = {}
    if args.config:
        with open(args.config, "r") as f:
            payload = json.load(f)
        update["profile"] = payload.pop("profile", spec.profile)
        update["overrides"] = merge_overrides(spec.overrides, payload)
    if args.seed is not None:
        update["master_seed"] = args.seed
    if update:
        spec = spec.model_validate({**spec.model_dump(), **update})
    return spec

def _samples(path, run_config, limit=None):
    ds = load_dataset(path)
    samples = pred.assemble_samples(ds, run_config.predictor.w_step, run_config.predictor.target)
    if limit is not None and len(samples) > limit:
        samples = samples.take(np.arange(limit))
    return ds, samples

def _csi(args, run_config):
    ds, samples = _samples(args.data, run_config)
    if args.predictor:
        return ds, samples, pred.predict(samples.inputs, pred.load_predictor(args.predictor))
    return ds, samples, samples.H_hat

def _error_bank(path):
    header, arrays = read_arrays(path)
    if "errors" not in arrays:
        raise ValueError(f"'{path}' holds no error vectors")
    log_info(f"Loaded {header['provenance']} errors from '{path}' with shape {arrays['errors'].shape}.")
    return arrays["errors"]

def _fmt(value):
    return f"{value:.4f}" if isinstance(value, float) else str(value)

def print_curve(title, curve):
    table = Table(title=title, box=box.SIMPLE_HEAVY)
    table.add_column("Epoch", justify="right", style="bold cyan")
    table.add_column("Train loss", justify="right")
    table.add_column("Val loss", justify="right")
    table.add_column("LR", justify="right")
    n = len(curve.get("train_loss", []))
    # First, last and every tenth epoch.
    for i in range(n):
        if i in (0, n - 1) or (i + 1) % 10 == 0:
            style = "green" if i + 1 == curve.get("best_epoch") else ""
            table.add_row(f"[{style}]{i + 1}[/{style}]" if style else str(i + 1),
                          f"{curve['train_loss'][i]:.6g}", f"{curve['val_loss'][i]:.6g}",
                          f"{curve['lr'][i]:.3g}")
    console.print(table)
    console.print(f"Best epoch: [bold]{curve.get('best_epoch')}[/bold]  "
                  f"best validation loss: [bold]{curve.get('best_val_loss', float('nan')):.6g}[/bold]")

def print_metrics_table(rows, title="Metrics Summary Report"):
    table = Table(title=title, box=box.SIMPLE_HEAVY)
    table.add_column("Scheme", style="bold cyan")
    table.add_column("Metric")
    table.add_column("Axis value", justify="right")
    table.add_column("Mean", justify="right", style="bold")
    table.add_column("Std", justify="right")
    table.add_column("Runs", justify="right")
    for entry in harness.summarize(rows):
        axis_value = "-" if entry["axis_value"] is None else _fmt(entry["axis_value"])
        table.add_row(entry["scheme"], entry["metric"], axis_value, f"{entry['mean']:.4f}",
                      f"{entry['std']:.4f}", str(entry["n"]))
    console.print(table)

def print_precoder_table(records, K):
    table = Table(title="Precoder Evaluation", box=box.SIMPLE_HEAVY)
    for name in ["Scheme", "P2_dBW", "WSR", "WSR_true"] + [f"outage_{k}" for k in range(K)] + ["wall_time_ms"]:
        table.add_column(name, justify="left" if name == "Scheme" else "right")
    for record in records:
        table.add_row(record["scheme"], _fmt(record["p2_dbw"]), _fmt(record["wsr"]), _fmt(record["wsr_true"]),
                      *[_fmt(v) for v in record["outage"]], _fmt(record["wall_time_ms"]))
    console.print(table)

def _sidecar(run_config, **extra):
    return {"resolved": run_config.model_dump(), "code_version": harness.CODE_VERSION, **extra}

def _halt(command, error):
    log_error(f"{command} halted: {error}")
    print(f"{Fore.RED}[{command} halted] {error}{Style.RESET_ALL}")
    sys.exit(1)

#=============================================================================
# Commands
#=============================================================================
def gen_data(args):
    run_config = _run_config(args)
    if args.slots:
        run_config = run_config.model_copy(update={"data": run_config.data.model_copy(
            update={"slots_per_episode": args.slots})})
    cfg, data = run_config.system, run_config.data
    n_samples = data.n_test if args.split == "test" else data.n_train
    n_episodes = args.episodes or episodes_for(n_samples, data.slots_per_episode, run_config.predictor.w_step)
    ds = build_dataset(cfg, n_episodes, data.slots_per_episode, derive_seed(cfg.seed, args.split),
                       run_config.predictor.w_step)
    save_dataset(args.out, ds)
    print(f"{Fore.GREEN}Dataset saved: {args.out} ({ds.n_episodes} episodes x {ds.n_slots} slots, "
          f"M={ds.M}, K={ds.K}){Style.RESET_ALL}")

def train_predictor(args):
    run_config = _run_config(args)
    _, samples = _samples(args.data, run_config, run_config.data.n_train)
    if args.variant == "lr":
        pred.save_lr(args.out, pred.fit_lr(samples.inputs, samples.targets, run_config.predictor.ridge))
        print(f"{Fore.GREEN}LR baseline saved: {args.out}{Style.RESET_ALL}")
        return
    hyper = run_config.predictor.model_copy(update={"variant": args.variant})
    model = pred.train_dlpdn(samples, hyper, seed=run_config.system.seed)
    pred.save_predictor(args.out, model)
    print_curve(f"Predictor Training ({args.variant})", model.meta["curve"])
    print(f"{Fore.GREEN}Predictor saved: {args.out} (validation NMSE {model.meta['val_nmse_db']:.2f} dB){Style.RESET_ALL}")

def evaluate_predictor(args):
    run_config = _run_config(args)
    _, samples = _samples(args.data, run_config)
    with open(args.ckpt, "r") as f:
        kind = json.load(f).get("kind")
    if kind == "lr":
        lr_model = pred.load_lr(args.ckpt)
        reference = samples.H_hat if run_config.predictor.target == "estimated" else samples.H_true
        report, scheme = pred.nmse_report(reference, pred.lr_predict(samples.inputs, lr_model)), "lr"
    else:
        model = pred.load_predictor(args.ckpt)
        report, scheme = pred.evaluate_predictor(model, samples), model.hyper.variant
    rows = [harness.MetricsRow(scheme, "NMSE_dB", report["nmse_db"], seed=run_config.system.seed)]
    if args.metrics:
        record = {"w_step": samples.inputs.shape[1], "scheme": scheme, "NMSE_dB": report["nmse_db"]}
        harness.write_table(args.metrics, harness.PREDICTOR_TABLE_FIELDS, [record],
                            _sidecar(run_config, ckpt=args.ckpt, data=args.data))
    print_metrics_table(rows, "Predictor Evaluation")

def collect_errors(args):
    run_config = _run_config(args)
    _, samples = _samples(args.data, run_config)
    H_tilde = pred.predict(samples.inputs, pred.load_predictor(args.ckpt))
    e2 = pred.collect_errors(samples.H_hat, H_tilde)
    vae.save_error_set(args.out, vae.ErrorSet(e2, "prediction", run_config.system.seed))
    print(f"{Fore.GREEN}Prediction errors saved: {args.out} ({len(e2)} vectors){Style.RESET_ALL}")

def train_vae(args):
    run_config = _run_config(args)
    model = vae.train_vae(vae.load_error_set(args.errors), run_config.vae, seed=run_config.system.seed)
    vae.save_vae(args.out, model)
    print_curve("VAE Training", model.meta["curve"])
    print(f"{Fore.GREEN}VAE saved: {args.out}{Style.RESET_ALL}")

def gen_errors(args):
    run_config = _run_config(args)
    cfg = run_config.system
    rng = make_rng(derive_seed(cfg.seed, "gen-errors"))
    n = args.n or run_config.data.error_set_size
    if args.vae:
        generated = vae.generate_errors(vae.load_vae(args.vae), n, rng, cfg.seed)
    elif args.gaussian_from:
        observed = vae.load_error_set(args.gaussian_from)
        generated = vae.gaussian_error_set(vae.sample_covariance(observed), n, rng, seed=cfg.seed)
    else:
        raise ValueError("gen-errors needs --vae or --gaussian-from")
    if not args.data:
        vae.save_error_set(args.out, generated)
        print(f"{Fore.GREEN}{generated.provenance} errors saved: {args.out} ({generated.size} vectors){Style.RESET_ALL}")
        return
    # Compose e = e_1 + xi_k e_2 per device with the dataset's mean correction matrices.
    xi = load_dataset(args.data).xi.mean(axis=0)
    e1 = vae.estimation_error_set(cfg.estimation_error_var, cfg.M, n, rng)
    size = args.composed or run_config.data.composed_set_size
    bank = np.stack([vae.compose_error_set(e1, generated, xi[k], size, rng).vectors for k in range(len(xi))])
    write_arrays(args.out, {"errors": bank}, "composed", {"source": generated.provenance, "seed": str(cfg.seed)})
    print(f"{Fore.GREEN}Composed errors saved: {args.out} ({bank.shape[1]} vectors per device){Style.RESET_ALL}")

def train_precoder(args):
    run_config = _run_config(args)
    ds, _, H_tilde = _csi(args, run_config)
    hyper = run_config.precoder.model_copy(update=harness.PRECODER_SCHEMES[args.scheme])
    bank = _error_bank(args.errors)
    model = prec.train_dlpcn(H_tilde[:run_config.data.n_train], bank, run_config.system, hyper,
                             ds.xi.mean(axis=0), seed=run_config.system.seed)
    prec.save_precoder(args.out, model)
    print_curve(f"Precoder Training ({args.scheme})", model.meta["curve"])
    print(f"{Fore.GREEN}Precoder saved: {args.out} (validation WSR {model.meta['val_wsr']:.4f}){Style.RESET_ALL}")

def evaluate_precoder(args):
    run_config = _run_config(args)
    cfg = run_config.system
    ds, samples, H_tilde = _csi(args, run_config)
    bank = _error_bank(args.errors)
    model = prec.load_precoder(args.ckpt) if args.ckpt else None
    scheme = "zfbf" if model is None else args.scheme
    trained_power = None if model is None else model.total_power
    records = []
    for p2_dbw in args.p2 or [cfg.total_power_dbw]:
        power_cfg = cfg.model_copy(update={"total_power_dbw": p2_dbw})
        if model is None:
            precode = lambda H: prec.zfbf_batch(H, power_cfg.total_power)
        else:
            if not np.isclose(power_cfg.total_power, trained_power):
                log_warning(f"{scheme} was trained for P_2 = {10 * np.log10(trained_power):.2f} dBW; "
                            f"rescaling its output to {p2_dbw:.2f} dBW instead of retraining.")
            model.set_total_power(power_cfg.total_power)
            precode = model.precode
        result = prec.evaluate_precoder(precode, H_tilde, samples.H_true, bank, power_cfg,
                                        ds.xi.mean(axis=0), run_config.precoder.n_aug,
                                        derive_seed(cfg.seed, "evaluate", scheme))
        records.append({"scheme": scheme, "p2_dbw": p2_dbw, **result})
    if args.metrics:
        table = [{"scheme": r["scheme"], "P2_dBW": r["p2_dbw"], "WSR": r["wsr"], "wall_time_ms": r["wall_time_ms"],
                  **{f"outage_{k}": v for k, v in enumerate(r["outage"])}} for r in records]
        harness.write_table(args.metrics, harness.precoder_table_fields(cfg.K), table,
                            _sidecar(run_config, ckpt=args.ckpt, data=args.data, errors=args.errors,
                                     wsr_true={str(r["p2_dbw"]): r["wsr_true"] for r in records}))
    print_precoder_table(records, cfg.K)

def run(args):
    spec = _experiment(args)
    path = harness.run_pipeline(spec, workdir=args.workdir, output=args.out)
    print_metrics_table(harness.read_metrics(path), f"Run '{spec.name}'")

def evaluate(args):
    spec = _experiment(args)
    rows = harness.pipeline_rows(spec, workdir=args.workdir, powers=args.p2)
    path = harness.write_metrics(args.out or spec.output, rows, harness.metrics_sidecar(spec))
    print_metrics_table(harness.read_metrics(path), f"Evaluation '{spec.name}'")

def sweep(args):
    spec = _experiment(args)
    path = harness.sweep(spec, workdir=args.workdir, workers=args.workers, output=args.out)
    print_metrics_table(harness.read_metrics(path), f"Sweep '{spec.name}' over {spec.axis}")

def time_cmd(args):
    run_config = _run_config(args)
    rows = harness.time_scheme(args.scheme, args.sizes, run_config, args.ckpt, args.repeats)
    if args.metrics:
        harness.write_metrics(args.metrics, rows)
    print_metrics_table(rows, f"Inference Time ({args.scheme})")

def show_ckpt(args):
    if args.ckpt.endswith(".json"):
        with open(args.ckpt, "r") as f:
            if json.load(f).get("kind") == "lr":
                lr_model = pred.load_lr(args.ckpt)
                console.print(f"[bold]LR baseline[/bold] w_step={lr_model.w_step} entries={len(lr_model.coef)}")
                return
    params, buffers, meta = read_checkpoint(args.ckpt)
    table = Table(title=f"Checkpoint {args.ckpt}", box=box.SIMPLE_HEAVY)
    table.add_column("Parameter", style="bold cyan", overflow="fold")
    table.add_column("Shape", justify="right")
    for name, array in list(params.items()) + list(buffers.items()):
        table.add_row(name, str(tuple(array.shape)))
    console.print(table)
    console.print(f"Kind: [bold]{meta.get('kind', '?')}[/bold]  "
                  f"parameters: [bold]{sum(a.size for a in params.values())}[/bold]")
    if "curve" in meta:
        print_curve("Training Curve", meta["curve"])

def export(args):
    if args.errors:
        _, arrays = read_arrays(args.errors)
        errors = arrays["errors"]
        export_error_csv(args.out, errors.reshape(-1, errors.shape[-1]))
    elif args.data:
        export_csv(args.out, load_dataset(args.data))
    else:
        raise ValueError("export-csv needs --data or --errors")
    print(f"{Fore.GREEN}CSV written: {args.out}{Style.RESET_ALL}")

#=============================================================================
# Main Functions
#=============================================================================
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (profile plus overrides)")
    common.add_argument("--seed", type=int, help="Override the master seed")

    parser = argparse.ArgumentParser(description="CLI for LEO channel prediction and robust precoding")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    p = subparsers.add_parser("gen-data", parents=[common], help="Generate a channel dataset")
    p.add_argument("--out", required=True, help="Output dataset file")
    p.add_argument("--split", choices=["train", "test"], default="train", help="Sample count to size for")
    p.add_argument("--episodes", type=int, help="Number of episodes (default: sized from the config)")
    p.add_argument("--slots", type=int, help="Slots per episode (default: from the config)")
    p.set_defaults(func=gen_data)

    p = subparsers.add_parser("train-predictor", parents=[common], help="Train a channel predictor")
    p.add_argument("--data", required=True, help="Training dataset")
    p.add_argument("--out", required=True, help="Output checkpoint")
    p.add_argument("--variant", choices=["dlpdn", "lstm", "lr"], default="dlpdn", help="Predictor type")
    p.set_defaults(func=train_predictor)

    p = subparsers.add_parser("evaluate-predictor", parents=[common], help="Report predictor NMSE")
    p.add_argument("--ckpt", required=True, help="Predictor checkpoint")
    p.add_argument("--data", required=True, help="Test dataset")
    p.add_argument("--metrics", help="Optional metrics CSV")
    p.set_defaults(func=evaluate_predictor)

    p = subparsers.add_parser("collect-errors", parents=[common], help="Collect prediction errors")
    p.add_argument("--ckpt", required=True, help="Predictor checkpoint")
    p.add_argument("--data", required=True, help="Dataset to predict on")
    p.add_argument("--out", required=True, help="Output error set")
    p.set_defaults(func=collect_errors)

    p = subparsers.add_parser("train-vae", parents=[common], help="Train the error VAE")
    p.add_argument("--errors", required=True, help="Prediction error set")
    p.add_argument("--out", required=True, help="Output checkpoint")
    p.set_defaults(func=train_vae)

    p = subparsers.add_parser("gen-errors", parents=[common], help="Generate (and compose) error sets")
    p.add_argument("--vae", help="VAE checkpoint to sample from")
    p.add_argument("--gaussian-from", help="Error set whose covariance defines a Gaussian generator")
    p.add_argument("--data", help="Dataset whose xi is used to compose with estimation errors")
    p.add_argument("--n", type=int, help="Generated vectors (default: error_set_size)")
    p.add_argument("--composed", type=int, help="Composed vectors per device (default: composed_set_size)")
    p.add_argument("--out", required=True, help="Output error file")
    p.set_defaults(func=gen_errors)

    p = subparsers.add_parser("train-precoder", parents=[common], help="Train a robust precoder")
    p.add_argument("--csi", dest="data", required=True, help="Channel dataset")
    p.add_argument("--predictor", help="Predictor checkpoint (default: use the MMSE estimates)")
    p.add_argument("--errors", required=True, help="Composed error file")
    p.add_argument("--scheme", choices=sorted(harness.PRECODER_SCHEMES), default="dlpcn", help="Precoder scheme")
    p.add_argument("--out", required=True, help="Output checkpoint")
    p.set_defaults(func=train_precoder)

    p = subparsers.add_parser("evaluate-precoder", parents=[common], help="Report WSR and outage")
    p.add_argument("--ckpt", help="Precoder checkpoint (omit for ZFBF)")
    p.add_argument("--scheme", default="dlpcn", help="Scheme label for the checkpoint")
    p.add_argument("--data", required=True, help="Test dataset")
    p.add_argument("--predictor", help="Predictor checkpoint (default: use the MMSE estimates)")
    p.add_argument("--errors", required=True, help="Composed error file")
    p.add_argument("--p2", type=float, nargs="+", help="Total powers in dBW")
    p.add_argument("--metrics", help="Optional metrics CSV")
    p.set_defaults(func=evaluate_precoder)

    for name, func, text in (("run", run, "Run the full pipeline for an experiment"),
                             ("evaluate", evaluate, "Evaluate every scheme of an experiment"),
                             ("sweep", sweep, "Sweep an experiment over its axis")):
        p = subparsers.add_parser(name, parents=[common], help=text)
        p.add_argument("--experiment", required=True, help="Experiment JSON file")
        p.add_argument("--workdir", help="Stage cache directory (default: LEO_BEAM_WORKDIR)")
        p.add_argument("--out", help="Metrics CSV (default: the experiment's output)")
        if name == "evaluate":
            p.add_argument("--p2", type=float, nargs="+", help="Total powers in dBW")
        if name == "sweep":
            p.add_argument("--workers", type=int, help="Worker processes (default: LEO_BEAM_THREADS)")
        p.set_defaults(func=func)

    p = subparsers.add_parser("time", parents=[common], help="Median inference time per antenna count")
    p.add_argument("--scheme", required=True, choices=["dlpdn", "lstm", "lr", "zfbf"] + sorted(harness.PRECODER_SCHEMES))
    p.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32], help="Antenna counts")
    p.add_argument("--repeats", type=int, default=harness.TIMING_REPEATS, help="Timed calls per size")
    p.add_argument("--ckpt", help="Checkpoint to time (default: untrained network of the same shape)")
    p.add_argument("--metrics", help="Optional metrics CSV")
    p.set_defaults(func=time_cmd)

    p = subparsers.add_parser("show-ckpt", parents=[common], help="Show a checkpoint and its training curve")
    p.add_argument("--ckpt", required=True, help="Checkpoint file")
    p.set_defaults(func=show_ckpt)

    p = subparsers.add_parser("export-csv", parents=[common], help="Export a dataset or error file to CSV")
    p.add_argument("--data", help="Channel dataset")
    p.add_argument("--errors", help="Error file")
    p.add_argument("--out", required=True, help="Output CSV")
    p.set_defaults(func=export)
    return parser

def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return
    try:
        args.func(args)
    except (LeoBeamError, ValueError, FileNotFoundError) as e:
        _halt(args.command, e)
    except KeyboardInterrupt:
        print(f"\n{Fore.RED}[{args.command} interrupted] by user.{Style.RESET_ALL}")
        sys.exit(1)

if __name__ == "__main__":
    main()
