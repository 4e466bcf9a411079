"""Command-line surface: train, eval, gradcheck, paramcount, synth.

Configuration is a line-oriented ``key = value`` file with one section per
module. Unknown sections or keys are hard errors: silent hyper-parameter
typos are the classic reproduction failure. Every key is documented in
``--help``. A run owns its output directory (enforced by a lock file) and
appends one line per epoch to ``metrics.csv``.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as dat
from .adjoint import grad_check_fd
from .fwp import RuleConfig
from .logsig import logsig_dim
from .model import CONTINUOUS_MODES, ModelConfig, SequenceModel, effective_steps
from .numcore import AdamState, adam_update, load_checkpoint, save_checkpoint
from .solver import SolveConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# section -> key -> (parser, default, help text)
CONFIG_SCHEMA = {
    "model": {
        "mode": (str, "ncde", "direct_node | ncde | nrde | vanilla_ncde | discrete | ode_rfwp"),
        "rule": (str, "delta", "hebb | oja | delta"),
        "delta_variant": (str, "auto", "auto | pre | post (auto: post beyond 1000 effective steps)"),
        "cde_input": (str, "x_and_dx", "x_and_dx | dx_only (ncde field input variant)"),
        "hebb_kv_swap": (_bool, False, "ncde hebb: keys from x', values from x"),
        "d_model": (int, 16, "total fast-weight width (split across heads)"),
        "heads": (int, 2, "number of computation heads"),
        "d_ff": (int, 32, "feed-forward block inner width"),
        "layers": (int, 1, "stacked coupled layers (direct/nrde families only)"),
        "vanilla_hidden": (int, 32, "hidden width of the vanilla NCDE matrix net"),
        "nrde_wiring": (str, "direct", "direct | cde_interp (how log-signatures drive the field)"),
    },
    "solver": {
        "method": (str, "rk4", "euler | rk4 | dopri5"),
        "steps_per_knot": (int, 1, "fixed-step subdivisions per unit knot interval"),
        "rtol": (float, 1e-7, "dopri5 relative tolerance"),
        "atol": (float, 1e-9, "dopri5 absolute tolerance"),
        "max_steps": (int, 100000, "adaptive step budget before divergence error"),
    },
    "control": {
        "interpolation": (str, "natural_cubic", "natural_cubic | linear"),
        "observation_masks": (_bool, False, "append per-channel observation masks (OI condition)"),
    },
    "logsig": {
        "depth": (int, 1, "log-signature depth (1 or 2)"),
        "step": (int, 4, "sub-sampling window size in knots"),
    },
    "train": {
        "lr": (float, 1e-4, "Adam learning rate"),
        "batch_size": (int, 32, "sequences per gradient step"),
        "epochs": (int, 20, "training epochs"),
        "seed": (int, 0, "seed for init, shuffling, and synthetic data"),
        "metric": (str, "accuracy", "accuracy | auc (validation metric)"),
        "timing": (str, "wall", "wall | off (off writes 0.000 seconds for reproducible logs)"),
    },
    "data": {
        "format": (str, "synth", "csv | ts | synth"),
        "path": (str, "", "csv directory or .ts file"),
        "synth_kind": (str, "irregular_key_count", "irregular_key_count | delayed_recall"),
        "n_train": (int, 2000, "synthetic training sequences"),
        "n_valid": (int, 200, "synthetic validation sequences"),
        "n_test": (int, 500, "synthetic test sequences"),
        "synth_seed": (int, 7, "synthetic data seed"),
        "synth_length": (int, 12, "irregular_key_count events per sequence"),
        "synth_distractors": (int, 200, "delayed_recall distractor count"),
        "split_seed": (int, 0, "seed for ts/csv split shuffling"),
    },
}

ALL_MODES = CONTINUOUS_MODES + ("discrete", "ode_rfwp")
ENUMS = {
    ("model", "mode"): ALL_MODES,
    ("model", "rule"): ("hebb", "oja", "delta"),
    ("model", "delta_variant"): ("auto", "pre", "post"),
    ("model", "cde_input"): ("x_and_dx", "dx_only"),
    ("model", "nrde_wiring"): ("direct", "cde_interp"),
    ("solver", "method"): ("euler", "rk4", "dopri5"),
    ("control", "interpolation"): ("natural_cubic", "linear"),
    ("logsig", "depth"): (1, 2),
    ("train", "metric"): ("accuracy", "auc"),
    ("train", "timing"): ("wall", "off"),
    ("data", "format"): ("csv", "ts", "synth"),
    ("data", "synth_kind"): ("irregular_key_count", "delayed_recall"),
}


@dataclass
class RunConfig:
    values: dict  # (section, key) -> parsed value

    def __getitem__(self, sk):
        return self.values[sk]


def load_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file {path!r} not found")
    values = {}
    for section in cp.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            parse, _, _ = CONFIG_SCHEMA[section][key]
            try:
                values[(section, key)] = parse(cp[section][key])
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {e}") from None
    for section, keys in CONFIG_SCHEMA.items():
        for key, (_, default, _) in keys.items():
            values.setdefault((section, key), default)
    cfg = RunConfig(values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    for sk, allowed in ENUMS.items():
        if cfg[sk] not in allowed:
            raise ConfigError(f"[{sk[0]}] {sk[1]} must be one of {allowed}, got {cfg[sk]!r}")
    for sk in (("model", "d_model"), ("model", "heads"), ("model", "d_ff"), ("model", "layers"),
               ("solver", "steps_per_knot"), ("solver", "max_steps"), ("logsig", "step"),
               ("train", "batch_size"), ("train", "epochs")):
        if cfg[sk] < 1:
            raise ConfigError(f"[{sk[0]}] {sk[1]} must be >= 1")
    if cfg[("model", "d_model")] % cfg[("model", "heads")] != 0:
        raise ConfigError("[model] d_model must be divisible by heads")
    if cfg[("solver", "rtol")] <= 0 or cfg[("solver", "atol")] <= 0:
        raise ConfigError("[solver] rtol and atol must be positive")
    if cfg[("train", "lr")] < 0:
        raise ConfigError("[train] lr must be >= 0")
    if cfg[("model", "layers")] > 1 and cfg[("model", "mode")] == "ncde":
        raise ConfigError("[model] layers > 1 is only supported for the direct/nrde families")
    if cfg[("data", "format")] in ("csv", "ts") and not cfg[("data", "path")]:
        raise ConfigError("[data] path is required for csv/ts formats")


def solve_config(cfg: RunConfig) -> SolveConfig:
    return SolveConfig(
        method=cfg[("solver", "method")],
        rtol=cfg[("solver", "rtol")],
        atol=cfg[("solver", "atol")],
        fixed_steps_per_knot=cfg[("solver", "steps_per_knot")],
        max_steps=cfg[("solver", "max_steps")],
    )


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class LoadedData:
    splits: dict  # split -> list[SequenceRecord]
    n_classes: int
    channels: int
    static_dim: int


def load_dataset(cfg: RunConfig) -> LoadedData:
    fmt = cfg[("data", "format")]
    if fmt == "synth":
        kind = cfg[("data", "synth_kind")]
        seed = cfg[("data", "synth_seed")]
        kw = {}
        if kind == "irregular_key_count":
            kw["length"] = cfg[("data", "synth_length")]
        else:
            kw["distractors"] = cfg[("data", "synth_distractors")]
        splits = {
            "train": dat.gen_synth_task(kind, cfg[("data", "n_train")], seed, **kw),
            "valid": dat.gen_synth_task(kind, cfg[("data", "n_valid")], seed + 1, **kw),
            "test": dat.gen_synth_task(kind, cfg[("data", "n_test")], seed + 2, **kw),
        }
        records = splits["train"]
    elif fmt == "csv":
        records = dat.parse_csv_sequences(cfg[("data", "path")])
        manifest_path = os.path.join(cfg[("data", "path")], "manifest.txt")
        if os.path.exists(manifest_path):
            split_names = dat.parse_manifest(manifest_path)
        else:
            split_names = dat.make_split([r.name for r in records], seed=cfg[("data", "split_seed")])
        by_name = {r.name: r for r in records}
        splits = {s: [by_name[n] for n in names] for s, names in split_names.items()}
    else:
        manifest, records = dat.parse_uea_ts(cfg[("data", "path")], split_seed=cfg[("data", "split_seed")])
        by_name = {r.name: r for r in records}
        splits = {s: [by_name[n] for n in names] for s, names in manifest.splits.items()}
    labels = {r.label for r in records}
    n_classes = max(labels) + 1
    channels = records[0].values.shape[1]
    static_dim = records[0].static.shape[0] if records[0].static is not None else 0
    return LoadedData(splits=splits, n_classes=n_classes, channels=channels, static_dim=static_dim)


def effective_d_in(cfg: RunConfig, channels: int) -> int:
    base = 1 + channels + (channels if cfg[("control", "observation_masks")] else 0)
    if cfg[("model", "mode")] == "nrde":
        return logsig_dim(base, cfg[("logsig", "depth")])
    return base


def build_model(cfg: RunConfig, data: LoadedData, seed: int) -> SequenceModel:
    mode = cfg[("model", "mode")]
    if mode not in CONTINUOUS_MODES:
        raise ConfigError(f"mode {mode!r} is a discrete-time oracle surface; training covers {CONTINUOUS_MODES}")
    variant = cfg[("model", "delta_variant")]
    if variant == "auto":
        steps = max(
            effective_steps(r.values.shape[0], mode, cfg[("logsig", "step")], cfg[("solver", "steps_per_knot")])
            for r in data.splits["train"]
        )
        variant = "post" if steps > 1000 else "pre"
    rule = RuleConfig(
        rule=cfg[("model", "rule")],
        delta_variant=variant,
        cde_input=cfg[("model", "cde_input")],
        hebb_kv_swap=cfg[("model", "hebb_kv_swap")],
    )
    mc = ModelConfig(
        mode=mode,
        rule=rule,
        d_model=cfg[("model", "d_model")],
        heads=cfg[("model", "heads")],
        d_ff=cfg[("model", "d_ff")],
        layers=cfg[("model", "layers")],
        d_in=effective_d_in(cfg, data.channels),
        n_classes=data.n_classes,
        static_dim=data.static_dim,
        vanilla_hidden=cfg[("model", "vanilla_hidden")],
        interpolation=cfg[("control", "interpolation")],
        observation_masks=cfg[("control", "observation_masks")],
        logsig_depth=cfg[("logsig", "depth")],
        logsig_step=cfg[("logsig", "step")],
        nrde_wiring=cfg[("model", "nrde_wiring")],
        seed=seed,
    )
    return SequenceModel(mc, solve=solve_config(cfg))


# ---------------------------------------------------------------------------
# evaluation helpers


def split_metric(model: SequenceModel, preps: list, metric: str, threads: int = 1):
    """Returns (metric value, predictions, per-class gold counts)."""
    def one(prep):
        return model.predict_logits(prep)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logits = list(pool.map(one, preps))
    else:
        logits = [one(p) for p in preps]
    gold = np.array([p.label for p in preps])
    preds = np.array([int(np.argmax(lg)) for lg in logits])
    if metric == "auc":
        z = np.stack(logits)
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        value = dat.auc_score(probs[:, 1], gold)
    else:
        value = dat.accuracy(preds, gold)
    counts = {int(c): int((gold == c).sum()) for c in sorted(set(gold.tolist()))}
    return value, preds, counts


# ---------------------------------------------------------------------------
# commands


def cmd_train(config_path, out_dir, seed_override=None, threads: int = 1, logf=print) -> dict:
    cfg = load_config(config_path)
    seed = cfg[("train", "seed")] if seed_override is None else int(seed_override)
    data = load_dataset(cfg)
    model = build_model(cfg, data, seed)

    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out_dir!r} is owned by another run (lock file present)") from None
    os.close(lock_fd)
    try:
        return _train_inner(cfg, data, model, out_dir, seed, threads, logf)
    finally:
        os.remove(lock_path)


def _train_inner(cfg, data, model, out_dir, seed, threads, logf) -> dict:
    prep = {split: [model.prepare(r) for r in recs] for split, recs in data.splits.items()}
    train, valid = prep["train"], prep.get("valid", [])
    if not valid:
        valid = train
    metric_kind = cfg[("train", "metric")]
    batch_size = cfg[("train", "batch_size")]
    opt = AdamState.for_params(model.params, lr=cfg[("train", "lr")])
    rng = np.random.default_rng(seed)
    wall = cfg[("train", "timing")] == "wall"
    best = -math.inf
    best_path = os.path.join(out_dir, "best.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "a") as mf:
        mf.write("epoch,train_loss,valid_metric,seconds\n")
        mf.flush()
        for epoch in range(1, cfg[("train", "epochs")] + 1):
            t_start = time.perf_counter()
            order = rng.permutation(len(train))
            total_loss = 0.0
            for lo in range(0, len(order), batch_size):
                batch = [train[i] for i in order[lo : lo + batch_size]]
                if threads > 1:
                    with ThreadPoolExecutor(max_workers=threads) as pool:
                        results = list(pool.map(model.loss_and_grads, batch))
                    loss = sum(r[0] for r in results) / len(batch)
                    grads = model.params.grads_like()
                    for _, g in results:
                        for name in grads:
                            grads[name] += g[name]
                    for name in grads:
                        grads[name] /= len(batch)
                else:
                    loss, grads = model.batch_loss_and_grads(batch)
                adam_update(model.params, grads, opt)
                total_loss += loss * len(batch)
            train_loss = total_loss / len(train)
            value, _, _ = split_metric(model, valid, metric_kind, threads=threads)
            seconds = time.perf_counter() - t_start if wall else 0.0
            mf.write(f"{epoch},{train_loss:.10g},{value:.10g},{seconds:.3f}\n")
            mf.flush()
            logf(f"epoch {epoch}: train_loss={train_loss:.6f} valid_{metric_kind}={value:.4f}")
            if value > best:
                best = value
                save_checkpoint(best_path, model.params, meta=model.arch_header())
    save_checkpoint(os.path.join(out_dir, "last.ckpt"), model.params, meta=model.arch_header())
    return {"best_valid": best, "checkpoint": best_path, "metrics": metrics_path, "model": model, "prep": prep}


def cmd_eval(checkpoint_path, config_path, split: str = "test", threads: int = 1, logf=print) -> dict:
    cfg = load_config(config_path)
    meta, entries = load_checkpoint(checkpoint_path)
    model = SequenceModel.from_header(meta, solve=solve_config(cfg))
    model.load_entries(entries)
    data = load_dataset(cfg)
    expected = effective_d_in(cfg, data.channels)
    if expected != model.cfg.d_in:
        raise ConfigError(f"checkpoint expects d_in={model.cfg.d_in} but dataset provides d_in={expected}")
    recs = data.splits.get(split, [])
    if not recs:
        raise ConfigError(f"split {split!r} is empty")
    preps = [model.prepare(r) for r in recs]
    acc, preds, counts = split_metric(model, preps, "accuracy", threads=threads)
    lines = [f"split={split} n={len(recs)}", f"accuracy {acc:.10g}"]
    if data.n_classes == 2:
        auc, _, _ = split_metric(model, preps, "auc", threads=threads)
        lines.append(f"auc {auc:.10g}")
    for c, n in counts.items():
        lines.append(f"class {c} gold_count {n} predicted {int((preds == c).sum())}")
    report = "\n".join(lines)
    logf(report)
    return {"accuracy": acc, "report": report}


def cmd_gradcheck(config_path, tolerance: float = 1e-3, logf=print) -> dict:
    cfg = load_config(config_path)
    if cfg[("model", "d_model")] > 8:
        raise ConfigError("gradcheck requires d_model <= 8")
    records = dat.gen_synth_task("irregular_key_count", 2, seed=11, length=5, noise_channels=1)
    data = LoadedData(splits={"train": records}, n_classes=2, channels=records[0].values.shape[1], static_dim=0)
    model = build_model(cfg, data, seed=cfg[("train", "seed")])
    preps = [model.prepare(r) for r in records]

    def loss_fn():
        return sum(model.loss(p) for p in preps)

    analytic = model.params.grads_like()
    for p in preps:
        _, g = model.loss_and_grads(p)
        for name in analytic:
            analytic[name] += g[name]
    report = grad_check_fd(loss_fn, model.params, analytic, perturbation=1e-4)
    failures = [r.name for r in report.rows if r.max_rel > tolerance]
    logf(report.format_table())
    logf(f"tolerance {tolerance:g}: {'FAIL ' + ', '.join(failures) if failures else 'all parameters pass'}")
    return {"report": report, "failures": failures}


def paramcount_rows(d_grid, d_in: int) -> list:
    """Parameter growth: matrix-valued NCDE final layer vs fast-weight slow net.

    The vanilla field needs a net emitting a d x d_in matrix: with hidden
    width d its final layer alone holds d*d*d_in weights. The fast-weight
    generator emits only first-order outputs: learning rate + query/key/value
    rows, (1 + 4 d) * d_in weights; the single learning-rate row is reported
    apart so the d-proportional part doubles exactly with d.
    """
    rows = []
    for d in d_grid:
        vanilla_final = d * d * d_in
        vanilla_hidden = d * d + d  # h -> hidden layer of width d, plus bias
        fwp_scaling = 4 * d * d_in  # query + key + value (+ key-width query generator)
        fwp_beta = d_in
        rows.append(
            {
                "d": d,
                "vanilla_final": vanilla_final,
                "vanilla_total": vanilla_final + vanilla_hidden,
                "fwp_scaling": fwp_scaling,
                "fwp_total": fwp_scaling + fwp_beta,
                "ratio": (vanilla_final + vanilla_hidden) / (fwp_scaling + fwp_beta),
            }
        )
    return rows


def cmd_paramcount(d_grid, d_in: int, logf=print) -> list:
    rows = paramcount_rows(d_grid, d_in)
    logf(f"{'d':>6} {'vanilla_final':>14} {'vanilla_total':>14} {'fwp_scaling':>12} {'fwp_total':>10} {'ratio':>10}")
    for r in rows:
        logf(f"{r['d']:>6} {r['vanilla_final']:>14} {r['vanilla_total']:>14} {r['fwp_scaling']:>12} {r['fwp_total']:>10} {r['ratio']:>10.1f}")
    return rows


def cmd_synth(kind: str, n: int, seed: int, out_dir, length: int = 12, distractors: int = 200) -> int:
    kw = {"length": length} if kind == "irregular_key_count" else {"distractors": distractors}
    records = dat.gen_synth_task(kind, n, seed, **kw)
    dat.write_csv_sequences(records, out_dir)
    return len(records)


# ---------------------------------------------------------------------------
# argument parsing


def _schema_epilog() -> str:
    lines = ["config file keys (line-oriented 'key = value' under [section] headers):"]
    for section, keys in CONFIG_SCHEMA.items():
        lines.append(f"  [{section}]")
        for key, (_, default, help_text) in keys.items():
            lines.append(f"    {key} = {default}  # {help_text}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ctfwp",
        description="Continuous-time fast-weight sequence models",
        epilog=_schema_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write metrics + checkpoints")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--threads", type=int, default=1)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--threads", type=int, default=1)

    p_gc = sub.add_parser("gradcheck", help="adjoint gradients vs central finite differences")
    p_gc.add_argument("--config", required=True)
    p_gc.add_argument("--tolerance", type=float, default=1e-3)

    p_pc = sub.add_parser("paramcount", help="vanilla NCDE vs fast-weight parameter growth")
    p_pc.add_argument("--d", default="32,64,128,256", help="comma-separated hidden sizes")
    p_pc.add_argument("--d-in", type=int, default=32)

    p_sy = sub.add_parser("synth", help="emit a synthetic dataset in the delimited format")
    p_sy.add_argument("--kind", default="irregular_key_count")
    p_sy.add_argument("--n", type=int, required=True)
    p_sy.add_argument("--seed", type=int, default=7)
    p_sy.add_argument("--out", required=True)
    p_sy.add_argument("--length", type=int, default=12)
    p_sy.add_argument("--distractors", type=int, default=200)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(args.config, args.out, seed_override=args.seed, threads=args.threads)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.config, split=args.split, threads=args.threads)
        elif args.command == "gradcheck":
            result = cmd_gradcheck(args.config, tolerance=args.tolerance)
            return 1 if result["failures"] else 0
        elif args.command == "paramcount":
            cmd_paramcount([int(tok) for tok in args.d.split(",") if tok], args.d_in)
        elif args.command == "synth":
            n = cmd_synth(args.kind, args.n, args.seed, args.out, length=args.length, distractors=args.distractors)
            print(f"wrote {n} sequences to {args.out}")
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
