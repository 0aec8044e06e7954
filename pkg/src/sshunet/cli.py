"""Command-line entry point: ``sshunet {train,eval,profile,sweep-shift,shift-demo}``.

Configuration is a TOML file with sections matching :data:`DEFAULTS`, then
``--set section.key=value`` overrides, then ``--seed`` / ``--out``. Unknown
keys are rejected. Every command that writes artifacts also writes the
resolved configuration to ``<out>/config.toml``.

Exit codes: 0 success, 2 config error, 3 training aborted (non-finite), 4 I/O error.
"""

import argparse
import copy
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np
import tomli_w

from . import complexity
from .data import AMOS_WINDOW, BTCV_WINDOW, PRESETS, AugmentConfig, generate_phantom, hu_window, load_records
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    FormatError,
    SpecError,
    TrainingAborted,
    UnsupportedError,
)
from .layers import shift_mac_equivalence
from .metrics import aggregate, evaluate_case
from .network import VARIANTS, UNetConfig, build, load_network, parse_fraction, save_params
from .trainer import LoopConfig, OptimConfig, mean_dice, sliding_window_infer, train, write_history

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("sshunet")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "network": {
        "variant": "shift2d_multiview",
        "stage_widths": [8, 16, 32],
        "shift_fraction": "1/4",
        "in_channels": 1,
        "num_classes": 3,
        "patch_extent": 16,
        "shift_placement": "pre_conv",
    },
    "optim": {
        "kind": "adamw",
        "lr": 0.003,
        "momentum": 0.99,
        "betas": [0.9, 0.999],
        "weight_decay": 1e-5,
        "eps": 1e-8,
        "warmup_iters": 10,
    },
    "loop": {
        "steps": 600,
        "batch_size": 2,
        "fg_bias": 0.5,
        "val_every": 0,
        "val_overlap": 0.5,
        "augment": False,
    },
    "data": {
        # preset phantoms unless train_dir is set
        "preset": "slice_ambiguous",
        "extent": 16,
        "n_train": 512,
        "n_val": 12,
        "train_seed": 1000,
        "val_seed": 5000,
        "train_dir": "",
        "val_dir": "",
        "window": "none",
    },
    "eval": {
        "checkpoint": "",
        "overlap": 0.5,
        "tau_mm": 1.0,
        "nsd": True,
    },
    "profile": {
        "variants": ["plain2d", "shift2d", "shift2d_multiview", "full3d"],
        "input_shape": [1, 128, 128, 128],
    },
    "sweep": {
        "fractions": ["1/2", "1/4", "1/8", "1/16", "0"],
        "variant": "shift2d",
        "parallel": False,
    },
    "demo": {
        "length": 8,
        "weights": [1.0, 0.0, -1.0],
        "trials": 0,
    },
}

WINDOWS = {"none": None, "amos": AMOS_WINDOW, "btcv": BTCV_WINDOW}


# ---------------------------------------------------------------- config


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, list):
            return value
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    if key.endswith("shift_fraction") and isinstance(value, (int, float)):
        return str(parse_fraction(value))
    if isinstance(value, str):
        return value
    raise ConfigError(f"{key}: expected a string, got {value!r}")


def merge(base, update, prefix=""):
    """Recursively merge ``update`` into a copy of ``base``; unknown keys raise :class:`ConfigError`."""
    out = copy.deepcopy(base)
    unknown = []
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            unknown.append(path)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} is a section, got {value!r}")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(path, value, base[key])
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    return out


def parse_override(text):
    """``a.b=value`` -> ``{"a": {"b": value}}``; the value is parsed as TOML, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    tree = value
    for part in reversed(key.split(".")):
        tree = {part: tree}
    return tree


def resolve_config(path=None, overrides=(), seed=None, out=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as fh:
                cfg = merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = str(out)
    return cfg


def network_config(cfg, **changes):
    n = dict(cfg["network"], **changes)
    n["stage_widths"] = tuple(n["stage_widths"])
    net_cfg = UNetConfig(**n)
    problems = net_cfg.violations()
    if problems:
        raise ConfigError(problems)
    if net_cfg.patch_extent > cfg["data"]["extent"] and not cfg["data"]["train_dir"]:
        raise ConfigError(f"patch_extent {net_cfg.patch_extent} exceeds phantom extent {cfg['data']['extent']}")
    return net_cfg


def optim_config(cfg):
    o = dict(cfg["optim"])
    o["betas"] = tuple(o["betas"])
    oc = OptimConfig(total_iters=cfg["loop"]["steps"], **o)
    problems = oc.validate()
    if problems:
        raise ConfigError(problems)
    return oc


def loop_config(cfg):
    lp = cfg["loop"]
    return LoopConfig(
        steps=lp["steps"],
        batch_size=lp["batch_size"],
        patch_extent=cfg["network"]["patch_extent"],
        fg_bias=lp["fg_bias"],
        val_every=lp["val_every"],
        val_overlap=lp["val_overlap"],
        augment=AugmentConfig() if lp["augment"] else None,
        seed=cfg["seed"],
    )


def write_resolved(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.toml", "wb") as fh:
        tomli_w.dump(cfg, fh)


# ---------------------------------------------------------------- data


def _windowed(records, window):
    lo_hi = WINDOWS.get(window, "bad")
    if lo_hi == "bad":
        raise ConfigError(f"data.window {window!r} must be one of {', '.join(WINDOWS)}")
    if lo_hi is not None:
        for r in records:
            r.intensity = hu_window(r.intensity, *lo_hi)
    return records


def phantoms(preset, extent, n, first_seed):
    if preset not in PRESETS:
        raise ConfigError(f"data.preset {preset!r} must be one of {', '.join(PRESETS)}")
    make = PRESETS[preset]
    return [generate_phantom(make(extent, seed=first_seed + i)) for i in range(n)]


def datasets(cfg):
    """``(train_records, val_records)`` from directories or preset phantoms."""
    d = cfg["data"]
    if d["train_dir"]:
        train_recs = load_records(d["train_dir"])
        if not train_recs:
            raise ConfigError(f"no volumes found in {d['train_dir']}")
    else:
        train_recs = phantoms(d["preset"], d["extent"], d["n_train"], d["train_seed"])
    if d["val_dir"]:
        val_recs = load_records(d["val_dir"])
    elif d["train_dir"]:
        val_recs = []
    else:
        val_recs = phantoms(d["preset"], d["extent"], d["n_val"], d["val_seed"])
    return _windowed(train_recs, d["window"]), _windowed(val_recs, d["window"])


# ---------------------------------------------------------------- commands


def run_training(cfg, net_cfg=None, data=None):
    """Build and train one network from a resolved config; returns ``(net, state, history)``."""
    net_cfg = net_cfg or network_config(cfg)
    train_recs, val_recs = data or datasets(cfg)
    net = build(net_cfg, seed=cfg["seed"])
    state, history = train(net, train_recs, optim_config(cfg), loop_config(cfg), val_recs or None)
    return net, state, history


def cmd_train(cfg):
    out = Path(cfg["out"])
    write_resolved(cfg, out)
    net, state, history = run_training(cfg)
    write_history(out / "history.csv", history)
    save_params(net, out / "model.sshu")
    last = history[-1]
    print(f"trained {len(history)} steps; final loss {last['loss']:.4f}; val dice {last['val_dice']}")
    return EXIT_OK


def cmd_eval(cfg):
    ev = cfg["eval"]
    if not ev["checkpoint"]:
        raise ConfigError("eval.checkpoint is required")
    net = load_network(ev["checkpoint"])
    out = Path(cfg["out"])
    _, records = datasets(cfg)
    if not records:
        raise ConfigError("no evaluation volumes (set data.val_dir or use a preset)")
    write_resolved(cfg, out)
    K = net.cfg.num_classes
    reports = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "class", "dsc", "nsd"])
        for rec in records:
            pred = sliding_window_infer(net, rec, overlap=ev["overlap"])
            rep = evaluate_case(rec.labels, pred, K, ev["tau_mm"], rec.spacing, with_nsd=ev["nsd"])
            reports.append(rep)
            for k in range(1, K):
                w.writerow([rec.id, k, _fmt(rep.dsc[k]), _fmt(rep.nsd[k])])
        agg = aggregate(reports)
        for k in range(1, K):
            w.writerow(["mean", k, _fmt(agg.dsc[k]), _fmt(agg.nsd[k])])
        w.writerow(["mean", "all", _fmt(agg.mean_dsc), _fmt(agg.mean_nsd if ev["nsd"] else None)])
    print(f"{len(records)} cases; mean DSC {agg.mean_dsc:.4f}" + (f"; mean NSD {agg.mean_nsd:.4f}" if ev["nsd"] else ""))
    return EXIT_OK


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def cmd_profile(cfg):
    p = cfg["profile"]
    shape = tuple(p["input_shape"])
    cfgs = [network_config(cfg, variant=v) for v in p["variants"]]
    try:
        rows = complexity.efficiency_table(cfgs, shape, names=list(p["variants"]))
        reports = [complexity.cost_report(c, shape) for c in cfgs]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg["out"])
    write_resolved(cfg, out)
    (out / "efficiency.csv").write_text(complexity.efficiency_csv(rows))
    for name, rep in zip(p["variants"], reports):
        (out / f"cost_{name}.csv").write_text(rep.to_csv())
    print(f"# {complexity.FLOP_CONVENTION}; input {'x'.join(map(str, shape))}")
    print(f"{'config':<20}{'params':>12}{'GFLOPs':>12}")
    for r in rows:
        print(f"{r['config']:<20}{r['params']:>12,}{r['flops'] / 1e9:>12.2f}")
    return EXIT_OK


def _sweep_one(args):
    cfg, fraction = args
    net_cfg = network_config(cfg, variant=cfg["sweep"]["variant"], shift_fraction=fraction)
    net, _, history = run_training(cfg, net_cfg)
    return history[-1]["val_dice"]


def cmd_sweep_shift(cfg):
    sw = cfg["sweep"]
    if sw["variant"] not in ("shift2d", "shift2d_multiview"):
        raise ConfigError(f"sweep.variant must be a shifting variant, got {sw['variant']!r}")
    try:
        fractions = [str(parse_fraction(f)) for f in sw["fractions"]]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"sweep.fractions: {exc}") from None
    for f in fractions:
        network_config(cfg, variant=sw["variant"], shift_fraction=f)
    out = Path(cfg["out"])
    write_resolved(cfg, out)
    jobs = [(cfg, f) for f in fractions]
    if sw["parallel"]:
        with ProcessPoolExecutor() as pool:
            scores = list(pool.map(_sweep_one, jobs))
    else:
        scores = [_sweep_one(j) for j in jobs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "val_dice"])
        for f, s in zip(fractions, scores):
            w.writerow([f, _fmt(s)])
            print(f"fraction {f:>5}: val dice {_fmt(s)}")
    return EXIT_OK


def cmd_shift_demo(cfg, explicit_out):
    d = cfg["demo"]
    if len(d["weights"]) != 3:
        raise ConfigError("demo.weights needs exactly three taps")
    if d["length"] < 3:
        raise ConfigError("demo.length must be >= 3")
    rng = np.random.default_rng(cfg["seed"])
    x = np.arange(1, d["length"] + 1, dtype=np.float64)
    direct, decomposed = shift_mac_equivalence(x, d["weights"])
    ok = np.array_equal(direct, decomposed)
    w1, w2, w3 = d["weights"]
    print(f"Y = {w1:g}*X[i-1] + {w2:g}*X[i] + {w3:g}*X[i+1]  (zero padded)")
    print(f"{'i':>3} {'x':>10} {'direct':>12} {'shift+MAC':>12}")
    for i in range(len(x)):
        print(f"{i:>3} {x[i]:>10g} {direct[i]:>12g} {decomposed[i]:>12g}")
    print("equal" if ok else "NOT equal")
    worst = 0.0
    for _ in range(d["trials"]):
        xs = rng.standard_normal(d["length"])
        ws = rng.standard_normal(3)
        a, b = shift_mac_equivalence(xs, ws)
        worst = max(worst, float(np.max(np.abs(a - b))))
    if d["trials"]:
        ok = ok and worst <= 1e-6
        print(f"{d['trials']} random trials: max |direct - decomposed| = {worst:.3g} ({'pass' if worst <= 1e-6 else 'FAIL'})")
    if explicit_out:
        out = Path(cfg["out"])
        write_resolved(cfg, out)
        with open(out / "shift_demo.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "x", "direct", "decomposed"])
            for i in range(len(x)):
                w.writerow([i, repr(float(x[i])), repr(float(direct[i])), repr(float(decomposed[i]))])
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------- argparse


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument(
        "--set", dest="overrides", action="append", default=argparse.SUPPRESS,
        metavar="KEY=VALUE", help="override a config key, e.g. optim.lr=0.01",
    )
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="sshunet", parents=[common], description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one network, write checkpoint and history.csv")
    ev = sub.add_parser("eval", parents=[common], help="per-case, per-class DSC / NSD of a checkpoint")
    ev.add_argument("--checkpoint", default=argparse.SUPPRESS)
    pr = sub.add_parser("profile", parents=[common], help="params / FLOPs per variant")
    pr.add_argument("--input-shape", type=int, nargs="+", default=argparse.SUPPRESS, metavar="N")
    sw = sub.add_parser("sweep-shift", parents=[common], help="validation Dice per shift fraction")
    sw.add_argument("--fractions", nargs="+", default=argparse.SUPPRESS)
    sw.add_argument("--parallel", action="store_true", default=argparse.SUPPRESS)
    demo = sub.add_parser("shift-demo", parents=[common], help="direct 1D conv vs shift + multiply-accumulate")
    demo.add_argument("--length", type=int, default=argparse.SUPPRESS)
    demo.add_argument("--weights", type=float, nargs=3, default=argparse.SUPPRESS)
    demo.add_argument("--trials", type=int, default=argparse.SUPPRESS)
    return parser


COMMAND_FLAGS = {
    "checkpoint": ("eval", "checkpoint"),
    "input_shape": ("profile", "input_shape"),
    "fractions": ("sweep", "fractions"),
    "parallel": ("sweep", "parallel"),
    "length": ("demo", "length"),
    "weights": ("demo", "weights"),
    "trials": ("demo", "trials"),
}


def main(argv=None):
    args = vars(build_parser().parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.get("verbose") else logging.WARNING, format="%(message)s")
    command = args["command"]
    try:
        flags = {}
        for name, (section, key) in COMMAND_FLAGS.items():
            if name in args:
                flags.setdefault(section, {})[key] = args[name]
        cfg = resolve_config(args.get("config"), args.get("overrides", ()), args.get("seed"), args.get("out"))
        cfg = merge(cfg, flags)
        if command == "train":
            return cmd_train(cfg)
        if command == "eval":
            return cmd_eval(cfg)
        if command == "profile":
            return cmd_profile(cfg)
        if command == "sweep-shift":
            return cmd_sweep_shift(cfg)
        return cmd_shift_demo(cfg, "out" in args)
    except (ConfigError, SpecError, ArgumentError) as exc:
        msgs = exc.violations if isinstance(exc, ConfigError) else [str(exc)]
        for m in msgs:
            print(f"config error: {m}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, CheckpointError, FormatError, UnsupportedError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
