"""Command-line entry point: ``gridcast {synth,train,eval,tune}``.

Every option can also come from ``--config FILE`` holding ``key = value``
lines (``#`` starts a comment); keys are option names with dashes or
underscores. Flags override the file, the file overrides defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigurationError, FormatError, GridcastError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _float_pair(text):
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected lo,hi got {text!r}")
    return tuple(parts)


def _day_range(text):
    a, _, b = str(text).partition(":")
    if not _:
        raise ValueError(f"expected START:STOP, got {text!r}")
    return int(a), int(b)


def _date(text):
    return datetime.strptime(str(text), "%Y-%m-%d").replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class Opt:
    name: str
    type: object = str
    default: object = None
    help: str = ""
    multi: bool = False

    @property
    def key(self):
        return self.name.replace("-", "_")


SYNTH = [
    Opt("out", str, None, "output GCF1 file (required)"),
    Opt("h", int, 64, "grid height"),
    Opt("w", int, 64, "grid width"),
    Opt("channels", int, 3),
    Opt("days", int, 30),
    Opt("road-density", float, 0.2),
    Opt("hour-amplitude", float, 0.5),
    Opt("hour-roughness", float, 0.5),
    Opt("week-amplitude", float, 0.3),
    Opt("month-amplitude", float, 0.0),
    Opt("noise", float, 0.08),
    Opt("persistence", float, 0.95),
    Opt("dropout", float, 0.0),
    Opt("start", _date, "2019-01-07", "first day, YYYY-MM-DD (UTC midnight)"),
    Opt("interval", int, 5, "minutes per frame"),
    Opt("city", str, None, "city name (default: file stem)"),
    Opt("seed", int, 0),
]

MODEL = [
    Opt("layers", int, 2),
    Opt("hidden", int, 16),
    Opt("history", int, 4),
    Opt("activation", str, "elu"),
    Opt("kernel-size", int, 1),
    Opt("hour-bins", int, 12),
]

SPLITS = [
    Opt("data", str, None, "GCF1 movie (required)"),
    Opt("train-days", _day_range, None, "START:STOP (default first 70%% of days)"),
    Opt("val-days", _day_range, None, "START:STOP (default next 15%%)"),
    Opt("slots", _int_list, None, "comma-separated target slots (default 5 evenly spaced)"),
    Opt("day-fraction", float, 0.2, "fraction of training days per epoch"),
    Opt("plateau-patience", int, 2),
    Opt("plateau-factor", float, 0.2),
    Opt("early-stop", int, 5, "early-stopping patience in epochs"),
    Opt("threads", int, 1),
    Opt("seed", int, 0),
]

TRAIN = SPLITS + MODEL + [
    Opt("model", str, "tr+b", "tr, tr+b or pomponia"),
    Opt("biases", str, None, "bias tables for tr+b/pomponia, e.g. LxH+WxH+M"),
    Opt("lr", float, 3e-3),
    Opt("max-epochs", int, 50),
    Opt("out", str, None, "checkpoint path (required)"),
    Opt("log", str, None, "training log CSV (default: OUT.log.csv)"),
]

EVAL = [
    Opt("data", str, None, "GCF1 movie (required)"),
    Opt("checkpoint", str, None, "NAME=PATH or PATH; repeatable", multi=True),
    Opt("baseline", str, None, "zeros, naive, seasonal or average; repeatable", multi=True),
    Opt("days", _day_range, None, "START:STOP (default last 15%% of days)"),
    Opt("slots", _int_list, None),
    Opt("city", str, None),
    Opt("csv", str, None, "also write the table as CSV"),
    Opt("threads", int, 1),
    Opt("seed", int, 0),
]

TUNE = SPLITS + [
    Opt("R", int, 27, "maximum budget in epochs"),
    Opt("eta", int, 3),
    Opt("lr-range", _float_pair, "1e-4,1e-1"),
    Opt("layers-set", _int_list, "1,2,3"),
    Opt("hidden-set", _int_list, "8,16,32"),
    Opt("kernel-set", _int_list, "1,3"),
    Opt("history-set", _int_list, "2,4,6"),
    Opt("bias-set", _str_list, "LxH+WxH+M,LxH,WxH+M,none"),
    Opt("hour-bins", int, 12),
    Opt("trace", str, None, "trace CSV path (required)"),
    Opt("best", str, None, "best-config file (default: TRACE.best.txt)"),
]

COMMANDS = {"synth": SYNTH, "train": TRAIN, "eval": EVAL, "tune": TUNE}


def read_config_file(path, opts):
    known = {o.key: o for o in opts}
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key = key.strip().replace("-", "_")
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            value = value.strip()
            values[key] = value.split(",") if known[key].multi else value
    return values


def resolve(command, argv_ns) -> dict:
    """Merge defaults, config file and flags; convert every value."""
    opts = COMMANDS[command]
    merged = {}
    for o in opts:
        merged[o.key] = o.default
    if getattr(argv_ns, "config", None):
        if not os.path.exists(argv_ns.config):
            raise UsageError(f"config file not found: {argv_ns.config}")
        merged.update(read_config_file(argv_ns.config, opts))
    for o in opts:
        if hasattr(argv_ns, o.key):
            merged[o.key] = getattr(argv_ns, o.key)
    out = {}
    for o in opts:
        v = merged[o.key]
        if v is None:
            out[o.key] = [] if o.multi else None
            continue
        try:
            if o.multi:
                out[o.key] = [o.type(x) for x in (v if isinstance(v, list) else [v])]
            elif isinstance(v, str) or o.type in (int, float):
                out[o.key] = o.type(v)
            else:
                out[o.key] = v
        except (TypeError, ValueError) as e:
            raise UsageError(f"--{o.name}: {e}") from e
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="gridcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        for o in opts:
            if o.multi:
                p.add_argument(f"--{o.name}", dest=o.key, action="append",
                               default=argparse.SUPPRESS, help=o.help)
            else:
                p.add_argument(f"--{o.name}", dest=o.key, default=argparse.SUPPRESS,
                               help=o.help or f"default: {o.default}")
    return parser


def print_header(command, cfg):
    print(f"# gridcast {command}", file=sys.stderr)
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, datetime):
            v = v.date().isoformat()
        print(f"# {k} = {v}", file=sys.stderr)


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _load(path):
    from .griddata import load_movie

    if not os.path.exists(path):
        raise UsageError(f"data file not found: {path}")
    try:
        return load_movie(path)
    except FormatError as e:
        raise UsageError(f"{path}: {e}") from e


def _split_days(cfg, n_days):
    n_train = max(1, int(0.7 * n_days))
    n_val = max(1, int(0.85 * n_days)) - n_train
    train = cfg["train_days"] or (0, n_train)
    val = cfg["val_days"] or (n_train, n_train + max(1, n_val))
    for name, (a, b) in (("train-days", train), ("val-days", val)):
        if not 0 <= a < b <= n_days:
            raise UsageError(f"--{name} {a}:{b} is not a non-empty range within {n_days} days")
    return range(*train), range(*val)


def _slots(cfg, dataset, history=0):
    from .griddata import default_slots

    slots = cfg["slots"] or default_slots(dataset.frames_per_day)
    for s in slots:
        if s - max(history, 3) < 0 or s + 3 > dataset.frames_per_day:
            raise UsageError(f"slot {s} leaves no room for history/targets within a day")
    return slots


def _train_config(cfg, lr=None, max_epochs=None):
    from .training import TrainConfig

    tc = TrainConfig(
        learning_rate=cfg["lr"] if lr is None else lr,
        epoch_day_fraction=cfg["day_fraction"],
        plateau_patience=cfg["plateau_patience"],
        plateau_factor=cfg["plateau_factor"],
        early_stop_patience=cfg["early_stop"],
        max_epochs=cfg["max_epochs"] if max_epochs is None else max_epochs,
        seed=cfg["seed"],
    )
    try:
        tc.validate()
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    return tc


def cmd_synth(cfg):
    from .griddata import SynthSpec, save_movie, synthesize_city

    _require(cfg, "out")
    spec = SynthSpec(
        height=cfg["h"], width=cfg["w"], channels=cfg["channels"], n_days=cfg["days"],
        road_density=cfg["road_density"], hour_amplitude=cfg["hour_amplitude"],
        hour_roughness=cfg["hour_roughness"], week_amplitude=cfg["week_amplitude"],
        month_amplitude=cfg["month_amplitude"], noise=cfg["noise"],
        persistence=cfg["persistence"], dropout=cfg["dropout"], seed=cfg["seed"],
        start=cfg["start"], interval_minutes=cfg["interval"],
        city_name=cfg["city"] or os.path.splitext(os.path.basename(cfg["out"]))[0],
    )
    try:
        spec.validate()
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    print_header("synth", cfg)
    ds = synthesize_city(spec)
    save_movie(ds, cfg["out"])
    on_road = float(np.mean(ds.raw.any(axis=(0, 3))))
    T, H, W, C = ds.shape
    print(f"wrote {cfg['out']}: T={T} H={H} W={W} C={C} on_road_fraction={on_road:.4f}")


def _model_params(cfg, dataset, seed):
    from .hypertune import parse_biases
    from .griddata import clock_index
    from .models import BIAS_KINDS, TRConfig, init_params, init_pomponia

    kind = cfg["model"]
    if kind not in ("tr", "tr+b", "pomponia"):
        raise UsageError(f"--model must be tr, tr+b or pomponia, got {kind!r}")
    try:
        tr = TRConfig(cfg["layers"], cfg["hidden"], cfg["history"], cfg["activation"],
                      cfg["kernel_size"], dataset.channels)
        biases = () if kind == "tr" else (parse_biases(cfg["biases"]) if cfg["biases"] else BIAS_KINDS)
        clock_index(dataset.start_time, cfg["hour_bins"])
        make = init_pomponia if kind == "pomponia" else init_params
        return make(tr, seed, dataset.grid, biases, cfg["hour_bins"])
    except ConfigurationError as e:
        raise UsageError(str(e)) from e


def cmd_train(cfg):
    from .models import save_params
    from .training import train

    _require(cfg, "data", "out")
    dataset = _load(cfg["data"])
    train_days, val_days = _split_days(cfg, dataset.n_days)
    params = _model_params(cfg, dataset, cfg["seed"])
    slots = _slots(cfg, dataset, cfg["history"])
    tconf = _train_config(cfg)
    print_header("train", cfg)
    best, log = train(params, dataset, train_days, val_days, tconf, slots, threads=cfg["threads"])
    log_path = cfg["log"] or cfg["out"] + ".log.csv"
    save_params(best, cfg["out"])
    with open(log_path, "w") as fh:
        fh.write(log.to_csv())
    print(f"epochs={len(log)} best_epoch={log.best_epoch} "
          f"val_mse={log.val_mse[log.best_epoch]:.6g} checkpoint={cfg['out']} log={log_path}")


def cmd_eval(cfg):
    from .baselines_eval import BaselineKind, MetricTable, baseline_predictor, emit_report, evaluate
    from .griddata import make_example
    from .models import load_params
    from .training import predict

    _require(cfg, "data")
    dataset = _load(cfg["data"])
    if not cfg["checkpoint"] and not cfg["baseline"]:
        raise UsageError("nothing to evaluate: pass --checkpoint and/or --baseline")
    methods = []
    for b in cfg["baseline"]:
        try:
            methods.append((b, baseline_predictor(BaselineKind(b))))
        except ValueError as e:
            raise UsageError(f"unknown baseline {b!r}") from e
    for entry in cfg["checkpoint"]:
        name, sep, path = entry.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(entry))[0], entry
        if not os.path.exists(path):
            raise UsageError(f"checkpoint not found: {path}")
        try:
            params = load_params(path)
        except FormatError as e:
            raise UsageError(f"{path}: {e}") from e
        nbins = getattr(params, "value", params).n_hour_bins
        h = params.config.history

        def model_predictor(ds, day, slot, params=params, h=h, nbins=nbins):
            return predict(params, make_example(ds, day, slot, h, nbins))

        methods.append((name, model_predictor))
    n = dataset.n_days
    days = cfg["days"] or (int(0.85 * n) if n > 1 else 0, n)
    if not 0 <= days[0] < days[1] <= n:
        raise UsageError(f"--days {days[0]}:{days[1]} is not a non-empty range within {n} days")
    slots = _slots(cfg, dataset)
    print_header("eval", cfg)
    city = cfg["city"] or dataset.city_name
    from .baselines_eval import channel_names

    table = MetricTable(channels=channel_names(dataset.channels))
    for name, fn in methods:
        row = evaluate(fn, dataset, range(*days), slots, threads=cfg["threads"],
                       skip_missing=(name == "seasonal"))
        table.add(name, city, row)
    text = emit_report(table, "markdown")
    if cfg["csv"]:
        emit_report(table, "csv", cfg["csv"])
    sys.stdout.write(text)


def cmd_tune(cfg):
    from .hypertune import (
        SearchSpace, format_biases, parse_biases, run_search, trace_csv, training_evaluator,
    )

    _require(cfg, "data", "trace")
    dataset = _load(cfg["data"])
    train_days, val_days = _split_days(cfg, dataset.n_days)
    try:
        space = SearchSpace(
            learning_rate=cfg["lr_range"], n_layers=tuple(cfg["layers_set"]),
            hidden_channels=tuple(cfg["hidden_set"]), kernel_size=tuple(cfg["kernel_set"]),
            history=tuple(cfg["history_set"]),
            bias_combination=tuple(parse_biases(b) for b in cfg["bias_set"]),
        )
        space.validate()
        from .hypertune import hyperband_schedule

        hyperband_schedule(cfg["R"], cfg["eta"])
        from .griddata import clock_index

        clock_index(dataset.start_time, cfg["hour_bins"])
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    slots = _slots(cfg, dataset, max(space.history))
    base = _train_config({**cfg, "lr": 1e-3, "max_epochs": 1})
    print_header("tune", cfg)
    evaluator = training_evaluator(dataset, train_days, val_days, slots, base, cfg["hour_bins"])
    best, trace = run_search(space, evaluator, cfg["R"], cfg["eta"], cfg["seed"], cfg["threads"])
    best_path = cfg["best"] or cfg["trace"] + ".best.txt"
    with open(cfg["trace"], "w") as fh:
        fh.write(trace_csv(trace))
    c = best.config
    with open(best_path, "w") as fh:
        fh.write(f"lr = {c.lr!r}\nlayers = {c.n_layers}\nhidden = {c.hidden_channels}\n"
                 f"kernel_size = {c.kernel_size}\nhistory = {c.history}\n"
                 f"biases = {format_biases(c.biases)}\n# val_mse = {best.val_mse!r}\n")
    print(f"trials={len(trace)} best_trial={best.trial_id} val_mse={best.val_mse:.6g} "
          f"trace={cfg['trace']} best={best_path}")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "tune": cmd_tune}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        cfg = resolve(ns.command, ns)
        HANDLERS[ns.command](cfg)
    except UsageError as e:
        print(f"gridcast {ns.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (GridcastError, OSError) as e:
        print(f"gridcast {ns.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
