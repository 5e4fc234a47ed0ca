"""Command-line entry point: ``physattn {gen-data,train,eval,sweep,attn-export}``.

Exit codes: 0 success, 2 usage or configuration error, 3 input-data error,
4 numerical failure, 5 sweep finished with failed points.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import write_attention_csv
from .data import (
    PRESETS,
    TRAIN_PRESET,
    Dataset,
    WaveScenario,
    generate_dataset,
    normalize,
    preset,
    read_dataset,
    window_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .evaluation import evaluate_forecast, peak_valley_errors, write_jsonl, write_pairs_csv
from .model import ModelConfig, build, config_dict, load_checkpoint, save_checkpoint
from .svg import heatmap, overlay, write_svg
from .training import (
    SWEEP_KINDS,
    RunCache,
    TrainConfig,
    baselines,
    eval_loss,
    forecast_physical,
    parse_grid,
    sweep,
    train,
    write_history_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5

log = logging.getLogger("physattn")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"lam", "seed"}
_ALIASES = {"lambda": "lam"}


class DataInputError(Exception):
    """Wraps data-side failures so they map to exit code 3."""


def env_seed() -> int:
    raw = os.environ.get("PHYSATTN_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"PHYSATTN_SEED must be an integer, got {raw!r}") from exc


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def split_config(kv: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Route keys to the model or optimiser configuration; unknown keys are errors."""
    model_kv, train_kv = {}, {}
    for key, raw in kv.items():
        key = _ALIASES.get(key, key)
        if key in _MODEL_KEYS:
            model_kv[key] = raw
        elif key in _TRAIN_KEYS:
            train_kv[key] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    mcfg = ModelConfig.from_mapping(model_kv)
    typed = {}
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in train_kv.items():
        typ = tfields[key]
        try:
            if raw.lower() == "none" and "None" in str(typ):
                typed[key] = None
            elif typ == "int":
                typed[key] = int(raw)
            else:
                typed[key] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    tcfg = TrainConfig(**typed, seed=mcfg.seed)
    mcfg.validate()
    tcfg.validate()
    return mcfg, tcfg


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list,
                   seeds: list, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seeds": seeds,
        "version": __version__,
        "wall_time_s": time.time() - started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _load_data(path: str | Path) -> Dataset:
    try:
        return read_dataset(path)
    except DataError as exc:
        raise DataInputError(str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise DataInputError(f"{path}: {exc}") from exc


def _check_channels(mcfg: ModelConfig, ds: Dataset) -> None:
    if len(ds.wave_names) != mcfg.wave_channels or len(ds.resp_names) != mcfg.resp_channels:
        raise DataInputError(
            f"checkpoint expects {mcfg.wave_channels} wave / {mcfg.resp_channels} response channels, "
            f"data has {len(ds.wave_names)} / {len(ds.resp_names)}")


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (OSError, struct.error, UnicodeDecodeError) as exc:
        raise DataInputError(f"cannot read checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    started = time.time()
    seed = env_seed() if args.seed is None else args.seed
    if args.scenario in PRESETS:
        scen = preset(args.scenario, seed=seed)
    elif Path(args.scenario).is_file():
        kv = parse_kv_file(args.scenario)
        try:
            scen = WaveScenario.from_meta({f"scenario.{k}": v for k, v in kv.items()})
        except (DataError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario file: {exc}") from exc
        scen = replace(scen, seed=seed).validate()
    else:
        raise ConfigError(f"unknown preset {args.scenario!r}; choose from {', '.join(PRESETS)}")
    ds = generate_dataset(scen)
    out = Path(args.out)
    data_path, meta_path = write_dataset(ds, out)
    write_manifest(out, "gen-data", scen.to_meta(), {"scenario": args.scenario},
                   [data_path.name, meta_path.name], [seed], started)
    print(f"wrote {data_path} ({len(ds)} steps, hs={scen.hs:g} m, tp={scen.tp:g} s)")
    return EXIT_OK


def _resolve_train_config(args, ds: Dataset) -> tuple[ModelConfig, TrainConfig]:
    kv = parse_kv_file(args.config) if args.config else {}
    if "dt" not in kv:
        kv["dt"] = repr(ds.dt)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    elif "seed" not in kv:
        kv["seed"] = str(env_seed())
    mcfg, tcfg = split_config(kv)
    if abs(mcfg.dt - ds.dt) > 1e-12:
        raise ConfigError(f"config dt {mcfg.dt} does not match data dt {ds.dt}")
    mcfg = replace(mcfg, wave_channels=len(ds.wave_names), resp_channels=len(ds.resp_names),
                   out_channels=len(ds.resp_names)).validate()
    return mcfg, tcfg


def cmd_train(args) -> int:
    started = time.time()
    ds = _load_data(args.data)
    mcfg, tcfg = _resolve_train_config(args, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(mcfg)
    windows = window_dataset(normalize(ds), mcfg.window, mcfg.horizon, tcfg.stride)
    if tcfg.eval_stride != tcfg.stride:
        ev = window_dataset(normalize(ds), mcfg.window, mcfg.horizon, tcfg.eval_stride)
        windows = {"train": windows["train"], "val": ev["val"], "test": ev["test"]}
    res = train(model, windows, tcfg, divergence_path=out / "diverged.ckpt")
    save_checkpoint(model, out / "model.ckpt")
    write_history_csv(res.history, out / "history.csv")
    summary = {"best_val": res.best_val, "best_epoch": res.best_epoch, "epochs_run": len(res.history),
               "initial_train_loss": res.initial_train_loss, "initial_val_loss": res.initial_val_loss,
               "stopped_early": res.stopped_early}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    config = {"model": config_dict(mcfg), "train": {f.name: getattr(tcfg, f.name) for f in fields(tcfg)}}
    write_manifest(out, "train", config, {"data": str(args.data)},
                   ["model.ckpt", "history.csv", "train_summary.json"], [mcfg.seed], started)
    print(f"best val loss {res.best_val:.6g} at epoch {res.best_epoch}; wrote {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    model = _load_ckpt(args.ckpt)
    cfg = model.config
    if args.horizon is not None and args.horizon != cfg.horizon:
        raise ConfigError(f"checkpoint forecasts {cfg.horizon} steps, --horizon asked for {args.horizon}")
    ds = _load_data(args.data)
    _check_channels(cfg, ds)
    stats_ds = _load_data(args.train_data) if args.train_data else ds
    stats = stats_ds.stats
    src_name = stats_ds.meta.get("scenario.name", "custom")
    tgt_name = ds.meta.get("scenario.name", "custom")
    tag = "zero_shot" if args.train_data and src_name != tgt_name else "in_distribution"

    y, yhat, raw_w = forecast_physical(model, ds, stats, "test", args.stride)
    names = ds.resp_names
    report = evaluate_forecast(y, yhat, names)
    train_mean = np.array([stats[n][0] for n in names])
    base = baselines(raw_w, train_mean, names)
    val_w = window_dataset(normalize(replace(ds, stats=stats)), cfg.window, cfg.horizon, args.stride)["val"]
    val_loss = eval_loss(model, val_w, cfg.train_lambda)

    extrema = {}
    for c, name in enumerate(names):
        pv = peak_valley_errors(y[:, 0, c], yhat[:, 0, c])
        extrema[name] = {"peak_mae": pv.peak_mae, "valley_mae": pv.valley_mae,
                         "n_peaks": int(pv.peaks.size), "n_valleys": int(pv.valleys.size)}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = {"tag": tag, "scenario": tgt_name, "trained_on": src_name, "horizon": cfg.horizon,
           "ablation": cfg.ablation, "metrics": report.to_dict(), "val_loss": val_loss,
           "peak_valley": extrema, "baselines": {k: v.to_dict() for k, v in base.items()}}
    write_jsonl([row], out / "report.jsonl")
    write_pairs_csv(y, yhat, names, out / "pairs.csv")
    outputs = ["report.jsonl", "pairs.csv"]
    t_axis = ds.t[raw_w.starts + cfg.window]  # time of the first forecast step
    for c, name in enumerate(names):
        fname = f"overlay_{name}.svg"
        write_svg(overlay(t_axis, {"measured": y[:, 0, c], "predicted": yhat[:, 0, c]},
                          title=f"{name} one-step-ahead ({tag})"), out / fname)
        outputs.append(fname)
    write_manifest(out, "eval", {"model": config_dict(cfg), "stride": args.stride},
                   {"ckpt": str(args.ckpt), "data": str(args.data), "train_data": args.train_data},
                   outputs, [cfg.seed], started)
    print(f"[{tag}] {tgt_name}: mae {report.mae:.5g} rmse {report.rmse:.5g} r2 {report.r2:.4f} "
          f"smae {report.smae:.5g} (persistence rmse {base['persistence'].rmse:.5g})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    kv = parse_kv_file(args.config) if args.config else {}
    base_seed = args.seed if args.seed is not None else int(kv.pop("seed", env_seed()))
    kv.pop("seed", None)
    mcfg, tcfg = split_config(kv)
    grid = parse_grid(args.kind, args.grid)
    data = _load_data(args.data) if args.data else generate_dataset(preset(TRAIN_PRESET, seed=base_seed))
    mcfg = replace(mcfg, dt=data.dt, wave_channels=len(data.wave_names), resp_channels=len(data.resp_names),
                   out_channels=len(data.resp_names)).validate()
    finetune = None
    if args.finetune_config:
        _, finetune = split_config(parse_kv_file(args.finetune_config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = sweep(args.kind, grid, mcfg, tcfg, data=data, seeds=args.seeds, base_seed=base_seed, out_dir=out,
                cache=RunCache(args.cache), finetune=finetune)
    outputs = ["reports.jsonl", "baselines.jsonl", "summary.csv"] + (["failures.jsonl"] if res.failures else [])
    config = {"model": config_dict(mcfg), "train": {f.name: getattr(tcfg, f.name) for f in fields(tcfg)},
              "kind": args.kind, "grid": grid}
    write_manifest(out, "sweep", config, {"data": args.data}, outputs,
                   [base_seed + r for r in range(args.seeds)], started)
    print(f"{len(res.rows)} rows, {len(res.failures)} failed points; wrote {out / 'summary.csv'}")
    for f in res.failures:
        print(f"failed: point={f['point']} seed={f['seed']}: {f['error']}", file=sys.stderr)
    return EXIT_PARTIAL if res.failures else EXIT_OK


def cmd_attn_export(args) -> int:
    started = time.time()
    model = _load_ckpt(args.ckpt)
    cfg = model.config
    ds = _load_data(args.data)
    _check_channels(cfg, ds)
    stats = (_load_data(args.train_data) if args.train_data else ds).stats
    norm = window_dataset(normalize(replace(ds, stats=stats)), cfg.window, cfg.horizon, 1)["test"]
    if not 0 <= args.window < len(norm):
        raise ConfigError(f"window index {args.window} out of range [0, {len(norm)})")
    if args.which != "gcf":
        if not 0 <= args.layer < cfg.layers:
            raise ConfigError(f"layer {args.layer} out of range [0, {cfg.layers})")
        if not 0 <= args.head < cfg.heads:
            raise ConfigError(f"head {args.head} out of range [0, {cfg.heads})")
    if args.which == "gcf" and cfg.ablation == "no_gcf":
        raise ConfigError("a no_gcf checkpoint has no pooling weights to export")
    capture: dict = {}
    model.forward(norm.inputs_wave[args.window], norm.inputs_resp[args.window], capture=capture)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.which == "gcf":
        weights = capture["gcf"][0].reshape(1, -1)
        bias = None
    else:
        weights = capture[args.which][args.layer][args.head]
        layer = model.layers[args.layer]
        mh = {"dbsa": layer.dbsa, "bca_stage1": layer.bca1, "bca_stage2": layer.bca2}[args.which]
        bias = mh.bias_matrix(cfg.window).data[args.head]
    write_attention_csv(weights, out / "weights.csv")
    outputs = ["weights.csv", "weights.svg"]
    label = f"{args.which} layer {args.layer} head {args.head} window {args.window}"
    write_svg(heatmap(weights, title=label), out / "weights.svg")
    if bias is not None:
        write_attention_csv(bias, out / "bias.csv")
        write_svg(heatmap(bias, title=f"{args.which} bias layer {args.layer} head {args.head}"), out / "bias.svg")
        outputs += ["bias.csv", "bias.svg"]
    write_manifest(out, "attn-export", {"model": config_dict(cfg), "which": args.which, "layer": args.layer,
                                        "head": args.head, "window": args.window},
                   {"ckpt": str(args.ckpt), "data": str(args.data)}, outputs, [cfg.seed], started)
    print(f"wrote {out / 'weights.csv'} ({weights.shape[0]}x{weights.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="physattn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesise a wave/response dataset")
    g.add_argument("--scenario", required=True, help=f"preset ({', '.join(PRESETS)}) or key=value file")
    g.add_argument("--seed", type=int, default=None, help="random-phase seed (default $PHYSATTN_SEED or 0)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value file (model and optimiser keys)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--train-data", help="dataset whose normalisation the model was trained with")
    e.add_argument("--horizon", type=int, default=None, help="must match the checkpoint when given")
    e.add_argument("--stride", type=int, default=1, help="window stride for evaluation")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train/evaluate a grid of configurations over several seeds")
    s.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    s.add_argument("--grid", help="comma list or a..b integer range (default: the standard grid)")
    s.add_argument("--data", help="training dataset directory (default: generated training preset)")
    s.add_argument("--config")
    s.add_argument("--finetune-config", help="optimiser settings for stiffness fine-tuning")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--seed", type=int, default=None, help="base seed; replicate r uses base + r")
    s.add_argument("--cache", help="directory for reusable trained runs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("attn-export", help="export one captured attention matrix as CSV and SVG")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--train-data")
    a.add_argument("--window", type=int, default=0, help="test-split window index")
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--head", type=int, default=0)
    a.add_argument("--which", choices=("dbsa", "bca_stage1", "bca_stage2", "gcf"), default="dbsa")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attn_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataInputError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
