"""Adam + cosine annealing + early stopping, and the experiment sweeps.

Seed policy: replicate ``r`` of every sweep point trains with seed
``base_seed + r`` (model init, shuffling and dropout all derive from it), so
grid points are compared on common random numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffkernel as dk
from .data import (
    PERTURBED_MODULI,
    TRAIN_PRESET,
    ZERO_SHOT_PRESETS,
    Dataset,
    WindowBatch,
    denormalize,
    generate_dataset,
    normalize,
    normalize_values,
    preset,
    stiffness_scenario,
    window_dataset,
)
from .errors import ConfigError, DivergenceError, TrainingError
from .evaluation import MetricReport, baselines, evaluate_forecast, write_jsonl, write_summary_csv
from .model import ABLATIONS, ModelConfig, PhysAttnNet, build, checkpoint_bytes, model_from_bytes
from .spectral import hybrid_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs_max: int = 50
    batch: int = 32
    patience: int = 10
    lam: float | None = None  # None: take it from the model config
    seed: int = 0
    lr_min: float | None = None  # None: lr / 100
    clip_norm: float = 5.0
    stride: int = 1  # training-window stride
    eval_stride: int = 1  # validation/test-window stride
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            problems.append(f"patience must be >= 1, got {self.patience}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1, got {self.batch}")
        if self.epochs_max < 1:
            problems.append(f"epochs_max must be >= 1, got {self.epochs_max}")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            problems.append(f"lambda must lie in [0, 1], got {self.lam}")
        if self.stride < 1 or self.eval_stride < 1:
            problems.append("strides must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def floor(self) -> float:
        return self.lr / 100.0 if self.lr_min is None else self.lr_min

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr`` at epoch 0 to ``lr_min`` at the final epoch."""
    if not 0 <= epoch < cfg.epochs_max:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs_max})")
    if cfg.epochs_max == 1:
        return cfg.lr
    lo = cfg.floor
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs_max - 1)))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for p in params:
        if p.value.grad is None:
            raise TrainingError(f"parameter {p.name} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.value.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value.data = p.value.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.value.grad**2)) for p in params))
    if norm > max_norm:
        s = max_norm / norm
        for p in params:
            p.value.grad = p.value.grad * s
    return norm


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when patience is exhausted."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.since = 0

    def update(self, epoch: int, val: float) -> bool:
        if val < self.best:
            self.best, self.best_epoch, self.since = val, epoch, 0
            return False
        self.since += 1
        return self.since >= self.patience


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    best_state: dict
    best_val: float
    best_epoch: int
    history: list
    initial_train_loss: float
    initial_val_loss: float
    stopped_early: bool
    wall_time: float = 0.0


def predict(model: PhysAttnNet, windows: WindowBatch, chunk: int = 256) -> np.ndarray:
    """Eval-mode forecasts for every window (same units as the inputs)."""
    outs = []
    for s in range(0, len(windows), chunk):
        outs.append(model.forward(windows.inputs_wave[s:s + chunk], windows.inputs_resp[s:s + chunk]).data)
    if not outs:
        return np.zeros((0, model.config.horizon, model.config.out_channels))
    return np.concatenate(outs, axis=0)


def eval_loss(model: PhysAttnNet, windows: WindowBatch, lam: float, chunk: int = 256) -> float:
    """Eval-mode hybrid loss over all windows (chunk means weighted by size)."""
    total, n = 0.0, 0
    for s in range(0, len(windows), chunk):
        pred = model.forward(windows.inputs_wave[s:s + chunk], windows.inputs_resp[s:s + chunk])
        k = pred.shape[0]
        total += hybrid_loss(pred, dk.Tensor(windows.targets[s:s + chunk]), lam).item() * k
        n += k
    return total / n


def train(model: PhysAttnNet, windows: dict, tcfg: TrainConfig,
          on_epoch: Callable[[HistoryRow], None] | None = None,
          divergence_path: str | Path | None = None) -> TrainResult:
    """Train on ``windows['train']``, select on ``windows['val']`` (normalised data).

    Returns the best-validation parameters; ``model`` is left holding them.
    """
    tcfg.validate()
    lam = model.config.train_lambda if tcfg.lam is None else tcfg.lam
    if model.config.ablation == "no_freq_loss":
        lam = 0.0
    train_w, val_w = windows["train"], windows["val"]
    if len(train_w) == 0 or len(val_w) == 0:
        raise ConfigError("train and validation splits must both contain windows")
    rng = np.random.default_rng(tcfg.seed)
    params = model.trainable()
    adam = AdamState()
    stopper = EarlyStopping(tcfg.patience)
    history: list[HistoryRow] = []
    t0 = time.perf_counter()
    init_train = eval_loss(model, train_w, lam)
    init_val = eval_loss(model, val_w, lam)
    best_state = model.state()
    stopped = False

    for epoch in range(tcfg.epochs_max):
        lr = cosine_lr(epoch, tcfg)
        order = rng.permutation(len(train_w))
        run_sum, run_n = 0.0, 0
        for s in range(0, order.size, tcfg.batch):
            idx = order[s:s + tcfg.batch]
            dk.zero_grad(params)
            with dk.Tape() as tape:
                pred = model.forward(train_w.inputs_wave[idx], train_w.inputs_resp[idx], training=True, rng=rng)
                loss = hybrid_loss(pred, dk.Tensor(train_w.targets[idx]), lam)
            value = loss.item()
            if not math.isfinite(value):
                if divergence_path is not None:
                    Path(divergence_path).write_bytes(checkpoint_bytes(model))
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            clip_global_norm(params, tcfg.clip_norm)
            adam_step(params, adam, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
            run_sum += value * idx.size
            run_n += idx.size
        val = eval_loss(model, val_w, lam)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        row = HistoryRow(epoch, lr, run_sum / run_n, val)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, row.train_loss, val)
        improved = val < stopper.best
        stop = stopper.update(epoch, val)
        if improved:
            best_state = model.state()
        if stop:
            stopped = True
            break

    model.load_state(best_state)
    return TrainResult(best_state, stopper.best, stopper.best_epoch, history, init_train, init_val,
                       stopped, time.perf_counter() - t0)


def write_history_csv(history, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_loss"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss)])


def read_history_csv(path: str | Path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        return [HistoryRow(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["val_loss"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# evaluation helpers shared by the CLI and the sweeps


def forecast_physical(model: PhysAttnNet, raw: Dataset, stats: dict, split: str = "test",
                      stride: int = 1) -> tuple[np.ndarray, np.ndarray, WindowBatch]:
    """Forecast ``split`` of a physical-unit dataset using normalisation ``stats``.

    Returns ``(measured, predicted, raw_windows)`` in physical units.
    """
    cfg = model.config
    raw_w = window_dataset(raw, cfg.window, cfg.horizon, stride)[split]
    waves, resps = raw.wave_names, raw.resp_names
    norm_w = WindowBatch(normalize_values(raw_w.inputs_wave, stats, waves),
                         normalize_values(raw_w.inputs_resp, stats, resps),
                         normalize_values(raw_w.targets, stats, resps), raw_w.starts, True)
    pred = denormalize(predict(model, norm_w), stats, resps)
    return raw_w.targets, pred, raw_w


def evaluate_model(model: PhysAttnNet, raw: Dataset, stats: dict, split: str = "test",
                   stride: int = 1) -> tuple[MetricReport, dict]:
    y, yhat, raw_w = forecast_physical(model, raw, stats, split, stride)
    train_mean = np.array([stats[n][0] for n in raw.resp_names])
    return evaluate_forecast(y, yhat, raw.resp_names), baselines(raw_w, train_mean, raw.resp_names)


# ---------------------------------------------------------------------------
# sweeps

# unseen presets draw fresh wave phases rather than reusing the training record's
ZERO_SHOT_SEED_OFFSET = 1000

SWEEP_KINDS = ("horizon", "lambda", "depth", "ablation", "zero_shot", "stiffness")
DEFAULT_GRIDS = {
    "horizon": [6, 12, 24, 48],
    "lambda": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "depth": [1, 2, 3, 4, 5, 6],
    "ablation": list(ABLATIONS),
    "zero_shot": list(ZERO_SHOT_PRESETS),
    "stiffness": list(PERTURBED_MODULI),
}


def parse_grid(kind: str, text: str | None) -> list:
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}; choose from {SWEEP_KINDS}")
    if not text:
        return list(DEFAULT_GRIDS[kind])
    text = text.strip()
    if kind in ("horizon", "depth") and ".." in text:
        a, _, b = text.partition("..")
        return list(range(int(a), int(b) + 1))
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError("empty grid")
    try:
        if kind in ("horizon", "depth"):
            return [int(s) for s in items]
        if kind in ("lambda", "stiffness"):
            return [float(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"bad grid value in {text!r}") from exc
    return items


def apply_point(kind: str, point, mcfg: ModelConfig) -> ModelConfig:
    if kind == "horizon":
        return replace(mcfg, horizon=int(point))
    if kind == "lambda":
        return replace(mcfg, lam=float(point))
    if kind == "depth":
        return replace(mcfg, layers=int(point))
    if kind == "ablation":
        if point not in ABLATIONS:
            raise ConfigError(f"unknown ablation {point!r}")
        return replace(mcfg, ablation=point)
    return mcfg


def source_fingerprint() -> str:
    """Hash of the package sources; cached results are invalid once code changes."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunRecord:
    checkpoint: bytes
    result: dict  # best_val, best_epoch, history, initial losses, wall time


class RunCache:
    """Directory of finished training runs keyed by configuration and source hash."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None

    def key(self, mcfg: ModelConfig, tcfg: TrainConfig, data_meta: dict, extra: str = "") -> str:
        h = hashlib.sha256()
        for part in (source_fingerprint(), mcfg.to_text(), tcfg.to_text(),
                     json.dumps(data_meta, sort_keys=True), extra):
            h.update(part.encode())
        return h.hexdigest()[:24]

    def get(self, key: str) -> RunRecord | None:
        if self.root is None:
            return None
        d = self.root / key
        if not (d / "model.ckpt").is_file() or not (d / "result.json").is_file():
            return None
        return RunRecord((d / "model.ckpt").read_bytes(), json.loads((d / "result.json").read_text()))

    def put(self, key: str, rec: RunRecord) -> None:
        if self.root is None:
            return
        d = self.root / key
        d.mkdir(parents=True, exist_ok=True)
        (d / "model.ckpt").write_bytes(rec.checkpoint)
        tmp = d / "result.json.tmp"
        tmp.write_text(json.dumps(rec.result, sort_keys=True))
        tmp.replace(d / "result.json")


def train_cached(mcfg: ModelConfig, tcfg: TrainConfig, ds_raw: Dataset, cache: RunCache,
                 init_state: dict | None = None, extra: str = "") -> tuple[PhysAttnNet, dict]:
    """Build, train (or fetch from ``cache``) and return the best-validation model."""
    key = cache.key(mcfg, tcfg, ds_raw.meta, extra)
    hit = cache.get(key)
    if hit is not None:
        return model_from_bytes(hit.checkpoint), hit.result
    model = build(mcfg)
    if init_state is not None:
        model.load_state(init_state)
    windows = window_dataset(normalize(ds_raw), mcfg.window, mcfg.horizon, tcfg.stride)
    if tcfg.eval_stride != tcfg.stride:
        evalw = window_dataset(normalize(ds_raw), mcfg.window, mcfg.horizon, tcfg.eval_stride)
        windows = {"train": windows["train"], "val": evalw["val"], "test": evalw["test"]}
    res = train(model, windows, tcfg)
    result = {
        "best_val": res.best_val,
        "best_epoch": res.best_epoch,
        "initial_train_loss": res.initial_train_loss,
        "initial_val_loss": res.initial_val_loss,
        "stopped_early": res.stopped_early,
        "wall_time": res.wall_time,
        "history": [asdict(r) for r in res.history],
    }
    cache.put(key, RunRecord(checkpoint_bytes(model), result))
    return model, result


@dataclass
class SweepResult:
    rows: list
    baseline_rows: list
    failures: list


def _row(kind, point, seed, mcfg, scenario, report: MetricReport, tag: str, extra=None) -> dict:
    row = {
        "kind": kind,
        "point": point,
        "seed": seed,
        "model": "physattn",
        "ablation": mcfg.ablation,
        "scenario": scenario,
        "horizon": mcfg.horizon,
        "layers": mcfg.layers,
        "lambda": mcfg.lam,
        "tag": tag,
        "metrics": report.to_dict(),
    }
    if extra:
        row.update(extra)
    return row


def _baseline_rows(kind, point, seed, scenario, horizon, base: dict) -> list:
    return [{"kind": kind, "point": point, "seed": seed, "model": name, "scenario": scenario,
             "horizon": horizon, "metrics": rep.to_dict()} for name, rep in base.items()]


def sweep(kind: str, grid, mcfg: ModelConfig, tcfg: TrainConfig, data: Dataset | None = None,
          seeds: int = 3, base_seed: int = 0, out_dir: str | Path | None = None,
          cache: RunCache | None = None, datasets: dict | None = None,
          finetune: TrainConfig | None = None) -> SweepResult:
    """Train/evaluate every grid point ``seeds`` times and emit report rows.

    ``data`` is the physical-unit training dataset (default: the training
    preset with seed ``base_seed``). ``datasets`` optionally supplies
    pre-generated evaluation datasets keyed by name (zero-shot presets or
    stiffness moduli). Per-point failures are recorded and the sweep continues.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    cache = cache or RunCache(None)
    datasets = dict(datasets or {})
    if data is None:
        data = generate_dataset(preset(TRAIN_PRESET, seed=base_seed))
    scen_name = data.meta.get("scenario.name", "custom")
    rows, base_rows, failures = [], [], []

    for r in range(seeds):
        seed = base_seed + r
        t_cfg = replace(tcfg, seed=seed)
        if kind in ("zero_shot", "stiffness"):
            # one base model per seed, reused across grid points
            m_cfg = replace(mcfg, seed=seed)
            try:
                base_model, _ = train_cached(m_cfg, t_cfg, data, cache)
            except Exception as exc:  # noqa: BLE001
                failures.extend({"kind": kind, "point": p, "seed": seed, "error": repr(exc)} for p in grid)
                continue
            for point in grid:
                try:
                    if kind == "zero_shot":
                        ds = datasets.get(point) or generate_dataset(preset(point, seed=base_seed + ZERO_SHOT_SEED_OFFSET))
                        datasets[point] = ds
                        rep, base = evaluate_model(base_model, ds, data.stats)
                        rows.append(_row(kind, point, seed, m_cfg, point, rep, "zero_shot",
                                         {"trained_on": scen_name}))
                    else:
                        key = f"E{point:g}"
                        ds = datasets.get(key) or generate_dataset(stiffness_scenario(data.scenario, float(point)))
                        datasets[key] = ds
                        ft_cfg = replace(finetune or tcfg, seed=seed)
                        tuned, _ = train_cached(m_cfg, ft_cfg, ds, cache, init_state=base_model.state(),
                                                extra="finetune:" + cache.key(m_cfg, t_cfg, data.meta))
                        rep, base = evaluate_model(tuned, ds, ds.stats)
                        rows.append(_row(kind, point, seed, m_cfg, ds.meta.get("scenario.name", key), rep,
                                         "finetune", {"modulus": float(point)}))
                    base_rows.extend(_baseline_rows(kind, point, seed, rows[-1]["scenario"], m_cfg.horizon, base))
                except Exception as exc:  # noqa: BLE001
                    failures.append({"kind": kind, "point": point, "seed": seed, "error": repr(exc)})
            continue

        for point in grid:
            try:
                m_cfg = replace(apply_point(kind, point, mcfg), seed=seed).validate()
                model, _ = train_cached(m_cfg, t_cfg, data, cache)
                rep, base = evaluate_model(model, data, data.stats)
                rows.append(_row(kind, point, seed, m_cfg, scen_name, rep, kind))
                base_rows.extend(_baseline_rows(kind, point, seed, scen_name, m_cfg.horizon, base))
            except Exception as exc:  # noqa: BLE001
                failures.append({"kind": kind, "point": point, "seed": seed, "error": repr(exc)})

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(rows, out / "reports.jsonl")
        write_jsonl(base_rows, out / "baselines.jsonl")
        write_summary_csv(rows, out / "summary.csv")
        if failures:
            write_jsonl(failures, out / "failures.jsonl")
    return SweepResult(rows, base_rows, failures)


def median_metric(rows, metric: str, channel: str | None = None, **match) -> float:
    vals = []
    for r in rows:
        if all(r.get(k) == v for k, v in match.items()):
            m = r["metrics"] if channel is None else r["metrics"]["per_channel"][channel]
            vals.append(m[metric])
    if not vals:
        raise KeyError(f"no rows match {match}")
    return float(np.median(vals))
