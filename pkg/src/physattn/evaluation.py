"""Forecast metrics, extrema errors, reference baselines and report export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import peak_prominences

from .errors import DimensionError, UndefinedMetricError
from .spectral import fft_last_axis, next_pow2


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise DimensionError(f"measured shape {y.shape} != predicted shape {yhat.shape}")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def r2(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise UndefinedMetricError("R^2 is undefined for a constant measured series")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / sst


def spectral_abs_diff(y, yhat) -> np.ndarray:
    """Mean one-sided spectral modulus difference along the last axis."""
    y, yhat = _pair(y, yhat)
    k = next_pow2(y.shape[-1]) // 2 + 1
    diff = fft_last_axis(y)[..., :k] - fft_last_axis(yhat)[..., :k]
    return np.abs(diff).mean(axis=-1)


def smae(y, yhat) -> float:
    """Spectral MAE of one series (same transform convention as the training loss)."""
    y, yhat = _pair(y, yhat)
    return float(spectral_abs_diff(y.ravel(), yhat.ravel()))


def smae_windows(y, yhat) -> float:
    """SMAE for ``(windows, horizon, channels)`` arrays: bins, then channels, then windows."""
    y, yhat = _pair(y, yhat)
    per = spectral_abs_diff(np.swapaxes(y, -1, -2), np.swapaxes(yhat, -1, -2))  # (W, C)
    return float(per.mean(axis=-1).mean())


@dataclass
class MetricReport:
    mae: float
    rmse: float
    r2: float
    smae: float
    per_channel: dict = field(default_factory=dict)
    n_samples: int = 0
    horizon: int = 0

    def check(self) -> None:
        """RMS-mean inequality (up to rounding) and R^2 <= 1."""
        if not (self.mae >= 0 and self.rmse >= self.mae * (1 - 1e-12)):
            raise AssertionError(f"rmse {self.rmse} < mae {self.mae}")
        if not self.r2 <= 1.0:
            raise AssertionError(f"r2 {self.r2} > 1")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_forecast(y, yhat, channel_names) -> MetricReport:
    """Metrics over ``(windows, horizon, channels)`` arrays in physical units."""
    y, yhat = _pair(y, yhat)
    if y.ndim != 3 or y.shape[-1] != len(channel_names):
        raise DimensionError(f"expected (windows, horizon, {len(channel_names)}) arrays, got {y.shape}")
    per = {}
    for c, name in enumerate(channel_names):
        yc, pc = y[..., c], yhat[..., c]
        per[name] = {
            "mae": mae(yc, pc),
            "rmse": rmse(yc, pc),
            "r2": r2(yc, pc),
            "smae": smae_windows(yc[..., None], pc[..., None]),
        }
    report = MetricReport(mae(y, yhat), rmse(y, yhat), r2(y, yhat), smae_windows(y, yhat), per,
                          n_samples=y.shape[0], horizon=y.shape[1])
    report.check()
    return report


# ---------------------------------------------------------------------------
# extrema


@dataclass
class PeakValleyErrors:
    peak_mae: float | None  # None: no peak passed the prominence threshold
    valley_mae: float | None
    peaks: np.ndarray
    valleys: np.ndarray


def _extrema(y: np.ndarray, prominence: float) -> np.ndarray:
    mid = y[1:-1]
    idx = np.flatnonzero((mid > y[:-2]) & (mid > y[2:])) + 1
    if idx.size == 0:
        return idx
    prom = peak_prominences(y, idx)[0]
    return idx[prom >= prominence]


def peak_valley_errors(y, yhat, prominence: float | None = None) -> PeakValleyErrors:
    """Errors at strict local maxima / minima of the measured series.

    Default prominence is 5% of the measured range.
    """
    y, yhat = _pair(y, yhat)
    y, yhat = y.ravel(), yhat.ravel()
    if y.size < 3:
        raise DimensionError("peak/valley analysis needs at least 3 samples")
    if prominence is None:
        prominence = 0.05 * float(y.max() - y.min())
    peaks = _extrema(y, prominence)
    valleys = _extrema(-y, prominence)
    err = np.abs(y - yhat)
    return PeakValleyErrors(
        float(err[peaks].mean()) if peaks.size else None,
        float(err[valleys].mean()) if valleys.size else None,
        peaks,
        valleys,
    )


# ---------------------------------------------------------------------------
# baselines


def persistence_forecast(inputs_resp: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat each window's last observed response across the horizon."""
    last = inputs_resp[:, -1:, :]
    return np.repeat(last, horizon, axis=1)


def climatology_forecast(train_mean: np.ndarray, n_windows: int, horizon: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(train_mean, dtype=np.float64), (n_windows, horizon, len(train_mean))).copy()


def baselines(windows, train_mean, channel_names) -> dict[str, MetricReport]:
    """Persistence and climatology metrics on windows given in physical units."""
    n, horizon = windows.targets.shape[:2]
    y = windows.targets
    return {
        "persistence": evaluate_forecast(y, persistence_forecast(windows.inputs_resp, horizon), channel_names),
        "climatology": evaluate_forecast(y, climatology_forecast(train_mean, n, horizon), channel_names),
    }


# ---------------------------------------------------------------------------
# export


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_jsonl(rows, path: str | Path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for row in rows:
            fh.write(json.dumps(_clean(row), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


SUMMARY_COLUMNS = ("mae", "rmse", "r2", "smae")


def write_summary_csv(rows, path: str | Path, key_fields=("kind", "point")) -> list[dict]:
    """Median of each metric per group; one CSV row per group in first-seen order."""
    groups: dict = {}
    for row in rows:
        key = tuple(row.get(k) for k in key_fields)
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        rec = dict(zip(key_fields, key))
        rec["n"] = len(members)
        for m in SUMMARY_COLUMNS:
            rec[m] = float(np.median([r["metrics"][m] for r in members]))
        out.append(rec)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(key_fields) + ["n", *SUMMARY_COLUMNS], lineterminator="\n")
        w.writeheader()
        for rec in out:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
    return out


def write_pairs_csv(y, yhat, channel_names, path: str | Path) -> None:
    """Raw (window, step, channel, measured, predicted) pairs."""
    y, yhat = _pair(y, yhat)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "step", "channel", "measured", "predicted"])
        for i in range(y.shape[0]):
            for s in range(y.shape[1]):
                for c, name in enumerate(channel_names):
                    w.writerow([i, s, name, repr(float(y[i, s, c])), repr(float(yhat[i, s, c]))])
