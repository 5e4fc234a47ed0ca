"""Synthetic wave/structure data: JONSWAP sea states forcing a damped oscillator.

The structure sits downstream of ``n_gauges`` wave gauges. Gauge ``g``
(1-based) records the elevation delayed by ``(g-1) * tp / 8``; the structure
feels the elevation delayed by ``n_gauges * tp / 8``, so gauge records lead
the forcing. Two response channels are produced:

* ``resp_x``: linear SDOF driven by ``coupling * F``
* ``resp_z``: Duffing stiffness + quadratic drag driven by
  ``coupling * (F^2 - mean F^2)``

Both are integrated with classical RK4 at ``dt / substeps`` and sampled at ``dt``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate

from .errors import ConfigError, DataError, DivergenceError

GRAVITY = 9.81
SPLIT_NAMES = ("train", "val", "test")
DATA_FILE = "dataset.csv"
META_FILE = "dataset.meta"

# name -> (H_s [m], T_p [s], H_1% [m], T_m [s]); water depth 0.8 m throughout
PRESETS = {
    "hs008_tp24": (0.08, 2.4, 0.136, 2.04),
    "hs012_tp16": (0.12, 1.6, 0.198, 1.36),
    "hs012_tp20": (0.12, 2.0, 0.203, 1.70),
    "hs012_tp24": (0.12, 2.4, 0.204, 2.04),
    "hs012_tp28": (0.12, 2.8, 0.204, 2.38),
    "hs016_tp24": (0.16, 2.4, 0.273, 2.04),
}
TRAIN_PRESET = "hs016_tp24"
ZERO_SHOT_PRESETS = tuple(k for k in PRESETS if k != TRAIN_PRESET)

# Young's modulus values for the stiffness-perturbation protocol, relative to 30.91 MPa
REFERENCE_MODULUS = 30.91
PERTURBED_MODULI = (7.75, 10.75)


@dataclass(frozen=True)
class Oscillator:
    omega_n: float = 2.0 * math.pi * 0.5
    zeta: float = 0.05
    coupling: float = 1.0
    duffing: float = 5.0
    quad_drag: float = 0.5


@dataclass(frozen=True)
class WaveScenario:
    name: str = "custom"
    hs: float = 0.16
    tp: float = 2.4
    gamma: float = 3.3
    duration: float = 500.0
    dt: float = 0.05
    n_gauges: int = 4
    seed: int = 0
    oscillator: Oscillator = field(default_factory=Oscillator)
    h1pct: float = float("nan")
    tm: float = float("nan")

    def validate(self) -> "WaveScenario":
        if self.hs <= 0 or self.tp <= 0:
            raise ConfigError(f"hs and tp must be positive (hs={self.hs}, tp={self.tp})")
        if self.duration < 100 * self.tp:
            raise ConfigError(f"duration {self.duration} s is shorter than 100 peak periods")
        if not 1 <= self.n_gauges <= 12:
            raise ConfigError(f"n_gauges must be in 1..12, got {self.n_gauges}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def structure_lag(self) -> float:
        return self.n_gauges * self.tp / 8.0

    def gauge_lag(self, g: int) -> float:
        """Delay of 1-based gauge ``g`` relative to gauge 1."""
        return (g - 1) * self.tp / 8.0

    def to_meta(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "oscillator":
                for k, ov in asdict(v).items():
                    out[f"scenario.oscillator.{k}"] = repr(ov)
            else:
                out[f"scenario.{f.name}"] = v if isinstance(v, str) else repr(v)
        return out

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "WaveScenario":
        osc = {}
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in meta.items():
            if key.startswith("scenario.oscillator."):
                osc[key.rsplit(".", 1)[1]] = float(raw)
            elif key.startswith("scenario."):
                name = key.split(".", 1)[1]
                if name not in types:
                    raise DataError(f"unknown scenario field {name!r}")
                typ = types[name]
                kw[name] = raw if typ == "str" else (int(raw) if typ == "int" else float(raw))
        return cls(oscillator=Oscillator(**osc), **kw)


def preset(name: str, seed: int = 0, **overrides) -> WaveScenario:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    hs, tp, h1, tm = PRESETS[name]
    return replace(WaveScenario(name=name, hs=hs, tp=tp, h1pct=h1, tm=tm, seed=seed), **overrides).validate()


def stiffness_scenario(base: WaveScenario, modulus: float) -> WaveScenario:
    """Same sea state, natural frequency scaled by sqrt(E / E_ref)."""
    osc = base.oscillator
    scaled = replace(osc, omega_n=osc.omega_n * math.sqrt(modulus / REFERENCE_MODULUS))
    return replace(base, name=f"{base.name}_E{modulus:g}", oscillator=scaled)


# ---------------------------------------------------------------------------
# JONSWAP


def _jonswap_shape(f, fp: float, gamma: float):
    f = np.asarray(f, dtype=np.float64)
    sigma = np.where(f <= fp, 0.07, 0.09)
    peak = gamma ** np.exp(-((f - fp) ** 2) / (2.0 * sigma**2 * fp**2))
    return GRAVITY**2 * (2.0 * np.pi) ** -4 * f**-5.0 * np.exp(-1.25 * (fp / f) ** 4) * peak


def _band(fp: float) -> tuple[float, float]:
    return 0.2 * fp, 8.0 * fp


def jonswap_alpha(hs: float, tp: float, gamma: float = 3.3) -> float:
    """Phillips constant giving ``4 sqrt(m0) = hs`` over the band [0.2 fp, 8 fp]."""
    fp = 1.0 / tp
    lo, hi = _band(fp)
    m0, _ = integrate.quad(_jonswap_shape, lo, hi, args=(fp, gamma), points=[fp], limit=200,
                           epsabs=0.0, epsrel=1e-12)
    return (hs / 4.0) ** 2 / m0


def jonswap_density(f, hs: float, tp: float, gamma: float = 3.3):
    """Spectral density S(f) in m^2 s."""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(f_arr <= 0):
        raise ValueError("JONSWAP density is defined for f > 0 only")
    return jonswap_alpha(hs, tp, gamma) * _jonswap_shape(f_arr, 1.0 / tp, gamma)


@dataclass(frozen=True)
class WaveField:
    """Random-phase harmonic sum ``eta(t) = sum_m a_m cos(2 pi f_m t + phi_m)``."""

    freqs: np.ndarray
    amps: np.ndarray
    phases: np.ndarray

    def elevation(self, t, lag: float = 0.0, chunk: int = 4096) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64)) - lag
        out = np.empty_like(t)
        w = 2.0 * np.pi * self.freqs
        for s in range(0, t.size, chunk):
            tt = t[s:s + chunk, None]
            out[s:s + chunk] = np.cos(tt * w + self.phases) @ self.amps
        return out

    @property
    def m0(self) -> float:
        return float(0.5 * np.sum(self.amps**2))


def wave_field(scenario: WaveScenario) -> WaveField:
    """Components on the grid ``f_m = m / duration`` inside [0.2 fp, 8 fp].

    That spacing makes the components orthogonal over the record, so the sample
    variance matches the discrete spectral moment.
    """
    scenario.validate()
    fp = 1.0 / scenario.tp
    lo, hi = _band(fp)
    df = 1.0 / scenario.duration
    m = np.arange(math.ceil(lo / df), math.floor(hi / df) + 1)
    freqs = m * df
    if freqs.size < 200:
        raise ConfigError(f"only {freqs.size} wave components; lengthen the record")
    amps = np.sqrt(2.0 * jonswap_density(freqs, scenario.hs, scenario.tp, scenario.gamma) * df)
    rng = np.random.default_rng(scenario.seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=freqs.size)
    return WaveField(freqs, amps, phases)


def synth_wave(scenario: WaveScenario) -> tuple[np.ndarray, np.ndarray, WaveField]:
    """Return ``(t, gauges, field)`` with ``gauges`` shaped ``(n_gauges, n_steps)``."""
    fld = wave_field(scenario)
    t = np.arange(scenario.n_steps) * scenario.dt
    gauges = np.stack([fld.elevation(t, lag=scenario.gauge_lag(g)) for g in range(1, scenario.n_gauges + 1)])
    return t, gauges, fld


# ---------------------------------------------------------------------------
# structural response


def oscillator_response(
    force: Callable[[np.ndarray], np.ndarray],
    scenario: WaveScenario,
    initial: tuple = (0.0, 0.0, 0.0, 0.0),
    substeps: int = 4,
    n_steps: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate both response channels; ``force`` maps times (s) to forcing.

    ``initial`` is ``(x, x_dot, z, z_dot)`` at t = 0.
    """
    osc = scenario.oscillator
    n = scenario.n_steps if n_steps is None else n_steps
    h = scenario.dt / substeps
    fine = np.arange(2 * substeps * (n - 1) + 1) * (h / 2.0)
    F = np.asarray(force(fine), dtype=np.float64)
    if not np.isfinite(F).all():
        raise DivergenceError(f"{scenario.name}: non-finite forcing")
    F2 = F * F
    F2 = (F2 - F2.mean()).tolist()
    F = F.tolist()

    c, k = 2.0 * osc.zeta * osc.omega_n, osc.omega_n**2
    cpl, duff, drag = osc.coupling, osc.duffing, osc.quad_drag
    x, v, z, w = (float(s) for s in initial)
    xs = np.empty(n)
    zs = np.empty(n)
    xs[0], zs[0] = x, z
    h2, h6 = h / 2.0, h / 6.0
    j = 0
    for step in range(1, n):
        try:
            for _ in range(substeps):
                f0, f1, f2 = F[j], F[j + 1], F[j + 2]
                g0, g1, g2 = F2[j], F2[j + 1], F2[j + 2]
                # linear channel
                a1 = cpl * f0 - c * v - k * x
                xa, va = x + h2 * v, v + h2 * a1
                a2 = cpl * f1 - c * va - k * xa
                xb, vb = x + h2 * va, v + h2 * a2
                a3 = cpl * f1 - c * vb - k * xb
                xc, vc = x + h * vb, v + h * a3
                a4 = cpl * f2 - c * vc - k * xc
                x += h6 * (v + 2.0 * va + 2.0 * vb + vc)
                v += h6 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
                # nonlinear channel
                b1 = cpl * g0 - c * w - k * z - duff * z**3 - drag * w * abs(w)
                za, wa = z + h2 * w, w + h2 * b1
                b2 = cpl * g1 - c * wa - k * za - duff * za**3 - drag * wa * abs(wa)
                zb, wb = z + h2 * wa, w + h2 * b2
                b3 = cpl * g1 - c * wb - k * zb - duff * zb**3 - drag * wb * abs(wb)
                zc, wc = z + h * wb, w + h * b3
                b4 = cpl * g2 - c * wc - k * zc - duff * zc**3 - drag * wc * abs(wc)
                z += h6 * (w + 2.0 * wa + 2.0 * wb + wc)
                w += h6 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                j += 2
        except OverflowError:
            raise DivergenceError(f"{scenario.name}: oscillator state overflowed at t={step * scenario.dt:.2f} s") from None
        if not (abs(x) < 1e6 and abs(v) < 1e6 and abs(z) < 1e6 and abs(w) < 1e6):
            raise DivergenceError(f"{scenario.name}: oscillator state exceeded 1e6 at t={step * scenario.dt:.2f} s")
        xs[step], zs[step] = x, z
    return xs, zs


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    t: np.ndarray
    channels: dict  # name -> series, ordered wave_1..wave_k, resp_x, resp_z
    dt: float
    splits: dict  # name -> (start, stop)
    stats: dict  # name -> (mean, std) from the train split
    meta: dict = field(default_factory=dict)
    normalized: bool = False

    @property
    def wave_names(self) -> list[str]:
        return [k for k in self.channels if k.startswith("wave_")]

    @property
    def resp_names(self) -> list[str]:
        return [k for k in self.channels if k.startswith("resp_")]

    def __len__(self) -> int:
        return self.t.size

    def matrix(self, names) -> np.ndarray:
        return np.stack([self.channels[n] for n in names], axis=1)

    def split_range(self, name: str) -> range:
        a, b = self.splits[name]
        return range(a, b)

    @property
    def scenario(self) -> WaveScenario:
        return WaveScenario.from_meta(self.meta)


def split_bounds(n: int, ratios=(0.7, 0.15, 0.15)) -> dict:
    """Chronological, disjoint, contiguous train/val/test index ranges."""
    a = int(round(n * ratios[0]))
    b = int(round(n * (ratios[0] + ratios[1])))
    return {"train": (0, a), "val": (a, b), "test": (b, n)}


def compute_stats(channels: dict, splits: dict) -> dict:
    a, b = splits["train"]
    if b <= a:
        raise DataError("train split is empty")
    stats = {}
    for name, series in channels.items():
        seg = series[a:b]
        mu, sd = float(seg.mean()), float(seg.std())
        if not sd > 0:
            raise DataError(f"channel {name} is constant on the train split (std = 0)")
        stats[name] = (mu, sd)
    return stats


def generate_dataset(scenario: WaveScenario) -> Dataset:
    scenario.validate()
    t, gauges, fld = synth_wave(scenario)
    forcing = lambda tt: fld.elevation(tt, lag=scenario.structure_lag)  # noqa: E731
    x, z = oscillator_response(forcing, scenario)
    channels = {f"wave_{g + 1}": gauges[g] for g in range(scenario.n_gauges)}
    channels["resp_x"] = x
    channels["resp_z"] = z
    splits = split_bounds(t.size)
    meta = scenario.to_meta()
    return Dataset(t, channels, scenario.dt, splits, compute_stats(channels, splits), meta)


def normalize(ds: Dataset) -> Dataset:
    if ds.normalized:
        return ds
    chans = {k: (v - ds.stats[k][0]) / ds.stats[k][1] for k, v in ds.channels.items()}
    return replace(ds, channels=chans, normalized=True)


def denormalize(values: np.ndarray, stats: dict, names) -> np.ndarray:
    """Invert z-scoring; the last axis of ``values`` runs over ``names``."""
    mu = np.array([stats[n][0] for n in names])
    sd = np.array([stats[n][1] for n in names])
    return np.asarray(values) * sd + mu


def normalize_values(values: np.ndarray, stats: dict, names) -> np.ndarray:
    mu = np.array([stats[n][0] for n in names])
    sd = np.array([stats[n][1] for n in names])
    return (np.asarray(values) - mu) / sd


@dataclass
class WindowBatch:
    inputs_wave: np.ndarray  # B x L x wave_channels
    inputs_resp: np.ndarray  # B x L x resp_channels
    targets: np.ndarray  # B x N x resp_channels
    starts: np.ndarray  # index of each window's first step
    normalized: bool

    def __len__(self) -> int:
        return self.starts.size

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.inputs_wave[idx], self.inputs_resp[idx], self.targets[idx],
                           self.starts[idx], self.normalized)


def window_count(length: int, L: int, N: int, stride: int) -> int:
    if length < L + N:
        return 0
    return (length - L - N) // stride + 1


def window_dataset(ds: Dataset, L: int, N: int, stride: int = 1) -> dict:
    """Slide (input, target) windows over each split independently.

    Targets start at the step right after the input window; no window crosses
    a split boundary.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if len(ds) < L + N:
        raise ConfigError(f"series of length {len(ds)} is shorter than window + horizon = {L + N}")
    wave = ds.matrix(ds.wave_names)
    resp = ds.matrix(ds.resp_names)
    out = {}
    for name in SPLIT_NAMES:
        a, b = ds.splits[name]
        count = window_count(b - a, L, N, stride)
        starts = a + stride * np.arange(count)
        idx_in = starts[:, None] + np.arange(L)[None, :]
        idx_out = starts[:, None] + L + np.arange(N)[None, :]
        out[name] = WindowBatch(wave[idx_in], resp[idx_in], resp[idx_out], starts, ds.normalized)
    return out


# ---------------------------------------------------------------------------
# file I/O


def _write_meta(path: Path, meta: dict) -> None:
    with open(path, "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_meta(path: str | Path) -> dict:
    meta = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, _, v = line.partition("=")
            meta[k] = v
    return meta


def write_dataset(ds: Dataset, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``dataset.csv`` (17 significant digits) and ``dataset.meta``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(ds.channels)
    cols = [ds.t] + [ds.channels[n] for n in names]
    data_path = out_dir / DATA_FILE
    with open(data_path, "w", newline="") as fh:
        fh.write(",".join(["t"] + names) + "\n")
        block = np.column_stack(cols)
        for row in block:
            fh.write(",".join("%.17g" % v for v in row) + "\n")
    meta = dict(ds.meta)
    meta["dt"] = repr(ds.dt)
    meta["normalized"] = "true" if ds.normalized else "false"
    meta["channels"] = ",".join(names)
    for split, (a, b) in ds.splits.items():
        meta[f"split.{split}"] = f"{a}:{b}"
    for name, (mu, sd) in ds.stats.items():
        meta[f"stats.{name}.mean"] = "%.17g" % mu
        meta[f"stats.{name}.std"] = "%.17g" % sd
    meta_path = out_dir / META_FILE
    _write_meta(meta_path, meta)
    return data_path, meta_path


def read_dataset(src: str | Path) -> Dataset:
    src = Path(src)
    data_path, meta_path = src / DATA_FILE, src / META_FILE
    if not data_path.is_file() or not meta_path.is_file():
        raise DataError(f"{src}: expected {DATA_FILE} and {META_FILE}")
    meta = read_meta(meta_path)
    for key in ("dt", "channels", "split.train", "split.val", "split.test"):
        if key not in meta:
            raise DataError(f"{meta_path}: missing field {key!r}")
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "t":
            raise DataError(f"{data_path}: header must start with 't'")
        names = header[1:]
        expected = meta["channels"].split(",")
        if names != expected:
            bad = next((f"column {i + 2} is {a!r}, expected {b!r}" for i, (a, b) in enumerate(zip(names, expected))
                        if a != b), f"{len(names)} channels, expected {len(expected)}")
            raise DataError(f"{data_path}: header does not match metadata: {bad}")
        if not any(n.startswith("wave_") for n in names) or not any(n.startswith("resp_") for n in names):
            raise DataError(f"{data_path}: need at least one wave_* and one resp_* column")
        try:
            block = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{data_path}: non-numeric value ({exc})") from exc
    if block.ndim != 2 or block.shape[1] != len(header):
        raise DataError(f"{data_path}: ragged rows")
    channels = {n: block[:, i + 1].copy() for i, n in enumerate(names)}
    splits = {}
    for s in SPLIT_NAMES:
        a, _, b = meta[f"split.{s}"].partition(":")
        splits[s] = (int(a), int(b))
    stats = {}
    for n in names:
        try:
            stats[n] = (float(meta[f"stats.{n}.mean"]), float(meta[f"stats.{n}.std"]))
        except KeyError as exc:
            raise DataError(f"{meta_path}: missing stats for channel {n}") from exc
    reserved = {"dt", "normalized", "channels"}
    scen = {k: v for k, v in meta.items()
            if k not in reserved and not k.startswith(("split.", "stats."))}
    return Dataset(block[:, 0].copy(), channels, float(meta["dt"]), splits, stats, scen,
                   normalized=meta.get("normalized", "false") == "true")
