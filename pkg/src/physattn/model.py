"""Dual-stream network assembly, ablation variants and the checkpoint format.

Per layer (pre-norm residual blocks)::

    r = r + DBSA(LN(r))                         # self-attention stream
    c = r + PDGBCA(LN(wave), LN(r))             # wave/response coupling
    c = c + FFN(LN(c))                          # 4*d_model hidden, ReLU, dropout
    r = c                                       # feeds the next layer

The wave stream is embedded once and reused by every layer. After the last
layer, the final ``r`` (post-DBSA) and ``c`` streams meet in the fusion head,
which emits one row per input position; the last ``horizon`` rows are the
forecast.

Trainable parameter count (``D = d_model``, ``H = heads``, ``C = out_channels``)::

    (wave_channels + resp_channels + 2) * D
    + layers * (20 D^2 + 13 D + 2H [decay bias on] + 2H [phase bias on])
    + D + 2 D C + C          (fusion head, ``full`` and the loss-only ablation)
    + D C + C                (``no_gcf``: fixed 0.5/0.5 average, then linear)
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .attention import (
    DecayBias,
    GCFHead,
    MultiHeadParams,
    PhaseBias,
    dbsa_forward,
    gcf_fuse,
    pdgbca_forward,
    softplus_inverse,
)
from .diffkernel import Param, Tensor
from .errors import ConfigError, DataError, DimensionError

ABLATIONS = ("full", "no_dbsa", "no_pdgbca", "no_gcf", "no_freq_loss")

CHECKPOINT_MAGIC = b"PANT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture and loss settings.

    ``d_model``, ``heads`` and ``layers`` defaults are desk-scale choices, not
    values reported for the original architecture.
    """

    d_model: int = 64
    heads: int = 4
    layers: int = 5
    window: int = 48
    horizon: int = 12
    dt: float = 0.05
    dropout: float = 0.1
    lam: float = 0.6
    ablation: str = "full"
    seed: int = 0
    wave_channels: int = 4
    resp_channels: int = 2
    out_channels: int = 2
    scaled_scores: bool = True
    positional_encoding: bool = True
    init_gamma: float = 0.5
    init_w_step: float = 0.25

    def validate(self) -> "ModelConfig":
        problems = []
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            problems.append(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if not 0.0 <= self.lam <= 1.0:
            problems.append(f"lambda must lie in [0, 1], got {self.lam}")
        if self.horizon < 1:
            problems.append(f"horizon must be >= 1, got {self.horizon}")
        if self.window < 2:
            problems.append(f"window must be >= 2, got {self.window}")
        if self.horizon > self.window:
            problems.append(f"horizon ({self.horizon}) cannot exceed window ({self.window})")
        if self.dt <= 0:
            problems.append(f"dt must be positive, got {self.dt}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ablation not in ABLATIONS:
            problems.append(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        for name in ("wave_channels", "resp_channels", "out_channels"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def train_lambda(self) -> float:
        """Loss weight actually used in training (the loss ablation forces 0)."""
        return 0.0 if self.ablation == "no_freq_loss" else self.lam

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        out = {}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            out[key] = _parse(raw, known[key].type)
        return cls(**out)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k.strip()] = v.strip()
        return cls.from_mapping(kv)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {typ}") from exc
    return raw


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def sinusoidal_encoding(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class Layer:
    norm_resp: tuple
    dbsa: MultiHeadParams
    norm_wave: tuple
    norm_int: tuple
    bca1: MultiHeadParams
    bca2: MultiHeadParams
    norm_ff: tuple
    ff: tuple  # (w1, b1, w2, b2)


class PhysAttnNet:
    """Built by :func:`build`; parameters live in ``self.params`` (insertion ordered)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Param] = {}
        self.layers: list[Layer] = []
        self._pe = None

    # -- parameter bookkeeping
    def _add(self, name: str, data: np.ndarray, trainable: bool = True) -> Param:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param(name, Tensor(data), trainable)
        self.params[name] = p
        return p

    def trainable(self) -> list[Param]:
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.value.data.shape:
                raise DimensionError(f"{k}: stored shape {state[k].shape} != {p.value.data.shape}")
            p.value.data = np.array(state[k], dtype=np.float64)

    # -- forward
    def positional(self) -> np.ndarray:
        if self._pe is None:
            self._pe = sinusoidal_encoding(self.config.window, self.config.d_model)
        return self._pe

    def forward(self, wave: Tensor | np.ndarray, resp: Tensor | np.ndarray,
                training: bool = False, rng: np.random.Generator | None = None,
                capture: dict | None = None, full_sequence: bool = False) -> Tensor:
        """Forecast ``(..., horizon, out_channels)`` from aligned input windows.

        ``capture`` (a dict) collects post-softmax weights per layer under the
        keys ``dbsa``, ``bca_stage1``, ``bca_stage2`` and ``gcf``.
        """
        cfg = self.config
        wave = dk.as_tensor(wave)
        resp = dk.as_tensor(resp)
        L = cfg.window
        if wave.shape[-2:] != (L, cfg.wave_channels):
            raise DimensionError(f"wave window must be (..., {L}, {cfg.wave_channels}), got {wave.shape}")
        if resp.shape[-2:] != (L, cfg.resp_channels):
            raise DimensionError(f"response window must be (..., {L}, {cfg.resp_channels}), got {resp.shape}")
        if wave.shape[:-2] != resp.shape[:-2]:
            raise DimensionError(f"batch shapes differ: {wave.shape} vs {resp.shape}")
        P = self.params
        w = dk.linear(wave, P["embed.wave.w"], P["embed.wave.b"])
        r = dk.linear(resp, P["embed.resp.w"], P["embed.resp.b"])
        if cfg.positional_encoding:
            pe = Tensor(self.positional())
            w = dk.add(w, pe)
            r = dk.add(r, pe)

        cap_dbsa = cap_bca = None
        if capture is not None:
            cap_dbsa = capture.setdefault("dbsa", [])
            cap_bca = capture
        out_dbsa = c = r
        for layer in self.layers:
            r = dk.add(r, dbsa_forward(dk.layer_norm(r, *layer.norm_resp), layer.dbsa, capture=cap_dbsa))
            out_dbsa = r
            coupled = pdgbca_forward(dk.layer_norm(w, *layer.norm_wave), dk.layer_norm(r, *layer.norm_int),
                                     layer.bca1, layer.bca2, capture=cap_bca)
            c = dk.add(r, coupled)
            w1, b1, w2, b2 = layer.ff
            h = dk.relu(dk.linear(dk.layer_norm(c, *layer.norm_ff), w1, b1))
            h = dk.dropout(h, cfg.dropout, training, rng)
            c = dk.add(c, dk.linear(h, w2, b2))
            r = c

        if cfg.ablation == "no_gcf":
            mixed = dk.scale(dk.add(out_dbsa, c), 0.5)
            y = dk.linear(mixed, P["head.w"], P["head.b"])
        else:
            head = GCFHead(P["gcf.q_global"], P["head.w"], P["head.b"])
            cap = capture.setdefault("gcf", []) if capture is not None else None
            y = gcf_fuse(out_dbsa, c, head, capture=cap)
        if full_sequence:
            return y
        return dk.take_rows(y, L - cfg.horizon, L)

    __call__ = forward


def build(config: ModelConfig, rng: np.random.Generator | None = None) -> PhysAttnNet:
    """Initialise a network; uses ``config.seed`` when no generator is supplied."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    m = PhysAttnNet(config)
    D, H, d = config.d_model, config.heads, config.d_head
    decay_on = config.ablation != "no_dbsa"
    phase_on = config.ablation != "no_pdgbca"

    def dense(name, fan_in, fan_out):
        return m._add(name, _xavier(rng, fan_in, fan_out, (fan_in, fan_out)))

    def heads_proj(name):
        blocks = [_xavier(rng, D, d, (D, d)) for _ in range(H)]
        return m._add(name, np.concatenate(blocks, axis=1))

    def norm(prefix):
        return (m._add(prefix + ".gain", np.ones((1, D))), m._add(prefix + ".shift", np.zeros((1, D))))

    def mh(prefix, bias_factory):
        wq, wk, wv = heads_proj(prefix + ".w_q"), heads_proj(prefix + ".w_k"), heads_proj(prefix + ".w_v")
        wo = dense(prefix + ".w_o", H * d, D)
        return MultiHeadParams(wq, wk, wv, wo, bias_factory(prefix), scaled_scores=config.scaled_scores)

    theta0 = softplus_inverse(config.init_gamma)

    def decay(prefix):
        tp = m._add(prefix + ".theta_p", np.full((1, H), theta0), trainable=decay_on)
        tf = m._add(prefix + ".theta_f", np.full((1, H), theta0), trainable=decay_on)
        return DecayBias(tp, tf, config.dt, enabled=decay_on)

    def phase(prefix):
        w0 = config.init_w_step * np.arange(1, H + 1, dtype=np.float64)[None, :]
        return PhaseBias(m._add(prefix + ".w", w0, trainable=phase_on), config.dt, enabled=phase_on)

    dense("embed.wave.w", config.wave_channels, D)
    m._add("embed.wave.b", np.zeros((1, D)))
    dense("embed.resp.w", config.resp_channels, D)
    m._add("embed.resp.b", np.zeros((1, D)))
    for i in range(config.layers):
        p = f"layer{i}"
        norm_resp = norm(p + ".norm_resp")
        dbsa = mh(p + ".dbsa", decay)
        norm_wave = norm(p + ".norm_wave")
        norm_int = norm(p + ".norm_int")
        bca1 = mh(p + ".bca1", phase)
        bca2 = mh(p + ".bca2", phase)
        norm_ff = norm(p + ".norm_ff")
        w1 = dense(p + ".ff.w1", D, 4 * D)
        b1 = m._add(p + ".ff.b1", np.zeros((1, 4 * D)))
        w2 = dense(p + ".ff.w2", 4 * D, D)
        b2 = m._add(p + ".ff.b2", np.zeros((1, D)))
        m.layers.append(Layer(norm_resp, dbsa, norm_wave, norm_int, bca1, bca2, norm_ff, (w1, b1, w2, b2)))
    C = config.out_channels
    if config.ablation == "no_gcf":
        dense("head.w", D, C)
    else:
        m._add("gcf.q_global", np.zeros((1, D)))
        dense("head.w", 2 * D, C)
    m._add("head.b", np.zeros((1, C)))
    return m


def count_params(m: PhysAttnNet) -> int:
    return sum(p.size for p in m.trainable())


def expected_param_count(config: ModelConfig) -> int:
    """Closed form matching :func:`count_params` (see module docstring)."""
    D, H, C = config.d_model, config.heads, config.out_channels
    per_layer = 20 * D * D + 13 * D
    if config.ablation != "no_dbsa":
        per_layer += 2 * H
    if config.ablation != "no_pdgbca":
        per_layer += 2 * H
    total = (config.wave_channels + config.resp_channels + 2) * D + config.layers * per_layer
    if config.ablation == "no_gcf":
        total += D * C + C
    else:
        total += D + 2 * D * C + C
    return total


# ---------------------------------------------------------------------------
# checkpoint: "PANT" | u32 version | u32 len + UTF-8 config | per param:
#   u32 name len | name | u64 rows | u64 cols | rows*cols float64, all little-endian


def checkpoint_bytes(m: PhysAttnNet) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = m.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, p in m.params.items():
        data = p.value.data
        if data.ndim != 2:
            raise DimensionError(f"parameter {name} is not 2-D: {data.shape}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QQ", data.shape[0], data.shape[1]))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(m: PhysAttnNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(m))


def model_from_bytes(blob: bytes) -> PhysAttnNet:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", blob, 8)
    off = 12
    config = ModelConfig.from_text(blob[off:off + n].decode("utf-8"))
    off += n
    m = build(config)
    seen = set()
    while off < len(blob):
        (k,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + k].decode("utf-8")
        off += k
        rows, cols = struct.unpack_from("<QQ", blob, off)
        off += 16
        count = rows * cols
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(rows, cols)
        off += 8 * count
        if name not in m.params:
            raise DataError(f"checkpoint parameter {name!r} not present in the rebuilt model")
        if m.params[name].value.data.shape != data.shape:
            raise DataError(f"checkpoint parameter {name!r} has shape {data.shape}")
        m.params[name].value.data = data
        seen.add(name)
    missing = set(m.params) - seen
    if missing:
        raise DataError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    return m


def load_checkpoint(path: str | Path) -> PhysAttnNet:
    return model_from_bytes(Path(path).read_bytes())


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
