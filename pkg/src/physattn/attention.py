"""Decay-biased self-attention, phase-biased cross-attention and global context fusion.

All attention here is bidirectional (no causal mask). Biases are additive on
the pre-softmax scores and never scaled; the feature term ``q k^T`` is scaled
by ``1/sqrt(d_head)`` when ``scaled_scores`` is on.

Shapes: sequences are ``(..., L, d_model)``; per-head bias matrices are
``(H, L, L)`` and broadcast over any batch axes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .diffkernel import Param, Tensor
from .errors import DimensionError


def softplus_inverse(y: float) -> float:
    """Raw parameter whose softplus is ``y > 0`` (stable for large ``y``)."""
    return y + math.log(-math.expm1(-y))


def _lag_matrices(L: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    past = np.where(i > j, (i - j) * dt, 0.0)
    future = np.where(i < j, (j - i) * dt, 0.0)
    return past, future


@dataclass
class DecayBias:
    """One-sided temporal decay rates per head, stored as raw softplus inputs.

    Effective rates are ``gamma = softplus(theta) >= 0``; ``theta_p`` governs
    keys in the past of the query and ``theta_f`` keys in its future.
    """

    theta_p: Param
    theta_f: Param
    dt: float
    enabled: bool = True

    @property
    def heads(self) -> int:
        return self.theta_p.value.cols

    def rates(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.logaddexp(0.0, self.theta_p.value.data).ravel(),
                np.logaddexp(0.0, self.theta_f.value.data).ravel())

    def params(self) -> list[Param]:
        return [self.theta_p, self.theta_f]


@dataclass
class PhaseBias:
    """Learnable frequency (Hz) per head for the cosine phase bias."""

    w: Param
    dt: float
    enabled: bool = True

    @property
    def heads(self) -> int:
        return self.w.value.cols

    def params(self) -> list[Param]:
        return [self.w]


def decay_bias_matrix(L: int, b: DecayBias) -> Tensor:
    """``D[h, i, j] = -gamma_p (i-j) dt`` below the diagonal, ``-gamma_f (j-i) dt`` above.

    Returns ``(H, L, L)``; an all-zero constant when the bias is disabled.
    """
    if L < 1:
        raise DimensionError(f"sequence length must be >= 1, got {L}")
    H = b.heads
    if not b.enabled:
        return Tensor(np.zeros((H, L, L)))
    past, future = _lag_matrices(L, b.dt)
    gp = dk.reshape(dk.softplus(b.theta_p.value), (H, 1, 1))
    gf = dk.reshape(dk.softplus(b.theta_f.value), (H, 1, 1))
    return dk.neg(dk.add(dk.mul(gp, Tensor(past)), dk.mul(gf, Tensor(future))))


def phase_bias_matrix(L: int, b: PhaseBias) -> Tensor:
    """``B[h, i, j] = cos(2 pi w_h |i-j| dt)``, shape ``(H, L, L)``."""
    if L < 1:
        raise DimensionError(f"sequence length must be >= 1, got {L}")
    H = b.heads
    if not b.enabled:
        return Tensor(np.zeros((H, L, L)))
    lag = np.abs(np.arange(L)[:, None] - np.arange(L)[None, :]) * (2.0 * np.pi * b.dt)
    w = dk.reshape(b.w.value, (H, 1, 1))
    return dk.cos(dk.mul(w, Tensor(lag)))


@dataclass
class MultiHeadParams:
    """Projections for H heads plus the head-specific additive bias.

    ``w_q``, ``w_k``, ``w_v`` are ``d_model x (H*d)``; columns
    ``h*d:(h+1)*d`` hold head h's projection. ``w_o`` is ``(H*d) x d_model``.
    """

    w_q: Param
    w_k: Param
    w_v: Param
    w_o: Param
    bias: DecayBias | PhaseBias
    scaled_scores: bool = True

    @property
    def heads(self) -> int:
        return self.bias.heads

    @property
    def d_head(self) -> int:
        return self.w_q.value.cols // self.heads

    def params(self) -> list[Param]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, *self.bias.params()]

    def bias_matrix(self, L: int) -> Tensor:
        if isinstance(self.bias, DecayBias):
            return decay_bias_matrix(L, self.bias)
        return phase_bias_matrix(L, self.bias)


def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, L, width = x.shape
    d = width // H
    y = dk.reshape(x, (*lead, L, H, d))
    n = len(lead)
    return dk.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, d = x.shape
    n = len(lead)
    y = dk.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return dk.reshape(y, (*lead, L, H * d))


def multihead_attention(
    q_src: Tensor,
    kv_src: Tensor,
    p: MultiHeadParams,
    bias: Tensor | None = None,
    capture: list | None = None,
) -> Tensor:
    """Biased multi-head attention: queries from ``q_src``, keys/values from ``kv_src``.

    When ``capture`` is a list, the post-softmax weights ``(..., H, L, L)`` are
    appended to it.
    """
    if q_src.shape[-2] != kv_src.shape[-2]:
        raise DimensionError(
            f"query length {q_src.shape[-2]} != key/value length {kv_src.shape[-2]}")
    L = q_src.shape[-2]
    H = p.heads
    if bias is None:
        bias = p.bias_matrix(L)
    q = _split_heads(dk.matmul(q_src, p.w_q.value), H)
    k = _split_heads(dk.matmul(kv_src, p.w_k.value), H)
    v = _split_heads(dk.matmul(kv_src, p.w_v.value), H)
    scores = dk.matmul(q, dk.swap_last(k))
    if p.scaled_scores:
        scores = dk.scale(scores, 1.0 / math.sqrt(p.d_head))
    weights = dk.softmax_rows_with_bias(scores, bias)
    if capture is not None:
        capture.append(weights.data)
    heads = dk.matmul(weights, v)
    return dk.matmul(_merge_heads(heads), p.w_o.value)


def dbsa_forward(x: Tensor, p: MultiHeadParams, capture: list | None = None) -> Tensor:
    """Decay bidirectional self-attention over one sequence."""
    if not isinstance(p.bias, DecayBias):
        raise TypeError("dbsa_forward needs a DecayBias")
    return multihead_attention(x, x, p, capture=capture)


def phase_attention(q_src: Tensor, kv_src: Tensor, p: MultiHeadParams,
                    capture: list | None = None) -> Tensor:
    """Cross-attention with the cosine phase bias added to every head's scores."""
    if not isinstance(p.bias, PhaseBias):
        raise TypeError("phase_attention needs a PhaseBias")
    return multihead_attention(q_src, kv_src, p, capture=capture)


def pdgbca_forward(x_ext: Tensor, x_int: Tensor, stage1: MultiHeadParams,
                   stage2: MultiHeadParams, capture: dict | None = None) -> Tensor:
    """Two-stage bidirectional cross-attention.

    Stage 1: the response stream queries the wave stream. Stage 2: the wave
    stream queries the stage-1 result.
    """
    if x_ext.shape != x_int.shape:
        raise DimensionError(f"wave stream {x_ext.shape} and response stream {x_int.shape} differ")
    c1 = c2 = None
    if capture is not None:
        c1 = capture.setdefault("bca_stage1", [])
        c2 = capture.setdefault("bca_stage2", [])
    x_int1 = phase_attention(x_int, x_ext, stage1, capture=c1)
    return phase_attention(x_ext, x_int1, stage2, capture=c2)


@dataclass
class GCFHead:
    """Global query pooling plus the per-position output projection."""

    q_global: Param  # 1 x d_model
    w: Param  # 2*d_model x d_out
    b: Param  # 1 x d_out

    def params(self) -> list[Param]:
        return [self.q_global, self.w, self.b]


def attention_pool(q: Tensor, seq: Tensor, capture: list | None = None) -> Tensor:
    """Single-query attention with keys = values = ``seq``; returns ``(..., 1, d)``."""
    d = seq.shape[-1]
    scores = dk.scale(dk.matmul(q, dk.swap_last(seq)), 1.0 / math.sqrt(d))
    weights = dk.softmax_rows_with_bias(scores, Tensor(np.zeros((1, seq.shape[-2]))))
    if capture is not None:
        capture.append(weights.data)
    return dk.matmul(weights, seq)


def gcf_fuse(out_dbsa: Tensor, out_bca: Tensor, head: GCFHead,
             capture: list | None = None) -> Tensor:
    """Pool the cross-attention stream into one context vector, broadcast it
    along time, concatenate with the self-attention stream and project."""
    if out_dbsa.shape != out_bca.shape:
        raise DimensionError(f"stream shapes differ: {out_dbsa.shape} vs {out_bca.shape}")
    s = attention_pool(head.q_global.value, out_bca, capture=capture)
    s_b = dk.broadcast_to(s, out_bca.shape)
    return dk.linear(dk.concat_cols(out_dbsa, s_b), head.w, head.b)


# ---------------------------------------------------------------------------
# export


def write_attention_csv(weights: np.ndarray, path: str | Path) -> None:
    """Write a 2-D weight matrix as (row, col, weight) triples."""
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {weights.shape}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "weight"])
        for i in range(weights.shape[0]):
            for j in range(weights.shape[1]):
                w.writerow([i, j, repr(float(weights[i, j]))])


def read_attention_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_r = max(int(r["row"]) for r in rows) + 1
    n_c = max(int(r["col"]) for r in rows) + 1
    out = np.zeros((n_r, n_c))
    for r in rows:
        out[int(r["row"]), int(r["col"])] = float(r["weight"])
    return out
