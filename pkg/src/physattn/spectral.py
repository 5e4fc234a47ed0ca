"""Radix-2 FFT, the hybrid time/frequency loss, and spectrum export.

Convention: unnormalised forward transform, ``X[k] = sum_n x[n] exp(-2j pi k n / P)``,
where ``P`` is the input length zero-padded to the next power of two. The
frequency loss and the SMAE metric both use the one-sided bins
``k = 0 .. P/2`` (``K = P/2 + 1`` of them), so padding and normalisation
cancel whenever two spectra are compared.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor
from .errors import ConfigError, DimensionError


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError(f"length must be positive, got {n}")
    return 1 << (n - 1).bit_length()


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def fft_last_axis(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis.

    The input is zero-padded to the next power of two; leading axes are
    transformed independently.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    pad = next_pow2(n)
    lead = x.shape[:-1]
    a = np.zeros(lead + (pad,), dtype=np.complex128)
    a[..., :n] = x
    a = a[..., _bit_reverse(pad)]
    size = 2
    while size <= pad:
        half = size // 2
        blocks = a.reshape(lead + (pad // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(size)
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (pad,))
        size *= 2
    return a


@dataclass(frozen=True)
class Spectrum:
    bins: np.ndarray  # complex, length pad_length
    length: int
    pad_length: int

    @property
    def onesided(self) -> np.ndarray:
        return self.bins[: self.pad_length // 2 + 1]

    def frequencies(self, dt: float) -> np.ndarray:
        k = np.arange(self.pad_length // 2 + 1)
        return k / (self.pad_length * dt)


def fft(x) -> Spectrum:
    x = np.asarray(x, dtype=np.float64).ravel()
    bins = fft_last_axis(x)
    return Spectrum(bins=bins, length=x.size, pad_length=bins.size)


def write_spectrum_csv(spec: Spectrum, dt: float, path: str | Path) -> None:
    """One row per one-sided bin: index, frequency in Hz, re, im, modulus."""
    freqs = spec.frequencies(dt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "freq_hz", "re", "im", "modulus"])
        for k, (f, c) in enumerate(zip(freqs, spec.onesided)):
            w.writerow([k, repr(float(f)), repr(float(c.real)), repr(float(c.imag)), repr(float(abs(c)))])


# ---------------------------------------------------------------------------
# differentiable transform


def fft_onesided(x: Tensor) -> tuple[Tensor, Tensor]:
    """One-sided spectrum of every column of ``x`` (time runs down the rows).

    Returns (re, im), each shaped ``(..., cols, K)``. The backward pass applies
    the conjugate-transposed transform and drops the padded tail.
    """
    xd = x.data
    n = xd.shape[-2]
    pad = next_pow2(n)
    k = pad // 2 + 1
    spec = fft_last_axis(np.swapaxes(xd, -1, -2))[..., :k]

    def backward_pair(g):
        gr, gi = g[..., 0], g[..., 1]
        full = np.zeros(gr.shape[:-1] + (pad,), dtype=np.complex128)
        full[..., :k] = gr - 1j * gi
        # grad_x[n] = Re(sum_k conj(W[k, n]) (gr + i gi)) = Re(FFT(gr - i gi))[n]
        back = fft_last_axis(full).real[..., :n]
        return (np.swapaxes(back, -1, -2),)

    pair = dk.make_node(np.stack([spec.real, spec.imag], axis=-1), (x,), backward_pair)
    re = dk.make_node(pair.data[..., 0], (pair,), lambda g: (np.stack([g, np.zeros_like(g)], -1),))
    im = dk.make_node(pair.data[..., 1], (pair,), lambda g: (np.stack([np.zeros_like(g), g], -1),))
    return re, im


# ---------------------------------------------------------------------------
# losses


def _check_pair(pred: Tensor, true: Tensor, what: str) -> None:
    if pred.shape != true.shape:
        raise DimensionError(f"{what}: prediction shape {pred.shape} != target shape {true.shape}")


def time_loss(pred: Tensor, true: Tensor) -> Tensor:
    """Mean absolute error over every entry."""
    _check_pair(pred, true, "time_loss")
    return dk.mean(dk.abs_(dk.sub(pred, true)))


def freq_loss(pred: Tensor, true: Tensor) -> Tensor:
    """Mean modulus of the one-sided spectral difference.

    Each column (channel) is transformed along the horizon axis; the mean runs
    over bins, channels and batch items, which all carry equal weight.
    """
    _check_pair(pred, true, "freq_loss")
    re, im = fft_onesided(dk.sub(pred, true))
    return dk.mean(dk.modulus(re, im))


def hybrid_loss(pred: Tensor, true: Tensor, lam: float) -> Tensor:
    """``(1 - lam) * time_loss + lam * freq_loss``.

    At the endpoints only one component is evaluated, so the result is
    bitwise equal to that component.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return time_loss(pred, true)
    if lam == 1.0:
        return freq_loss(pred, true)
    return dk.add(dk.scale(time_loss(pred, true), 1.0 - lam), dk.scale(freq_loss(pred, true), lam))
