"""Differentiable spectral transforms built on explicit DFT matrices.

The real DFT is a fixed linear map, so its backward pass is simply the
transposed matrix: gradients through every STFT are exact.  Spectra use a
trailing axis of size 2 holding (real, imaginary).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import ops
from .core import ShapeError, Tensor, make_result


@lru_cache(maxsize=32)
def _forward_matrix(n: int, nfft: int, dtype_name: str) -> np.ndarray:
    # column 2k -> Re X_k, column 2k+1 -> Im X_k
    k = np.arange(nfft // 2 + 1)
    t = np.arange(n)
    phase = 2.0 * np.pi * np.outer(t, k) / nfft
    mat = np.empty((n, 2 * k.size), dtype=np.float64)
    mat[:, 0::2] = np.cos(phase)
    mat[:, 1::2] = -np.sin(phase)
    return mat.astype(dtype_name)


@lru_cache(maxsize=32)
def _inverse_matrix(nfft: int, n: int, dtype_name: str) -> np.ndarray:
    # real inverse of a one-sided spectrum; imaginary parts of DC/Nyquist drop out
    nbins = nfft // 2 + 1
    k = np.arange(nbins)
    t = np.arange(n)
    weight = np.full(nbins, 2.0)
    weight[0] = 1.0
    if nfft % 2 == 0:
        weight[-1] = 1.0
    phase = 2.0 * np.pi * np.outer(k, t) / nfft
    mat = np.empty((2 * nbins, n), dtype=np.float64)
    mat[0::2] = weight[:, None] * np.cos(phase) / nfft
    mat[1::2] = -weight[:, None] * np.sin(phase) / nfft
    return mat.astype(dtype_name)


def dft_linear(frames: Tensor, nfft: int) -> Tensor:
    """One-sided real DFT of the last axis (length n <= nfft, zero padded).

    Returns [..., nfft//2 + 1, 2].
    """
    n = frames.shape[-1]
    if n > nfft:
        raise ShapeError(f"frame length {n} exceeds nfft {nfft}")
    mat = _forward_matrix(n, nfft, frames.dtype.name)
    lead = frames.shape[:-1]
    out = (frames.data.reshape(-1, n) @ mat).reshape(lead + (nfft // 2 + 1, 2))

    def backward(g):
        return ((g.reshape(-1, mat.shape[1]) @ mat.T).reshape(frames.shape),)

    return make_result(out, (frames,), backward)


def idft_linear(spec: Tensor, nfft: int, n: int | None = None) -> Tensor:
    """Inverse of :func:`dft_linear`: [..., nfft//2+1, 2] -> [..., n] real samples."""
    n = nfft if n is None else n
    nbins = nfft // 2 + 1
    if spec.shape[-2:] != (nbins, 2):
        raise ShapeError(f"expected trailing shape ({nbins}, 2), got {spec.shape[-2:]}")
    mat = _inverse_matrix(nfft, n, spec.dtype.name)
    lead = spec.shape[:-2]
    out = (spec.data.reshape(-1, 2 * nbins) @ mat).reshape(lead + (n,))

    def backward(g):
        return ((g.reshape(-1, n) @ mat.T).reshape(spec.shape),)

    return make_result(out, (spec,), backward)


def hann_window(length: int, dtype=np.float32) -> np.ndarray:
    """Periodic Hann window."""
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)).astype(dtype)


def frame_index(length: int, window_length: int, hop: int) -> np.ndarray:
    """Indices into the unpadded signal for centred, reflect-padded frames.

    Shape [T, window_length] with T = length // hop + 1.
    """
    half = window_length // 2
    n_frames = length // hop + 1
    pos = np.arange(n_frames)[:, None] * hop + np.arange(window_length)[None, :] - half
    # reflect without repeating the edge sample
    pos = np.where(pos < 0, -pos, pos)
    pos = np.where(pos >= length, 2 * (length - 1) - pos, pos)
    return pos


def stft(x: Tensor, nfft: int, hop: int, window_length: int) -> Tensor:
    """Centred Hann-window STFT of [..., L] signals -> [..., T, F, 2]."""
    length = x.shape[-1]
    if length < window_length:
        raise ShapeError(f"signal of {length} samples is shorter than window {window_length}")
    if window_length // 2 >= length:
        raise ShapeError("signal too short for reflect padding")
    idx = frame_index(length, window_length, hop)
    frames = ops.take(x, idx) * hann_window(window_length, x.dtype)
    return dft_linear(frames, nfft)


@lru_cache(maxsize=32)
def _window_sum(n_frames: int, window_length: int, hop: int, dtype_name: str) -> np.ndarray:
    win = hann_window(window_length, np.float64)
    total = np.zeros((n_frames - 1) * hop + window_length)
    for t in range(n_frames):
        total[t * hop:t * hop + window_length] += win * win
    return np.maximum(total, 1e-8).astype(dtype_name)


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Sum [..., T, W] frames at stride ``hop`` into [..., (T-1)*hop + W]."""
    n_frames, w = frames.shape[-2:]
    total = (n_frames - 1) * hop + w
    idx = (np.arange(n_frames)[:, None] * hop + np.arange(w)[None, :]).reshape(-1)
    lead = frames.shape[:-2]
    flat = frames.data.reshape(-1, n_frames * w)
    out = np.empty((flat.shape[0], total), dtype=frames.dtype)
    for r in range(flat.shape[0]):
        out[r] = np.bincount(idx, weights=flat[r], minlength=total)

    def backward(g):
        return (g.reshape(-1, total)[:, idx].reshape(frames.shape),)

    return make_result(out.reshape(lead + (total,)), (frames,), backward)


def istft(spec: Tensor, nfft: int, hop: int, window_length: int, length: int) -> Tensor:
    """Weighted overlap-add inverse of :func:`stft`, cropped/padded to ``length``."""
    if hop > window_length // 2:
        raise ValueError(
            f"hop {hop} exceeds window/2 ({window_length // 2}); overlap-add is not exact"
        )
    n_frames = spec.shape[-3]
    frames = idft_linear(spec, nfft, window_length) * hann_window(window_length, spec.dtype)
    y = overlap_add(frames, hop)
    y = y * (1.0 / _window_sum(n_frames, window_length, hop, spec.dtype.name))
    half = window_length // 2
    avail = y.shape[-1] - half
    if avail >= length:
        return y[..., half:half + length]
    y = y[..., half:]
    widths = [(0, 0)] * (y.ndim - 1) + [(0, length - avail)]
    return ops.pad(y, widths)


def magnitude(spec: Tensor, eps: float = 1e-9) -> Tensor:
    """sqrt(re^2 + im^2 + eps) over the trailing pair axis."""
    return ops.sqrt(ops.sum(spec * spec, axis=-1) + eps)
