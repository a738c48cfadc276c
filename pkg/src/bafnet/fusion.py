"""Noise-adaptive fusion of the enhanced body-conduction and denoised acoustic branches.

Both branch spectrograms are normalised to unit mean energy, blended per
time-frequency bin with alpha (alpha -> 1 picks the acoustic branch), and
rescaled by the average root energy of the two branches before synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .dsp import ComplexSpectrogram, StftConfig, Waveform
from .models import ContractError, Networks
from .tensor import Tensor, no_grad, ops
from .tensor import spectral as sp

ENERGY_FLOOR = 1e-10


class DegenerateEnergy(ArithmeticError):
    """A spectrogram is (numerically) silent and cannot be energy-normalised."""


@dataclass
class FusionOutput:
    waveform: Waveform
    spectrogram: ComplexSpectrogram
    alpha: np.ndarray
    mask_magnitude: np.ndarray
    bms_branch: ComplexSpectrogram
    ams_branch: ComplexSpectrogram
    ams_noisy: ComplexSpectrogram
    bms_waveform: Waveform

    def branch_waveform(self, which: str) -> Waveform:
        """Single-branch output: 'bms' is the mapping output, 'ams' the masked-spectrogram synthesis."""
        if which == "bms":
            return self.bms_waveform
        if which == "ams":
            return dsp.istft(self.ams_branch, len(self.waveform))
        raise ValueError(f"unknown branch {which!r}")


# -- spectrogram-level operations -------------------------------------------------

def mean_energy(X: ComplexSpectrogram | np.ndarray) -> float:
    v = X.values if isinstance(X, ComplexSpectrogram) else np.asarray(X)
    v = v.astype(np.complex128)
    return float(np.mean(v.real ** 2 + v.imag ** 2))


def normalize(X: ComplexSpectrogram) -> ComplexSpectrogram:
    e = mean_energy(X)
    if e <= ENERGY_FLOOR:
        raise DegenerateEnergy(f"mean energy {e:.3g} is at or below the floor {ENERGY_FLOOR}")
    return ComplexSpectrogram(X.values.astype(np.complex128) / np.sqrt(e), X.config)


def interpolate(alpha: np.ndarray, X_am: ComplexSpectrogram, X_bm: ComplexSpectrogram) -> ComplexSpectrogram:
    X_am.require_same_config(X_bm)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != X_am.shape:
        raise ContractError(f"alpha shape {alpha.shape} does not match spectrogram {X_am.shape}")
    fused = alpha * X_am.values.astype(np.complex128) + (1.0 - alpha) * X_bm.values.astype(np.complex128)
    return ComplexSpectrogram(fused, X_am.config)


def rescale_factor(e_bm: float, e_am: float) -> float:
    if e_bm < 0 or e_am < 0:
        raise ValueError("energies must be nonnegative")
    return (np.sqrt(e_bm) + np.sqrt(e_am)) / 2.0


def rescale(X: ComplexSpectrogram, e_bm: float, e_am: float) -> ComplexSpectrogram:
    return ComplexSpectrogram(X.values.astype(np.complex128) * rescale_factor(e_bm, e_am), X.config)


def apply_mask(X_am: ComplexSpectrogram, M: np.ndarray | ComplexSpectrogram) -> ComplexSpectrogram:
    """Element-wise complex product."""
    m = M.values if isinstance(M, ComplexSpectrogram) else np.asarray(M)
    if m.shape != X_am.shape:
        raise ContractError(f"mask shape {m.shape} does not match spectrogram {X_am.shape}")
    return ComplexSpectrogram(X_am.values.astype(np.complex128) * m, X_am.config)


def mask_magnitude(M: np.ndarray) -> np.ndarray:
    m = np.asarray(M)
    if m.ndim >= 1 and m.shape[-1] == 2 and not np.iscomplexobj(m):
        return np.sqrt(m[..., 0].astype(np.float64) ** 2 + m[..., 1].astype(np.float64) ** 2)
    return np.abs(m)


def fuse_spectrograms(X_bm: ComplexSpectrogram, X_am: ComplexSpectrogram, alpha: np.ndarray) -> ComplexSpectrogram:
    """Normalise, interpolate and rescale, with the silent-branch fallback."""
    X_bm.require_same_config(X_am)
    e_bm, e_am = mean_energy(X_bm), mean_energy(X_am)
    bm_silent, am_silent = e_bm <= ENERGY_FLOOR, e_am <= ENERGY_FLOOR
    if bm_silent and am_silent:
        return ComplexSpectrogram(np.zeros(X_am.shape, np.complex64), X_am.config)
    if bm_silent:
        return X_am
    if am_silent:
        return X_bm
    mixed = interpolate(alpha, normalize(X_am), normalize(X_bm))
    return rescale(mixed, e_bm, e_am)


# -- differentiable batch path used in training --------------------------------------

def _batch_energy(X: Tensor) -> Tensor:
    t, f = X.shape[1], X.shape[2]
    return ops.sum(X * X, axis=(1, 2, 3), keepdims=True) * (1.0 / (t * f))


def fuse_tensors(X_bm: Tensor, X_am: Tensor, alpha: Tensor) -> Tensor:
    """Per-utterance energy-normalised fusion for [N, T, F, 2] batches; alpha is [N, T, F]."""
    e_bm = ops.clip(_batch_energy(X_bm), ENERGY_FLOOR, np.inf)
    e_am = ops.clip(_batch_energy(X_am), ENERGY_FLOOR, np.inf)
    r_bm, r_am = ops.sqrt(e_bm), ops.sqrt(e_am)
    a = ops.reshape(alpha, alpha.shape + (1,))
    mixed = a * (X_am / r_am) + (1.0 - a) * (X_bm / r_bm)
    return mixed * ((r_bm + r_am) * 0.5)


@dataclass
class BatchOutput:
    waveform: Tensor
    alpha: Tensor
    mask: Tensor
    bms_waveform: Tensor
    ams_spec: Tensor


def forward_batch(nets: Networks, x_bm: Tensor, x_am: Tensor, cfg: StftConfig = dsp.PIPELINE_STFT,
                  _force_alpha: float | None = None) -> BatchOutput:
    """Differentiable end-to-end pass for [N, L] batches."""
    if x_bm.shape != x_am.shape:
        raise dsp.InputError(f"BMS and AMS lengths differ: {x_bm.shape} vs {x_am.shape}")
    length = x_bm.shape[-1]
    bms_hat = nets.mapping(x_bm)
    X_bm = sp.stft(bms_hat, cfg.nfft, cfg.hop_length, cfg.window_length)
    X_am = sp.stft(x_am, cfg.nfft, cfg.hop_length, cfg.window_length)
    M = nets.masking(X_am)
    X_am_hat = complex_multiply(X_am, M)
    if _force_alpha is None:
        alpha = nets.fc(sp.magnitude(M, eps=1e-12))
    else:
        alpha = Tensor(np.full(X_am.shape[:3], _force_alpha, dtype=X_am.dtype))
    fused = fuse_tensors(X_bm, X_am_hat, alpha)
    y = sp.istft(fused, cfg.nfft, cfg.hop_length, cfg.window_length, length)
    return BatchOutput(y, alpha, M, bms_hat, X_am_hat)


def complex_multiply(a: Tensor, b: Tensor) -> Tensor:
    """(re, im) pair product over the trailing axis."""
    ar, ai = a[..., 0], a[..., 1]
    br, bi = b[..., 0], b[..., 1]
    return ops.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)


# -- inference --------------------------------------------------------------------------

def enhance(x_bm: Waveform, x_am_noisy: Waveform, nets: Networks, cfg: StftConfig = dsp.PIPELINE_STFT,
            _force_alpha: float | None = None, _force_mask: np.ndarray | None = None,
            _bypass_mapping: bool = False) -> FusionOutput:
    """Run both branches, fuse and synthesise.  Deterministic: networks run in eval mode.

    The underscore keywords are test hooks that pin alpha or the mask to fixed
    values or make the mapping branch an identity; they are not exposed by
    the command-line interface.
    """
    if len(x_bm) != len(x_am_noisy):
        raise dsp.InputError(f"BMS has {len(x_bm)} samples but AMS has {len(x_am_noisy)}")
    cfg.check_cola()
    nets.eval()
    with no_grad():
        if _bypass_mapping:
            bms_hat = x_bm.samples.copy()
        else:
            bms_hat = nets.mapping(Tensor(x_bm.samples[None])).data[0]
        X_am = dsp.stft(x_am_noisy, cfg)
        if _force_mask is None:
            M = nets.masking(Tensor(X_am.to_pairs()[None])).data[0]
            M = M[..., 0] + 1j * M[..., 1]
        else:
            M = np.broadcast_to(np.asarray(_force_mask), X_am.shape)
        mag = mask_magnitude(M).astype(np.float32)
        if _force_alpha is None:
            alpha = nets.fc(Tensor(mag)).data.astype(np.float64)
        else:
            alpha = np.full(X_am.shape, float(_force_alpha))
    bms_wave = Waveform(bms_hat)
    X_bm = dsp.stft(bms_wave, cfg)
    X_am_hat = apply_mask(X_am, M)
    fused = fuse_spectrograms(X_bm, X_am_hat, alpha)
    y = dsp.istft(fused, len(x_bm))
    return FusionOutput(y, fused, alpha, mag, X_bm, X_am_hat, X_am, bms_wave)
