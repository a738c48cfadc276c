"""Waveform L1 plus multi-resolution STFT magnitude loss."""

from __future__ import annotations

from dataclasses import dataclass

from .dsp import ConfigError, InputError
from .tensor import ShapeError, Tensor, ops
from .tensor import spectral as sp


@dataclass(frozen=True)
class Resolution:
    nfft: int
    hop_length: int
    window_length: int

    def __post_init__(self):
        if not 0 < self.hop_length < self.window_length <= self.nfft:
            raise ConfigError(
                f"resolution {self}: need 0 < hop < window <= nfft"
            )


# Tuples read as (nfft, hop, window): the only order with hop < window <= nfft.
DEFAULT_RESOLUTIONS = (
    Resolution(512, 50, 240),
    Resolution(1024, 120, 600),
    Resolution(2048, 240, 1200),
)


def parse_resolutions(text: str) -> tuple[Resolution, ...]:
    """'512,50,240;1024,120,600' -> resolutions (nfft, hop, window)."""
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            nfft, hop, win = (int(v) for v in chunk.split(","))
            out.append(Resolution(nfft, hop, win))
    if not out:
        raise ConfigError("at least one loss resolution is required")
    return tuple(out)


def format_resolutions(res) -> str:
    return ";".join(f"{r.nfft},{r.hop_length},{r.window_length}" for r in res)


def _check_pair(est: Tensor, ref: Tensor) -> None:
    if est.shape != ref.shape:
        raise ShapeError(f"estimate shape {est.shape} differs from reference {ref.shape}")


def l1_loss(est: Tensor, ref: Tensor) -> Tensor:
    _check_pair(est, ref)
    return ops.mean(ops.abs(est - ref))


def multi_stft_loss(est: Tensor, ref: Tensor, resolutions=DEFAULT_RESOLUTIONS, eps: float = 1e-9) -> Tensor:
    """Sum over resolutions of the mean absolute magnitude difference."""
    _check_pair(est, ref)
    length = est.shape[-1]
    total = None
    for r in resolutions:
        if length < r.window_length:
            raise InputError(
                f"signal of {length} samples is shorter than the {r.window_length}-sample window "
                f"of resolution (nfft={r.nfft}, hop={r.hop_length})"
            )
        mag_e = sp.magnitude(sp.stft(est, r.nfft, r.hop_length, r.window_length), eps)
        mag_r = sp.magnitude(sp.stft(ref, r.nfft, r.hop_length, r.window_length), eps)
        term = ops.mean(ops.abs(mag_e - mag_r))
        total = term if total is None else total + term
    return total


def total_loss(est: Tensor, ref: Tensor, resolutions=DEFAULT_RESOLUTIONS) -> Tensor:
    """Unweighted sum of the waveform L1 and multi-resolution STFT terms."""
    return l1_loss(est, ref) + multi_stft_loss(est, ref, resolutions)
