"""Objective measures (SI-SDR, STOI, segmental SNR, log-spectral distance) and corpus evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import SAMPLE_RATE, InputError, StftConfig, Waveform
from .models import ContractError

SI_SDR_CAP = 60.0
SYSTEMS = ("bms", "ams", "fused")
SYSTEM_LABELS = {"bms": "BMS-branch", "ams": "AMS-branch", "fused": "Fused"}
METRICS = ("si_sdr", "stoi", "segsnr", "lsd")
METRIC_LABELS = {"si_sdr": "SI-SDR (dB)", "stoi": "STOI", "segsnr": "SegSNR (dB)", "lsd": "LSD (dB)"}


def _arr(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64).reshape(-1)


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    e, r = _arr(est), _arr(ref)
    if e.shape != r.shape:
        raise ContractError(f"estimate has {e.size} samples, reference {r.size}")
    return e, r


def si_sdr(est, ref, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, clamped to [-cap, cap]."""
    e, r = _pair(est, ref)
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise InputError("reference is silent; SI-SDR is undefined")
    target = (np.dot(e, r) / rr) * r
    resid = e - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den <= num * 10.0 ** (-cap / 10.0):
        return cap
    if num <= den * 10.0 ** (-cap / 10.0):
        return -cap
    return 10.0 * np.log10(num / den)


# -- STOI -----------------------------------------------------------------------------------

STOI_FRAME, STOI_HOP, STOI_NFFT = 400, 200, 1024
STOI_BANDS, STOI_MIN_FREQ = 15, 150.0
STOI_SEGMENT, STOI_BETA, STOI_DYN_RANGE = 30, -15.0, 40.0


def third_octave_matrix(fs: int = SAMPLE_RATE, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """[bands, nfft/2+1] 0/1 matrix grouping DFT bins into one-third-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    cf = min_freq * 2.0 ** (k / 3.0)
    lo, hi = cf * 2.0 ** (-1.0 / 6.0), cf * 2.0 ** (1.0 / 6.0)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x: np.ndarray, win: np.ndarray, hop: int) -> np.ndarray:
    n = (x.size - win.size) // hop + 1
    if n < 1:
        return np.zeros((0, win.size))
    idx = np.arange(win.size)[None, :] + hop * np.arange(n)[:, None]
    return x[idx] * win


def _remove_silence(x: np.ndarray, y: np.ndarray, win: np.ndarray, hop: int, dyn_range: float):
    fx, fy = _frames(x, win, hop), _frames(y, win, hop)
    energy = 20.0 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max(initial=-np.inf) - dyn_range
    fx, fy = fx[keep], fy[keep]
    n = fx.shape[0]
    out_len = (n - 1) * hop + win.size if n else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for i in range(n):
        xs[i * hop:i * hop + win.size] += fx[i]
        ys[i * hop:i * hop + win.size] += fy[i]
    return xs, ys


def _band_envelopes(x: np.ndarray, win: np.ndarray, obm: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frames(x, win, STOI_HOP), n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # [bands, frames]


def stoi(est, ref) -> float:
    """Short-time objective intelligibility computed directly at 16 kHz."""
    y, x = _pair(est, ref)
    win = np.hanning(STOI_FRAME + 2)[1:-1]
    x, y = _remove_silence(x, y, win, STOI_HOP, STOI_DYN_RANGE)
    obm = third_octave_matrix()
    X, Y = _band_envelopes(x, win, obm), _band_envelopes(y, win, obm)
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InputError(
            f"only {n_frames} active frames after silence removal; STOI needs {STOI_SEGMENT} "
            f"(about {STOI_SEGMENT * STOI_HOP / SAMPLE_RATE * 1000:.0f} ms of active speech)"
        )
    clip = 1.0 + 10.0 ** (-STOI_BETA / 20.0)
    eps = np.finfo(float).eps
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs, ys = X[:, m - STOI_SEGMENT:m], Y[:, m - STOI_SEGMENT:m]
        gain = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yc = np.minimum(ys * gain, xs * clip)
        xs = xs - xs.mean(axis=1, keepdims=True)
        yc = yc - yc.mean(axis=1, keepdims=True)
        xs = xs / (np.linalg.norm(xs, axis=1, keepdims=True) + eps)
        yc = yc / (np.linalg.norm(yc, axis=1, keepdims=True) + eps)
        scores.append(np.mean(np.sum(xs * yc, axis=1)))
    return float(np.mean(scores))


# -- segmental SNR and log-spectral distance ---------------------------------------------------

SEGSNR_RANGE = (-10.0, 35.0)


def segmental_snr(est, ref, frame_ms: float = 32.0, active_db: float = 40.0) -> float:
    """Mean clamped frame SNR over frames within ``active_db`` of the loudest reference frame."""
    e, r = _pair(est, ref)
    n = int(round(frame_ms * SAMPLE_RATE / 1000.0))
    count = r.size // n
    if count < 1:
        raise InputError(f"signal shorter than one {frame_ms} ms frame")
    rf = r[: count * n].reshape(count, n)
    ef = e[: count * n].reshape(count, n)
    sig = np.sum(rf ** 2, axis=1)
    err = np.sum((rf - ef) ** 2, axis=1)
    active = sig > sig.max() * 10.0 ** (-active_db / 10.0)
    if not np.any(active):
        raise InputError("reference has no active frames")
    lo, hi = SEGSNR_RANGE
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(sig[active] / err[active])
    return float(np.mean(np.clip(snr, lo, hi)))


def log_spectral_distance(est, ref, cfg: StftConfig = dsp.PIPELINE_STFT, floor: float = 1e-8) -> float:
    e, r = _pair(est, ref)
    le = 20.0 * np.log10(np.maximum(np.abs(dsp.stft(e, cfg).values.astype(np.complex128)), floor))
    lr = 20.0 * np.log10(np.maximum(np.abs(dsp.stft(r, cfg).values.astype(np.complex128)), floor))
    return float(np.mean(np.sqrt(np.mean((le - lr) ** 2, axis=1))))


def mean_alpha(output, band: tuple[int, int] | None = None) -> float:
    """Mean fusion coefficient over frequency bins ``band = (lo, hi)`` (half-open); full grid by default."""
    alpha = np.asarray(getattr(output, "alpha", output), dtype=np.float64)
    if band is not None:
        alpha = alpha[:, band[0]:band[1]]
    if alpha.size == 0:
        raise ContractError(f"empty alpha selection for band {band}")
    return float(np.mean(alpha))


def all_metrics(est, ref, cfg: StftConfig = dsp.PIPELINE_STFT, opts=None) -> dict[str, float]:
    """Every measure of ``est`` against ``ref``; ``opts`` carries si_sdr_cap, segsnr_frame_ms, lsd_floor."""
    cap = getattr(opts, "si_sdr_cap", SI_SDR_CAP)
    frame_ms = getattr(opts, "segsnr_frame_ms", 32.0)
    floor = getattr(opts, "lsd_floor", 1e-8)
    return {"si_sdr": si_sdr(est, ref, cap), "stoi": stoi(est, ref),
            "segsnr": segmental_snr(est, ref, frame_ms), "lsd": log_spectral_distance(est, ref, cfg, floor)}


# -- corpus evaluation ----------------------------------------------------------------------------

@dataclass
class EvalReport:
    items: list[dict]
    buckets: dict[str, dict]
    reverb_buckets: dict[str, dict]
    snr_levels: list[float]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"version": 1, "config_hash": self.config_hash, "n_items": len(self.items),
                "snr_levels": self.snr_levels, "systems": list(SYSTEMS), "metrics": list(METRICS),
                "buckets": self.buckets, "reverb_buckets": self.reverb_buckets, "items": self.items}
        body.update(self.extra)
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        """Metric blocks with systems as rows and SNR buckets as columns."""
        keys = [_snr_key(s) for s in self.snr_levels]
        width = 10
        head = "system".ljust(12) + "".join(f"{k + ' dB':>{width}}" for k in keys)
        lines = []
        for metric in METRICS:
            lines += [METRIC_LABELS[metric], head]
            for sysname in SYSTEMS:
                vals = [self.buckets[k]["systems"][sysname][metric]["mean"] for k in keys]
                lines.append(SYSTEM_LABELS[sysname].ljust(12) + "".join(f"{v:>{width}.4f}" for v in vals))
            lines.append("")
        lines += ["mean alpha", head,
                  "Fused".ljust(12) + "".join(f"{self.buckets[k]['alpha_mean']:>{width}.4f}" for k in keys), ""]
        lines.append("count".ljust(12) + "".join(f"{self.buckets[k]['count']:>{width}d}" for k in keys))
        return "\n".join(lines) + "\n"


def _snr_key(snr: float) -> str:
    return f"{snr:g}"


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": round(float(v.mean()), 4), "std": round(float(v.std()), 4), "count": int(v.size)}


def _aggregate(rows: list[dict]) -> dict:
    return {
        "count": len(rows),
        "reverberant": sum(1 for r in rows if r["reverberant"]),
        "alpha_mean": round(float(np.mean([r["alpha_mean"] for r in rows])), 4),
        "systems": {s: {m: _stats([r[s][m] for r in rows]) for m in METRICS} for s in SYSTEMS},
    }


def evaluate_item(triplet, nets, cfg: StftConfig = dsp.PIPELINE_STFT, opts=None) -> dict:
    from .fusion import enhance

    out = enhance(triplet.bms, triplet.ams_noisy, nets, cfg)
    ref = triplet.ams_clean
    row = {"id": triplet.id, "snr_db": triplet.snr_db, "reverberant": triplet.reverberant,
           "noise_id": triplet.noise_id, "alpha_mean": round(mean_alpha(out), 6)}
    systems = {"bms": out.branch_waveform("bms"), "ams": out.branch_waveform("ams"), "fused": out.waveform}
    for name, wav in systems.items():
        row[name] = {m: round(v, 6) for m, v in all_metrics(wav, ref, cfg, opts).items()}
    return row


def evaluate_corpus(triplets, nets, cfg: StftConfig = dsp.PIPELINE_STFT, config_hash: str = "",
                    opts=None) -> EvalReport:
    """Enhance every triplet, score each system against the clean reference and bucket by SNR."""
    rows = sorted((evaluate_item(t, nets, cfg, opts) for t in triplets), key=lambda r: r["id"])
    snrs = sorted({r["snr_db"] for r in rows})
    buckets = {_snr_key(s): _aggregate([r for r in rows if r["snr_db"] == s]) for s in snrs}
    reverb = {}
    for flag, name in ((True, "reverberant"), (False, "anechoic")):
        sel = [r for r in rows if r["reverberant"] == flag]
        if sel:
            reverb[name] = _aggregate(sel)
    return EvalReport(rows, buckets, reverb, snrs, config_hash)
