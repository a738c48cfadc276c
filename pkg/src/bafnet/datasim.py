"""Synthetic paired-corpus generation: (BMS, noisy AMS, clean AMS) triplets.

Clean speech is a synthetic harmonic stand-in, the body-conduction track is a
fixed low-pass plus tilt filter of the clean signal, and the acoustic track is
the clean signal (optionally reverberated) mixed with noise at a target SNR.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from . import dsp
from .dsp import SAMPLE_RATE, ConfigError, InputError, Waveform

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
_SPLIT_ID = {"train": 1, "val": 2, "test": 3}
NOISE_KINDS = ("white", "pink", "tonal")


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 24
    n_val: int = 4
    n_test: int = 4
    duration_s: float = 2.0
    test_snrs: str = "-20,-10,0,10,15"
    train_snr_min: float = -15.0
    train_snr_max: float = 20.0
    train_reverb: float = 0.75
    test_reverb: float = 0.5
    train_noises: str = "white0,pink0,tonal0,pink1"
    test_noises: str = "white1,pink2,tonal1,tonal2"
    train_rirs: str = "rir0,rir1,rir2,rir3,rir4,rir5"
    test_rirs: str = "rir100,rir101,rir102"
    rt60_min: float = 0.2
    rt60_max: float = 0.8
    rir_length_s: float = 0.5
    bms_cutoff_hz: float = 2000.0
    bms_taps: int = 255
    tilt_db_per_octave: float = -3.0
    tilt_corner_hz: float = 500.0
    tilt_taps: int = 63
    speech_peak: float = 0.5

    def snr_levels(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.test_snrs.split(","))

    def pool(self, split: str, kind: str) -> tuple[str, ...]:
        text = getattr(self, f"{'test' if split == 'test' else 'train'}_{kind}")
        return tuple(v.strip() for v in text.split(",") if v.strip())

    def check_pools(self) -> None:
        for kind in ("noises", "rirs"):
            shared = set(self.pool("train", kind)) & set(self.pool("test", kind))
            if shared:
                raise ConfigError(
                    f"{kind[:-1]} ids shared by train and test pools: {', '.join(sorted(shared))}"
                )
            if not self.pool("train", kind) or not self.pool("test", kind):
                raise ConfigError(f"empty {kind[:-1]} pool")

    def hash(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Triplet:
    id: str
    bms: Waveform
    ams_noisy: Waveform
    ams_clean: Waveform
    snr_db: float
    reverberant: bool
    noise_id: str
    rir_id: str
    seed: int


def _id_seed(name: str) -> int:
    return zlib.crc32(name.encode())


# -- sources ---------------------------------------------------------------------------

def _smooth_walk(rng, n: int, n_knots: int) -> np.ndarray:
    knots = rng.uniform(-1.0, 1.0, size=n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def synth_speechlike(seed: int, duration_s: float, peak: float = 0.5) -> Waveform:
    """Harmonic speech stand-in: wandering F0, moving formants, syllables and pauses."""
    if duration_s < 0.5:
        raise InputError(f"duration {duration_s} s is below the 0.5 s minimum")
    rng = np.random.default_rng([seed, 7])
    n = int(round(duration_s * SAMPLE_RATE))
    t_knots = max(int(duration_s * 4), 2)
    f0 = 155.0 + 65.0 * _smooth_walk(rng, n, t_knots)
    formants = [
        c + w * _smooth_walk(rng, n, t_knots)
        for c, w in ((550.0, 250.0), (1600.0, 650.0), (2750.0, 250.0))
    ]
    widths = (120.0, 180.0, 250.0)
    gains = (1.0, 0.5, 0.25)
    phase0 = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    y = np.zeros(n)
    for k in range(1, int(7000 / 90.0) + 1):
        fk = k * f0
        amp = sum(g * np.exp(-0.5 * ((fk - fc) / w) ** 2) for fc, w, g in zip(formants, widths, gains))
        amp = amp + 0.05 / k
        amp = amp * np.clip((6800.0 - fk) / 200.0, 0.0, 1.0)  # fade harmonics out below 7 kHz
        y += amp * np.sin(k * phase0 + rng.uniform(0, 2 * np.pi))
    # syllable envelope with silent pauses
    env = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.15) * SAMPLE_RATE)
    while pos < n:
        syl = int(rng.uniform(0.15, 0.3) * SAMPLE_RATE)
        end = min(pos + syl, n)
        env[pos:end] = np.sin(np.pi * np.arange(end - pos) / syl) ** 0.7
        pos = end + int(rng.uniform(0.08, 0.25) * SAMPLE_RATE)
    y *= env
    m = np.abs(y).max()
    return Waveform(y * (peak / m) if m > 0 else y)


def make_noise(noise_id: str, n: int, seed: int = 0) -> Waveform:
    """Generated noise clip from an id like 'pink3'; 'file:<path>' loads a WAV."""
    if noise_id.startswith("file:"):
        return dsp.read_wav(noise_id[5:])
    kind = noise_id.rstrip("0123456789")
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind in id {noise_id!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng([seed, _id_seed(noise_id)])
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spec[1:] /= np.sqrt(f[1:] / f[1])
        spec[0] = 0.0
        x = np.fft.irfft(spec, n)
    else:
        t = np.arange(n) / SAMPLE_RATE
        x = np.zeros(n)
        for _ in range(4):
            x += np.sin(2 * np.pi * rng.uniform(200, 5000) * t + rng.uniform(0, 2 * np.pi))
        band = sps.firwin(129, [300.0, 3000.0], pass_zero=False, fs=SAMPLE_RATE)
        x += 2.0 * dsp.fir_filter(rng.standard_normal(n), band)
    x = x / np.sqrt(np.mean(x ** 2))
    return Waveform(0.1 * x)


def synth_rir(seed: int, rt60_s: float, length_s: float = 0.5) -> np.ndarray:
    """Exponentially decaying white noise behind a unit direct-path impulse at t=0."""
    if not 0.1 <= rt60_s <= 1.0:
        raise ConfigError(f"rt60 {rt60_s} s outside [0.1, 1.0]")
    rng = np.random.default_rng([seed, 11])
    n = max(int(round(length_s * SAMPLE_RATE)), 2)
    t = np.arange(n) / SAMPLE_RATE
    decay = np.log(1000.0) / rt60_s  # amplitude falls 60 dB after rt60
    h = 0.03 * rng.standard_normal(n) * np.exp(-decay * t)
    h[0] = 1.0
    return h


def rir_for_id(rir_id: str, cfg: DataConfig, seed: int = 0) -> np.ndarray:
    if rir_id.startswith("file:"):
        return dsp.read_wav(rir_id[5:]).samples.astype(np.float64)
    s = _id_seed(rir_id)
    rt60 = np.random.default_rng([seed, s, 1]).uniform(cfg.rt60_min, cfg.rt60_max)
    return synth_rir(s, float(rt60), cfg.rir_length_s)


# -- body-conduction simulation and mixing -----------------------------------------------

def bms_filter(cfg: DataConfig = DataConfig()) -> np.ndarray:
    """Combined low-pass and tilt FIR, scaled so its peak magnitude response is 1."""
    lp = sps.firwin(cfg.bms_taps, cfg.bms_cutoff_hz, fs=SAMPLE_RATE)
    freqs = np.linspace(0.0, SAMPLE_RATE / 2, 65)
    slope = cfg.tilt_db_per_octave / 20.0 / np.log10(2.0)
    gain = np.where(freqs > cfg.tilt_corner_hz, (np.maximum(freqs, 1.0) / cfg.tilt_corner_hz) ** slope, 1.0)
    tilt = sps.firwin2(cfg.tilt_taps, freqs, gain, fs=SAMPLE_RATE)
    h = np.convolve(lp, tilt)
    _, resp = sps.freqz(h, worN=4096)
    return h / np.abs(resp).max()


def simulate_bms(clean, cfg: DataConfig = DataConfig()) -> Waveform:
    """Deterministic linear stand-in for body-conducted capture."""
    s = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, dtype=np.float64)
    return Waveform(dsp.fir_filter(s, bms_filter(cfg)))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def noise_gain(clean, noise, snr_db: float) -> float:
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean)
    v = noise.samples if isinstance(noise, Waveform) else np.asarray(noise)
    rc = _rms(c)
    if rc == 0.0:
        raise InputError("clean signal is silent; SNR is undefined")
    rn = _rms(v[:c.size])
    if rn == 0.0:
        raise InputError("noise signal is silent")
    return rc / (rn * 10.0 ** (snr_db / 20.0))


def fit_noise(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Loop-tile ``noise`` and take ``n`` samples starting at ``offset``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise InputError("noise clip is empty")
    reps = int(np.ceil((offset + n) / noise.size))
    return np.tile(noise, reps)[offset:offset + n]


def mix_at_snr(clean, noise, snr_db: float) -> Waveform:
    """clean + g * noise with g chosen for the target SNR (noise loop-tiled if short)."""
    c = (clean.samples if isinstance(clean, Waveform) else np.asarray(clean)).astype(np.float64)
    v = fit_noise(noise.samples if isinstance(noise, Waveform) else noise, c.size)
    g = noise_gain(c, v, snr_db)
    return Waveform(c + g * v)


def measured_snr(clean, noisy) -> float:
    c = np.asarray(clean.samples if isinstance(clean, Waveform) else clean, dtype=np.float64)
    y = np.asarray(noisy.samples if isinstance(noisy, Waveform) else noisy, dtype=np.float64)
    return 10.0 * np.log10(np.sum(c ** 2) / np.sum((y - c) ** 2))


# -- corpus ------------------------------------------------------------------------------

def make_triplet(item_id: str, clean: Waveform, noise: Waveform, snr_db: float, rir: np.ndarray | None,
                 rir_id: str, noise_id: str, rng: np.random.Generator, cfg: DataConfig, seed: int) -> Triplet:
    c = clean.samples.astype(np.float64)
    bms = simulate_bms(c, cfg).samples.astype(np.float64)
    src = dsp.convolve_full(c, rir).samples.astype(np.float64) if rir is not None else c
    offset = int(rng.integers(0, max(len(noise) - c.size, 0) + 1))
    v = fit_noise(noise.samples, c.size, offset)
    noisy = src + noise_gain(src, v, snr_db) * v
    peak = max(np.abs(noisy).max(), np.abs(c).max(), np.abs(bms).max())
    scale = 1.0 / peak if peak > 1.0 else 1.0  # uniform limiting keeps the triplet consistent
    return Triplet(item_id, Waveform(bms * scale), Waveform(noisy * scale), Waveform(c * scale),
                   float(snr_db), rir is not None, noise_id, rir_id if rir is not None else "", seed)


def _balanced_flags(rng, n: int, fraction: float) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    flags[: int(round(fraction * n))] = True
    return rng.permutation(flags)


def build_split(split: str, cfg: DataConfig = DataConfig(), seed: int = 0,
                clean_sources: list[Waveform] | None = None) -> list[Triplet]:
    """Triplets of one split; each item draws from its own (seed, split, index) stream."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    cfg.check_pools()
    sid = _SPLIT_ID[split]
    if clean_sources is None:
        count = getattr(cfg, f"n_{split}")
        clean_sources = [synth_speechlike(int(np.random.SeedSequence([seed, sid, i]).generate_state(1)[0]),
                                          cfg.duration_s, cfg.speech_peak) for i in range(count)]
    if not clean_sources:
        raise InputError(f"no clean sources for split {split!r}")
    noise_ids, rir_ids = cfg.pool(split, "noises"), cfg.pool(split, "rirs")
    n_noise = int(round((cfg.duration_s + 1.0) * SAMPLE_RATE))
    noises = {nid: make_noise(nid, n_noise, seed) for nid in noise_ids}
    plan_rng = np.random.default_rng([seed, sid, 0xC0])
    if split == "test":
        snrs = cfg.snr_levels()
        plan = [(u, snr) for u in range(len(clean_sources)) for snr in snrs]
        reverb = _balanced_flags(plan_rng, len(plan), cfg.test_reverb)
    else:
        plan = [(u, None) for u in range(len(clean_sources))]
        reverb = _balanced_flags(plan_rng, len(plan), cfg.train_reverb)
    out = []
    for idx, (u, snr) in enumerate(plan):
        rng = np.random.default_rng([seed, sid, 1 + idx])
        if split == "test":
            noise_id = noise_ids[u % len(noise_ids)]  # one noise per utterance across all SNRs
        else:
            noise_id = noise_ids[int(rng.integers(len(noise_ids)))]
            snr = float(rng.uniform(cfg.train_snr_min, cfg.train_snr_max))
        rir_id = rir_ids[int(rng.integers(len(rir_ids)))]
        rir = rir_for_id(rir_id, cfg, seed) if reverb[idx] else None
        out.append(make_triplet(f"{split}{idx:04d}", clean_sources[u], noises[noise_id], snr, rir,
                                rir_id, noise_id, rng, cfg, seed))
    return out


def write_split(triplets: list[Triplet], out_dir, split: str, seed: int, cfg: DataConfig) -> dict:
    """Write WAVs and ``manifest_<split>.json`` under ``out_dir``; return the manifest."""
    out_dir = Path(out_dir)
    items = []
    for tr in triplets:
        rec = {"id": tr.id}
        for key, wav in (("bms_path", tr.bms), ("noisy_path", tr.ams_noisy), ("clean_path", tr.ams_clean)):
            rel = f"{split}/{tr.id}_{key.split('_')[0]}.wav"
            dsp.write_wav(out_dir / rel, wav)
            rec[key] = rel
        rec.update(snr_db=tr.snr_db, reverberant=tr.reverberant, noise_id=tr.noise_id, rir_id=tr.rir_id)
        items.append(rec)
    manifest = {"version": MANIFEST_VERSION, "split": split, "seed": seed,
                "config_hash": cfg.hash(), "items": items}
    path = out_dir / f"manifest_{split}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def build_corpus(out_dir, cfg: DataConfig = DataConfig(), seed: int = 0, splits=SPLITS) -> dict[str, dict]:
    """Generate and write the requested splits; returns manifests keyed by split."""
    cfg.check_pools()
    return {s: write_split(build_split(s, cfg, seed), out_dir, s, seed, cfg) for s in splits}


def load_manifest(path) -> tuple[dict, list[Triplet]]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from None
    root = path.parent
    missing = [str(root / it[k]) for it in manifest["items"]
               for k in ("bms_path", "noisy_path", "clean_path") if not (root / it[k]).is_file()]
    if missing:
        raise InputError("missing corpus files: " + ", ".join(missing))
    triplets = [
        Triplet(it["id"], dsp.read_wav(root / it["bms_path"]), dsp.read_wav(root / it["noisy_path"]),
                dsp.read_wav(root / it["clean_path"]), float(it["snr_db"]), bool(it["reverberant"]),
                it["noise_id"], it["rir_id"], int(manifest["seed"]))
        for it in manifest["items"]
    ]
    return manifest, triplets
