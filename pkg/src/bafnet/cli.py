"""Command-line entry point: ``bafnet simulate | train | enhance | eval``.

Exit codes: 0 success, 2 configuration or contract error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import datasim, dsp, metrics
from .fusion import enhance
from .models import ContractError, Networks, load_weights
from .tensor import ConfigError as OpConfigError
from .tensor import ShapeError, WeightsFormatError
from .train import STAGES, MissingCheckpoint, checkpoint_path, finetune_fused, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

logger = logging.getLogger("bafnet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(args) -> config_mod.RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return config_mod.load(args.config, overrides)


def _networks(cfg: config_mod.RunConfig) -> Networks:
    return Networks.create(cfg.map, cfg.mask, cfg.fc, seed=cfg.seed)


def _weights_file(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = checkpoint_path(path, "fuse", "best")
    if not path.is_file():
        raise CliError(f"weights file not found: {path}", EXIT_IO)
    return path


# -- simulate -----------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    splits = datasim.SPLITS if args.split == "all" else (args.split,)
    out = Path(args.out)
    manifests = datasim.build_corpus(out, cfg.data, cfg.seed, splits)
    cfg.write(out)
    for split, man in manifests.items():
        items = man["items"]
        rev = sum(it["reverberant"] for it in items)
        print(f"{split}: {len(items)} triplets, {rev} reverberant")
        if split == "test":
            for snr in cfg.data.snr_levels():
                n = sum(1 for it in items if it["snr_db"] == snr)
                print(f"  snr {snr:g} dB: {n}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir)
    data = Path(args.data)
    if args.stage == "fuse" and not (args.resume and checkpoint_path(out, "fuse", "last").is_file()):
        for stage in ("map", "mask"):
            path = checkpoint_path(out, stage, "best")
            if not path.is_file():
                raise MissingCheckpoint(f"stage 'fuse' needs the {stage} checkpoint {path}; "
                                        f"run 'train --stage {stage}' first")
    _, train_items = datasim.load_manifest(data / "manifest_train.json")
    _, val_items = datasim.load_manifest(data / "manifest_val.json")
    cfg.write(out)
    nets = _networks(cfg)
    kw = dict(stft_cfg=cfg.stft, resolutions=cfg.resolutions())
    if args.stage == "fuse":
        res = finetune_fused(nets, train_items, val_items, cfg.train, out, cfg.seed, resume=args.resume, **kw)
    else:
        res = run_stage(args.stage, nets, train_items, val_items, cfg.train, out, cfg.seed, resume=args.resume, **kw)
    print(f"{args.stage}: {len(res.train_losses)} epochs, best val {res.best_val:.6f} at epoch {res.best_epoch}"
          + (" (early stop)" if res.stopped_early else ""))
    return EXIT_OK


# -- enhance ------------------------------------------------------------------------------

def log_magnitude_image(values: np.ndarray, dyn_range_db: float = 80.0) -> np.ndarray:
    """T x F magnitudes -> F x T uint8 image (row 0 is bin 0, column 0 is frame 0)."""
    mag = np.abs(np.asarray(values, dtype=np.complex128))
    db = 20.0 * np.log10(np.maximum(mag, 1e-12))
    top = db.max(initial=-240.0)
    scaled = np.clip((db - (top - dyn_range_db)) / dyn_range_db, 0.0, 1.0)
    return np.round(scaled.T * 255.0).astype(np.uint8)


def linear_image(values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    scaled = np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled.T * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit grayscale image; width = columns, height = rows."""
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_grid_csv(path, grid: np.ndarray) -> None:
    """T rows x F columns."""
    rows = (",".join(f"{v:.9g}" for v in row) for row in np.asarray(grid, dtype=np.float64))
    Path(path).write_text("\n".join(rows) + "\n")


def dump_inspection(out, dump_dir) -> None:
    d = Path(dump_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / "alpha.pgm", linear_image(out.alpha))
    write_grid_csv(d / "alpha.csv", out.alpha)
    write_pgm(d / "mask_mag.pgm", log_magnitude_image(out.mask_magnitude))
    write_grid_csv(d / "mask_mag.csv", out.mask_magnitude)
    specs = {"spec_bms": out.bms_branch, "spec_ams_noisy": out.ams_noisy,
             "spec_ams_denoised": out.ams_branch, "spec_fused": out.spectrogram}
    for name, spec in specs.items():
        write_pgm(d / f"{name}.pgm", log_magnitude_image(spec.values))
        write_grid_csv(d / f"{name}.csv", np.abs(spec.values.astype(np.complex128)))


def cmd_enhance(args) -> int:
    cfg = _load_config(args)
    bms, ams = dsp.read_wav(args.bms), dsp.read_wav(args.ams)
    nets, _, _ = load_weights(_weights_file(args.weights))
    out = enhance(bms, ams, nets, cfg.stft)
    dsp.write_wav(args.out, out.waveform)
    Path(str(args.out) + ".config.txt").write_text(cfg.to_text())
    if args.dump_dir:
        dump_inspection(out, args.dump_dir)
        cfg.write(args.dump_dir)
    t, f = out.alpha.shape
    print(f"wrote {args.out}: {len(out.waveform)} samples, alpha grid {t}x{f}, mean alpha {out.alpha.mean():.4f}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest, triplets = datasim.load_manifest(args.manifest)
    nets, _, _ = load_weights(_weights_file(args.weights))
    report = metrics.evaluate_corpus(triplets, nets, cfg.stft, manifest.get("config_hash", ""), cfg.metrics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table())
    cfg.write(out)
    sys.stdout.write(report.to_json() if args.json else report.table())
    return EXIT_OK


# -- entry --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="bafnet", description="Body/acoustic microphone fusion for speech enhancement")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a paired synthetic corpus")
    s.add_argument("--split", choices=datasim.SPLITS + ("all",), default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--data", required=True, help="corpus directory with train and val manifests")
    t.add_argument("--out", help="checkpoint directory (default: out_dir from the config)")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", parents=[common], help="enhance one BMS/AMS pair")
    e.add_argument("--bms", required=True)
    e.add_argument("--ams", required=True)
    e.add_argument("--weights", required=True, help="weights file or training directory")
    e.add_argument("--out", required=True)
    e.add_argument("--dump-dir", help="write alpha, |M| and spectrogram images and CSV grids here")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", parents=[common], help="evaluate a test manifest")
    v.add_argument("--manifest", required=True)
    v.add_argument("--weights", required=True)
    v.add_argument("--out", required=True, help="report directory")
    v.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"bafnet: {exc}", file=sys.stderr)
        return exc.code
    except (dsp.InputError, OSError) as exc:
        print(f"bafnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (dsp.ConfigError, OpConfigError, ContractError, ShapeError, WeightsFormatError, MissingCheckpoint,
            ValueError) as exc:
        print(f"bafnet: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
