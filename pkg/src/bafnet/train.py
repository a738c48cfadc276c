"""Two-stage training: separate branch pretraining, then joint fine-tuning of the fused model.

Each stage writes ``<stage>_best.bafw`` and ``<stage>_last.bafw`` plus an
append-only CSV log ``<stage>_log.csv``.  Crops and batch order for epoch e
come from the stream (seed, stage, e), so a resumed run replays exactly the
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .datasim import Triplet
from .dsp import InputError, StftConfig
from .fusion import complex_multiply, forward_batch
from .losses import DEFAULT_RESOLUTIONS, total_loss
from .models import Networks, load_weights, save_weights
from .optim import Adam
from .tensor import Tensor, backward, no_grad
from .tensor import spectral as sp

logger = logging.getLogger(__name__)

STAGES = ("map", "mask", "fuse")
_STAGE_ID = {"map": 1, "mask": 2, "fuse": 3}
LOG_HEADER = "epoch,step,train_loss,val_loss,lr,wall_ms\n"


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 200
    finetune_epochs: int = 200
    patience: int = 10
    val_every: int = 1
    batch_size: int = 4
    crop_s: float = 2.0
    lr: float = 3e-4
    clip_norm: float = 0.0
    freeze_branches: bool = False

    def __post_init__(self):
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise dsp.ConfigError("epoch counts must be >= 1")
        if self.patience < 1 or self.val_every < 1 or self.batch_size < 1:
            raise dsp.ConfigError("patience, val_every and batch_size must be >= 1")

    def epochs(self, stage: str) -> int:
        return self.finetune_epochs if stage == "fuse" else self.pretrain_epochs


@dataclass
class StageResult:
    nets: Networks
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val: float
    stopped_early: bool


class MissingCheckpoint(dsp.ConfigError):
    """A stage prerequisite checkpoint does not exist."""


def checkpoint_path(out_dir, stage: str, kind: str) -> Path:
    return Path(out_dir) / f"{stage}_{kind}.bafw"


# -- per-stage objectives ----------------------------------------------------------------

def stage_loss(stage: str, nets: Networks, bms: Tensor, noisy: Tensor, clean: Tensor,
               stft_cfg: StftConfig, resolutions) -> Tensor:
    if stage == "map":
        est = nets.mapping(bms)
    elif stage == "mask":
        cfg = stft_cfg
        X = sp.stft(noisy, cfg.nfft, cfg.hop_length, cfg.window_length)
        Y = complex_multiply(X, nets.masking(X))
        est = sp.istft(Y, cfg.nfft, cfg.hop_length, cfg.window_length, noisy.shape[-1])
    elif stage == "fuse":
        est = forward_batch(nets, bms, noisy, stft_cfg).waveform
    else:
        raise dsp.ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return total_loss(est, clean, resolutions)


def stage_parameters(stage: str, nets: Networks, freeze_branches: bool = False):
    if stage == "map":
        return list(nets.mapping.named_parameters("map."))
    if stage == "mask":
        return list(nets.masking.named_parameters("mask."))
    if freeze_branches:
        return list(nets.fc.named_parameters("fc."))
    return list(nets.named_parameters())


def _set_modes(stage: str, nets: Networks, training: bool, freeze_branches: bool) -> None:
    nets.eval()
    if not training:
        return
    if stage == "map":
        nets.mapping.train()
    elif stage == "mask":
        nets.masking.train()
    else:
        nets.fc.train()
        if not freeze_branches:
            nets.mapping.train()
            nets.masking.train()


# -- batching ------------------------------------------------------------------------------

def _crop(x: np.ndarray, start: int, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.float32)
    seg = x[start:start + n]
    out[:seg.size] = seg
    return out


def epoch_batches(items: list[Triplet], tcfg: TrainConfig, seed: int, stage: str, epoch: int):
    """Shuffled, randomly cropped (bms, noisy, clean) batches for one epoch."""
    rng = np.random.default_rng([seed, _STAGE_ID[stage], epoch])
    order = rng.permutation(len(items))
    n = int(round(tcfg.crop_s * dsp.SAMPLE_RATE))
    for b in range(0, len(order), tcfg.batch_size):
        idx = order[b:b + tcfg.batch_size]
        rows = []
        for i in idx:
            tr = items[i]
            start = int(rng.integers(0, max(len(tr.ams_clean) - n, 0) + 1))
            rows.append([_crop(w.samples, start, n) for w in (tr.bms, tr.ams_noisy, tr.ams_clean)])
        arr = np.array(rows, dtype=np.float32)  # [B, 3, n]
        yield Tensor(arr[:, 0]), Tensor(arr[:, 1]), Tensor(arr[:, 2])


def validate(stage: str, nets: Networks, items: list[Triplet], stft_cfg: StftConfig = dsp.PIPELINE_STFT,
             resolutions=DEFAULT_RESOLUTIONS) -> float:
    """Mean full-length loss over ``items`` with every network in eval mode."""
    nets.eval()
    losses = []
    with no_grad():
        for tr in items:
            b, y, c = (Tensor(w.samples[None]) for w in (tr.bms, tr.ams_noisy, tr.ams_clean))
            losses.append(float(stage_loss(stage, nets, b, y, c, stft_cfg, resolutions).data))
    return float(np.mean(losses))


# -- log ------------------------------------------------------------------------------------

def _log_line(epoch, step, train_loss, val_loss, lr, wall_ms) -> str:
    return f"{epoch},{step},{train_loss:.9g},{val_loss:.9g},{lr:.9g},{wall_ms}\n"


def read_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()[1:]
    keys = LOG_HEADER.strip().split(",")
    return [dict(zip(keys, line.split(","))) for line in lines if line]


def _truncate_log(path: Path, last_epoch: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",")[0]) <= last_epoch]
    path.write_text("".join(kept))


# -- stage runner ---------------------------------------------------------------------------

def run_stage(stage: str, nets: Networks, train_items: list[Triplet], val_items: list[Triplet],
              tcfg: TrainConfig, out_dir, seed: int = 0, resume: bool = False,
              stft_cfg: StftConfig = dsp.PIPELINE_STFT, resolutions=DEFAULT_RESOLUTIONS,
              max_epochs: int | None = None) -> StageResult:
    """Train one stage with validation every ``val_every`` epochs and early stopping.

    ``max_epochs`` stops the loop early without touching the schedule (used to
    simulate an interrupted run).  Returns networks loaded from the best checkpoint.
    """
    if stage not in STAGES:
        raise dsp.ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if not train_items or not val_items:
        raise InputError("training needs nonempty train and validation splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    which = ("map",) if stage == "map" else ("mask",) if stage == "mask" else ("map", "mask", "fc")
    params = stage_parameters(stage, nets, tcfg.freeze_branches)
    opt = Adam(params, lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    log_path = out_dir / f"{stage}_log.csv"
    best_path, last_path = checkpoint_path(out_dir, stage, "best"), checkpoint_path(out_dir, stage, "last")

    start_epoch, step, best_val, best_epoch, bad = 1, 0, np.inf, 0, 0
    train_hist: list[float] = []
    val_hist: list[float] = []
    if resume and last_path.is_file():
        _, tensors, header = load_weights(last_path, nets, which)
        step = int(header["train.step"])
        opt.load_state_tensors(tensors, step)
        start_epoch = int(header["train.epoch"]) + 1
        best_val = float(header["train.best_val"])
        best_epoch = int(header["train.best_epoch"])
        bad = int(header["train.bad_epochs"])
        if header.get("train.finished") == "1":
            start_epoch = tcfg.epochs(stage) + 1
        _truncate_log(log_path, start_epoch - 1)
        for row in read_log(log_path):
            train_hist.append(float(row["train_loss"]))
            if row["val_loss"] != "nan":
                val_hist.append(float(row["val_loss"]))
    else:
        log_path.write_text(LOG_HEADER)

    stopped = False
    last_epoch = tcfg.epochs(stage) if max_epochs is None else min(max_epochs, tcfg.epochs(stage))
    for epoch in range(start_epoch, last_epoch + 1):
        t0 = time.perf_counter()
        _set_modes(stage, nets, True, tcfg.freeze_branches)
        batch_losses = []
        for bms, noisy, clean in epoch_batches(train_items, tcfg, seed, stage, epoch):
            opt.zero_grad()
            loss = stage_loss(stage, nets, bms, noisy, clean, stft_cfg, resolutions)
            backward(loss)
            opt.step()
            step += 1
            batch_losses.append(float(loss.data))
        train_loss = float(np.mean(batch_losses))
        train_hist.append(train_loss)
        val_loss = float("nan")
        if epoch % tcfg.val_every == 0:
            val_loss = validate(stage, nets, val_items, stft_cfg, resolutions)
            val_hist.append(val_loss)
            if val_loss < best_val:
                best_val, best_epoch, bad = val_loss, epoch, 0
                save_weights(nets, best_path, which=which,
                             extra_header={"train.stage": stage, "train.epoch": epoch, "train.val_loss": repr(val_loss)})
            else:
                bad += 1
        stopped = bad >= tcfg.patience
        finished = stopped or epoch == tcfg.epochs(stage)
        header = {"train.stage": stage, "train.epoch": epoch, "train.step": step,
                  "train.best_val": repr(best_val), "train.best_epoch": best_epoch,
                  "train.bad_epochs": bad, "train.finished": int(finished), "train.seed": seed}
        save_weights(nets, last_path, extra_tensors=opt.state_tensors(), extra_header=header, which=which)
        wall_ms = int(round((time.perf_counter() - t0) * 1000))
        with log_path.open("a") as fh:
            fh.write(_log_line(epoch, step, train_loss, val_loss, opt.state.lr, wall_ms))
        logger.info("%s epoch %d train %.4f val %.4f (%d ms)", stage, epoch, train_loss, val_loss, wall_ms)
        if stopped:
            logger.info("%s: early stop after %d non-improving validations", stage, bad)
            break

    if best_path.is_file():
        load_weights(best_path, nets, which)
    return StageResult(nets, train_hist, val_hist, best_epoch, float(best_val), stopped)


def pretrain_mapping(nets, train_items, val_items, tcfg, out_dir, seed=0, **kw) -> StageResult:
    return run_stage("map", nets, train_items, val_items, tcfg, out_dir, seed, **kw)


def pretrain_masking(nets, train_items, val_items, tcfg, out_dir, seed=0, **kw) -> StageResult:
    return run_stage("mask", nets, train_items, val_items, tcfg, out_dir, seed, **kw)


def load_pretrained(nets: Networks, out_dir) -> Networks:
    """Copy the best mapping and masking checkpoints into ``nets`` (fine-tune prerequisite)."""
    for stage in ("map", "mask"):
        path = checkpoint_path(out_dir, stage, "best")
        if not path.is_file():
            raise MissingCheckpoint(f"stage 'fuse' needs the {stage} checkpoint {path}; run --stage {stage} first")
        load_weights(path, nets, (stage,))
    return nets


def finetune_fused(nets, train_items, val_items, tcfg, out_dir, seed=0, resume=False, **kw) -> StageResult:
    if not (resume and checkpoint_path(out_dir, "fuse", "last").is_file()):
        load_pretrained(nets, out_dir)
    return run_stage("fuse", nets, train_items, val_items, tcfg, out_dir, seed, resume=resume, **kw)
