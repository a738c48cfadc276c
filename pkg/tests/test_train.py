"""Stage training loop: early stopping, checkpoints, resume and end-to-end gradients."""

import numpy as np
import pytest

from bafnet import dsp, train
from bafnet.datasim import DataConfig, build_split
from bafnet.dsp import InputError, StftConfig
from bafnet.losses import Resolution
from bafnet.models import FcConfig, MappingConfig, MaskingConfig, Networks
from bafnet.tensor import Tensor, backward
from bafnet.train import MissingCheckpoint, TrainConfig, read_log, run_stage, stage_loss

STFT = StftConfig(64, 48, 16)
RES = (Resolution(64, 16, 48), Resolution(128, 32, 96))
KW = {"stft_cfg": STFT, "resolutions": RES}


def tiny_nets(seed=0):
    return Networks.create(MappingConfig(layers=2, channels=4, blocks=1, heads=2, dim=8),
                           MaskingConfig(layers=2, channels=2, max_channels=4, bottleneck=8, n_bins=33),
                           FcConfig(channels=3, kernel=3), seed=seed)


@pytest.fixture(scope="module")
def data():
    cfg = DataConfig(n_train=4, n_val=2, duration_s=0.5)
    return build_split("train", cfg, seed=0), build_split("val", cfg, seed=0)


def tcfg(**kw):
    base = {"pretrain_epochs": 3, "finetune_epochs": 3, "patience": 5, "batch_size": 2, "crop_s": 0.25, "lr": 1e-3}
    base.update(kw)
    return TrainConfig(**base)


def log_without_time(path):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in read_log(path)]


class TestConfig:
    def test_invalid(self):
        with pytest.raises(dsp.ConfigError):
            TrainConfig(patience=0)
        with pytest.raises(dsp.ConfigError):
            TrainConfig(pretrain_epochs=0)

    def test_unknown_stage(self, data, tmp_path):
        with pytest.raises(dsp.ConfigError):
            run_stage("joint", tiny_nets(), *data, tcfg(), tmp_path)


class TestBatches:
    def test_crop_and_order_deterministic(self, data):
        a = [tuple(t.data.copy() for t in b) for b in train.epoch_batches(data[0], tcfg(), 7, "map", 1)]
        b = [tuple(t.data.copy() for t in b) for b in train.epoch_batches(data[0], tcfg(), 7, "map", 1)]
        assert len(a) == 2 and a[0][0].shape == (2, 4000)
        for x, y in zip(a, b):
            for u, v in zip(x, y):
                np.testing.assert_array_equal(u, v)
        c = next(train.epoch_batches(data[0], tcfg(), 7, "map", 2))
        assert not np.array_equal(c[2].data, a[0][2])

    def test_short_items_zero_padded(self, data):
        bms, _, _ = next(train.epoch_batches(data[0], tcfg(crop_s=0.75), 0, "map", 1))
        assert bms.shape == (2, 12000)
        assert not np.any(bms.data[:, 8000:])


class TestRunStage:
    def test_empty_splits(self, data, tmp_path):
        with pytest.raises(InputError):
            run_stage("map", tiny_nets(), [], data[1], tcfg(), tmp_path)
        with pytest.raises(InputError):
            run_stage("map", tiny_nets(), data[0], [], tcfg(), tmp_path)

    def test_early_stop_after_patience(self, data, tmp_path):
        # with lr 0 the validation loss never improves after the first epoch
        res = run_stage("map", tiny_nets(), *data, tcfg(pretrain_epochs=20, patience=2, lr=0.0), tmp_path, **KW)
        assert res.stopped_early
        assert res.best_epoch == 1
        assert len(res.train_losses) == 3
        assert [int(r["epoch"]) for r in read_log(tmp_path / "map_log.csv")] == [1, 2, 3]

    def test_best_checkpoint_tracks_minimum(self, data, tmp_path):
        res = run_stage("map", tiny_nets(), *data, tcfg(pretrain_epochs=4, lr=1e-2), tmp_path, **KW)
        assert res.best_val == min(res.val_losses)
        assert res.best_epoch == 1 + int(np.argmin(res.val_losses))
        assert train.checkpoint_path(tmp_path, "map", "best").is_file()
        assert train.checkpoint_path(tmp_path, "map", "last").is_file()
        # returned networks are the best checkpoint
        assert abs(train.validate("map", res.nets, data[1], **KW) - res.best_val) < 1e-6

    def test_loss_decreases(self, data, tmp_path):
        res = run_stage("map", tiny_nets(), *data, tcfg(pretrain_epochs=8, lr=1e-2), tmp_path, **KW)
        # training losses are on fresh random crops each epoch; the fixed validation set is the signal
        assert res.val_losses[-1] < res.val_losses[0]
        assert res.best_val < res.val_losses[0]

    def test_deterministic(self, data, tmp_path):
        a = run_stage("mask", tiny_nets(), *data, tcfg(pretrain_epochs=2), tmp_path / "a", **KW)
        b = run_stage("mask", tiny_nets(), *data, tcfg(pretrain_epochs=2), tmp_path / "b", **KW)
        assert a.train_losses == b.train_losses and a.val_losses == b.val_losses
        assert log_without_time(tmp_path / "a" / "mask_log.csv") == log_without_time(tmp_path / "b" / "mask_log.csv")

    @pytest.mark.parametrize("stage", ["map", "fuse"])
    def test_resume_bit_exact(self, data, tmp_path, stage):
        cfg = tcfg()
        for d in ("full", "cut"):
            if stage == "fuse":
                run_stage("map", tiny_nets(), *data, tcfg(pretrain_epochs=1), tmp_path / d, **KW)
                run_stage("mask", tiny_nets(), *data, tcfg(pretrain_epochs=1), tmp_path / d, **KW)
        runner = train.finetune_fused if stage == "fuse" else train.pretrain_mapping
        runner(tiny_nets(), *data, cfg, tmp_path / "full", **KW)
        runner(tiny_nets(), *data, cfg, tmp_path / "cut", max_epochs=1, **KW)
        runner(tiny_nets(), *data, cfg, tmp_path / "cut", resume=True, **KW)
        for kind in ("best", "last"):
            p = train.checkpoint_path(tmp_path / "full", stage, kind).read_bytes()
            q = train.checkpoint_path(tmp_path / "cut", stage, kind).read_bytes()
            assert p == q
        assert log_without_time(tmp_path / "full" / f"{stage}_log.csv") == \
            log_without_time(tmp_path / "cut" / f"{stage}_log.csv")

    def test_fuse_needs_pretrained(self, data, tmp_path):
        with pytest.raises(MissingCheckpoint, match="map"):
            train.finetune_fused(tiny_nets(), *data, tcfg(), tmp_path, **KW)

    def test_freeze_branches(self, data, tmp_path):
        nets = tiny_nets()
        names = [n for n, _ in train.stage_parameters("fuse", nets, freeze_branches=True)]
        assert names and all(n.startswith("fc.") for n in names)
        assert len(train.stage_parameters("fuse", nets)) > len(names)


class TestFusedGradients:
    def test_fc_gets_gradient_first_batch(self, data):
        nets = tiny_nets().train()
        bms, noisy, clean = next(train.epoch_batches(data[0], tcfg(), 0, "fuse", 1))
        backward(stage_loss("fuse", nets, bms, noisy, clean, STFT, RES))
        for name, p in nets.fc.named_parameters("fc."):
            assert p.grad is not None and np.any(p.grad), name

    def test_pipeline_probe_gradcheck(self, data):
        """Relative error of 16 probed parameter derivatives through the fused loss."""
        nets = tiny_nets(3).eval()
        rng = np.random.default_rng(0)
        # move away from the init, where the mapping output is silent and the masks are the identity
        for _, p in nets.named_parameters():
            p.data[...] = p.data + rng.uniform(-0.2, 0.2, p.shape).astype(np.float32)
        tr = data[0][0]
        rows = [w.samples[:1600][None] for w in (tr.bms, tr.ams_noisy, tr.ams_clean)]

        def loss(dtype):
            b, y, c = (Tensor(r, dtype=dtype) for r in rows)
            return stage_loss("fuse", nets, b, y, c, STFT, RES)

        named = list(nets.named_parameters())
        nets.zero_grad()
        backward(loss(np.float32))
        probes = []
        for k in rng.choice(len(named), size=16, replace=True):
            name, p = named[k]
            probes.append((name, p, int(rng.integers(p.size))))
        originals = {n: p.data for n, p in named}
        for _, p in named:
            p.data = p.data.astype(np.float64)
        h = 1e-6
        a_all, n_all = [], []
        try:
            for name, p, i in probes:
                flat = p.data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss(np.float64).data)
                flat[i] = orig - h
                fm = float(loss(np.float64).data)
                flat[i] = orig
                n_all.append((fp - fm) / (2 * h))
                g = p.grad
                a_all.append(0.0 if g is None else float(g.reshape(-1)[i]))
        finally:
            for n, p in named:
                p.data = originals[n]
        a_all, n_all = np.array(a_all), np.array(n_all)
        assert np.abs(a_all - n_all).max() / np.abs(n_all).max() < 1e-3
