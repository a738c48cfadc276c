"""Waveform L1, multi-resolution STFT loss and the Adam optimiser."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bafnet import dsp
from bafnet.losses import (
    DEFAULT_RESOLUTIONS,
    Resolution,
    format_resolutions,
    l1_loss,
    multi_stft_loss,
    parse_resolutions,
    total_loss,
)
from bafnet.optim import Adam, AdamState, TrainingError, adam_step
from bafnet.tensor import ShapeError, Tensor, backward, gradcheck

SR = dsp.SAMPLE_RATE


def stft_loss_oracle(est, ref, resolutions):
    total = 0.0
    for r in resolutions:
        cfg = dsp.StftConfig(r.nfft, r.window_length, r.hop_length)
        a = np.sqrt(np.abs(dsp.stft(est, cfg).values.astype(np.complex128)) ** 2 + 1e-9)
        b = np.sqrt(np.abs(dsp.stft(ref, cfg).values.astype(np.complex128)) ** 2 + 1e-9)
        diffs = [abs(a[t, f] - b[t, f]) for t in range(a.shape[0]) for f in range(a.shape[1])]
        total += sum(diffs) / len(diffs)
    return total


class TestResolutions:
    def test_defaults(self):
        assert [(r.nfft, r.hop_length, r.window_length) for r in DEFAULT_RESOLUTIONS] == [
            (512, 50, 240), (1024, 120, 600), (2048, 240, 1200)]

    def test_text_round_trip(self):
        text = format_resolutions(DEFAULT_RESOLUTIONS)
        assert text == "512,50,240;1024,120,600;2048,240,1200"
        assert parse_resolutions(text) == DEFAULT_RESOLUTIONS

    @pytest.mark.parametrize("bad", [(512, 240, 50), (512, 600, 240), (256, 50, 400)])
    def test_invariant(self, bad):
        with pytest.raises(dsp.ConfigError):
            Resolution(*bad)

    def test_empty(self):
        with pytest.raises(dsp.ConfigError):
            parse_resolutions(" ; ")


class TestL1:
    def test_identical(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 100)))
        assert l1_loss(x, x).data == 0.0

    def test_mean_reduction(self):
        assert l1_loss(Tensor(np.zeros((2, 10))), Tensor(np.full((2, 10), 0.5))).data == 0.5

    def test_loop_oracle(self, rng):
        a, b = rng.uniform(-1, 1, (3, 50)), rng.uniform(-1, 1, (3, 50))
        loop = sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(50)) / 150
        assert abs(float(l1_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data) - loop) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(Tensor(np.zeros(10)), Tensor(np.zeros(11)))


class TestMultiStft:
    def test_identical(self, rng):
        x = Tensor(rng.uniform(-1, 1, (1, 4000)))
        assert multi_stft_loss(x, x).data == 0.0

    def test_sign_invariant(self, rng):
        x = rng.uniform(-1, 1, (1, 4000)).astype(np.float32)
        assert multi_stft_loss(Tensor(-x), Tensor(x)).data == 0.0
        assert total_loss(Tensor(-x), Tensor(x)).data > 0.5

    def test_independent_recomputation(self, rng):
        a, b = rng.uniform(-1, 1, 2400), rng.uniform(-1, 1, 2400)
        got = float(multi_stft_loss(Tensor(a[None], dtype=np.float64), Tensor(b[None], dtype=np.float64)).data)
        assert abs(got - stft_loss_oracle(a, b, DEFAULT_RESOLUTIONS)) < 1e-4

    def test_too_short_names_resolution(self):
        x = Tensor(np.zeros((1, 1000)))
        with pytest.raises(dsp.InputError, match="nfft=2048"):
            multi_stft_loss(x, x)


class TestTotalLoss:
    def test_identical_is_zero(self, rng):
        x = Tensor(rng.uniform(-1, 1, (2, 3000)))
        assert total_loss(x, x).data == 0.0

    # |mag_e - mag_r| has a kink per bin; a 1e-3 step straddles some of the
    # thousands of kinks, so the float64 reference uses a 1e-6 step
    def test_gradcheck(self, rng):
        ref = rng.uniform(-1, 1, (1, 1300))
        res = (Resolution(64, 16, 48), Resolution(128, 32, 96))
        err = gradcheck(lambda est: total_loss(est, Tensor(ref), res), [rng.uniform(-1, 1, (1, 1300))], h=1e-6,
                        max_probes=30)
        assert err < 1e-4

    def test_gradcheck_default_resolutions(self, rng):
        ref = rng.uniform(-1, 1, (1, 1300))
        err = gradcheck(lambda est: total_loss(est, Tensor(ref)), [rng.uniform(-1, 1, (1, 1300))], h=1e-6,
                        max_probes=12)
        assert err < 1e-4

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        assert total_loss(Tensor(r.uniform(-1, 1, (1, 1300))), Tensor(r.uniform(-1, 1, (1, 1300)))).data >= 0


class TestAdam:
    def test_defaults(self):
        s = AdamState()
        assert (s.lr, s.beta1, s.beta2, s.eps, s.step) == (3e-4, 0.9, 0.99, 1e-8, 0)

    def test_zero_gradient(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2, np.float32)
        state = adam_step({"p": p}, AdamState())
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    @pytest.mark.parametrize("g", [0.37, -5.0, 1e-3])
    def test_first_step_is_lr_sign(self, g):
        p = Tensor(np.array([0.5]), requires_grad=True)
        p.grad = np.array([g], np.float32)
        adam_step({"p": p}, AdamState())
        assert abs((0.5 - p.data[0]) - 3e-4 * np.sign(g)) < 1e-6

    def test_two_step_oracle(self):
        lr, b1, b2, eps = 3e-4, 0.9, 0.99, 1e-8
        w, g = 0.8, 0.25
        m = v = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        p = Tensor(np.array([0.8]), requires_grad=True)
        opt = Adam([("p", p)])
        for _ in range(2):
            p.grad = np.array([0.25], np.float32)
            opt.step()
        assert abs(p.data[0] - w) < 1e-7
        assert opt.state.step == 2

    def test_non_finite_gradient_names_parameter(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([0.0, np.nan, 1.0], np.float32)
        with pytest.raises(TrainingError, match="enc.weight"):
            Adam([("enc.weight", p)]).step()

    def test_clip_norm(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([("p", p)], clip_norm=5.0)
        p.grad = np.array([30.0, 40.0], np.float32)
        assert opt.grad_norm() == 50.0
        opt.step()
        np.testing.assert_allclose(opt.state.m["p"], [0.3, 0.4], rtol=1e-6)

    def test_state_round_trip(self, rng):
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        a = Adam([("p", p)])
        p.grad = rng.standard_normal(4).astype(np.float32)
        a.step()
        b = Adam([("p", p)])
        b.load_state_tensors(a.state_tensors(), a.state.step)
        assert b.state.step == 1
        np.testing.assert_array_equal(b.state.v["p"], a.state.v["p"])

    def test_descends_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([("p", p)], lr=0.05)
        for _ in range(300):
            opt.zero_grad()
            backward((p * p).sum())
            opt.step()
        assert np.abs(p.data).max() < 0.05
