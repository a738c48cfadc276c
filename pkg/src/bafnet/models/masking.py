"""Complex-valued convolutional encoder/decoder that estimates a bounded cIRM."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import Module, Tensor, nn, ops
from .fcnet import ContractError
from .layers import BatchNorm, ComplexConv2d, Linear, PReLU, complex_concat


@dataclass(frozen=True)
class MaskingConfig:
    layers: int = 4
    channels: int = 16
    max_channels: int = 32
    kernel_t: int = 3
    kernel_f: int = 5
    bottleneck: int = 128
    lookback: int = 1
    mask_bound: float = 2.0
    n_bins: int = 257

    def channel_plan(self) -> list[int]:
        return [min(self.channels * 2 ** i, self.max_channels) for i in range(self.layers)]

    def bin_plan(self) -> list[int]:
        """Frequency size at the input of each encoder layer, plus the bottleneck size."""
        sizes = [self.n_bins]
        for _ in range(self.layers):
            sizes.append((sizes[-1] - 1) // 2 + 1)
        return sizes


class MaskingNet(Module):
    """Spectrogram [N, T, F, 2] -> complex mask [N, T, F, 2] with |M| < mask_bound."""

    def __init__(self, config: MaskingConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or MaskingConfig()
        rng = np.random.default_rng(seed)
        plan = cfg.channel_plan()
        kernel = (cfg.kernel_t, cfg.kernel_f)
        padding = (cfg.kernel_t // 2, cfg.kernel_f // 2)
        self._enc = []
        prev = 1
        for i, c in enumerate(plan):
            conv = ComplexConv2d(rng, prev, c, kernel, stride=(1, 2), padding=padding)
            bn, act = BatchNorm(2 * c), PReLU(2 * c)
            setattr(self, f"enc{i}_conv", conv)
            setattr(self, f"enc{i}_bn", bn)
            setattr(self, f"enc{i}_act", act)
            self._enc.append((conv, bn, act))
            prev = c
        deep = 2 * plan[-1] * cfg.bin_plan()[-1]
        self.dense_in = Linear(rng, deep * (1 + cfg.lookback), cfg.bottleneck)
        self.dense_act = PReLU(1)
        self.dense_out = Linear(rng, cfg.bottleneck, deep)
        self._dec = []
        for i in reversed(range(cfg.layers)):
            c_out = plan[i - 1] if i > 0 else 1
            conv = ComplexConv2d(rng, 2 * plan[i], c_out, kernel, stride=(1, 2), padding=padding,
                                 transposed=True)
            setattr(self, f"dec{i}_conv", conv)
            if i > 0:
                bn, act = BatchNorm(2 * c_out), PReLU(2 * c_out)
                setattr(self, f"dec{i}_bn", bn)
                setattr(self, f"dec{i}_act", act)
            else:
                bn = act = None
            self._dec.append((conv, bn, act))
        # Start from the identity mask M = 1 + 0i: from a random output phase the
        # magnitude-dominated objective has little pull towards the correct phase.
        out = self.dec0_conv
        out.weight_re.data[:] = 0.0
        out.weight_im.data[:] = 0.0
        out.bias_re.data[:] = np.arctanh(min(1.0 / cfg.mask_bound, 0.9))

    def _bottleneck(self, h: Tensor) -> Tensor:
        n, c2, t, fd = h.shape
        seq = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (n, t, c2 * fd))
        feats = [seq]
        for lag in range(1, self.config.lookback + 1):
            shifted = ops.pad(seq[:, :max(t - lag, 0)], ((0, 0), (min(lag, t), 0), (0, 0)))
            feats.append(shifted)
        z = ops.concat(feats, axis=-1) if len(feats) > 1 else seq
        z = self.dense_out(self.dense_act(self.dense_in(z)))
        return ops.transpose(ops.reshape(z, (n, t, c2, fd)), (0, 2, 1, 3))

    def raw_output(self, spec: Tensor) -> Tensor:
        """Unbounded two-channel decoder output [N, 2, T, F]."""
        if spec.ndim != 4 or spec.shape[-1] != 2:
            raise ContractError(f"expected [N, T, F, 2] spectrogram, got {spec.shape}")
        if spec.shape[2] != self.config.n_bins:
            raise ContractError(
                f"spectrogram has {spec.shape[2]} bins; network built for {self.config.n_bins}"
            )
        h = ops.transpose(spec, (0, 3, 1, 2))
        enc_outs, in_bins = [], []
        for conv, bn, act in self._enc:
            in_bins.append(h.shape[3])
            h = act(bn(conv(h)))
            enc_outs.append(h)
        h = self._bottleneck(h)
        kf = self.config.kernel_f
        for conv, bn, act in self._dec:
            skip, target = enc_outs.pop(), in_bins.pop()
            natural = (h.shape[3] - 1) * 2 - 2 * (kf // 2) + kf
            h = conv(complex_concat(h, skip), output_padding=(0, target - natural))
            if bn is not None:
                h = act(bn(h))
        return h

    def forward(self, spec: Tensor) -> Tensor:
        raw = self.raw_output(spec)
        re, im = raw[:, 0], raw[:, 1]
        mag = ops.sqrt(re * re + im * im + 1e-12)
        scale = ops.tanh(mag) * self.config.mask_bound / mag
        return ops.stack([re * scale, im * scale], axis=-1)

    def hparams(self) -> dict[str, str]:
        return {f"mask.{k}": str(v) for k, v in asdict(self.config).items()}
