"""Time-domain mapping enhancer: strided conv encoder, conformer bottleneck, transposed-conv decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import Module, Tensor, nn, ops
from .layers import BatchNorm, Conv1d, ConvTranspose1d, LayerNorm, Linear


@dataclass(frozen=True)
class MappingConfig:
    layers: int = 4
    channels: int = 16
    kernel: int = 8
    stride: int = 4
    blocks: int = 2
    heads: int = 4
    dim: int = 64
    conv_kernel: int = 15
    ff_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise nn.ConfigError(f"map dim {self.dim} not divisible by {self.heads} heads")
        if self.kernel != 2 * self.stride or self.stride % 2:
            raise nn.ConfigError("mapping encoder needs an even stride and kernel == 2 * stride")

    def channel_plan(self) -> list[int]:
        return [min(self.channels * 2 ** i, max(self.dim, self.channels)) for i in range(self.layers)]


class FeedForward(Module):
    def __init__(self, rng, dim, mult):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.up = Linear(rng, dim, dim * mult)
        self.down = Linear(rng, dim * mult, dim)

    def forward(self, x):
        return self.down(nn.swish(self.up(self.norm(x))))


class SelfAttention(Module):
    def __init__(self, rng, dim, heads):
        super().__init__()
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def forward(self, x):
        h = self.norm(x)
        params = {
            "wq": self.q.weight, "bq": self.q.bias, "wk": self.k.weight, "bk": self.k.bias,
            "wv": self.v.weight, "bv": self.v.bias, "wo": self.o.weight, "bo": self.o.bias,
        }
        return nn.multihead_attention(h, h, h, params, self.heads)


class ConvModule(Module):
    def __init__(self, rng, dim, kernel):
        super().__init__()
        self.kernel = kernel
        self.norm = LayerNorm(dim)
        self.pointwise_in = Linear(rng, dim, 2 * dim)
        self.param("depthwise", np.asarray(rng.uniform(-1, 1, (dim, kernel)) / np.sqrt(kernel)))
        self.param("depthwise_bias", np.zeros(dim))
        self.bn = BatchNorm(dim)
        self.pointwise_out = Linear(rng, dim, dim)

    def forward(self, x):  # x: [N, T, D]
        h = nn.glu(self.pointwise_in(self.norm(x)), axis=-1)
        h = ops.transpose(h, (0, 2, 1))
        h = nn.depthwise_conv1d(h, self.depthwise, self.depthwise_bias, padding=self.kernel // 2)
        h = nn.swish(self.bn(h))
        return self.pointwise_out(ops.transpose(h, (0, 2, 1)))


class ConformerBlock(Module):
    """Half-step FFN, self-attention, convolution module, half-step FFN, LayerNorm."""

    def __init__(self, rng, dim, heads, conv_kernel, ff_mult):
        super().__init__()
        self.ff1 = FeedForward(rng, dim, ff_mult)
        self.attn = SelfAttention(rng, dim, heads)
        self.conv = ConvModule(rng, dim, conv_kernel)
        self.ff2 = FeedForward(rng, dim, ff_mult)
        self.out_norm = LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class EncoderLayer(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride):
        super().__init__()
        self.conv = Conv1d(rng, c_in, c_out, kernel, stride, padding=stride // 2)
        self.gate = Conv1d(rng, c_out, 2 * c_out, 1)

    def forward(self, x):
        return nn.glu(self.gate(ops.relu(self.conv(x))), axis=1)


class DecoderLayer(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride, last):
        super().__init__()
        self.last = last
        self.gate = Conv1d(rng, c_in, 2 * c_in, 1)
        self.deconv = ConvTranspose1d(rng, c_in, c_out, kernel, stride, padding=stride // 2)

    def forward(self, x):
        y = self.deconv(nn.glu(self.gate(x), axis=1))
        return y if self.last else ops.relu(y)


class MappingNet(Module):
    """Waveform-to-waveform enhancer; output length always equals input length."""

    def __init__(self, config: MappingConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or MappingConfig()
        rng = np.random.default_rng(seed)
        plan = cfg.channel_plan()
        prev = 1
        self.encoder: list[EncoderLayer] = []
        for i, c in enumerate(plan):
            layer = EncoderLayer(rng, prev, c, cfg.kernel, cfg.stride)
            setattr(self, f"enc{i}", layer)
            self.encoder.append(layer)
            prev = c
        self.proj_in = Linear(rng, prev, cfg.dim)
        self.blocks: list[ConformerBlock] = []
        for i in range(cfg.blocks):
            blk = ConformerBlock(rng, cfg.dim, cfg.heads, cfg.conv_kernel, cfg.ff_mult)
            setattr(self, f"conformer{i}", blk)
            self.blocks.append(blk)
        self.proj_out = Linear(rng, cfg.dim, prev)
        self.decoder: list[DecoderLayer] = []
        for i in reversed(range(cfg.layers)):
            c_out = plan[i - 1] if i > 0 else 1
            layer = DecoderLayer(rng, plan[i], c_out, cfg.kernel, cfg.stride, last=(i == 0))
            setattr(self, f"dec{i}", layer)
            self.decoder.append(layer)

    @property
    def total_stride(self) -> int:
        return self.config.stride ** self.config.layers

    def forward(self, x: Tensor) -> Tensor:
        """[N, L] or [L] waveform(s) -> same shape."""
        squeeze = x.ndim == 1
        if squeeze:
            x = ops.reshape(x, (1, -1))
        n, length = x.shape
        if length == 0:
            raise ValueError("mapping network received an empty waveform")
        padded = -(-length // self.total_stride) * self.total_stride
        h = ops.reshape(x, (n, 1, length))
        if padded != length:
            h = ops.pad(h, ((0, 0), (0, 0), (0, padded - length)))
        skips = []
        for layer in self.encoder:
            h = layer(h)
            skips.append(h)
        h = self.proj_in(ops.transpose(h, (0, 2, 1)))
        for blk in self.blocks:
            h = blk(h)
        h = ops.transpose(self.proj_out(h), (0, 2, 1))
        for layer in self.decoder:
            h = layer(h + skips.pop())
        y = ops.reshape(h, (n, padded))[:, :length]
        return ops.reshape(y, (length,)) if squeeze else y

    def hparams(self) -> dict[str, str]:
        return {f"map.{k}": str(v) for k, v in asdict(self.config).items()}
