"""Parameterised layers shared by the three networks."""

from __future__ import annotations

import numpy as np

from ..tensor import Module, Tensor, nn, ops


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.param("weight", fan_in_uniform(rng, (n_out, n_in), n_in))
        self.bias = self.param("bias", np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return nn.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.param("weight", fan_in_uniform(rng, (c_out, c_in, kernel), c_in * kernel))
        self.param("bias", np.zeros(c_out))

    def forward(self, x):
        return nn.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.param("weight", fan_in_uniform(rng, (c_in, c_out, kernel), c_in * kernel // max(stride, 1)))
        self.param("bias", np.zeros(c_out))

    def forward(self, x):
        return nn.conv_transpose1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=True):
        super().__init__()
        kt, kf = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride, self.padding = stride, padding
        self.param("weight", fan_in_uniform(rng, (c_out, c_in, kt, kf), c_in * kt * kf))
        self.bias = self.param("bias", np.zeros(c_out)) if bias else None

    def forward(self, x):
        return nn.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over channel axis 1 for 3-D or 4-D inputs."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.param("gamma", np.ones(channels))
        self.param("beta", np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        return nn.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.param("gamma", np.ones(dim))
        self.param("beta", np.zeros(dim))

    def forward(self, x):
        return nn.layer_norm(x, self.gamma, self.beta)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.param("slope", np.full(channels, init))

    def forward(self, x):
        return nn.prelu(x, self.slope)


class ComplexConv2d(Module):
    """Complex 2-D convolution on [N, 2C, T, F] tensors (real half, then imaginary half).

    (a + ib) * (w + iv) = (a*w - b*v) + i(a*v + b*w): the four real products are
    evaluated as one real convolution with a 2x2 block weight.
    """

    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, transposed=False):
        super().__init__()
        kt, kf = kernel
        self.stride, self.padding, self.transposed = stride, padding, transposed
        shape = (c_in, c_out, kt, kf) if transposed else (c_out, c_in, kt, kf)
        fan_in = c_in * kt * kf
        self.param("weight_re", fan_in_uniform(rng, shape, 2 * fan_in))
        self.param("weight_im", fan_in_uniform(rng, shape, 2 * fan_in))
        self.param("bias_re", np.zeros(c_out))
        self.param("bias_im", np.zeros(c_out))

    def block_weight(self) -> Tensor:
        """Real weight acting on stacked (real, imag) channels."""
        wr, wi = self.weight_re, self.weight_im
        if self.transposed:
            # rows index input channels: re-in -> (wr, wi), im-in -> (-wi, wr)
            return ops.concat([ops.concat([wr, wi], axis=1), ops.concat([-wi, wr], axis=1)], axis=0)
        return ops.concat([ops.concat([wr, -wi], axis=1), ops.concat([wi, wr], axis=1)], axis=0)

    def forward(self, x: Tensor, output_padding=0) -> Tensor:
        w = self.block_weight()
        b = ops.concat([self.bias_re, self.bias_im], axis=0)
        if self.transposed:
            return nn.conv_transpose2d(x, w, b, self.stride, self.padding, output_padding)
        return nn.conv2d(x, w, b, self.stride, self.padding)


def complex_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N, 2C, ...] complex tensors keeping the real/imag halves grouped."""
    ca, cb = a.shape[1] // 2, b.shape[1] // 2
    return ops.concat([a[:, :ca], b[:, :cb], a[:, ca:], b[:, cb:]], axis=1)
