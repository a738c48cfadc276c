"""Fusion-coefficient network: |M| -> alpha in (0, 1)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import Module, Tensor, ops
from .layers import BatchNorm, Conv2d, PReLU


ALPHA_EPS = 1e-6


class ContractError(ValueError):
    """An operation received data violating its documented contract."""


@dataclass(frozen=True)
class FcConfig:
    channels: int = 16
    kernel: int = 7


class FcNet(Module):
    """Three Conv2D -> BatchNorm -> activation blocks; the last uses a sigmoid.

    Padding of kernel // 2 on both axes keeps the T x F grid unchanged.
    """

    def __init__(self, config: FcConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or FcConfig()
        rng = np.random.default_rng(seed)
        pad = cfg.kernel // 2
        c = cfg.channels
        self.conv1 = Conv2d(rng, 1, c, cfg.kernel, padding=pad)
        self.bn1 = BatchNorm(c)
        self.act1 = PReLU(c)
        self.conv2 = Conv2d(rng, c, c, cfg.kernel, padding=pad)
        self.bn2 = BatchNorm(c)
        self.act2 = PReLU(c)
        self.conv3 = Conv2d(rng, c, 1, cfg.kernel, padding=pad)
        self.bn3 = BatchNorm(1)

    def forward(self, mask_mag: Tensor) -> Tensor:
        """[N, T, F] or [T, F] nonnegative magnitudes -> alpha of the same shape."""
        if np.any(mask_mag.data < 0):
            raise ContractError("fusion network input must be a nonnegative magnitude")
        squeeze = mask_mag.ndim == 2
        h = ops.reshape(mask_mag, (1 if squeeze else mask_mag.shape[0], 1) + mask_mag.shape[-2:])
        h = self.act1(self.bn1(self.conv1(h)))
        h = self.act2(self.bn2(self.conv2(h)))
        alpha = ops.sigmoid(self.bn3(self.conv3(h)))
        # float32 sigmoid saturates to exactly 0 or 1; keep the open interval
        alpha = ops.clip(alpha, ALPHA_EPS, 1.0 - ALPHA_EPS)
        return ops.reshape(alpha, mask_mag.shape)

    def hparams(self) -> dict[str, str]:
        return {f"fc.{k}": str(v) for k, v in asdict(self.config).items()}
