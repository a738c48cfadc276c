"""The mapping enhancer, masking denoiser and fusion-coefficient network."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..tensor import Module, WeightsFormatError, serialize
from .fcnet import ALPHA_EPS, ContractError, FcConfig, FcNet
from .mapping import MappingConfig, MappingNet
from .masking import MaskingConfig, MaskingNet

__all__ = [
    "ALPHA_EPS",
    "ContractError",
    "FcConfig",
    "FcNet",
    "MappingConfig",
    "MappingNet",
    "MaskingConfig",
    "MaskingNet",
    "Networks",
    "load_weights",
    "save_weights",
]

INIT_SCHEME = "uniform(+-1/sqrt(fan_in)) weights, zero biases, identity-mask output layer, prelu 0.25"


@dataclass
class Networks:
    mapping: MappingNet
    masking: MaskingNet
    fc: FcNet

    @classmethod
    def create(cls, map_cfg: MappingConfig | None = None, mask_cfg: MaskingConfig | None = None,
               fc_cfg: FcConfig | None = None, seed: int = 0) -> "Networks":
        """Deterministic initialisation; each network gets its own stream derived from ``seed``."""
        seeds = np.random.SeedSequence(seed).generate_state(3)
        return cls(MappingNet(map_cfg, int(seeds[0])), MaskingNet(mask_cfg, int(seeds[1])),
                   FcNet(fc_cfg, int(seeds[2])))

    def items(self) -> list[tuple[str, Module]]:
        return [("map", self.mapping), ("mask", self.masking), ("fc", self.fc)]

    def train(self, mode: bool = True) -> "Networks":
        for _, net in self.items():
            net.train(mode)
        return self

    def eval(self) -> "Networks":
        return self.train(False)

    def named_parameters(self):
        for prefix, net in self.items():
            yield from net.named_parameters(prefix + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, which=("map", "mask", "fc")) -> dict[str, np.ndarray]:
        state = {}
        for prefix, net in self.items():
            if prefix in which:
                state.update({f"{prefix}.{k}": v for k, v in net.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], which=("map", "mask", "fc")) -> None:
        for prefix, net in self.items():
            if prefix in which:
                sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
                try:
                    net.load_state_dict(sub)
                except WeightsFormatError as exc:
                    raise WeightsFormatError(str(exc).replace("tensor '", f"tensor '{prefix}.")) from None

    def hparams(self) -> dict[str, str]:
        out = {"init": INIT_SCHEME}
        for _, net in self.items():
            out.update(net.hparams())
        return out


def _config_from_header(cls, header: dict[str, str], prefix: str):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in header:
            default = getattr(cls(), f.name)
            kwargs[f.name] = type(default)(header[key])
    return cls(**kwargs)


def save_weights(nets: Networks, path, extra_tensors=None, extra_header=None,
                 which=("map", "mask", "fc")) -> None:
    tensors = nets.state_dict(which)
    if extra_tensors:
        tensors.update(extra_tensors)
    header = nets.hparams()
    header["networks"] = ",".join(which)
    if extra_header:
        header.update({k: str(v) for k, v in extra_header.items()})
    serialize.save(path, tensors, header)


def load_weights(path, nets: Networks | None = None, which=None):
    """Load a weights file; builds networks from its header when ``nets`` is None.

    Returns (nets, tensors, header) so callers can pick up optimiser state.
    """
    path = Path(path)
    tensors, header = serialize.load(path)
    present = tuple(header.get("networks", "map,mask,fc").split(","))
    which = present if which is None else which
    if nets is None:
        nets = Networks(
            MappingNet(_config_from_header(MappingConfig, header, "map")),
            MaskingNet(_config_from_header(MaskingConfig, header, "mask")),
            FcNet(_config_from_header(FcConfig, header, "fc")),
        )
    nets.load_state_dict(tensors, which)
    return nets, tensors, header
