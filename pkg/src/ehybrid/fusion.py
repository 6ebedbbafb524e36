"""Hybrid Fusion Block.

Data flow for one block (``c = c_net_in + c_scat_in``)::

    net  -> [BN] -> (x0 if net disabled)  --+
                                            concat -> [dw3x3 -> BN -> act] -> SE -> pw1x1 -> BN -> (+ skip)
    scat -> [BN] -> (x0 if scat disabled) --+

Variants toggle the bracketed stages: ``E`` has both, ``H`` drops the
expansion BN, ``Z`` drops the depthwise stage. Sub-variant ``0`` has no skip,
``1`` adds a skip from the network input (1x1-projected when channel counts
differ) and ``3`` also applies DropConnect to the residual branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .diffcore import ops
from .diffcore.layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Module, SqueezeExcite
from .diffcore.tensor import Tensor
from .errors import ConfigError, ShapeError

VARIANTS = {
    # variant: (expansion BN, depthwise stage)
    "E": (True, True),
    "Z": (True, False),
    "H": (False, True),
}
SUBVARIANTS = {
    # subvariant: (skip connection, DropConnect)
    0: (False, False),
    1: (True, False),
    3: (True, True),
}


class AblationMode(str, Enum):
    NONE = "none"
    SCAT_DISABLED = "scat_disabled"
    NET_DISABLED = "net_disabled"

    @classmethod
    def parse(cls, value) -> "AblationMode":
        if isinstance(value, cls):
            return value
        aliases = {"none": cls.NONE, "scat": cls.SCAT_DISABLED, "net": cls.NET_DISABLED}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown ablation mode {value!r}; expected none, scat or net") from None


@dataclass(frozen=True)
class FusionBlockSpec:
    variant: str
    subvariant: int
    c_net_in: int
    c_scat_in: int
    c_out: int
    se_reduction: int = 4
    dw_kernel: int = 3
    survival_p: float = 0.8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}; expected one of E, Z, H")
        if self.subvariant not in SUBVARIANTS:
            raise ConfigError(f"unknown fusion subvariant {self.subvariant!r}; expected 0, 1 or 3")
        if self.dw_kernel != 3:
            raise ConfigError("the fusion depthwise kernel is fixed at 3")
        if min(self.c_net_in, self.c_scat_in, self.c_out, self.se_reduction) < 1:
            raise ConfigError(f"channel counts and se_reduction must be positive: {self}")
        if not 0 < self.survival_p <= 1:
            raise ConfigError(f"survival_p must lie in (0, 1], got {self.survival_p}")

    @property
    def name(self) -> str:
        return f"{self.variant}{self.subvariant}"

    @property
    def c_concat(self) -> int:
        return self.c_net_in + self.c_scat_in

    @property
    def c_se(self) -> int:
        return max(1, self.c_concat // self.se_reduction)

    @property
    def expansion_bn(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def depthwise(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def skip(self) -> bool:
        return SUBVARIANTS[self.subvariant][0]

    @property
    def drop_connect(self) -> bool:
        return SUBVARIANTS[self.subvariant][1]

    @property
    def projected_skip(self) -> bool:
        return self.skip and self.c_net_in != self.c_out


def hf_param_count(spec: FusionBlockSpec) -> int:
    """Trainable parameters of a block, from closed-form layer sizes."""
    c = spec.c_concat
    count = 0
    if spec.expansion_bn:
        count += 2 * spec.c_net_in + 2 * spec.c_scat_in
    if spec.depthwise:
        count += c * spec.dw_kernel ** 2 + 2 * c
    count += 2 * spec.c_se * c + spec.c_se + c      # SE weights and biases
    count += spec.c_out * c + 2 * spec.c_out        # pointwise + BN
    if spec.projected_skip:
        count += spec.c_net_in * spec.c_out
    return count


class HybridFusionBlock(Module):
    def __init__(self, spec: FusionBlockSpec, activation: str = "swish", dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.activation = activation
        self.ablation = AblationMode.NONE
        c = spec.c_concat
        if spec.expansion_bn:
            self.add_child("bn_net", BatchNorm2d(spec.c_net_in, dtype=dtype))
            self.add_child("bn_scat", BatchNorm2d(spec.c_scat_in, dtype=dtype))
        if spec.depthwise:
            self.add_child("dw", DepthwiseConv2d(c, spec.dw_kernel, dtype=dtype))
            self.add_child("bn_dw", BatchNorm2d(c, dtype=dtype))
        self.add_child("se", SqueezeExcite(c, spec.c_se, activation, dtype=dtype))
        self.add_child("pw", Conv2d(c, spec.c_out, 1, dtype=dtype))
        self.add_child("bn_pw", BatchNorm2d(spec.c_out, dtype=dtype))
        if spec.projected_skip:
            self.add_child("proj", Conv2d(spec.c_net_in, spec.c_out, 1, dtype=dtype))

    def forward(self, net_feat: Tensor, scat_feat: Tensor, rng: np.random.Generator | None = None,
                ablation: AblationMode | None = None) -> Tensor:
        spec = self.spec
        ablation = self.ablation if ablation is None else AblationMode.parse(ablation)
        if net_feat.ndim != 4 or scat_feat.ndim != 4:
            raise ShapeError("fusion inputs must be rank-4 (N, C, H, W)")
        n, c_net, h, w = net_feat.shape
        if (scat_feat.shape[0], scat_feat.shape[2], scat_feat.shape[3]) != (n, h, w):
            raise ShapeError(f"scattering features {scat_feat.shape} are not aligned with "
                             f"network features {net_feat.shape}")
        if c_net != spec.c_net_in or scat_feat.shape[1] != spec.c_scat_in:
            raise ShapeError(f"block expects {spec.c_net_in} network + {spec.c_scat_in} scattering "
                             f"channels, got {c_net} + {scat_feat.shape[1]}")

        a, s = net_feat, scat_feat
        if spec.expansion_bn:
            a, s = self.bn_net(a), self.bn_scat(s)
        if ablation is AblationMode.NET_DISABLED:
            a = ops.scale(a, 0.0)
        elif ablation is AblationMode.SCAT_DISABLED:
            s = ops.scale(s, 0.0)
        h_ = ops.concat([a, s], axis=1)
        if spec.depthwise:
            h_ = ops.ACTIVATIONS[self.activation](self.bn_dw(self.dw(h_)))
        h_ = self.se(h_)
        h_ = self.bn_pw(self.pw(h_))
        if not spec.skip:
            return h_
        if spec.drop_connect:
            h_ = ops.drop_connect(h_, spec.survival_p, self.training, rng)
        shortcut = self.proj(net_feat) if spec.projected_skip else net_feat
        return ops.add(shortcut, h_)


def hf_forward(net_feat: Tensor, scat_feat: Tensor, block: HybridFusionBlock, training: bool,
               ablation: AblationMode | str = AblationMode.NONE,
               rng: np.random.Generator | None = None) -> Tensor:
    """Functional entry point: run ``block`` in the requested mode."""
    block.train(training)
    return block(net_feat, scat_feat, rng=rng, ablation=AblationMode.parse(ablation))
