"""E-HybridNet assembly, the matching baseline backbone, and static shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .diffcore import ops
from .diffcore.layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Linear, Module, SqueezeExcite
from .diffcore.tensor import Tensor
from .errors import ConfigError, ShapeError
from .fusion import AblationMode, FusionBlockSpec, HybridFusionBlock
from .scattering import ScatteringCache, ScatteringConfig, scatter, scattering_channel_count
from .wavelets import MorletParams, build_filter_bank

DROP_CONNECT_RATE = 0.2


@dataclass(frozen=True)
class StageSpec:
    row: int
    kind: str                 # conv3x3 | mbconv | hf | head
    c_out: int
    stride: int = 1
    kernel: int = 3
    expansion: int = 1
    repeats: int = 1
    J: int | None = None
    hf: FusionBlockSpec | None = None

    @property
    def label(self) -> str:
        if self.kind == "conv3x3":
            return f"{self.row}. Conv3x3"
        if self.kind == "mbconv":
            return f"{self.row}. MBConv{self.expansion}, {self.kernel}x{self.kernel}"
        if self.kind == "hf":
            return f"{self.row}. HF-{self.hf_index}, 3x3"
        return f"{self.row}. Conv1x1, Pooling, FC"

    @property
    def hf_index(self) -> int:
        return {3: 1, 5: 2}.get(self.row, self.row)

    @property
    def name(self) -> str:
        suffix = f"hf{self.hf_index}" if self.kind == "hf" else self.kind
        return f"r{self.row:02d}_{suffix}"


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple
    input_resolution: int
    num_classes: int
    width_mult: float = 1.0
    depth_mult: float = 1.0
    in_channels: int = 3
    L: int = 8
    A: int = 4
    include_order0: bool = True
    activation: str = "swish"
    morlet: MorletParams = field(default_factory=MorletParams)

    @property
    def hybrid(self) -> bool:
        return any(s.kind == "hf" for s in self.stages)

    def scattering_config(self, J: int) -> ScatteringConfig:
        return ScatteringConfig(J, self.L, self.A, 1, self.include_order0)


class StageShape(NamedTuple):
    row: int
    label: str
    resolution: int
    channels: int


# Rows of the B0-sized backbone: (row, kind, kernel, expansion, channels, stride, repeats)
_B0_ROWS = (
    (1, "conv3x3", 3, 1, 32, 2, 1),
    (2, "mbconv", 3, 1, 16, 2, 1),
    (3, "hf", 3, 0, 24, 1, 1),
    (4, "mbconv", 3, 6, 24, 2, 2),
    (5, "hf", 3, 0, 40, 1, 1),
    (6, "mbconv", 5, 6, 40, 2, 2),
    (7, "mbconv", 3, 6, 80, 1, 3),
    (8, "mbconv", 5, 6, 112, 2, 3),
    (9, "mbconv", 5, 6, 192, 1, 4),
    (10, "mbconv", 3, 6, 320, 1, 1),
    (11, "head", 1, 1, 1280, 1, 1),
)
_HF_ROWS = (3, 5)


def round_channels(c: int, width_mult: float) -> int:
    """Scale a channel count and round up to a multiple of 8."""
    if width_mult == 1.0:
        return c
    return max(8, int(math.ceil(c * width_mult / 8 - 1e-9)) * 8)


def round_repeats(r: int, depth_mult: float) -> int:
    return int(math.ceil(depth_mult * r))


def build_default_spec(resolution: int = 224, num_classes: int = 1000, variant: str = "E",
                       subvariant: int = 0, width_mult: float = 1.0, depth_mult: float = 1.0,
                       hybrid: bool = True, L: int = 8, A: int = 4, include_order0: bool = True,
                       in_channels: int = 3, hf_survival_p: float = 0.8,
                       activation: str = "swish", morlet: MorletParams | None = None,
                       hf_j: tuple = (2, 3)) -> ModelSpec:
    """The 11-row plan with HF-1 (J=2) at row 3 and HF-2 (J=3) at row 5.

    ``hybrid=False`` drops both HF rows, leaving the unmodified backbone.
    ``hf_j`` overrides the per-block J; values that break the alignment with
    the running resolution are rejected.
    """
    if resolution % 32:
        raise ConfigError(f"model.resolution must be divisible by 32, got {resolution}")
    if width_mult <= 0 or depth_mult <= 0:
        raise ConfigError("width_mult and depth_mult must be positive")
    if len(hf_j) != len(_HF_ROWS):
        raise ConfigError(f"scattering J must be given for both HF blocks, got {tuple(hf_j)}")
    stages = []
    c_prev = round_channels(32, width_mult)
    for row, kind, k, e, c, stride, reps in _B0_ROWS:
        c_out = round_channels(c, width_mult)
        if kind == "hf":
            if not hybrid:
                continue
            J = hf_j[_HF_ROWS.index(row)]
            c_scat = scattering_channel_count(ScatteringConfig(J, L, A, 1, include_order0), in_channels)
            hf = FusionBlockSpec(variant, subvariant, c_prev, c_scat, c_out, survival_p=hf_survival_p)
            stages.append(StageSpec(row, kind, c_out, J=J, hf=hf))
        else:
            repeats = reps if kind in ("conv3x3", "head") else round_repeats(reps, depth_mult)
            stages.append(StageSpec(row, kind, c_out, stride, k, e, repeats))
        c_prev = c_out
    spec = ModelSpec(tuple(stages), resolution, num_classes, width_mult, depth_mult, in_channels,
                     L, A, include_order0, activation, morlet or MorletParams())
    static_shape_check(spec)
    return spec


def baseline_spec(spec: ModelSpec) -> ModelSpec:
    """The same plan with every HF row removed."""
    return replace(spec, stages=tuple(s for s in spec.stages if s.kind != "hf"))


def static_shape_check(spec: ModelSpec) -> list:
    """Predicted (resolution, channels) after each row.

    Raises ConfigError if an HF row sits where the running side differs from
    ``input_resolution / 2**J``.
    """
    side = spec.input_resolution
    channels = spec.in_channels
    table = []
    for s in spec.stages:
        if s.kind == "hf":
            want = spec.input_resolution / 2 ** s.J
            if side != want:
                raise ConfigError(f"stage '{s.label}' (row {s.row}) runs at resolution {side} but "
                                  f"scattering with J={s.J} produces {want:g}; misaligned HF placement")
            if s.hf.c_net_in != channels:
                raise ConfigError(f"stage '{s.label}' expects {s.hf.c_net_in} input channels, gets {channels}")
        else:
            side = -(-side // s.stride)
        channels = s.c_out
        table.append(StageShape(s.row, s.label, side, channels))
    return table


def format_shape_table(table) -> str:
    lines = [f"{'Operator':<26}{'Output Res':>12}{'# Channels':>12}"]
    for r in table:
        lines.append(f"{r.label:<26}{f'{r.resolution}x{r.resolution}':>12}{r.channels:>12}")
    return "\n".join(lines)


class MBConv(Module):
    """Inverted residual: [expand 1x1] -> depthwise kxk -> SE -> project 1x1."""

    def __init__(self, c_in: int, c_out: int, expansion: int, kernel: int, stride: int,
                 survival_p: float = 1.0, se_ratio: float = 0.25, activation: str = "swish", dtype=np.float32):
        super().__init__()
        self.activation = activation
        self.survival_p = survival_p
        self.skip = stride == 1 and c_in == c_out
        mid = c_in * expansion
        if expansion != 1:
            self.add_child("expand", Conv2d(c_in, mid, 1, dtype=dtype))
            self.add_child("bn0", BatchNorm2d(mid, dtype=dtype))
        else:
            self.expand = None
        self.add_child("dw", DepthwiseConv2d(mid, kernel, stride, dtype=dtype))
        self.add_child("bn1", BatchNorm2d(mid, dtype=dtype))
        self.add_child("se", SqueezeExcite(mid, max(1, int(c_in * se_ratio)), activation, dtype=dtype))
        self.add_child("project", Conv2d(mid, c_out, 1, dtype=dtype))
        self.add_child("bn2", BatchNorm2d(c_out, dtype=dtype))

    def forward(self, x: Tensor, rng=None) -> Tensor:
        act = ops.ACTIVATIONS[self.activation]
        h = x
        if self.expand is not None:
            h = act(self.bn0(self.expand(h)))
        h = act(self.bn1(self.dw(h)))
        h = self.se(h)
        h = self.bn2(self.project(h))
        if self.skip:
            h = ops.add(x, ops.drop_connect(h, self.survival_p, self.training, rng))
        return h


def mbconv_param_count(c_in: int, c_out: int, expansion: int, kernel: int, se_ratio: float = 0.25) -> int:
    mid = c_in * expansion
    se = max(1, int(c_in * se_ratio))
    count = 0
    if expansion != 1:
        count += c_in * mid + 2 * mid
    count += mid * kernel * kernel + 2 * mid
    count += 2 * se * mid + se + mid
    count += mid * c_out + 2 * c_out
    return count


class Stem(Module):
    def __init__(self, c_in, c_out, activation, dtype):
        super().__init__()
        self.activation = activation
        self.add_child("conv", Conv2d(c_in, c_out, 3, stride=2, dtype=dtype))
        self.add_child("bn", BatchNorm2d(c_out, dtype=dtype))

    def forward(self, x):
        return ops.ACTIVATIONS[self.activation](self.bn(self.conv(x)))


class Head(Module):
    def __init__(self, c_in, c_mid, num_classes, activation, dtype):
        super().__init__()
        self.activation = activation
        self.add_child("conv", Conv2d(c_in, c_mid, 1, dtype=dtype))
        self.add_child("bn", BatchNorm2d(c_mid, dtype=dtype))
        self.add_child("fc", Linear(c_mid, num_classes, dtype=dtype))

    def forward(self, x):
        h = ops.ACTIVATIONS[self.activation](self.bn(self.conv(x)))
        self.last_features_shape = h.shape
        return self.fc(ops.global_avg_pool(h))


class Sequence(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks
        for i, b in enumerate(blocks):
            self.add_child(f"block{i}", b)

    def forward(self, x, rng=None):
        for b in self.blocks:
            x = b(x, rng=rng)
        return x


class EHybridNet(Module):
    """Backbone with Hybrid Fusion Blocks (or without, for the baseline).

    ``forward(x)`` computes scattering inputs from the raw images itself;
    callers that precompute them pass ``scat={J: coefficients}``.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__()
        static_shape_check(spec)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        # DropConnect masks; training code reseeds this per run
        self.rng = np.random.default_rng(0)
        self.cache: ScatteringCache | None = None
        self.banks = {}
        self.stage_modules: list = []
        mbconv_total = sum(s.repeats for s in spec.stages if s.kind == "mbconv")
        mb_index = 0
        c_prev = spec.in_channels
        for s in spec.stages:
            if s.kind == "conv3x3":
                m = Stem(c_prev, s.c_out, spec.activation, dtype)
            elif s.kind == "mbconv":
                blocks = []
                for i in range(s.repeats):
                    survival = 1.0 - DROP_CONNECT_RATE * mb_index / mbconv_total
                    blocks.append(MBConv(c_prev if i == 0 else s.c_out, s.c_out, s.expansion, s.kernel,
                                         s.stride if i == 0 else 1, survival, activation=spec.activation,
                                         dtype=dtype))
                    mb_index += 1
                m = Sequence(blocks)
            elif s.kind == "hf":
                m = HybridFusionBlock(s.hf, spec.activation, dtype)
                if s.J not in self.banks:
                    self.banks[s.J] = build_filter_bank(s.J, spec.L, spec.A, spec.morlet, side=spec.input_resolution)
            else:
                m = Head(c_prev, s.c_out, spec.num_classes, spec.activation, dtype)
            self.add_child(s.name, m)
            self.stage_modules.append((s, m))
            c_prev = s.c_out

    @property
    def hf_blocks(self) -> list:
        return [m for s, m in self.stage_modules if s.kind == "hf"]

    def set_ablation(self, mode) -> None:
        mode = AblationMode.parse(mode)
        for block in self.hf_blocks:
            block.ablation = mode

    def scattering_inputs(self, x: np.ndarray, key=None) -> dict:
        """Scattering coefficients for every J used by the HF rows."""
        out = {}
        for J, bank in self.banks.items():
            cfg = self.spec.scattering_config(J)

            def compute(J=J, bank=bank, cfg=cfg):
                return scatter(x, bank, cfg).coefficients

            if self.cache is not None and key is not None:
                out[J] = self.cache.get_or_compute(key, J, compute)
            else:
                out[J] = compute()
        return out

    def forward(self, x, scat: dict | None = None, trace: list | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        expected = (self.spec.in_channels, self.spec.input_resolution, self.spec.input_resolution)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        if self.spec.hybrid and scat is None:
            scat = self.scattering_inputs(x.data)
        h = x
        for s, m in self.stage_modules:
            if s.kind == "hf":
                sc = scat[s.J]
                sc = sc if isinstance(sc, Tensor) else Tensor(np.asarray(sc, dtype=self.dtype))
                h = m(h, sc, rng=self.rng)
            elif s.kind == "mbconv":
                h = m(h, rng=self.rng)
            else:
                h = m(h)
            if trace is not None:
                shape = m.last_features_shape if s.kind == "head" else h.shape
                trace.append(StageShape(s.row, s.label, shape[2], shape[1]))
        return h
