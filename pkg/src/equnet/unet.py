"""U-Net assembly for the vanilla, C4, C8 and D4 families.

Each filter-table column is one convolution (conv -> BN -> ReLU):

    conv1, conv2            full resolution
    D1..D4                  maxpool2, conv
    U1..U4                  upsample2, concat(skip), conv
    [group_pool]            equivariant families only
    projection              1x1 conv to n_classes
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .groups import FAMILY_TO_GROUP, SymmetryGroup
from .layers import BatchNorm, Conv2d, GroupConv, LiftingConv, Module, group_pool
from .tensor import Tensor

FAMILIES = ("vanilla", "c4", "c8", "d4")
SIZES = ("small", "large")
LAYER_NAMES = ("conv1", "conv2", "D1", "D2", "D3", "D4", "U1", "U2", "U3", "U4")

# filters per layer, keyed by (table row, size)
FILTER_TABLE: dict[tuple[str, str], tuple[int, ...]] = {
    ("vanilla", "small"): (12, 12, 22, 44, 86, 172, 86, 44, 22, 12),
    ("vanilla", "large"): (52, 52, 104, 206, 410, 820, 410, 206, 104, 52),
    ("c4", "small"): (4, 4, 6, 12, 24, 46, 24, 12, 6, 4),
    ("c4", "large"): (14, 14, 28, 56, 112, 222, 112, 56, 28, 14),
    ("c8/d4", "small"): (4, 4, 6, 10, 18, 34, 18, 10, 6, 4),
    ("c8/d4", "large"): (10, 10, 20, 40, 78, 154, 78, 40, 20, 10),
}
PRESET_LAMBDA = {("vanilla", "small"): 6.00, ("vanilla", "large"): 1.65}
# widths divided by lambda when filters are not pinned by a preset
REFERENCE_WIDTHS = (64, 64, 128, 256, 512, 1024, 512, 256, 128, 64)
SKIP_SOURCES = {"U1": "D3", "U2": "D2", "U3": "D1", "U4": "conv2"}


class ArchError(ValueError):
    pass


def table_row(family: str) -> str:
    return "c8/d4" if family in ("c8", "d4") else family


@dataclass(frozen=True)
class ArchConfig:
    family: str
    size: str = "small"
    lam: float | None = None
    kernel_size: int | None = None
    in_channels: int = 3
    n_classes: int = 1
    input_hw: int = 224
    pool_mode: str = "max"
    filters: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArchError(f"unknown family {self.family!r}")
        if self.size not in SIZES:
            raise ArchError(f"unknown size {self.size!r}")
        if self.input_hw % 16 or self.input_hw <= 0:
            raise ArchError(f"input_hw must be a positive multiple of 16, got {self.input_hw}")
        if self.lam is not None and self.lam <= 0:
            raise ArchError("lambda must be positive")
        if self.kernel_size is None:
            object.__setattr__(self, "kernel_size", 3 if self.family == "vanilla" else 9)
        if self.filters is None:
            object.__setattr__(self, "filters", resolve_filters(self.family, self.size, self.lam))
        if len(self.filters) != 10:
            raise ArchError("exactly 10 filter counts are required")

    @property
    def group(self) -> SymmetryGroup:
        return SymmetryGroup(FAMILY_TO_GROUP[self.family])


def resolve_filters(family: str, size: str, lam: float | None) -> tuple[int, ...]:
    preset_lam = PRESET_LAMBDA.get((family, size))
    if lam is None or (preset_lam is not None and lam == preset_lam):
        return FILTER_TABLE[(table_row(family), size)]
    return tuple(max(1, int(round(w / lam))) for w in REFERENCE_WIDTHS)


def preset(family: str, size: str, **overrides) -> ArchConfig:
    lam = PRESET_LAMBDA.get((family, size))
    return ArchConfig(family=family, size=size, lam=lam, **overrides)


def all_presets(**overrides) -> list[ArchConfig]:
    return [preset(f, s, **overrides) for s in SIZES for f in FAMILIES]


@dataclass(frozen=True)
class BlockSpec:
    name: str
    kind: str  # conv | lift | gconv | proj
    cin: int
    cout: int
    k: int
    scale: int  # spatial downsampling factor at which the block runs
    skip: str | None = None


@dataclass
class ModelDescriptor:
    config: ArchConfig
    blocks: list[BlockSpec] = field(default_factory=list)

    @property
    def group_kind(self) -> str:
        return FAMILY_TO_GROUP[self.config.family]

    def channel_table(self) -> dict[str, int]:
        return {b.name: b.cout for b in self.blocks}

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["filters"] = list(self.config.filters)
        return {
            "config": cfg,
            "group": self.group_kind,
            "blocks": [asdict(b) for b in self.blocks],
        }


def build_descriptor(cfg: ArchConfig) -> ModelDescriptor:
    equi = cfg.family != "vanilla"
    k = cfg.kernel_size
    f = dict(zip(LAYER_NAMES, cfg.filters))
    blocks: list[BlockSpec] = []
    conv_kind = "gconv" if equi else "conv"
    blocks.append(BlockSpec("conv1", "lift" if equi else "conv", cfg.in_channels, f["conv1"], k, 1))
    blocks.append(BlockSpec("conv2", conv_kind, f["conv1"], f["conv2"], k, 1))
    prev, scale = f["conv2"], 1
    for name in ("D1", "D2", "D3", "D4"):
        scale *= 2
        blocks.append(BlockSpec(name, conv_kind, prev, f[name], k, scale))
        prev = f[name]
    for name in ("U1", "U2", "U3", "U4"):
        scale //= 2
        skip = SKIP_SOURCES[name]
        blocks.append(BlockSpec(name, conv_kind, prev + f[skip], f[name], k, scale, skip))
        prev = f[name]
    blocks.append(BlockSpec("projection", "proj", prev, cfg.n_classes, 1, 1))
    return ModelDescriptor(cfg, blocks)


def block_param_count(b: BlockSpec, group_order: int) -> int:
    if b.kind == "proj":
        return b.cin * b.cout + b.cout
    g = group_order if b.kind == "gconv" else 1
    return b.cin * b.cout * g * b.k * b.k + b.cout + 2 * b.cout  # weights, bias, BN affine


def count_params(model) -> int:
    """Trainable scalars.  Models are enumerated; configs and descriptors use the closed form."""
    if model is None:
        return 0
    if isinstance(model, ArchConfig):
        model = build_descriptor(model)
    if isinstance(model, ModelDescriptor):
        order = model.config.group.order
        return sum(block_param_count(b, order) for b in model.blocks)
    return int(sum(p.size for p in model.parameters()))


class ConvBlock(Module):
    def __init__(self, spec: BlockSpec, group: SymmetryGroup, rng, dtype):
        if spec.kind == "conv":
            self.conv = Conv2d(spec.cin, spec.cout, spec.k, rng, dtype)
        elif spec.kind == "lift":
            self.conv = LiftingConv(spec.cin, spec.cout, group, spec.k, rng, dtype)
        else:
            self.conv = GroupConv(spec.cin, spec.cout, group, spec.k, rng, dtype)
        self.bn = BatchNorm(spec.cout, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class UNet(Module):
    def __init__(self, cfg: ArchConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.descriptor = build_descriptor(cfg)
        self.group = cfg.group
        rng = np.random.default_rng(seed)
        specs = self.descriptor.blocks
        self.blocks = [ConvBlock(s, self.group, rng, dtype) for s in specs[:-1]]
        proj = specs[-1]
        self.projection = Conv2d(proj.cin, proj.cout, 1, rng, dtype)

    @property
    def equivariant(self) -> bool:
        return self.cfg.family != "vanilla"

    @property
    def dtype(self):
        return self.projection.weight.dtype

    def forward(self, x: Tensor) -> Tensor:
        hw = self.cfg.input_hw
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != (hw, hw):
            raise ArchError(
                f"expected input [B, {self.cfg.in_channels}, {hw}, {hw}], got {tuple(x.shape)}"
            )
        feats: dict[str, Tensor] = {}
        h = x
        for spec, block in zip(self.descriptor.blocks, self.blocks):
            if spec.name.startswith("D"):
                h = ops.maxpool2(h)
            elif spec.name.startswith("U"):
                h = ops.concat_channels(ops.bilinear_upsample2(h), feats[spec.skip])
            h = block(h)
            feats[spec.name] = h
        if self.equivariant:
            h = group_pool(h, self.cfg.pool_mode)
        return self.projection(h)


def build_model(cfg: ArchConfig, seed: int = 0, dtype=np.float32) -> UNet:
    return UNet(cfg, seed=seed, dtype=dtype)


def forward_segmentation(model: UNet, x) -> Tensor:
    return model(x if isinstance(x, Tensor) else Tensor(x, dtype=model.dtype))
