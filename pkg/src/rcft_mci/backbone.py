"""EfficientNet-style convolutional backbone for single-channel drawings.

A small stem convolution followed by a configurable ladder of mobile
inverted bottleneck (MBConv) blocks with squeeze-excitation gating. The
final feature map is flattened into per-position tokens for the attention
head: each spatial location becomes one token whose embedding is the
channel vector at that location.

Two presets are provided: ``desk_backbone`` (64x64 input, three blocks,
small channel counts) sized so the full pipeline trains in minutes on one
CPU core, and ``paper_shape_backbone`` (512x512 input) mirroring the
EfficientNet-B2 stage layout to demonstrate the full-size network compiles
and runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autograd import (
    BatchNormState,
    Tensor,
    batch_norm,
    conv2d,
    he_normal,
    matmul,
    ones,
    zeros,
)
from .errors import ConfigError, DimensionError

# Canonical order of the three drawing conditions throughout the package.
CONDITIONS = ("copy", "immediate", "delayed")


# --- configuration ---

@dataclass(frozen=True)
class StageSpec:
    """One backbone stage: ``repeats`` MBConv blocks sharing a shape recipe.

    The first block in a stage applies ``stride`` and changes the channel
    count; the remaining ``repeats - 1`` blocks keep stride 1 and equal
    channels (and therefore carry residual skips).
    """

    expansion: int
    kernel: int
    stride: int
    out_channels: int
    repeats: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int
    stem_channels: int
    stages: tuple[StageSpec, ...]
    se_ratio: float = 0.25

    def __post_init__(self) -> None:
        if self.input_size < 16:
            raise ConfigError(f"input_size must be >= 16, got {self.input_size}")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be positive")
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        if not 0.0 < self.se_ratio <= 1.0:
            raise ConfigError(f"se_ratio must be in (0, 1], got {self.se_ratio}")
        for s in self.stages:
            if s.kernel not in (3, 5):
                raise ConfigError(f"stage kernel must be 3 or 5, got {s.kernel}")
            if s.stride not in (1, 2):
                raise ConfigError(f"stage stride must be 1 or 2, got {s.stride}")
            if s.out_channels < 1 or s.expansion < 1 or s.repeats < 1:
                raise ConfigError(f"invalid stage spec {s}")
        if self.input_size % self.total_stride() != 0:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by the "
                f"total stride {self.total_stride()}"
            )

    def total_stride(self) -> int:
        stride = 2  # stem
        for s in self.stages:
            stride *= s.stride
        return stride

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) of the final feature map."""
        side = self.input_size // self.total_stride()
        return self.stages[-1].out_channels, side, side

    def token_count(self) -> int:
        _, h, w = self.feature_shape()
        return h * w


def desk_backbone() -> BackboneConfig:
    """Small preset for 64x64 drawings; trains on one CPU core."""
    return BackboneConfig(
        input_size=64,
        stem_channels=8,
        stages=(
            StageSpec(expansion=2, kernel=3, stride=2, out_channels=16),
            StageSpec(expansion=2, kernel=3, stride=2, out_channels=32),
            StageSpec(expansion=2, kernel=5, stride=2, out_channels=32),
        ),
    )


def paper_shape_backbone() -> BackboneConfig:
    """EfficientNet-B2-shaped ladder for 512x512 input (shape demo only)."""
    return BackboneConfig(
        input_size=512,
        stem_channels=32,
        stages=(
            StageSpec(expansion=1, kernel=3, stride=1, out_channels=16, repeats=2),
            StageSpec(expansion=6, kernel=3, stride=2, out_channels=24, repeats=3),
            StageSpec(expansion=6, kernel=5, stride=2, out_channels=48, repeats=3),
            StageSpec(expansion=6, kernel=3, stride=2, out_channels=88, repeats=4),
            StageSpec(expansion=6, kernel=5, stride=1, out_channels=120, repeats=4),
            StageSpec(expansion=6, kernel=5, stride=2, out_channels=208, repeats=5),
            StageSpec(expansion=6, kernel=3, stride=1, out_channels=352, repeats=2),
        ),
    )


@dataclass(frozen=True)
class BlockSpec:
    """Shape recipe for a single MBConv block."""

    in_channels: int
    out_channels: int
    expansion: int
    kernel: int
    stride: int

    @property
    def expanded(self) -> int:
        return self.in_channels * self.expansion

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def block_specs(cfg: BackboneConfig) -> list[BlockSpec]:
    """Expand stage repeats into the flat per-block recipe list."""
    specs: list[BlockSpec] = []
    channels = cfg.stem_channels
    for stage in cfg.stages:
        for i in range(stage.repeats):
            specs.append(BlockSpec(
                in_channels=channels,
                out_channels=stage.out_channels,
                expansion=stage.expansion,
                kernel=stage.kernel,
                stride=stage.stride if i == 0 else 1,
            ))
            channels = stage.out_channels
    return specs


# --- parameter containers ---

@dataclass
class NormParams:
    """Learnable scale/shift plus running statistics for one batch norm."""

    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "NormParams":
        return cls(
            gamma=ones((channels,), dtype=dtype, requires_grad=True),
            beta=zeros((channels,), dtype=dtype, requires_grad=True),
            state=BatchNormState.identity(channels, dtype=dtype),
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode=mode)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_states(self, prefix: str) -> Iterator[tuple[str, BatchNormState]]:
        yield prefix + ".running", self.state


@dataclass
class SqueezeExciteParams:
    """Two-FC gating network: pool -> shrink -> silu -> grow -> sigmoid."""

    w1: Tensor  # (reduced, C)
    b1: Tensor  # (reduced,)
    w2: Tensor  # (C, reduced)
    b2: Tensor  # (C,)

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, se_ratio: float,
             dtype=np.float64) -> "SqueezeExciteParams":
        reduced = int(channels * se_ratio)
        if reduced < 1:
            raise ConfigError(
                f"se_ratio {se_ratio} reduces {channels} channels below 1"
            )
        return cls(
            w1=he_normal(rng, (reduced, channels), fan_in=channels, dtype=dtype),
            b1=zeros((reduced,), dtype=dtype, requires_grad=True),
            w2=he_normal(rng, (channels, reduced), fan_in=reduced, dtype=dtype),
            b2=zeros((channels,), dtype=dtype, requires_grad=True),
        )

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".w1", self.w1
        yield prefix + ".b1", self.b1
        yield prefix + ".w2", self.w2
        yield prefix + ".b2", self.b2


@dataclass
class MBConvParams:
    spec: BlockSpec
    expand_kernel: Tensor | None  # (C_exp, C_in, 1, 1); None when expansion == 1
    expand_norm: NormParams | None
    depthwise_kernel: Tensor      # (C_exp, 1, k, k)
    depthwise_norm: NormParams
    se: SqueezeExciteParams
    project_kernel: Tensor        # (C_out, C_exp, 1, 1)
    project_norm: NormParams

    @classmethod
    def init(cls, rng: np.random.Generator, spec: BlockSpec, se_ratio: float,
             dtype=np.float64) -> "MBConvParams":
        expanded = spec.expanded
        if spec.expansion > 1:
            expand_kernel = he_normal(
                rng, (expanded, spec.in_channels, 1, 1),
                fan_in=spec.in_channels, dtype=dtype)
            expand_norm = NormParams.identity(expanded, dtype=dtype)
        else:
            expand_kernel = None
            expand_norm = None
        k = spec.kernel
        return cls(
            spec=spec,
            expand_kernel=expand_kernel,
            expand_norm=expand_norm,
            depthwise_kernel=he_normal(
                rng, (expanded, 1, k, k), fan_in=k * k, dtype=dtype),
            depthwise_norm=NormParams.identity(expanded, dtype=dtype),
            se=SqueezeExciteParams.init(rng, expanded, se_ratio, dtype=dtype),
            project_kernel=he_normal(
                rng, (spec.out_channels, expanded, 1, 1),
                fan_in=expanded, dtype=dtype),
            project_norm=NormParams.identity(spec.out_channels, dtype=dtype),
        )

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.expand_kernel is not None:
            yield prefix + ".expand.kernel", self.expand_kernel
            yield from self.expand_norm.named_tensors(prefix + ".expand.norm")
        yield prefix + ".depthwise.kernel", self.depthwise_kernel
        yield from self.depthwise_norm.named_tensors(prefix + ".depthwise.norm")
        yield from self.se.named_tensors(prefix + ".se")
        yield prefix + ".project.kernel", self.project_kernel
        yield from self.project_norm.named_tensors(prefix + ".project.norm")

    def named_states(self, prefix: str) -> Iterator[tuple[str, BatchNormState]]:
        if self.expand_norm is not None:
            yield from self.expand_norm.named_states(prefix + ".expand.norm")
        yield from self.depthwise_norm.named_states(prefix + ".depthwise.norm")
        yield from self.project_norm.named_states(prefix + ".project.norm")


@dataclass
class BackboneParams:
    stem_kernel: Tensor  # (stem_channels, 1, 3, 3)
    stem_norm: NormParams
    blocks: list[MBConvParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: BackboneConfig,
             dtype=np.float64) -> "BackboneParams":
        params = cls(
            stem_kernel=he_normal(
                rng, (cfg.stem_channels, 1, 3, 3), fan_in=9, dtype=dtype),
            stem_norm=NormParams.identity(cfg.stem_channels, dtype=dtype),
        )
        for spec in block_specs(cfg):
            params.blocks.append(MBConvParams.init(rng, spec, cfg.se_ratio, dtype))
        return params

    def named_tensors(self, prefix: str = "backbone") -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".stem.kernel", self.stem_kernel
        yield from self.stem_norm.named_tensors(prefix + ".stem.norm")
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"{prefix}.block{i}")

    def named_states(self, prefix: str = "backbone") -> Iterator[tuple[str, BatchNormState]]:
        yield from self.stem_norm.named_states(prefix + ".stem.norm")
        for i, block in enumerate(self.blocks):
            yield from block.named_states(f"{prefix}.block{i}")


# --- feature maps and tokens ---

@dataclass
class FeatureMap:
    """Backbone output for one image: C x H x W activations plus the name
    of the drawing condition the image came from."""

    tensor: Tensor
    condition: str

    def __post_init__(self) -> None:
        if self.tensor.ndim != 3:
            raise DimensionError(
                f"feature map must be C x H x W, got shape {self.tensor.shape}")
        if self.condition not in CONDITIONS:
            raise ConfigError(
                f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")


def flatten_tokens(fm: FeatureMap) -> Tensor:
    """(H*W) x C token matrix; tokens scan the map row-major (row, then col).

    Inverse: ``unflatten_tokens(tokens, height, width, condition)``.
    """
    c, h, w = fm.tensor.shape
    return fm.tensor.reshape((c, h * w)).transpose()


def unflatten_tokens(tokens: Tensor, height: int, width: int,
                     condition: str) -> FeatureMap:
    """Rebuild the C x H x W map from a row-major (H*W) x C token matrix."""
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be T x C, got shape {tokens.shape}")
    t, c = tokens.shape
    if t != height * width:
        raise DimensionError(
            f"{t} tokens cannot fill a {height}x{width} map")
    return FeatureMap(tokens.transpose().reshape((c, height, width)), condition)


def flatten_token_batch(x: Tensor) -> Tensor:
    """N x C x H x W feature maps -> N x (H*W) x C token batches."""
    if x.ndim != 4:
        raise DimensionError(f"expected NCHW feature maps, got shape {x.shape}")
    n, c, h, w = x.shape
    return x.reshape((n, c, h * w)).swapaxes(1, 2)


# --- forward passes ---

def se_block(x: Tensor, params: SqueezeExciteParams) -> Tensor:
    """Squeeze-excitation gate: rescale channels by a pooled 2-FC sigmoid."""
    if x.ndim != 4:
        raise DimensionError(f"se_block expects NCHW input, got shape {x.shape}")
    pooled = x.mean(axis=(2, 3))                      # (N, C)
    hidden = (matmul(pooled, params.w1.transpose()) + params.b1).silu()
    gate = (matmul(hidden, params.w2.transpose()) + params.b2).sigmoid()
    n, c = gate.shape
    return x * gate.reshape((n, c, 1, 1))


def mbconv(x: Tensor, params: MBConvParams, mode: str = "train") -> Tensor:
    """Mobile inverted bottleneck block.

    expand 1x1 -> norm -> silu -> depthwise kxk (stride s) -> norm -> silu
    -> squeeze-excitation -> project 1x1 -> norm, with a residual skip when
    the stride is 1 and the channel count is unchanged.
    """
    spec = params.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"mbconv expects N x {spec.in_channels} x H x W input, got shape {x.shape}")
    h = x
    if params.expand_kernel is not None:
        h = conv2d(h, params.expand_kernel)
        h = params.expand_norm(h, mode).silu()
    h = conv2d(h, params.depthwise_kernel, stride=spec.stride,
               padding=spec.kernel // 2, groups=spec.expanded)
    h = params.depthwise_norm(h, mode).silu()
    h = se_block(h, params.se)
    h = conv2d(h, params.project_kernel)
    h = params.project_norm(h, mode)
    if spec.has_residual:
        h = h + x
    return h


def backbone_forward_batch(x: Tensor, cfg: BackboneConfig, params: BackboneParams,
                           mode: str = "train") -> Tensor:
    """Run a batch of N x 1 x S x S images through stem and blocks."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(
            f"backbone expects N x 1 x S x S input, got shape {x.shape}")
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise DimensionError(
            f"backbone configured for {cfg.input_size}x{cfg.input_size} input, "
            f"got {x.shape[2]}x{x.shape[3]}")
    h = conv2d(x, params.stem_kernel, stride=2, padding=1)
    h = params.stem_norm(h, mode).silu()
    for block in params.blocks:
        h = mbconv(h, block, mode=mode)
    return h


def backbone_forward(image: Tensor, cfg: BackboneConfig, params: BackboneParams,
                     mode: str = "eval", condition: str = "copy") -> FeatureMap:
    """Feature map for a single 1 x S x S image."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise DimensionError(
            f"expected a single-channel 1 x S x S image, got shape {image.shape}")
    batched = backbone_forward_batch(
        image.reshape((1,) + image.shape), cfg, params, mode=mode)
    c, fh, fw = cfg.feature_shape()
    return FeatureMap(batched.reshape((c, fh, fw)), condition)
