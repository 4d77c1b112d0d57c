"""Multi-head self-attention over backbone tokens and the spatial-stream head.

The attention layer follows the standard scaled dot-product form: each head
projects the tokens with its own query/key/value matrices, attends with
softmax(Q·Kᵀ/√d_k)·V, and the concatenated heads are mixed by an output
projection. No positional encoding is applied by default — tokens are
treated as an unordered set — but a learned positional embedding can be
enabled in the config.

The spatial stream runs the three drawings (copy, immediate recall, delayed
recall) through one shared backbone, applies shared-weight attention per
image, mean-pools each image's tokens, concatenates the three pooled
vectors in condition order, and classifies with two fully connected layers
and a softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autograd import Tensor, concat, he_normal, matmul, softmax, zeros
from .backbone import (
    CONDITIONS,
    BackboneConfig,
    BackboneParams,
    backbone_forward_batch,
    flatten_token_batch,
)
from .errors import ConfigError, DataError, DimensionError


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 4
    fc1_width: int = 128
    positional_encoding: bool = False

    def __post_init__(self) -> None:
        if self.heads < 1:
            raise ConfigError(f"head count must be >= 1, got {self.heads}")
        if self.fc1_width < 1:
            raise ConfigError(f"fc1_width must be >= 1, got {self.fc1_width}")


@dataclass
class AttentionParams:
    """Per-head projections stacked on a leading head axis.

    ``wq[i]``, ``wk[i]``, ``wv[i]`` are head i's C x d_k query/key/value
    matrices; ``wo`` is the (h*d_k) x C output projection. ``pos``, when
    present, is a learned T x C positional embedding added to the tokens
    before attention.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    pos: Tensor | None = None

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, heads: int,
             dtype=np.float64, token_count: int | None = None,
             positional_encoding: bool = False) -> "AttentionParams":
        if heads < 1:
            raise ConfigError(f"head count must be >= 1, got {heads}")
        if channels % heads != 0:
            raise ConfigError(
                f"embedding width {channels} is not divisible by {heads} heads")
        d_k = channels // heads
        pos = None
        if positional_encoding:
            if token_count is None:
                raise ConfigError(
                    "positional encoding needs the token count at init time")
            pos = Tensor(rng.normal(0.0, 0.02, (token_count, channels))
                         .astype(dtype), requires_grad=True)
        return cls(
            wq=he_normal(rng, (heads, channels, d_k), fan_in=channels, dtype=dtype),
            wk=he_normal(rng, (heads, channels, d_k), fan_in=channels, dtype=dtype),
            wv=he_normal(rng, (heads, channels, d_k), fan_in=channels, dtype=dtype),
            wo=he_normal(rng, (heads * d_k, channels), fan_in=heads * d_k,
                         dtype=dtype),
            heads=heads,
            pos=pos,
        )

    @property
    def channels(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    def validate(self) -> None:
        h, c, d_k = self.wq.shape
        if h != self.heads or c != h * d_k:
            raise ConfigError(
                f"attention shapes inconsistent: {h} heads of width {d_k} "
                f"cannot tile an embedding of width {c}")
        if self.wk.shape != self.wq.shape or self.wv.shape != self.wq.shape:
            raise DimensionError("query/key/value projections must share a shape")
        if self.wo.shape != (h * d_k, c):
            raise DimensionError(
                f"output projection must be {h * d_k} x {c}, got {self.wo.shape}")

    def named_tensors(self, prefix: str = "attention") -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".wq", self.wq
        yield prefix + ".wk", self.wk
        yield prefix + ".wv", self.wv
        yield prefix + ".wo", self.wo
        if self.pos is not None:
            yield prefix + ".pos", self.pos


@dataclass
class SpatialHeadParams:
    """Two FC layers mapping the concatenated pooled vectors to 2 logits."""

    w1: Tensor  # (hidden, in_features)
    b1: Tensor
    w2: Tensor  # (2, hidden)
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, in_features: int, hidden: int,
             dtype=np.float64) -> "SpatialHeadParams":
        return cls(
            w1=he_normal(rng, (hidden, in_features), fan_in=in_features, dtype=dtype),
            b1=zeros((hidden,), dtype=dtype, requires_grad=True),
            w2=he_normal(rng, (2, hidden), fan_in=hidden, dtype=dtype),
            b2=zeros((2,), dtype=dtype, requires_grad=True),
        )

    def named_tensors(self, prefix: str = "spatial_head") -> Iterator[tuple[str, Tensor]]:
        yield prefix + ".w1", self.w1
        yield prefix + ".b1", self.b1
        yield prefix + ".w2", self.w2
        yield prefix + ".b2", self.b2


# --- attention ---

def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic attention matrix softmax(Q·Kᵀ/√d_k) over keys."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    scale = 1.0 / np.sqrt(k.shape[-1])
    return softmax(matmul(q, k.swapaxes(-1, -2)) * scale, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q·Kᵀ/√d_k)·V; leading batch axes broadcast."""
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError("attention inputs must be at least 2-D")
    if not q.shape[-2] == k.shape[-2] == v.shape[-2]:
        raise DimensionError(
            f"row counts differ: Q {q.shape[-2]}, K {k.shape[-2]}, "
            f"V {v.shape[-2]}")
    return matmul(attention_weights(q, k), v)


def multi_head_attention_batch(tokens: Tensor, params: AttentionParams) -> Tensor:
    """Self-attention over a batch of token matrices (B x T x C -> same)."""
    params.validate()
    if tokens.ndim != 3:
        raise DimensionError(f"expected B x T x C tokens, got shape {tokens.shape}")
    b, t, c = tokens.shape
    if c != params.channels:
        raise ConfigError(
            f"token embedding width {c} does not match attention width "
            f"{params.channels}")
    per_head = tokens.reshape((b, 1, t, c))
    q = matmul(per_head, params.wq)  # (B, h, T, d_k)
    k = matmul(per_head, params.wk)
    v = matmul(per_head, params.wv)
    context = scaled_dot_attention(q, k, v)          # (B, h, T, d_k)
    merged = context.swapaxes(1, 2).reshape((b, t, params.heads * params.d_k))
    return matmul(merged, params.wo)


def multi_head_attention(tokens: Tensor, params: AttentionParams) -> Tensor:
    """Self-attention for a single T x C token matrix."""
    if tokens.ndim != 2:
        raise DimensionError(f"expected T x C tokens, got shape {tokens.shape}")
    return multi_head_attention_batch(
        tokens.reshape((1,) + tokens.shape), params)[0]


# --- spatial stream ---

def head_forward(pooled: Tensor, params: SpatialHeadParams) -> Tensor:
    """fc1 -> silu -> fc2 -> softmax over the two classes (CN, MCI)."""
    hidden = (matmul(pooled, params.w1.transpose()) + params.b1).silu()
    logits = matmul(hidden, params.w2.transpose()) + params.b2
    return softmax(logits, axis=-1)


def spatial_stream_batch(images: Tensor, cfg: BackboneConfig,
                         backbone_params: BackboneParams,
                         attn_params: AttentionParams,
                         head_params: SpatialHeadParams,
                         mode: str = "train") -> Tensor:
    """Class probabilities for a batch of drawing triplets.

    ``images`` is N x 3 x S x S with the second axis in condition order
    (copy, immediate, delayed). Returns N x 2 probabilities [p_CN, p_MCI].
    """
    if images.ndim != 4 or images.shape[1] != len(CONDITIONS):
        raise DimensionError(
            f"expected N x 3 x S x S image triplets, got shape {images.shape}")
    n = images.shape[0]
    side = cfg.input_size
    stacked = images.reshape((n * 3, 1, side, side))
    features = backbone_forward_batch(stacked, cfg, backbone_params, mode=mode)
    tokens = flatten_token_batch(features)           # (3N, T, C)
    if attn_params.pos is not None:
        tokens = tokens + attn_params.pos
    attended = multi_head_attention_batch(tokens, attn_params)
    pooled = attended.mean(axis=1)                   # (3N, C)
    per_subject = pooled.reshape((n, 3 * pooled.shape[1]))
    return head_forward(per_subject, head_params)


def spatial_stream_forward(images: Mapping[str, Tensor], cfg: BackboneConfig,
                           backbone_params: BackboneParams,
                           attn_params: AttentionParams,
                           head_params: SpatialHeadParams,
                           mode: str = "eval") -> Tensor:
    """[p_CN, p_MCI] for one subject's three drawings, keyed by condition."""
    for condition in CONDITIONS:
        if condition not in images:
            raise DataError(f"missing {condition} image")
    unknown = set(images) - set(CONDITIONS)
    if unknown:
        raise DataError(f"unknown image conditions: {sorted(unknown)}")
    side = cfg.input_size
    stack = []
    for condition in CONDITIONS:
        image = images[condition]
        if image.shape != (1, side, side):
            raise DimensionError(
                f"{condition} image must be 1 x {side} x {side}, "
                f"got shape {image.shape}")
        stack.append(image.reshape((1, 1, side, side)))
    triplet = concat(stack, axis=1)                  # (1, 3, S, S)
    return spatial_stream_batch(triplet, cfg, backbone_params, attn_params,
                                head_params, mode=mode)[0]
