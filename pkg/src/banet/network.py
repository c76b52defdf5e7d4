"""The segmentation network: one encoder, two entangled decoders.

The encoder halves resolution per level with stride-2 convolutions and (at
most) doubles channels.  A boundary decoder and a segmentation decoder mirror
it back up; both emit a softmax head at every level except the coarsest.

The coupling is multiplicative attention: at each segmentation-decoder level
the upsampled features are rescaled voxel-wise by (1 + p_b), where p_b is the
boundary probability the boundary decoder predicts at that same level.
Voxels the boundary decoder is confident about get amplified (up to 2x);
everything else passes through unchanged.  With the boundary branch disabled
(`boundary_branch=False`) the model degrades to a plain U-shaped net, keeping
encoder and segmentation-decoder initialization identical at equal seed.

At inference only the finest segmentation head is realized; the boundary
branch still runs because every decoder level's attention needs it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor, concat_channels, mul, scalar_add, slice_channels
from .ops import (ConvParams, InstanceNormParams, conv3d, he_normal_conv, instance_norm,
                  leaky_relu, softmax_channels, transposed_conv3d, unit_norm_params)

IN_CHANNELS = 1
BOUNDARY_CLASSES = 2


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 5
    base_channels: int = 32
    channel_cap: int = 320
    num_classes: int = 4
    patch_dims: tuple[int, int, int] = (32, 32, 32)
    boundary_branch: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.channel_cap < self.base_channels:
            raise ValueError("channel_cap must be >= base_channels")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        object.__setattr__(self, "patch_dims", tuple(int(d) for d in self.patch_dims))
        if len(self.patch_dims) != 3:
            raise ValueError(f"patch_dims must be a triple, got {self.patch_dims}")
        divisor = 2 ** (self.levels - 1)
        if any(d < divisor or d % divisor for d in self.patch_dims):
            raise ValueError(f"patch_dims {self.patch_dims} must be divisible by "
                             f"2^(levels-1) = {divisor}")

    @property
    def boundary_channels(self) -> int:
        return BOUNDARY_CLASSES

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.channel_cap)


@dataclass
class ConvBlock:
    conv: ConvParams
    norm: InstanceNormParams


@dataclass
class EncoderLevel:
    block1: ConvBlock  # stride 2 on every level except the first
    block2: ConvBlock


@dataclass
class DecoderLevel:
    up: ConvParams  # transposed conv from the level below
    block1: ConvBlock
    block2: ConvBlock
    head: ConvParams  # 1x1x1 projection to class logits


@dataclass
class BaNet:
    config: NetworkConfig
    encoder: list[EncoderLevel]
    boundary: list[DecoderLevel] = field(default_factory=list)  # indexed by level
    seg: list[DecoderLevel] = field(default_factory=list)

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        """All learned tensors with stable names, in build order."""
        for i, enc in enumerate(self.encoder):
            yield from _block_params(f"encoder.{i}", enc.block1, enc.block2)
        for branch, levels in (("boundary", self.boundary), ("seg", self.seg)):
            for s in reversed(range(len(levels))):
                dec = levels[s]
                yield f"{branch}.{s}.up.weight", dec.up.weight
                yield f"{branch}.{s}.up.bias", dec.up.bias
                yield from _block_params(f"{branch}.{s}", dec.block1, dec.block2)
                yield f"{branch}.{s}.head.weight", dec.head.weight
                yield f"{branch}.{s}.head.bias", dec.head.bias

    def zero_grads(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.parameters())


def _block_params(prefix: str, *blocks: ConvBlock) -> Iterator[tuple[str, Tensor]]:
    for j, blk in enumerate(blocks, start=1):
        yield f"{prefix}.conv{j}.weight", blk.conv.weight
        yield f"{prefix}.conv{j}.bias", blk.conv.bias
        yield f"{prefix}.norm{j}.gamma", blk.norm.gamma
        yield f"{prefix}.norm{j}.beta", blk.norm.beta


def _make_block(rng, c_in: int, c_out: int, stride=(1, 1, 1)) -> ConvBlock:
    return ConvBlock(he_normal_conv(rng, c_out, c_in, stride=stride),
                     unit_norm_params(c_out))


def _make_decoder(rng, cfg: NetworkConfig, head_classes: int) -> list[DecoderLevel]:
    levels: list[Optional[DecoderLevel]] = [None] * (cfg.levels - 1)
    for s in reversed(range(cfg.levels - 1)):  # build coarse-to-fine, execution order
        c_lo, c = cfg.channels_at(s + 1), cfg.channels_at(s)
        levels[s] = DecoderLevel(
            up=he_normal_conv(rng, c, c_lo, kernel=(2, 2, 2), stride=(2, 2, 2),
                              padding=(0, 0, 0)),
            block1=_make_block(rng, 2 * c, c),
            block2=_make_block(rng, c, c),
            head=he_normal_conv(rng, head_classes, c, kernel=(1, 1, 1), padding=(0, 0, 0)),
        )
    return levels


def build(cfg: NetworkConfig, seed: int) -> BaNet:
    """Construct and He-initialize a network.

    The encoder, boundary decoder and segmentation decoder each draw from
    their own seed stream, so toggling boundary_branch does not disturb the
    other components' initialization.
    """
    enc_ss, bnd_ss, seg_ss = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(enc_ss)
    encoder = []
    for lvl in range(cfg.levels):
        c = cfg.channels_at(lvl)
        if lvl == 0:
            encoder.append(EncoderLevel(_make_block(rng, IN_CHANNELS, c),
                                        _make_block(rng, c, c)))
        else:
            c_prev = cfg.channels_at(lvl - 1)
            encoder.append(EncoderLevel(_make_block(rng, c_prev, c, stride=(2, 2, 2)),
                                        _make_block(rng, c, c)))
    boundary = (_make_decoder(np.random.default_rng(bnd_ss), cfg, BOUNDARY_CLASSES)
                if cfg.boundary_branch else [])
    seg = _make_decoder(np.random.default_rng(seg_ss), cfg, cfg.num_classes)
    return BaNet(cfg, encoder, boundary, seg)


def enhance(features: Tensor, boundary_prob: Tensor) -> Tensor:
    """Boundary attention: features * (1 + p_b), p_b broadcast over channels."""
    if boundary_prob.shape[1] != 1:
        raise ValueError(f"boundary_prob must have 1 channel, got {boundary_prob.shape[1]}")
    return mul(features, scalar_add(boundary_prob, 1.0))


def _conv_block(x: Tensor, blk: ConvBlock) -> Tensor:
    return leaky_relu(instance_norm(conv3d(x, blk.conv), blk.norm))


def _encode(net: BaNet, x: Tensor) -> list[Tensor]:
    skips = []
    h = x
    for enc in net.encoder:
        h = _conv_block(h, enc.block1)
        h = _conv_block(h, enc.block2)
        skips.append(h)
    return skips


def _decode_boundary(net: BaNet, skips: list[Tensor]) -> list[Tensor]:
    probs: list[Optional[Tensor]] = [None] * (net.config.levels - 1)
    h = skips[-1]
    for s in reversed(range(net.config.levels - 1)):
        dec = net.boundary[s]
        h = concat_channels(transposed_conv3d(h, dec.up), skips[s])
        h = _conv_block(h, dec.block1)
        h = _conv_block(h, dec.block2)
        probs[s] = softmax_channels(conv3d(h, dec.head))
    return probs


def _decode_seg(net: BaNet, skips: list[Tensor], boundary_probs: list[Tensor],
                all_heads: bool, boundary_override: Optional[float],
                capture: Optional[dict]) -> list[Optional[Tensor]]:
    probs: list[Optional[Tensor]] = [None] * (net.config.levels - 1)
    h = skips[-1]
    for s in reversed(range(net.config.levels - 1)):
        dec = net.seg[s]
        u = transposed_conv3d(h, dec.up)
        if net.config.boundary_branch:
            if boundary_override is None:
                p_b = slice_channels(boundary_probs[s], 1, 2)
            else:
                p_b = Tensor(np.full((u.shape[0], 1) + u.shape[2:], boundary_override,
                                     dtype=u.dtype))
            e = enhance(u, p_b)
        else:
            e = u
        if capture is not None:
            capture.setdefault("upsampled", {})[s] = u
            capture.setdefault("enhanced", {})[s] = e
        h = concat_channels(e, skips[s])
        h = _conv_block(h, dec.block1)
        h = _conv_block(h, dec.block2)
        if all_heads or s == 0:
            probs[s] = softmax_channels(conv3d(h, dec.head))
    return probs


def forward_train(net: BaNet, x: Tensor, boundary_override: Optional[float] = None,
                  capture: Optional[dict] = None) -> tuple[list[Tensor], list[Tensor]]:
    """Full forward pass: per-scale softmax outputs of both decoders,
    finest scale first.  boundary_probs is empty when the branch is off.

    boundary_override replaces the attention input with a constant (the
    boundary decoder itself still runs); capture, if given, records each
    level's pre-attention and post-attention features.
    """
    skips = _encode(net, x)
    boundary_probs = _decode_boundary(net, skips) if net.config.boundary_branch else []
    seg_probs = _decode_seg(net, skips, boundary_probs, True, boundary_override, capture)
    return seg_probs, boundary_probs


def forward_infer(net: BaNet, x: Tensor) -> Tensor:
    """Finest-scale segmentation probabilities (N, K, D, H, W).

    Runs the identical computation as forward_train up to the finest
    segmentation head and skips the coarser segmentation heads, so the
    result matches forward_train's finest output bitwise.
    """
    skips = _encode(net, x)
    boundary_probs = _decode_boundary(net, skips) if net.config.boundary_branch else []
    seg_probs = _decode_seg(net, skips, boundary_probs, False, None, None)
    return seg_probs[0]
