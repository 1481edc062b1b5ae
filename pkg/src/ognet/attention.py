"""Channel attention, output-guided spatial attention, and their ablation variants.

The output-guided module gates a decoder feature map in two stages: per-channel
weights from pooled global statistics, then a per-pixel map whose inputs include
the deeper layers' side-output logits.  A learned selector vector V weights each
deeper logit map before the 7x7 spatial convolution, so the module can lean on
whichever depth judged the current image best.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import Conv2dParams, LinearParams
from .tensor import (
    Tensor, bilinear_resize, broadcast_scale, channel_stats, concat_channels,
    global_avg_pool, global_max_pool, linear, relu, reshape, sigmoid,
)

SPATIAL_KERNEL = 7


def _hidden_width(channels: int) -> int:
    return max(1, channels // 4)


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP applied to both the max- and avg-pooled descriptors."""

    l1: LinearParams  # C -> C/4
    l2: LinearParams  # C/4 -> C

    @staticmethod
    def create(rng, channels: int, dtype) -> "ChannelAttentionParams":
        hidden = _hidden_width(channels)
        return ChannelAttentionParams(LinearParams.create(rng, channels, hidden, dtype),
                                      LinearParams.create(rng, hidden, channels, dtype))

    @property
    def channels(self) -> int:
        return self.l1.weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.l1.weight.shape[1]

    def named_params(self, prefix: str):
        yield from self.l1.named_params(f"{prefix}.l1")
        yield from self.l2.named_params(f"{prefix}.l2")


def channel_attention(f: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0,1): sigmoid of summed MLP(max-pool) and MLP(avg-pool)."""
    n, c = f.shape[0], f.shape[1]
    if params.channels != c:
        raise ValueError(f"channel attention built for C={params.channels}, input has C={c}")

    def path(pooled):
        v = reshape(pooled, (n, c))
        return linear(relu(linear(v, params.l1.weight, params.l1.bias)),
                      params.l2.weight, params.l2.bias)

    w = sigmoid(path(global_max_pool(f)) + path(global_avg_pool(f)))
    return reshape(w, (n, c, 1, 1))


@dataclass
class SpatialAttentionParams:
    """7x7 gate over pooled planes plus selector-weighted deeper output maps."""

    conv: Conv2dParams                 # (2 + n_deeper) planes -> 1 plane
    sel_l1: LinearParams | None        # pooled concat -> hidden
    sel_l2: LinearParams | None        # hidden -> n_deeper
    n_deeper: int

    @staticmethod
    def create(rng, channels: int, deeper_channels: Sequence[int], dtype,
               kernel: int = SPATIAL_KERNEL) -> "SpatialAttentionParams":
        n_deeper = len(deeper_channels)
        conv = Conv2dParams.create(rng, 2 + n_deeper, 1, kernel, dtype)
        sel_l1 = sel_l2 = None
        if n_deeper:
            sel_in = channels + int(sum(deeper_channels))
            sel_l1 = LinearParams.create(rng, sel_in, _hidden_width(sel_in), dtype)
            sel_l2 = LinearParams.create(rng, _hidden_width(sel_in), n_deeper, dtype)
        return SpatialAttentionParams(conv, sel_l1, sel_l2, n_deeper)

    def named_params(self, prefix: str):
        yield from self.conv.named_params(f"{prefix}.conv")
        if self.sel_l1 is not None:
            yield from self.sel_l1.named_params(f"{prefix}.sel_l1")
            yield from self.sel_l2.named_params(f"{prefix}.sel_l2")


def selector_weights(f: Tensor, deeper_ogam_maps: Sequence[Tensor],
                     params: SpatialAttentionParams) -> Tensor | None:
    """Gate vector V in (0,1)^n_deeper from the pooled concat of F and deeper maps."""
    if params.n_deeper == 0:
        return None
    pooled = global_avg_pool(concat_channels([f, *deeper_ogam_maps]))
    v = reshape(pooled, (f.shape[0], pooled.shape[1]))
    v = linear(relu(linear(v, params.sel_l1.weight, params.sel_l1.bias)),
               params.sel_l2.weight, params.sel_l2.bias)
    return sigmoid(v)


def spatial_input_planes(f: Tensor, deeper_outputs: Sequence[Tensor],
                         v: Tensor | None) -> Tensor:
    """Stack [channel-max(F), channel-mean(F), V_1*O_1, ...] at F's resolution."""
    pooled = channel_stats(f)
    if not deeper_outputs:
        return pooled
    guidance = concat_channels(list(deeper_outputs))
    if v is not None:
        guidance = broadcast_scale(guidance, v, "scalar")
    return concat_channels([pooled, guidance])


def spatial_attention(f: Tensor, deeper_outputs: Sequence[Tensor],
                      deeper_ogam_maps: Sequence[Tensor],
                      params: SpatialAttentionParams) -> Tensor:
    """Per-pixel gate in (0,1); deeper maps must already match F's spatial size."""
    if len(deeper_outputs) != params.n_deeper:
        raise ValueError(f"expected {params.n_deeper} deeper outputs, got {len(deeper_outputs)}")
    if len(deeper_ogam_maps) != params.n_deeper:
        raise ValueError(f"expected {params.n_deeper} deeper maps, got {len(deeper_ogam_maps)}")
    h, w = f.shape[2], f.shape[3]
    for t in list(deeper_outputs) + list(deeper_ogam_maps):
        if t.shape[2] != h or t.shape[3] != w:
            raise ValueError(f"deeper map at {t.shape[2]}x{t.shape[3]} not resized to {h}x{w}")
    v = selector_weights(f, deeper_ogam_maps, params)
    planes = spatial_input_planes(f, deeper_outputs, v)
    return sigmoid(params.conv.apply(planes))


@dataclass
class OgamInputs:
    """Decoder feature map plus the deeper layers' logits and attention outputs.

    `gather` resizes every deeper map to the feature map's spatial size, which
    is the only form the attention ops accept.
    """

    f: Tensor
    deeper_outputs: tuple
    deeper_ogam_maps: tuple

    @staticmethod
    def gather(f: Tensor, deeper_outputs: Sequence[Tensor],
               deeper_ogam_maps: Sequence[Tensor]) -> "OgamInputs":
        h, w = f.shape[2], f.shape[3]

        def fit(t):
            return t if (t.shape[2], t.shape[3]) == (h, w) else bilinear_resize(t, h, w)

        return OgamInputs(f, tuple(fit(t) for t in deeper_outputs),
                          tuple(fit(t) for t in deeper_ogam_maps))


@dataclass
class OgamParams:
    channel: ChannelAttentionParams
    spatial: SpatialAttentionParams

    @staticmethod
    def create(rng, channels: int, deeper_channels: Sequence[int], dtype) -> "OgamParams":
        return OgamParams(ChannelAttentionParams.create(rng, channels, dtype),
                          SpatialAttentionParams.create(rng, channels, deeper_channels, dtype))

    def named_params(self, prefix: str):
        yield from self.channel.named_params(f"{prefix}.ca")
        yield from self.spatial.named_params(f"{prefix}.sa")


def ogam_gates(inputs: OgamInputs, params: OgamParams) -> tuple[Tensor, Tensor]:
    """Both gate maps (W_c, W_s) without applying them."""
    w_c = channel_attention(inputs.f, params.channel)
    w_s = spatial_attention(inputs.f, inputs.deeper_outputs, inputs.deeper_ogam_maps,
                            params.spatial)
    return w_c, w_s


def ogam_forward(inputs: OgamInputs, params: OgamParams) -> Tensor:
    """Channel gate first, spatial gate second: W_s * (W_c * F)."""
    w_c, w_s = ogam_gates(inputs, params)
    return broadcast_scale(broadcast_scale(inputs.f, w_c, "channel"), w_s, "spatial")


# ---------------------------------------------------------------------------
# variants for the ablation axis
# ---------------------------------------------------------------------------

ATTENTION_KINDS = ("none", "se", "cbam", "ogam")


class AttentionModule:
    kind = "none"

    def forward(self, f: Tensor, deeper_outputs: Sequence[Tensor] = (),
                deeper_ogam_maps: Sequence[Tensor] = ()) -> Tensor:
        raise NotImplementedError

    def named_params(self, prefix: str):
        return iter(())

    def _reject_deeper(self, deeper_outputs, deeper_ogam_maps):
        if deeper_outputs or deeper_ogam_maps:
            raise ValueError(f"attention kind {self.kind!r} takes no deeper outputs")


class NoAttention(AttentionModule):
    kind = "none"

    def forward(self, f, deeper_outputs=(), deeper_ogam_maps=()):
        self._reject_deeper(deeper_outputs, deeper_ogam_maps)
        return f


class SqueezeExcitation(AttentionModule):
    """Channel attention only."""

    kind = "se"

    def __init__(self, rng, channels: int, dtype):
        self.channel = ChannelAttentionParams.create(rng, channels, dtype)

    def forward(self, f, deeper_outputs=(), deeper_ogam_maps=()):
        self._reject_deeper(deeper_outputs, deeper_ogam_maps)
        return broadcast_scale(f, channel_attention(f, self.channel), "channel")

    def named_params(self, prefix: str):
        yield from self.channel.named_params(f"{prefix}.ca")


class CbamAttention(AttentionModule):
    """Channel attention then self-input spatial attention (no guidance)."""

    kind = "cbam"

    def __init__(self, rng, channels: int, dtype):
        self.params = OgamParams.create(rng, channels, (), dtype)

    def forward(self, f, deeper_outputs=(), deeper_ogam_maps=()):
        self._reject_deeper(deeper_outputs, deeper_ogam_maps)
        return ogam_forward(OgamInputs(f, (), ()), self.params)

    def named_params(self, prefix: str):
        yield from self.params.named_params(prefix)


class OutputGuidedAttention(AttentionModule):
    kind = "ogam"

    def __init__(self, rng, channels: int, deeper_channels: Sequence[int], dtype):
        self.params = OgamParams.create(rng, channels, deeper_channels, dtype)

    def forward(self, f, deeper_outputs=(), deeper_ogam_maps=()):
        inputs = OgamInputs.gather(f, deeper_outputs, deeper_ogam_maps)
        return ogam_forward(inputs, self.params)

    def named_params(self, prefix: str):
        yield from self.params.named_params(prefix)


def build_attention(kind: str, rng, channels: int, deeper_channels: Sequence[int],
                    dtype=np.float64) -> AttentionModule:
    """Factory over the ablation axis: none | se | cbam | ogam."""
    if kind == "none":
        return NoAttention()
    if kind == "se":
        return SqueezeExcitation(rng, channels, dtype)
    if kind == "cbam":
        return CbamAttention(rng, channels, dtype)
    if kind == "ogam":
        return OutputGuidedAttention(rng, channels, deeper_channels, dtype)
    raise ValueError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")
