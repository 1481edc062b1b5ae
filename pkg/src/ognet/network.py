"""Encoder backbone, decoder layers with residual skip, and the multi-output forward.

The encoder is a stack of conv stages, each followed by a 2x2 max pool; skip
features are taken before each pool, and the map after the final pool seeds the
decoder.  Decoder layer m fuses the upsampled deeper feature with encoder stage
m, applies the configured attention module, and emits a one-channel logit map
through its head.  Layer 1 (highest resolution) is the model's prediction; no
fusion layer exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import ATTENTION_KINDS, AttentionModule, build_attention
from .layers import Conv2dParams, ConvBnRelu
from .tensor import (
    ShapeError, Tensor, bilinear_resize, concat_channels, conv2d, max_pool2d,
    sigmoid,
)

CONV_E_SIZES = (1, 3, 5, 7)


@dataclass(frozen=True)
class DecoderLayerSpec:
    """Output channel counts of the four convolutions in one decoder layer."""

    conv_e: int
    conv_d: int
    conv_1: int
    conv_2: int

    def as_tuple(self):
        return (self.conv_e, self.conv_d, self.conv_1, self.conv_2)


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of the backbone and the decoder rows."""

    stages: tuple        # ((channels, n_convs), ...) shallow to deep
    decoder: tuple       # (DecoderLayerSpec, ...) row 1 = shallowest layer
    attention: str = "ogam"
    residual: bool = True
    conv_e_size: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stages) != len(self.decoder):
            raise ValueError("stage count and decoder row count must match")
        if not self.stages:
            raise ValueError("at least one stage is required")
        for ch, n in self.stages:
            if ch < 1 or n < 1:
                raise ValueError(f"invalid stage ({ch}, {n})")
        for row in self.decoder:
            if min(row.as_tuple()) < 1:
                raise ValueError(f"non-positive decoder channels {row}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.conv_e_size not in CONV_E_SIZES:
            raise ValueError(f"conv_e_size must be one of {CONV_E_SIZES}")

    @property
    def m(self) -> int:
        return len(self.stages)

    @property
    def stride_product(self) -> int:
        """Total downsampling to the map that seeds the decoder (one pool per stage)."""
        return 2 ** self.m

    def decoder_input_channels(self, layer: int) -> int:
        """Channels feeding decoder layer `layer` (1-based): deeper attention
        output for inner layers, the post-pool encoder map for the deepest."""
        if layer == self.m:
            return self.stages[-1][0]
        return self.decoder[layer].conv_2  # row of layer+1

    def deeper_channels(self, layer: int) -> tuple:
        return tuple(self.decoder[i].conv_2 for i in range(layer, self.m))

    @staticmethod
    def tiny(attention: str = "ogam", residual: bool = True,
             conv_e_size: int = 3) -> "NetworkConfig":
        rows = [32, 32, 16, 8, 8]
        return NetworkConfig(
            stages=((8, 1), (16, 1), (32, 1), (32, 1), (32, 1)),
            decoder=tuple(DecoderLayerSpec(t, t, 2 * t, 2 * t) for t in rows),
            attention=attention, residual=residual, conv_e_size=conv_e_size)

    @staticmethod
    def vgg16_shape(attention: str = "ogam", residual: bool = True,
                    conv_e_size: int = 3) -> "NetworkConfig":
        rows = [128, 128, 64, 32, 32]
        return NetworkConfig(
            stages=((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)),
            decoder=tuple(DecoderLayerSpec(t, t, 2 * t, 2 * t) for t in rows),
            attention=attention, residual=residual, conv_e_size=conv_e_size)

    # -- human-readable key-value form --------------------------------------

    def to_kv(self) -> str:
        stages = ",".join(f"{ch}x{n}" for ch, n in self.stages)
        decoder = ",".join(":".join(str(c) for c in row.as_tuple()) for row in self.decoder)
        lines = [
            f"stages = {stages}",
            f"decoder = {decoder}",
            f"attention = {self.attention}",
            f"residual = {'true' if self.residual else 'false'}",
            f"conv_e_size = {self.conv_e_size}",
            f"in_channels = {self.in_channels}",
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_kv(kv: dict) -> "NetworkConfig":
        base = NetworkConfig.tiny()
        preset = kv.get("preset")
        if preset is not None:
            if preset == "tiny":
                base = NetworkConfig.tiny()
            elif preset == "vgg16-shape":
                base = NetworkConfig.vgg16_shape()
            else:
                raise ValueError(f"unknown preset {preset!r}")
        stages = base.stages
        if "stages" in kv:
            stages = tuple(
                (int(part.split("x")[0]), int(part.split("x")[1]))
                for part in kv["stages"].replace(" ", "").split(",") if part)
        decoder = base.decoder
        if "decoder" in kv:
            decoder = tuple(
                DecoderLayerSpec(*(int(c) for c in part.split(":")))
                for part in kv["decoder"].replace(" ", "").split(",") if part)
        return NetworkConfig(
            stages=stages,
            decoder=decoder,
            attention=kv.get("attention", base.attention),
            residual=_parse_bool(kv.get("residual", base.residual)),
            conv_e_size=int(kv.get("conv_e_size", base.conv_e_size)),
            in_channels=int(kv.get("in_channels", base.in_channels)),
        )


def parse_kv(text: str) -> dict:
    """Parse `key = value` lines; blank lines and # comments are ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass
class SaliencyOutputs:
    """Per-layer logit maps and their sigmoid probabilities, index 0 = layer 1."""

    logits: list
    probs: list

    @property
    def final(self) -> Tensor:
        """The exported saliency map: layer 1, the highest resolution."""
        return self.probs[0]


class DecoderLayer:
    def __init__(self, rng, config: NetworkConfig, layer: int, dtype):
        spec = config.decoder[layer - 1]
        enc_ch = config.stages[layer - 1][0]
        in_ch = config.decoder_input_channels(layer)
        self.conv_e = ConvBnRelu(rng, enc_ch, spec.conv_e, config.conv_e_size, dtype)
        self.conv_d = ConvBnRelu(rng, in_ch, spec.conv_d, 3, dtype)
        self.conv_1 = ConvBnRelu(rng, spec.conv_e + spec.conv_d, spec.conv_1, 3, dtype)
        self.conv_2 = ConvBnRelu(rng, spec.conv_1, spec.conv_2, 3, dtype)
        self.residual = (Conv2dParams.create(rng, in_ch, spec.conv_2, 1, dtype)
                         if config.residual else None)
        self.head = Conv2dParams.create(rng, spec.conv_2, 1, 3, dtype)
        self.attention = build_attention(config.attention, rng, spec.conv_2,
                                         config.deeper_channels(layer), dtype)

    def named_params(self, prefix: str):
        yield from self.conv_e.named_params(f"{prefix}.conv_e")
        yield from self.conv_d.named_params(f"{prefix}.conv_d")
        yield from self.conv_1.named_params(f"{prefix}.conv_1")
        yield from self.conv_2.named_params(f"{prefix}.conv_2")
        if self.residual is not None:
            yield from self.residual.named_params(f"{prefix}.res")
        yield from self.head.named_params(f"{prefix}.head")
        yield from self.attention.named_params(f"{prefix}.att")

    def named_buffers(self, prefix: str):
        yield from self.conv_e.named_buffers(f"{prefix}.conv_e")
        yield from self.conv_d.named_buffers(f"{prefix}.conv_d")
        yield from self.conv_1.named_buffers(f"{prefix}.conv_1")
        yield from self.conv_2.named_buffers(f"{prefix}.conv_2")


class Model:
    """Built network: encoder stages plus decoder layers, with named parameters."""

    def __init__(self, config: NetworkConfig, seed: int, dtype):
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.seed)
        self.encoder: list[list[ConvBnRelu]] = []
        in_ch = config.in_channels
        for ch, n_convs in config.stages:
            stage = []
            for _ in range(n_convs):
                stage.append(ConvBnRelu(rng, in_ch, ch, 3, self.dtype))
                in_ch = ch
            self.encoder.append(stage)
        self.layers = [DecoderLayer(rng, config, m, self.dtype)
                       for m in range(1, config.m + 1)]

    def named_params(self):
        for i, stage in enumerate(self.encoder, start=1):
            for j, block in enumerate(stage, start=1):
                yield from block.named_params(f"encoder.s{i}.c{j}")
        for m, layer in enumerate(self.layers, start=1):
            yield from layer.named_params(f"decoder.l{m}")

    def named_buffers(self):
        for i, stage in enumerate(self.encoder, start=1):
            for j, block in enumerate(stage, start=1):
                yield from block.named_buffers(f"encoder.s{i}.c{j}")
        for m, layer in enumerate(self.layers, start=1):
            yield from layer.named_buffers(f"decoder.l{m}")

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, image: Tensor, training: bool = False) -> SaliencyOutputs:
        return ognet_forward(self, image, training=training)


def build_network(config: NetworkConfig, seed: int, dtype=np.float64) -> Model:
    """Deterministic build: He fan-in conv/linear weights, zero biases, BN gamma=1."""
    return Model(config, seed, dtype)


def decoder_layer_forward(enc_feat: Tensor, dec_feat: Tensor, layer: DecoderLayer,
                          training: bool, residual_enabled: bool) -> Tensor:
    """One decoder step: upsample x2, two parallel convs, concat, two fusing convs,
    plus a linear 1x1 projection of the upsampled input when residual is enabled."""
    up = bilinear_resize(dec_feat, 2 * dec_feat.shape[2], 2 * dec_feat.shape[3])
    if up.shape[2:] != enc_feat.shape[2:]:
        raise ShapeError(
            f"encoder feature {enc_feat.shape[2:]} is not 2x decoder feature "
            f"{dec_feat.shape[2:]}")
    e = layer.conv_e.forward(enc_feat, training)
    d = layer.conv_d.forward(up, training)
    fused = layer.conv_2.forward(
        layer.conv_1.forward(concat_channels([e, d]), training), training)
    if residual_enabled:
        if layer.residual is None:
            raise ValueError("residual requested but the layer has no projection")
        fused = fused + conv2d(up, layer.residual.weight, layer.residual.bias)
    return fused


def output_head(dec_out: Tensor, head: Conv2dParams) -> tuple[Tensor, Tensor]:
    """3x3 conv to one channel; returns (logits, sigmoid probabilities)."""
    logits = head.apply(dec_out)
    return logits, sigmoid(logits)


def ognet_forward(model: Model, image: Tensor, training: bool = False) -> SaliencyOutputs:
    """Full multi-output pass; decoder runs deep-to-shallow so each layer's
    attention sees every deeper layer's logits and attention maps."""
    config = model.config
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise ShapeError(f"expected N x {config.in_channels} x H x W input, got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    sp = config.stride_product
    if h % sp or w % sp:
        raise ShapeError(f"input {h}x{w} not divisible by backbone stride {sp}")

    x = image
    skips = []
    for stage in model.encoder:
        for block in stage:
            x = block.forward(x, training)
        skips.append(x)
        x = max_pool2d(x, 2)
    bottom = x

    m_total = config.m
    logits: dict[int, Tensor] = {}
    probs: dict[int, Tensor] = {}
    ogs: dict[int, Tensor] = {}
    dec_in = bottom
    for m in range(m_total, 0, -1):
        layer = model.layers[m - 1]
        feat = decoder_layer_forward(skips[m - 1], dec_in, layer, training, config.residual)
        deeper_logits = [logits[i] for i in range(m + 1, m_total + 1)]
        deeper_ogs = [ogs[i] for i in range(m + 1, m_total + 1)]
        if config.attention == "ogam":
            og = layer.attention.forward(feat, deeper_logits, deeper_ogs)
        else:
            og = layer.attention.forward(feat)
        logits[m], probs[m] = output_head(og, layer.head)
        ogs[m] = og
        dec_in = og

    return SaliencyOutputs([logits[m] for m in range(1, m_total + 1)],
                           [probs[m] for m in range(1, m_total + 1)])
