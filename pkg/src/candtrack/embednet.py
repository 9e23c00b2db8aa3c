"""Candidate embedding network.

Both frames' encoded candidates are processed jointly by a stack of attention
layers that alternate between self edges (within a frame) and cross edges
(between the frames). Cross layers share their weights across the two
directions. Every layer updates nodes residually through a two-layer MLP on
the concatenation of the node state and its attention message; a final linear
projection produces the matching features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import (
    AttentionParams,
    BatchNormParams,
    Tensor,
    add,
    batchnorm,
    concat,
    glorot,
    linear,
    multi_head_attention,
    relu,
)

DEFAULT_LAYER_TYPES = ("self", "cross", "self", "cross")


@dataclass
class GnnLayerParams:
    kind: str  # "self" | "cross"
    attention: AttentionParams
    update_w1: Tensor
    update_b1: Tensor
    update_norm: BatchNormParams
    update_w2: Tensor
    update_b2: Tensor


@dataclass
class EmbedParams:
    layers: list[GnnLayerParams]
    final_w: Tensor
    final_b: Tensor
    heads: int = 4

    @property
    def dim(self) -> int:
        return self.final_w.data.shape[0]

    @property
    def layer_types(self) -> tuple[str, ...]:
        return tuple(layer.kind for layer in self.layers)

    @classmethod
    def create(
        cls,
        dim: int,
        layer_types: tuple[str, ...] = DEFAULT_LAYER_TYPES,
        heads: int = 4,
        rng: np.random.Generator | None = None,
    ) -> "EmbedParams":
        if len(layer_types) % 2 != 0:
            raise ValueError("layer count must be even")
        if not layer_types or layer_types[0] != "self":
            raise ValueError("first layer must be self-type")
        if any(k not in ("self", "cross") for k in layer_types):
            raise ValueError(f"unknown layer type in {layer_types}")
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for kind in layer_types:
            layers.append(
                GnnLayerParams(
                    kind=kind,
                    attention=AttentionParams.create(dim, rng),
                    update_w1=Tensor(glorot(rng, 2 * dim, 2 * dim), requires_grad=True),
                    update_b1=Tensor(np.zeros(2 * dim), requires_grad=True),
                    update_norm=BatchNormParams.create(2 * dim),
                    update_w2=Tensor(glorot(rng, 2 * dim, dim), requires_grad=True),
                    update_b2=Tensor(np.zeros(dim), requires_grad=True),
                )
            )
        return cls(
            layers=layers,
            final_w=Tensor(glorot(rng, dim, dim), requires_grad=True),
            final_b=Tensor(np.zeros(dim), requires_grad=True),
            heads=heads,
        )


def _node_update(x: Tensor, message: Tensor, layer: GnnLayerParams, mode: str) -> Tensor:
    h = linear(concat([x, message], axis=1), layer.update_w1, layer.update_b1)
    h = batchnorm(h, layer.update_norm, mode)
    h = relu(h)
    h = linear(h, layer.update_w2, layer.update_b2)
    return add(x, h)


def embed_forward(
    h_prev: Tensor, h_curr: Tensor, params: EmbedParams, mode: str = "infer"
) -> tuple[Tensor, Tensor]:
    """Run the alternating self/cross stack on both frames' features."""
    if h_prev.data.shape[0] == 0 or h_curr.data.shape[0] == 0:
        raise ValueError("both frames need at least one candidate")
    hp, hc = h_prev, h_curr
    for layer in params.layers:
        if layer.kind == "self":
            mp = multi_head_attention(hp, hp, layer.attention, params.heads)
            mc = multi_head_attention(hc, hc, layer.attention, params.heads)
        else:
            mp = multi_head_attention(hp, hc, layer.attention, params.heads)
            mc = multi_head_attention(hc, hp, layer.attention, params.heads)
        hp = _node_update(hp, mp, layer, mode)
        hc = _node_update(hc, mc, layer, mode)
    hp = linear(hp, params.final_w, params.final_b)
    hc = linear(hc, params.final_w, params.final_b)
    return hp, hc


def embed_pair(prev, curr, params: EmbedParams, mode: str = "infer"):
    """Inference wrapper over lists of EncodedCandidate; returns numpy arrays."""
    if not prev or not curr:
        raise ValueError("both frames need at least one candidate")
    hp = Tensor(np.stack([e.z for e in prev]))
    hc = Tensor(np.stack([e.z for e in curr]))
    out_p, out_c = embed_forward(hp, hc, params, mode=mode)
    return out_p.data, out_c.data
