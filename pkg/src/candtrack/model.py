"""Model parameter bundle and its JSON weights format.

Collects the encoder, the embedding network, and the scalar dustbin score
under stable tensor names. The weights payload is strict: unknown or missing
tensor names and shape mismatches are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import Tensor
from .embednet import DEFAULT_LAYER_TYPES, EmbedParams
from .encoder import DEFAULT_PSI_HIDDEN, EncoderParams

WEIGHTS_FORMAT = 1


@dataclass
class ModelParams:
    encoder: EncoderParams
    embed: EmbedParams
    dustbin: Tensor

    @classmethod
    def create(
        cls,
        d_appearance: int,
        dim: int = 256,
        psi_hidden: tuple[int, ...] = DEFAULT_PSI_HIDDEN,
        layer_types: tuple[str, ...] = DEFAULT_LAYER_TYPES,
        heads: int = 4,
        seed: int = 0,
    ) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return cls(
            encoder=EncoderParams.create(d_appearance, dim, psi_hidden, rng),
            embed=EmbedParams.create(dim, layer_types, heads, rng),
            dustbin=Tensor(np.array([[1.0]]), requires_grad=True),
        )

    @property
    def dim(self) -> int:
        return self.encoder.dim

    @property
    def d_appearance(self) -> int:
        return self.encoder.d_appearance

    def named_parameters(self) -> dict[str, Tensor]:
        """Learnable tensors in a stable order."""
        named: dict[str, Tensor] = {}
        enc = self.encoder
        for i, (w, b) in enumerate(zip(enc.psi_weights, enc.psi_biases)):
            named[f"encoder.psi.{i}.weight"] = w
            named[f"encoder.psi.{i}.bias"] = b
        for i, bn in enumerate(enc.psi_norms):
            named[f"encoder.psi.{i}.bn.gamma"] = bn.gamma
            named[f"encoder.psi.{i}.bn.beta"] = bn.beta
        named["encoder.appearance.weight"] = enc.appearance_w
        named["encoder.appearance.bias"] = enc.appearance_b
        for i, layer in enumerate(self.embed.layers):
            attn = layer.attention
            base = f"embed.layers.{i}"
            for key in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
                named[f"{base}.attn.{key}"] = getattr(attn, key)
            named[f"{base}.update.w1"] = layer.update_w1
            named[f"{base}.update.b1"] = layer.update_b1
            named[f"{base}.update.bn.gamma"] = layer.update_norm.gamma
            named[f"{base}.update.bn.beta"] = layer.update_norm.beta
            named[f"{base}.update.w2"] = layer.update_w2
            named[f"{base}.update.b2"] = layer.update_b2
        named["embed.final.weight"] = self.embed.final_w
        named["embed.final.bias"] = self.embed.final_b
        named["matcher.dustbin"] = self.dustbin
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        """Batch-norm running statistics (not learnable, saved with weights)."""
        buffers: dict[str, np.ndarray] = {}
        for i, bn in enumerate(self.encoder.psi_norms):
            buffers[f"encoder.psi.{i}.bn.running_mean"] = bn.state.running_mean
            buffers[f"encoder.psi.{i}.bn.running_var"] = bn.state.running_var
        for i, layer in enumerate(self.embed.layers):
            base = f"embed.layers.{i}.update.bn"
            buffers[f"{base}.running_mean"] = layer.update_norm.state.running_mean
            buffers[f"{base}.running_var"] = layer.update_norm.state.running_var
        return buffers

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        target = self.named_buffers()[name]
        if target.shape != value.shape:
            raise ValueError(f"buffer {name}: shape {value.shape} != {target.shape}")
        target[...] = value

    def to_payload(self) -> dict:
        tensors = {}
        for name, t in self.named_parameters().items():
            tensors[name] = {
                "shape": list(t.data.shape),
                "data": t.data.reshape(-1).tolist(),
            }
        for name, arr in self.named_buffers().items():
            tensors[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        return {
            "format": WEIGHTS_FORMAT,
            "dims": {
                "d_appearance": self.d_appearance,
                "d_model": self.dim,
                "psi_hidden": list(self.encoder.psi_hidden),
                "heads": self.embed.heads,
                "layers": list(self.embed.layer_types),
            },
            "tensors": tensors,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ModelParams":
        if payload.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"unsupported weights format: {payload.get('format')!r}")
        dims = payload.get("dims")
        if not isinstance(dims, dict):
            raise ValueError("weights payload missing dims")
        model = cls.create(
            d_appearance=int(dims["d_appearance"]),
            dim=int(dims["d_model"]),
            psi_hidden=tuple(int(h) for h in dims["psi_hidden"]),
            layer_types=tuple(dims["layers"]),
            heads=int(dims["heads"]),
            seed=0,
        )
        params = model.named_parameters()
        buffers = model.named_buffers()
        tensors = payload.get("tensors")
        if not isinstance(tensors, dict):
            raise ValueError("weights payload missing tensors")
        unknown = set(tensors) - set(params) - set(buffers)
        if unknown:
            raise ValueError(f"unknown tensor names: {sorted(unknown)}")
        missing = (set(params) | set(buffers)) - set(tensors)
        if missing:
            raise ValueError(f"missing tensor names: {sorted(missing)}")
        for name, entry in tensors.items():
            shape = tuple(entry["shape"])
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
            if name in params:
                if params[name].data.shape != shape:
                    raise ValueError(f"tensor {name}: unexpected shape {shape}")
                params[name].data = arr
            else:
                model.set_buffer(name, arr)
        return model
