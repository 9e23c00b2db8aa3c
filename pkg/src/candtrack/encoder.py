"""Candidate feature encoding.

Each candidate tuple (score, cell, appearance vector) becomes a single fused
vector: a learned linear projection of the appearance plus a small MLP applied
to (score, row/H, col/W). Coordinates are normalized by the map size before
entering the MLP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffmath import (
    BatchNormParams,
    Tape,
    Tensor,
    add,
    batchnorm,
    glorot,
    linear,
    relu,
)
from .scoremap import Candidate

DEFAULT_PSI_HIDDEN = (32, 64, 128)


@dataclass
class EncoderParams:
    """Weights for the score/position MLP and the appearance projection."""

    psi_weights: list[Tensor]
    psi_biases: list[Tensor]
    psi_norms: list[BatchNormParams]
    appearance_w: Tensor
    appearance_b: Tensor

    @property
    def dim(self) -> int:
        return self.psi_weights[-1].data.shape[1]

    @property
    def d_appearance(self) -> int:
        return self.appearance_w.data.shape[0]

    @property
    def psi_hidden(self) -> tuple[int, ...]:
        return tuple(w.data.shape[1] for w in self.psi_weights[:-1])

    @classmethod
    def create(
        cls,
        d_appearance: int,
        dim: int = 256,
        psi_hidden: tuple[int, ...] = DEFAULT_PSI_HIDDEN,
        rng: np.random.Generator | None = None,
    ) -> "EncoderParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [3, *psi_hidden, dim]
        weights, biases, norms = [], [], []
        for i in range(len(sizes) - 1):
            weights.append(Tensor(glorot(rng, sizes[i], sizes[i + 1]), requires_grad=True))
            biases.append(Tensor(np.zeros(sizes[i + 1]), requires_grad=True))
            if i < len(sizes) - 2:
                norms.append(BatchNormParams.create(sizes[i + 1]))
        return cls(
            psi_weights=weights,
            psi_biases=biases,
            psi_norms=norms,
            appearance_w=Tensor(glorot(rng, d_appearance, dim), requires_grad=True),
            appearance_b=Tensor(np.zeros(dim), requires_grad=True),
        )


@dataclass(frozen=True)
class EncodedCandidate:
    z: np.ndarray
    source: Candidate


def _candidate_arrays(
    cands: list[Candidate], map_dims: tuple[int, int], d_appearance: int
) -> tuple[np.ndarray, np.ndarray]:
    h, w = map_dims
    psi_in = np.empty((len(cands), 3))
    app = np.empty((len(cands), d_appearance))
    for i, c in enumerate(cands):
        r, col = c.location
        if not (0 <= r < h and 0 <= col < w):
            raise ValueError(f"candidate location {c.location} outside map {map_dims}")
        if c.appearance.shape != (d_appearance,):
            raise ValueError(
                f"appearance dim {c.appearance.shape} != ({d_appearance},)"
            )
        psi_in[i] = (c.score, r / h, col / w)
        app[i] = c.appearance
    return psi_in, app


def encode_forward(
    cands: list[Candidate],
    map_dims: tuple[int, int],
    params: EncoderParams,
    mode: str = "infer",
    tape: Tape | None = None,
) -> Tensor:
    """Differentiable path: candidate list -> [n, D] fused feature matrix."""
    if not cands:
        raise ValueError("cannot encode an empty candidate list")
    psi_in, app = _candidate_arrays(cands, map_dims, params.d_appearance)
    x = Tensor(psi_in, tape=tape)
    a = Tensor(app, tape=tape)

    h = x
    last = len(params.psi_weights) - 1
    for i, (w, b) in enumerate(zip(params.psi_weights, params.psi_biases)):
        h = linear(h, w, b)
        if i < last:
            h = batchnorm(h, params.psi_norms[i], mode)
            h = relu(h)
    return add(linear(a, params.appearance_w, params.appearance_b), h)


def encode_candidates(
    cands: list[Candidate],
    map_dims: tuple[int, int],
    params: EncoderParams,
    mode: str = "infer",
) -> list[EncodedCandidate]:
    z = encode_forward(cands, map_dims, params, mode=mode)
    return [EncodedCandidate(z=z.data[i].copy(), source=c) for i, c in enumerate(cands)]
