"""Similarity, dustbin-augmented Sinkhorn normalization, and match extraction.

The similarity between two frames' embedded candidates is their scalar
product. The matrix is augmented with one dustbin row and column (a single
learnable score, corner included) and normalized in the log domain against
the marginals [1,...,1,N] over rows and [1,...,1,N'] over columns, so every
real candidate holds unit mass and the dustbins absorb the unmatched rest.
Log-sum-exp keeps the iterations stable for large score gaps, and the whole
computation stays on the tape, so losses differentiate through all iterations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffmath import (
    Tensor,
    add,
    alias,
    broadcast_to,
    concat,
    exp,
    logsumexp,
    matmul,
    sub,
    transpose,
)

DEFAULT_ITERATIONS = 10
DEFAULT_DUSTBIN = 1.0


@dataclass(frozen=True)
class SimilarityMatrix:
    """Raw candidate-to-candidate scores plus the learnable dustbin score."""

    values: np.ndarray
    dustbin_score: float = DEFAULT_DUSTBIN

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("similarity values must be 2-D")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("similarity values must be finite")
        if not math.isfinite(self.dustbin_score):
            raise ValueError("dustbin score must be finite")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class AssignmentMatrix:
    """Soft assignment probabilities, shape (N'+1) x (N+1) with dustbins."""

    probs: np.ndarray
    iterations_run: int

    @property
    def n_prev(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def n_curr(self) -> int:
        return self.probs.shape[1] - 1


@dataclass(frozen=True)
class MatchSet:
    """Discrete mutual matches; None marks a dustbin assignment.

    prev[i] = (index into current frame or None, probability)
    curr[j] = (index into previous frame or None, probability)
    """

    prev: tuple[tuple[int | None, float], ...]
    curr: tuple[tuple[int | None, float], ...]

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(i, j, p) for i, (j, p) in enumerate(self.prev) if j is not None]

    @classmethod
    def empty(cls, n_prev: int, n_curr: int) -> "MatchSet":
        return cls(
            prev=tuple((None, 0.0) for _ in range(n_prev)),
            curr=tuple((None, 0.0) for _ in range(n_curr)),
        )


def similarity_forward(h_prev: Tensor, h_curr: Tensor) -> Tensor:
    """S[i, j] = <h'_i, h_j> on the tape."""
    return matmul(h_prev, transpose(h_curr))


def similarity(
    h_prev: np.ndarray, h_curr: np.ndarray, dustbin_score: float = DEFAULT_DUSTBIN
) -> SimilarityMatrix:
    hp, hc = np.asarray(h_prev), np.asarray(h_curr)
    if hp.ndim != 2 or hc.ndim != 2 or hp.shape[1] != hc.shape[1]:
        raise ValueError(f"shape mismatch: {hp.shape} vs {hc.shape}")
    return SimilarityMatrix(values=hp @ hc.T, dustbin_score=dustbin_score)


def sinkhorn_forward(scores: Tensor, dustbin: Tensor, iterations: int) -> Tensor:
    """Dustbin-augment scores and run log-domain Sinkhorn; returns probabilities.

    Rows are driven to marginals [1,...,1,N], columns to [1,...,1,N']. Each
    iteration is one row update followed by one column update; the result is
    exponentiated at the end, so gradients flow through every iteration.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n_prev, n_curr = scores.data.shape
    dust = alias(dustbin, scores.tape)  # leaf enters via parameter-only ops
    top = concat([scores, broadcast_to(dust, (n_prev, 1))], axis=1)
    bottom = concat([broadcast_to(dust, (1, n_curr)), broadcast_to(dust, (1, 1))], axis=1)
    z = concat([top, bottom], axis=0)

    log_mu = Tensor(
        np.concatenate([np.zeros(n_prev), [math.log(max(n_curr, 1))]]).reshape(-1, 1)
    )
    log_nu = Tensor(
        np.concatenate([np.zeros(n_curr), [math.log(max(n_prev, 1))]]).reshape(1, -1)
    )

    u = Tensor(np.zeros((n_prev + 1, 1)))
    v = Tensor(np.zeros((1, n_curr + 1)))
    for _ in range(iterations):
        u = sub(log_mu, logsumexp(add(z, v), axis=1, keepdims=True))
        v = sub(log_nu, logsumexp(add(z, u), axis=0, keepdims=True))
    return exp(add(add(z, u), v))


def sinkhorn(sim: SimilarityMatrix, iterations: int = DEFAULT_ITERATIONS) -> AssignmentMatrix:
    scores = Tensor(sim.values)
    dustbin = Tensor(np.array([[sim.dustbin_score]]))
    probs = sinkhorn_forward(scores, dustbin, iterations)
    return AssignmentMatrix(probs=probs.data, iterations_run=iterations)


def extract_matches(assignment: AssignmentMatrix) -> MatchSet:
    """Mutual-argmax discretization over the full augmented matrix.

    Candidate i matches j iff j is the argmax of row i and i is the argmax of
    column j (argmax taken over real indices and the dustbin alike). Anything
    else falls to the dustbin with its dustbin probability.
    """
    a = assignment.probs
    n_prev, n_curr = assignment.n_prev, assignment.n_curr
    row_best = a.argmax(axis=1)
    col_best = a.argmax(axis=0)

    prev = []
    for i in range(n_prev):
        j = int(row_best[i])
        if j < n_curr and int(col_best[j]) == i:
            prev.append((j, float(a[i, j])))
        else:
            prev.append((None, float(a[i, n_curr])))
    curr = []
    for j in range(n_curr):
        i = int(col_best[j])
        if i < n_prev and int(row_best[i]) == j:
            curr.append((i, float(a[i, j])))
        else:
            curr.append((None, float(a[n_prev, j])))
    return MatchSet(prev=tuple(prev), curr=tuple(curr))


def marginal_residuals(assignment: AssignmentMatrix) -> dict[str, float]:
    """Worst-case deviations from the one-to-one and dustbin constraints."""
    a = assignment.probs
    n_prev, n_curr = assignment.n_prev, assignment.n_curr
    real = a[:n_prev, :n_curr]
    mass = float(real.sum())
    row_err = (
        float(np.abs(a[:n_prev].sum(axis=1) - 1.0).max()) if n_prev else 0.0
    )
    col_err = (
        float(np.abs(a[:, :n_curr].sum(axis=0) - 1.0).max()) if n_curr else 0.0
    )
    bin_row_err = abs(float(a[n_prev, :n_curr].sum()) - (n_curr - mass))
    bin_col_err = abs(float(a[:n_prev, n_curr].sum()) - (n_prev - mass))
    return {
        "row": row_err,
        "col": col_err,
        "dustbin_row": bin_row_err,
        "dustbin_col": bin_col_err,
    }
