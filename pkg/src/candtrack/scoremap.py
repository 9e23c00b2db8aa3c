"""Score maps and target-candidate extraction.

A score map is a dense grid of classifier responses in [0, 1]. Candidates are
the thresholded local maxima of that grid; training additionally pads each
frame's candidate list to a fixed size with low-score artificial peaks.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_TAU = 0.05
DEFAULT_NEIGHBORHOOD = 5
PAD_SCORE = 0.01


@dataclass(frozen=True)
class ScoreMap:
    """One frame's classifier response grid, clamped to [0, 1]."""

    values: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("score map must be a non-empty 2-D array")
        if np.isnan(arr).any() or np.isinf(arr).any():
            raise ValueError("score map contains non-finite values")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        arr = np.clip(arr, 0.0, 1.0)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Candidate:
    """A detected peak: score, integer cell location, appearance vector."""

    score: float
    location: tuple[int, int]
    appearance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    is_artificial: bool = False

    def with_appearance(self, vec: np.ndarray) -> "Candidate":
        return replace(self, appearance=np.asarray(vec, dtype=np.float64))


def _window_maxima(values: np.ndarray, half: int) -> np.ndarray:
    """Max over the (2*half+1)^2 neighborhood of each cell, clipped at borders."""
    h, w = values.shape
    size = 2 * half + 1
    padded = np.full((h + 2 * half, w + 2 * half), -np.inf)
    padded[half : half + h, half : half + w] = values
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size))
    return windows.max(axis=(2, 3))


def extract_candidates(
    smap: ScoreMap,
    tau: float = DEFAULT_TAU,
    neighborhood: int = DEFAULT_NEIGHBORHOOD,
) -> list[Candidate]:
    """Return all local maxima with score >= tau, sorted by descending score.

    A cell qualifies when its value equals the maximum of its neighborhood
    window (window clipped at the borders). On a flat plateau only the
    row-major first of the tied cells survives. Score ties in the output
    ordering are broken row-major.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if neighborhood < 3 or neighborhood % 2 == 0:
        raise ValueError("neighborhood must be an odd integer >= 3")
    half = neighborhood // 2
    values = smap.values
    winmax = _window_maxima(values, half)
    rows, cols = np.nonzero((values >= tau) & (values == winmax))

    kept: list[tuple[int, int]] = []
    for r, c in zip(rows.tolist(), cols.tolist()):  # row-major order
        v = values[r, c]
        duplicate = any(
            abs(r - kr) <= half and abs(c - kc) <= half and values[kr, kc] == v
            for kr, kc in kept
        )
        if not duplicate:
            kept.append((r, c))

    kept.sort(key=lambda rc: (-values[rc[0], rc[1]], rc[0], rc[1]))
    return [
        Candidate(score=float(values[r, c]), location=(r, c)) for r, c in kept
    ]


def pad_candidates(
    cands: list[Candidate],
    target_count: int,
    rng: np.random.Generator,
    smap: ScoreMap,
    d_a: int | None = None,
) -> tuple[list[Candidate], list[bool]]:
    """Pad (or trim) a candidate list to exactly target_count entries.

    Overfull lists keep the top scorers; short lists are extended with
    artificial candidates placed at uniformly random unoccupied cells with a
    small score and a random unit appearance vector. The returned mask is
    True for real candidates.
    """
    if target_count < 1:
        raise ValueError("target_count must be positive")
    if target_count > smap.height * smap.width:
        raise ValueError("target_count exceeds the number of cells")

    if len(cands) >= target_count:
        ordered = sorted(
            range(len(cands)),
            key=lambda i: (-cands[i].score, cands[i].location),
        )
        keep = sorted(ordered[:target_count])
        return [cands[i] for i in keep], [True] * target_count

    if d_a is None:
        if not cands:
            raise ValueError("d_a required when padding an empty candidate list")
        d_a = int(cands[0].appearance.shape[0])

    occupied = {c.location for c in cands}
    free = [
        (r, c)
        for r in range(smap.height)
        for c in range(smap.width)
        if (r, c) not in occupied
    ]
    n_pad = target_count - len(cands)
    picks = rng.choice(len(free), size=n_pad, replace=False)
    padded = list(cands)
    for idx in picks.tolist():
        vec = rng.normal(size=d_a)
        norm = np.linalg.norm(vec)
        vec = vec / norm if norm > 0 else vec
        padded.append(
            Candidate(
                score=PAD_SCORE,
                location=free[idx],
                appearance=vec,
                is_artificial=True,
            )
        )
    mask = [True] * len(cands) + [False] * n_pad
    return padded, mask
