"""Association-network training.

Losses are negative log-likelihoods of assignment entries, summed over the
supervised pair (real data) or the full simulated correspondence set
(synthetic data). Synthetic pairs duplicate one frame's candidates and
augment the copy; data mining sorts tracker-log frames into categories and
the sampler draws real and synthetic sub-sequences equally likely, with
configurable per-category ratios. Optimization is plain Adam over all model
tensors.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffmath import Tape, Tensor, clip_min, log, mul, neg, scale, tsum
from .encoder import encode_forward
from .embednet import embed_forward
from .matcher import AssignmentMatrix, sinkhorn_forward, similarity_forward
from .model import ModelParams
from .scoremap import Candidate, ScoreMap, pad_candidates
from .simulator import SequenceRecord, TrackerLogEntry, greedy_baseline_track

DUSTBIN = -1
PAD_COUNT = 5
MATCH_DISTANCE = 2.0


class NumericalError(RuntimeError):
    """Raised when training produces non-finite values."""


class MiningCategory(enum.Enum):
    D = "D"
    H = "H"
    G = "G"
    J = "J"
    K = "K"
    OTHER = "other"


@dataclass(frozen=True)
class FramePairSample:
    """One training item: two padded candidate lists plus ground-truth pairs.

    Pair indices refer to positions in the padded lists; DUSTBIN (-1) on
    either side marks a simulated disappearance or appearance.
    """

    prev_cands: tuple[Candidate, ...]
    curr_cands: tuple[Candidate, ...]
    prev_mask: tuple[bool, ...]
    curr_mask: tuple[bool, ...]
    pairs: tuple[tuple[int, int], ...]
    map_dims: tuple[int, int]
    kind: str  # "real" | "synthetic"


@dataclass(frozen=True)
class AugmentConfig:
    max_jitter: int = 2
    score_scale: float = 0.2
    appearance_noise: float = 0.05
    removal_prob: float = 0.15


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    pairs_per_epoch: int = 6400
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.2
    lr_decay_every: int = 6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    pad_to: int = PAD_COUNT
    d_model: int = 256
    psi_hidden: tuple[int, ...] = (32, 64, 128)
    heads: int = 4
    layer_types: tuple[str, ...] = ("self", "cross", "self", "cross")
    sinkhorn_iterations: int = 10
    tau: float = 0.05
    eta: float = 0.25
    neighborhood: int = 5
    match_distance: float = MATCH_DISTANCE
    real_ratios: tuple[float, float, float] = (10.0, 1.0, 1.0)  # HH : HK : HG
    synthetic_ratios: tuple[float, float, float] = (2.0, 1.0, 1.0)  # H : K : J
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def loss_pairs_forward(assignment: Tensor, pairs) -> Tensor:
    """Sum of -log A[l', l] over index pairs (dustbin index allowed)."""
    n_prev = assignment.data.shape[0] - 1
    n_curr = assignment.data.shape[1] - 1
    mask = np.zeros_like(assignment.data)
    for i, j in pairs:
        row = n_prev if i == DUSTBIN else i
        col = n_curr if j == DUSTBIN else j
        if not (0 <= row <= n_prev and 0 <= col <= n_curr):
            raise ValueError(f"pair ({i}, {j}) outside assignment bounds")
        mask[row, col] = 1.0
    nll = neg(log(clip_min(assignment, 1e-12)))
    return tsum(mul(nll, Tensor(mask)))


def _as_tensor_assignment(assignment) -> Tensor:
    if isinstance(assignment, AssignmentMatrix):
        return Tensor(assignment.probs)
    return assignment


def loss_partial(assignment, pair: tuple[int, int]) -> float:
    """Supervised loss for the single annotated correspondence."""
    a = _as_tensor_assignment(assignment)
    return float(loss_pairs_forward(a, [pair]).data)


def loss_self(assignment, pairs) -> float:
    """Self-supervised loss over the simulated correspondence set."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("correspondence set must be non-empty")
    a = _as_tensor_assignment(assignment)
    return float(loss_pairs_forward(a, pairs).data)


def _remove_and_remap(
    cands: list[Candidate], remove_idx: int | None
) -> tuple[list[Candidate], dict[int, int]]:
    kept, remap = [], {}
    for i, c in enumerate(cands):
        if i == remove_idx:
            continue
        remap[i] = len(kept)
        kept.append(c)
    return kept, remap


def _jitter_candidates(
    cands: list[Candidate],
    rng: np.random.Generator,
    aug: AugmentConfig,
    map_dims: tuple[int, int],
) -> list[Candidate]:
    h, w = map_dims
    out = []
    for c in cands:
        dr = int(rng.integers(-aug.max_jitter, aug.max_jitter + 1))
        dc = int(rng.integers(-aug.max_jitter, aug.max_jitter + 1))
        loc = (
            min(max(c.location[0] + dr, 0), h - 1),
            min(max(c.location[1] + dc, 0), w - 1),
        )
        s = min(max(c.score * rng.uniform(1 - aug.score_scale, 1 + aug.score_scale), 0.0), 1.0)
        app = c.appearance + rng.normal(0.0, aug.appearance_noise, size=c.appearance.shape)
        out.append(replace(c, location=loc, score=s, appearance=app))
    return out


def _scale_scores(
    cands: list[Candidate], rng: np.random.Generator, delta: float
) -> list[Candidate]:
    return [
        replace(c, score=min(max(c.score * rng.uniform(1 - delta, 1 + delta), 0.0), 1.0))
        for c in cands
    ]


def _draw_removals(
    n: int, rng: np.random.Generator, prob: float
) -> tuple[int | None, int | None]:
    """At most one removal per side; a collision keeps only the prev removal."""
    rm_prev = int(rng.integers(0, n)) if rng.random() < prob else None
    rm_curr = int(rng.integers(0, n)) if rng.random() < prob else None
    if rm_prev is not None and rm_curr == rm_prev:
        rm_curr = None
    return rm_prev, rm_curr


def _pad_map(map_dims: tuple[int, int]) -> ScoreMap:
    return ScoreMap(values=np.zeros(map_dims))


def _top_k(cands: list[Candidate], k: int) -> tuple[list[Candidate], dict[int, int]]:
    """Keep the k highest-scoring candidates, preserving relative order."""
    if len(cands) <= k:
        return list(cands), {i: i for i in range(len(cands))}
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].score, cands[i].location))
    keep = sorted(order[:k])
    return [cands[i] for i in keep], {old: new for new, old in enumerate(keep)}


def _assemble(prev, curr, rng, map_dims, d_appearance, pad_to):
    """Pad both sides to pad_to; pad_to=0 keeps the natural counts."""
    if pad_to == 0:
        return (prev, [True] * len(prev)), (curr, [True] * len(curr))
    smap = _pad_map(map_dims)
    return (
        pad_candidates(prev, pad_to, rng, smap, d_a=d_appearance),
        pad_candidates(curr, pad_to, rng, smap, d_a=d_appearance),
    )


def make_synthetic_pair(
    cands: list[Candidate],
    map_dims: tuple[int, int],
    d_appearance: int,
    rng: np.random.Generator,
    aug: AugmentConfig | None = None,
    pad_to: int = PAD_COUNT,
) -> FramePairSample:
    """Duplicate one frame's candidates, augment the copy, and simulate
    occlusions/redetections by removing a candidate from one side."""
    if not cands:
        raise ValueError("need at least one candidate")
    aug = aug if aug is not None else AugmentConfig()
    cands, _ = _top_k(list(cands), pad_to or PAD_COUNT)
    prev = _scale_scores(cands, rng, aug.score_scale)
    curr = _jitter_candidates(cands, rng, aug, map_dims)

    # unpadded assembly must keep at least two candidates per side for the
    # batch statistics, so removals are skipped on small frames
    allow_removal = pad_to != 0 or len(cands) >= 3
    rm_prev, rm_curr = (
        _draw_removals(len(cands), rng, aug.removal_prob)
        if allow_removal
        else (None, None)
    )
    prev, prev_map = _remove_and_remap(prev, rm_prev)
    curr, curr_map = _remove_and_remap(curr, rm_curr)

    pairs = []
    for k in range(len(cands)):
        if k == rm_prev:
            pairs.append((DUSTBIN, curr_map[k]))
        elif k == rm_curr:
            pairs.append((prev_map[k], DUSTBIN))
        else:
            pairs.append((prev_map[k], curr_map[k]))

    (prev_p, prev_mask), (curr_p, curr_mask) = _assemble(
        prev, curr, rng, map_dims, d_appearance, pad_to
    )
    return FramePairSample(
        prev_cands=tuple(prev_p),
        curr_cands=tuple(curr_p),
        prev_mask=tuple(prev_mask),
        curr_mask=tuple(curr_mask),
        pairs=tuple(pairs),
        map_dims=map_dims,
        kind="synthetic",
    )


def make_real_pair(
    prev_entry: TrackerLogEntry,
    curr_entry: TrackerLogEntry,
    map_dims: tuple[int, int],
    d_appearance: int,
    rng: np.random.Generator,
    aug: AugmentConfig | None = None,
    pad_to: int = PAD_COUNT,
    match_distance: float = MATCH_DISTANCE,
) -> FramePairSample | None:
    """Partially supervised pair from two consecutive tracker-log frames.

    The single annotated correspondence links the candidates nearest the
    ground-truth target on both sides; occasionally one side is excluded and
    replaced by its dustbin to mimic occlusion or redetection. Returns None
    when either side lacks a ground-truth candidate.
    """
    aug = aug if aug is not None else AugmentConfig()
    gt_prev = _gt_candidate_index(prev_entry, match_distance)
    gt_curr = _gt_candidate_index(curr_entry, match_distance)
    if gt_prev is None or gt_curr is None:
        return None

    prev_full, prev_keep = _top_k(list(prev_entry.candidates), pad_to or PAD_COUNT)
    curr_full, curr_keep = _top_k(list(curr_entry.candidates), pad_to or PAD_COUNT)
    if gt_prev not in prev_keep or gt_curr not in curr_keep:
        return None  # annotated candidate fell outside the kept top scorers
    gt_prev, gt_curr = prev_keep[gt_prev], curr_keep[gt_curr]

    prev = _scale_scores(prev_full, rng, aug.score_scale)
    curr = _scale_scores(curr_full, rng, aug.score_scale)

    rm_prev, rm_curr = None, None
    if rng.random() < aug.removal_prob and (pad_to != 0 or len(prev) >= 3):
        rm_prev = gt_prev
    elif rng.random() < aug.removal_prob and (pad_to != 0 or len(curr) >= 3):
        rm_curr = gt_curr
    prev, prev_map = _remove_and_remap(prev, rm_prev)
    curr, curr_map = _remove_and_remap(curr, rm_curr)
    if not prev or not curr:
        return None

    if rm_prev is not None:
        pair = (DUSTBIN, curr_map[gt_curr])
    elif rm_curr is not None:
        pair = (prev_map[gt_prev], DUSTBIN)
    else:
        pair = (prev_map[gt_prev], curr_map[gt_curr])

    (prev_p, prev_mask), (curr_p, curr_mask) = _assemble(
        prev, curr, rng, map_dims, d_appearance, pad_to
    )
    return FramePairSample(
        prev_cands=tuple(prev_p),
        curr_cands=tuple(curr_p),
        prev_mask=tuple(prev_mask),
        curr_mask=tuple(curr_mask),
        pairs=(pair,),
        map_dims=map_dims,
        kind="real",
    )


def _gt_candidate_index(entry: TrackerLogEntry, threshold: float) -> int | None:
    if entry.gt_target_cell is None:
        return None
    gr, gc = entry.gt_target_cell
    best, best_dist = None, math.inf
    for i, c in enumerate(entry.candidates):
        d = math.hypot(c.location[0] - gr, c.location[1] - gc)
        if d < best_dist:
            best, best_dist = i, d
    return best if best_dist <= threshold else None


def mine_categories(
    log: list[TrackerLogEntry],
    eta: float = 0.25,
    match_distance: float = MATCH_DISTANCE,
) -> list[MiningCategory]:
    """Classify each tracker-log frame for training-sample selection.

    D: single candidate, selected, matches the target. H: several candidates,
    selected, the top scorer matches. G: several, not selected, top scorer
    matches. J: several, selected, nothing matches. K: several, selected,
    a non-top candidate matches. Everything else is OTHER.
    """
    out = []
    for entry in log:
        cands = entry.candidates
        n = len(cands)
        if n == 0:
            out.append(MiningCategory.OTHER)
            continue
        selected = cands[0].score >= eta  # extraction sorts by descending score
        top_match = _matches_gt(cands[0], entry.gt_target_cell, match_distance)
        any_match = any(
            _matches_gt(c, entry.gt_target_cell, match_distance) for c in cands
        )
        if n == 1:
            out.append(MiningCategory.D if selected and top_match else MiningCategory.OTHER)
        elif not selected:
            out.append(MiningCategory.G if top_match else MiningCategory.OTHER)
        elif top_match:
            out.append(MiningCategory.H)
        elif any_match:
            out.append(MiningCategory.K)
        else:
            out.append(MiningCategory.J)
    return out


def _matches_gt(
    cand: Candidate, gt_cell: tuple[int, int] | None, threshold: float
) -> bool:
    if gt_cell is None:
        return False
    return math.hypot(cand.location[0] - gt_cell[0], cand.location[1] - gt_cell[1]) <= threshold


@dataclass
class MinedDataset:
    """Seed material for the sampler: tracker logs plus category pools."""

    logs: list[list[TrackerLogEntry]]
    map_dims: tuple[int, int]
    d_appearance: int
    real_pools: dict[str, list[tuple[int, int]]]  # HH / HK / HG -> (seq, t)
    synthetic_pools: dict[str, list[tuple[int, int]]]  # H / K / J -> (seq, t)


def mine_dataset(
    sequences: list[SequenceRecord], cfg: TrainConfig
) -> MinedDataset:
    """Run the greedy baseline over every sequence and build category pools."""
    logs, categories = [], []
    for seq in sequences:
        log = greedy_baseline_track(seq, eta=cfg.eta, tau=cfg.tau, neighborhood=cfg.neighborhood)
        logs.append(log)
        categories.append(mine_categories(log, eta=cfg.eta, match_distance=cfg.match_distance))

    real_pools = {"HH": [], "HK": [], "HG": []}
    synthetic_pools = {"H": [], "K": [], "J": []}
    pair_kind = {
        (MiningCategory.H, MiningCategory.H): "HH",
        (MiningCategory.H, MiningCategory.K): "HK",
        (MiningCategory.H, MiningCategory.G): "HG",
    }
    for s, cats in enumerate(categories):
        for t, cat in enumerate(cats):
            if cat.value in synthetic_pools:
                synthetic_pools[cat.value].append((s, t))
            if t + 1 < len(cats):
                kind = pair_kind.get((cat, cats[t + 1]))
                if kind is not None:
                    real_pools[kind].append((s, t))
    first = sequences[0]
    return MinedDataset(
        logs=logs,
        map_dims=(first.height, first.width),
        d_appearance=first.d_appearance,
        real_pools=real_pools,
        synthetic_pools=synthetic_pools,
    )


def _draw_from_pools(
    pools: dict[str, list], ratios: dict[str, float], rng: np.random.Generator
):
    names = [n for n in pools if pools[n]]
    if not names:
        return None
    weights = np.array([ratios[n] for n in names], dtype=np.float64)
    weights /= weights.sum()
    name = names[int(rng.choice(len(names), p=weights))]
    pool = pools[name]
    return pool[int(rng.integers(0, len(pool)))]


class PairSampler:
    """Draws real and synthetic training pairs 50/50 with category ratios."""

    def __init__(self, mined: MinedDataset, cfg: TrainConfig, rng: np.random.Generator):
        self.mined = mined
        self.cfg = cfg
        self.rng = rng
        self.real_ratios = dict(zip(("HH", "HK", "HG"), cfg.real_ratios))
        self.synthetic_ratios = dict(zip(("H", "K", "J"), cfg.synthetic_ratios))
        self.has_real = any(mined.real_pools.values())
        self.has_synthetic = any(mined.synthetic_pools.values())
        if not (self.has_real or self.has_synthetic):
            raise ValueError("mined dataset has no usable training frames")

    def draw(self) -> FramePairSample:
        for _ in range(64):
            want_real = self.rng.random() < 0.5 if (self.has_real and self.has_synthetic) else self.has_real
            sample = self._draw_real() if want_real else self._draw_synthetic()
            if sample is not None:
                return sample
        raise ValueError("failed to draw a usable training pair")

    def _draw_real(self) -> FramePairSample | None:
        pick = _draw_from_pools(self.mined.real_pools, self.real_ratios, self.rng)
        if pick is None:
            return None
        s, t = pick
        log = self.mined.logs[s]
        return make_real_pair(
            log[t],
            log[t + 1],
            self.mined.map_dims,
            self.mined.d_appearance,
            self.rng,
            aug=self.cfg.augment,
            pad_to=self.cfg.pad_to,
            match_distance=self.cfg.match_distance,
        )

    def _draw_synthetic(self) -> FramePairSample | None:
        pick = _draw_from_pools(self.mined.synthetic_pools, self.synthetic_ratios, self.rng)
        if pick is None:
            return None
        s, t = pick
        cands = list(self.mined.logs[s][t].candidates)
        if not cands:
            return None
        return make_synthetic_pair(
            cands,
            self.mined.map_dims,
            self.mined.d_appearance,
            self.rng,
            aug=self.cfg.augment,
            pad_to=self.cfg.pad_to,
        )


def pair_loss_forward(
    sample: FramePairSample, model: ModelParams, tape: Tape | None, mode: str = "train",
    sinkhorn_iterations: int = 10,
) -> Tensor:
    """Forward pass for one training pair: encode, embed, match, score."""
    hp = encode_forward(list(sample.prev_cands), sample.map_dims, model.encoder, mode, tape)
    hc = encode_forward(list(sample.curr_cands), sample.map_dims, model.encoder, mode, tape)
    hp, hc = embed_forward(hp, hc, model.embed, mode)
    scores = similarity_forward(hp, hc)
    assignment = sinkhorn_forward(scores, model.dustbin, sinkhorn_iterations)
    return loss_pairs_forward(assignment, sample.pairs)


class Adam:
    """Standard Adam over named parameter tensors."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def train(
    sequences: list[SequenceRecord], cfg: TrainConfig
) -> tuple[ModelParams, list[float]]:
    """Train a fresh model on simulator sequences; returns (model, loss curve).

    The curve holds the mean total loss of each epoch. Deterministic under a
    fixed config seed.
    """
    if not sequences:
        raise ValueError("no training sequences")
    mined = mine_dataset(sequences, cfg)
    rng = np.random.default_rng(cfg.seed)
    model = ModelParams.create(
        d_appearance=mined.d_appearance,
        dim=cfg.d_model,
        psi_hidden=cfg.psi_hidden,
        layer_types=cfg.layer_types,
        heads=cfg.heads,
        seed=cfg.seed,
    )
    sampler = PairSampler(mined, cfg, rng)
    optimizer = Adam(
        model.named_parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    )

    curve: list[float] = []
    steps = max(cfg.pairs_per_epoch // cfg.batch_size, 1)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_decay ** (epoch // cfg.lr_decay_every))
        epoch_losses: list[float] = []
        for step in range(steps):
            optimizer.zero_grad()
            for _ in range(cfg.batch_size):
                sample = sampler.draw()
                tape = Tape()
                try:
                    loss = pair_loss_forward(
                        sample, model, tape, mode="train",
                        sinkhorn_iterations=cfg.sinkhorn_iterations,
                    )
                except ValueError as err:
                    raise NumericalError(
                        f"non-finite values at epoch {epoch} step {step}: {err}"
                    ) from err
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}"
                    )
                tape.backward(scale(loss, 1.0 / cfg.batch_size))
                epoch_losses.append(value)
            optimizer.step(lr)
        curve.append(float(np.mean(epoch_losses)))
    return model, curve
