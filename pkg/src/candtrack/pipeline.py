"""Online tracking loop, evaluation metrics, and persistence formats.

Per frame: extract candidates, encode them, embed jointly with the previous
frame, match through Sinkhorn, associate objects, and update the
confidence-weighted memory. When both frames hold exactly one high-scoring
candidate the association network is skipped and the identity inherited
directly. Also hosts the search-area rescaling utility and the JSON codecs
for datasets, results, and metrics.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .association import (
    DEFAULT_ETA,
    DEFAULT_OMEGA,
    INIT_DISTANCE,
    associate_frame,
    init_database,
)
from .encoder import encode_candidates
from .embednet import embed_pair
from .matcher import MatchSet, extract_matches, similarity, sinkhorn
from .memory import CONFIDENCE_FLOOR, MemoryManager, OnlineLossSpec, confidence
from .model import ModelParams
from .scoremap import DEFAULT_NEIGHBORHOOD, DEFAULT_TAU, ScoreMap, extract_candidates
from .simulator import (
    APPEARANCE_RADIUS,
    AppearanceLookup,
    FrameRecord,
    GtObject,
    SequenceRecord,
    TrackerLogEntry,
)

RESULTS_FORMAT = 1
MAX_RESCALE_WINDOW = 30
EVAL_DISTANCE = 2.0


class FormatError(ValueError):
    """Malformed file or configuration payload."""


@dataclass(frozen=True)
class TrackerConfig:
    tau: float = DEFAULT_TAU
    omega: float = DEFAULT_OMEGA
    eta: float = DEFAULT_ETA
    sinkhorn_iterations: int = 10
    neighborhood: int = DEFAULT_NEIGHBORHOOD
    confidence_floor: float = CONFIDENCE_FLOOR
    gamma: float = 0.1
    memory_capacity: int = 30
    single_candidate_shortcut: bool = True
    init_distance: float = INIT_DISTANCE
    appearance_radius: float = APPEARANCE_RADIUS

    def __post_init__(self):
        if not 0 <= self.tau <= 1 or not 0 <= self.eta <= 1 or not 0 <= self.omega <= 1:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.sinkhorn_iterations < 1:
            raise ValueError("sinkhorn_iterations must be >= 1")
        if self.memory_capacity < 1:
            raise ValueError("memory_capacity must be >= 1")

    @property
    def shortcut_min_score(self) -> float:
        return 2.0 * self.tau


def trackerconfig_from_dict(data: dict) -> TrackerConfig:
    known = set(TrackerConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise FormatError(f"unknown tracker config keys: {sorted(unknown)}")
    try:
        return TrackerConfig(**data)
    except (TypeError, ValueError) as err:
        raise FormatError(f"invalid tracker config: {err}") from err


@dataclass
class SearchAreaHistory:
    """Search-area resolutions recorded while the target is detected."""

    areas: list[float] = field(default_factory=list)
    frames_since_loss: int = 0

    def record(self, area: float) -> None:
        if area <= 0:
            raise ValueError("search areas must be positive")
        self.areas.append(float(area))


def rescale_search_area(
    history: SearchAreaHistory, area_at_loss: float, k: int
) -> float:
    """Recovery search area k frames after the target was lost.

    Mean of the qualifying entries (strictly larger than the area at loss)
    among the last min(k, 30) recorded areas; falls back to the loss-time
    area when none qualify. Beyond 30 frames the window no longer grows, so
    the value stays frozen until redetection.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    window = history.areas[-min(k, MAX_RESCALE_WINDOW) :]
    qualifying = [a for a in window if a > area_at_loss]
    if not qualifying:
        return float(area_at_loss)
    return float(sum(qualifying) / len(qualifying))


def _single_shortcut_applies(prev_cands, curr_cands, cfg: TrackerConfig) -> bool:
    return (
        cfg.single_candidate_shortcut
        and len(prev_cands) == 1
        and len(curr_cands) == 1
        and prev_cands[0].score >= cfg.shortcut_min_score
        and curr_cands[0].score >= cfg.shortcut_min_score
    )


def track_sequence(
    seq: SequenceRecord, model: ModelParams, cfg: TrackerConfig | None = None
) -> dict:
    """Run the full association tracker over one sequence.

    Returns a JSON-ready results record with per-frame candidates, matches,
    object ids, the selected target, and the confidence beta.
    """
    cfg = cfg if cfg is not None else TrackerConfig()
    if not seq.frames:
        raise FormatError("sequence has no frames")

    first = seq.frames[0]
    gt0 = first.gt_cell(seq.target_uid)
    if gt0 is None:
        raise ValueError("target not visible in the first frame")

    def frame_candidates(frame: FrameRecord):
        lookup = AppearanceLookup(frame, seq.d_appearance, cfg.appearance_radius)
        return [
            c.with_appearance(lookup(c.location))
            for c in extract_candidates(frame.score_map, cfg.tau, cfg.neighborhood)
        ]

    cands = frame_candidates(first)
    db = init_database(cands, gt0, cfg.init_distance)
    memory = MemoryManager(
        spec=OnlineLossSpec(
            learning_rate_param=cfg.gamma,
            capacity=cfg.memory_capacity,
            confidence_floor=cfg.confidence_floor,
        )
    )

    dims = (seq.height, seq.width)
    frames_out = []
    prev_cands = cands
    prev_encoded = (
        encode_candidates(cands, dims, model.encoder) if cands else []
    )

    for t, frame in enumerate(seq.frames):
        if t > 0:
            cands = frame_candidates(frame)
            if not cands:
                matches = MatchSet.empty(len(prev_cands), 0)
            elif not prev_cands:
                matches = MatchSet.empty(0, len(cands))
            elif _single_shortcut_applies(prev_cands, cands, cfg):
                matches = MatchSet(prev=((0, 1.0),), curr=((0, 1.0),))
            else:
                curr_encoded = encode_candidates(cands, dims, model.encoder)
                h_prev, h_curr = embed_pair(prev_encoded, curr_encoded, model.embed)
                sim = similarity(h_prev, h_curr, float(model.dustbin.data[0, 0]))
                assignment = sinkhorn(sim, cfg.sinkhorn_iterations)
                matches = extract_matches(assignment)
            db = associate_frame(db, cands, matches, cfg.omega, cfg.eta)
            prev_encoded = (
                encode_candidates(cands, dims, model.encoder) if cands else []
            )
            prev_cands = cands
        else:
            matches = MatchSet.empty(0, len(cands))

        sigma = float(frame.score_map.values.max())
        selected = db.selected()
        selected_is_initial = (
            selected is not None and selected.uid == db.initial_id
        )
        beta = confidence(sigma, selected_is_initial)

        selected_out = None
        if selected is not None:
            idx = db.ids().index(selected.uid)
            cand = cands[idx]
            selected_out = {
                "object_id": selected.uid,
                "candidate": idx,
                "cell": list(cand.location),
                "score": cand.score,
            }
            memory.insert(
                payload=(cand.appearance.copy(), cand.score), conf=beta, frame=t
            )

        frames_out.append(
            {
                "frame": t,
                "sigma": sigma,
                "beta": beta,
                "candidates": [
                    {"cell": list(c.location), "score": c.score} for c in cands
                ],
                "matches": [
                    {"prev": i, "curr": j, "prob": p} for i, j, p in matches.pairs()
                ],
                "object_ids": db.ids(),
                "selected": selected_out,
            }
        )

    memory_summary = {"samples": len(memory.samples), "loss": None}
    if memory.samples:
        theta = memory.refit_ridge(seq.d_appearance)
        memory_summary["loss"] = memory.loss(theta)

    return {
        "format": RESULTS_FORMAT,
        "target_uid": seq.target_uid,
        "initial_object_id": db.initial_id,
        "memory": memory_summary,
        "frames": frames_out,
    }


def greedy_results(log: list[TrackerLogEntry]) -> dict:
    """Adapt a greedy baseline log to the results schema for evaluation."""
    frames_out = []
    next_id = 0
    for entry in log:
        ids = list(range(next_id, next_id + len(entry.candidates)))
        next_id += len(entry.candidates)
        selected = None
        if entry.selected_index is not None:
            c = entry.candidates[entry.selected_index]
            selected = {
                "object_id": ids[entry.selected_index],
                "candidate": entry.selected_index,
                "cell": list(c.location),
                "score": c.score,
            }
        sigma = max((c.score for c in entry.candidates), default=0.0)
        frames_out.append(
            {
                "frame": entry.frame,
                "sigma": sigma,
                "beta": sigma,
                "candidates": [
                    {"cell": list(c.location), "score": c.score}
                    for c in entry.candidates
                ],
                "matches": [],
                "object_ids": ids,
                "selected": selected,
            }
        )
    return {
        "format": RESULTS_FORMAT,
        "target_uid": -1,
        "initial_object_id": None,
        "memory": {"samples": 0, "loss": None},
        "frames": frames_out,
    }


def _claims(frame: FrameRecord, cand_cells: list[tuple[int, int]]) -> dict[int, int]:
    """Per GT object: index of the nearest candidate within the eval radius."""
    claims: dict[int, int] = {}
    for obj in frame.objects:
        best, best_dist = None, math.inf
        for i, cell in enumerate(cand_cells):
            d = math.hypot(cell[0] - obj.cell[0], cell[1] - obj.cell[1])
            if d < best_dist:
                best, best_dist = i, d
        if best is not None and best_dist <= EVAL_DISTANCE:
            claims[obj.uid] = best
    return claims


def _selection_identity(
    frame: FrameRecord, cell: tuple[int, int] | None
) -> int | None:
    if cell is None:
        return None
    best, best_dist = None, math.inf
    for obj in frame.objects:
        d = math.hypot(cell[0] - obj.cell[0], cell[1] - obj.cell[1])
        if d < best_dist:
            best, best_dist = obj.uid, d
    return best if best_dist <= EVAL_DISTANCE else None


def evaluate(results: dict, seq: SequenceRecord) -> dict:
    """Cell-level tracking metrics against the simulator ground truth.

    target_accuracy: share of target-visible frames with the selection within
    2 cells of the target. id_switches: consecutive visible frames where the
    selection's ground-truth identity changes. Association precision/recall
    compare reported candidate matches against identity correspondences.
    redetection_latency: mean frames from target reappearance to the first
    correct selection (window-capped when it never recovers).
    """
    frames = results["frames"]
    if len(frames) != len(seq.frames):
        raise ValueError("results and ground truth length mismatch")

    visible: list[bool] = []
    correct: list[bool] = []
    identities: list[int | None] = []
    claims_per_frame: list[dict[int, int]] = []
    sel_cells: list[tuple[int, int] | None] = []

    for rec, gt in zip(frames, seq.frames):
        gt_cell = gt.gt_cell(seq.target_uid)
        visible.append(gt_cell is not None)
        sel = rec.get("selected")
        sel_cell = tuple(sel["cell"]) if sel else None
        sel_cells.append(sel_cell)
        ok = (
            gt_cell is not None
            and sel_cell is not None
            and math.hypot(sel_cell[0] - gt_cell[0], sel_cell[1] - gt_cell[1])
            <= EVAL_DISTANCE
        )
        correct.append(ok)
        identities.append(_selection_identity(gt, sel_cell))
        cand_cells = [tuple(c["cell"]) for c in rec["candidates"]]
        claims_per_frame.append(_claims(gt, cand_cells))

    n_visible = sum(visible)
    accuracy = (
        sum(c for c, v in zip(correct, visible) if v) / n_visible
        if n_visible
        else 0.0
    )

    switches = 0
    for t in range(1, len(frames)):
        if (
            visible[t]
            and visible[t - 1]
            and identities[t] is not None
            and identities[t - 1] is not None
            and identities[t] != identities[t - 1]
        ):
            switches += 1

    predicted = 0
    true_pred = 0
    gt_pairs = 0
    for t in range(1, len(frames)):
        prev_claims, curr_claims = claims_per_frame[t - 1], claims_per_frame[t]
        gt_links = {
            (prev_claims[u], curr_claims[u]): u
            for u in prev_claims
            if u in curr_claims
        }
        gt_pairs += len(gt_links)
        for m in frames[t]["matches"]:
            predicted += 1
            if (m["prev"], m["curr"]) in gt_links:
                true_pred += 1
    precision = true_pred / predicted if predicted else 0.0
    recall = true_pred / gt_pairs if gt_pairs else 0.0

    latencies: list[int] = []
    t = 1
    n = len(frames)
    while t < n:
        if visible[t] and not visible[t - 1] and any(visible[:t]):
            limit = t
            while limit < n and visible[limit]:
                limit += 1
            lat = limit - t  # cap: never recovered inside the window
            for f in range(t, limit):
                if correct[f]:
                    lat = f - t
                    break
            latencies.append(lat)
            t = limit
        else:
            t += 1

    return {
        "target_accuracy": accuracy,
        "id_switches": switches,
        "association_precision": precision,
        "association_recall": recall,
        "redetection_latency": (
            float(np.mean(latencies)) if latencies else None
        ),
        "visible_frames": n_visible,
        "frames": len(frames),
    }


def sequence_to_payload(seq: SequenceRecord) -> dict:
    return {
        "meta": {
            "H": seq.height,
            "W": seq.width,
            "d_a": seq.d_appearance,
            "frames": len(seq.frames),
            "seed": seq.seed,
        },
        "frames": [
            {
                "scores": [float(v) for v in frame.score_map.values.reshape(-1)],
                "objects": [
                    {
                        "uid": o.uid,
                        "cell": list(o.cell),
                        "score": o.score,
                        "appearance": [float(x) for x in o.appearance],
                    }
                    for o in frame.objects
                ],
                "target_uid": frame.target_uid,
            }
            for frame in seq.frames
        ],
    }


def sequence_from_payload(payload: dict) -> SequenceRecord:
    try:
        meta = payload["meta"]
        h, w = int(meta["H"]), int(meta["W"])
        d_a = int(meta["d_a"])
        n_frames = int(meta["frames"])
        seed = int(meta["seed"])
        raw_frames = payload["frames"]
    except (KeyError, TypeError) as err:
        raise FormatError(f"malformed dataset payload: {err}") from err
    if len(raw_frames) != n_frames:
        raise FormatError("frame count does not match meta.frames")

    frames = []
    target_uid = -1
    for t, raw in enumerate(raw_frames):
        try:
            scores = np.asarray(raw["scores"], dtype=np.float64)
            if scores.size != h * w:
                raise FormatError(f"frame {t}: expected {h * w} scores")
            objects = tuple(
                GtObject(
                    uid=int(o["uid"]),
                    cell=(int(o["cell"][0]), int(o["cell"][1])),
                    score=float(o["score"]),
                    appearance=np.asarray(o["appearance"], dtype=np.float64),
                )
                for o in raw["objects"]
            )
            target_uid = int(raw["target_uid"])
        except (KeyError, TypeError, ValueError) as err:
            raise FormatError(f"malformed frame {t}: {err}") from err
        for o in objects:
            if o.appearance.shape != (d_a,):
                raise FormatError(f"frame {t}: appearance dim != {d_a}")
            if not (0 <= o.cell[0] < h and 0 <= o.cell[1] < w):
                raise FormatError(f"frame {t}: object cell out of bounds")
        frames.append(
            FrameRecord(
                score_map=ScoreMap(values=scores.reshape(h, w), frame_index=t),
                objects=objects,
                target_uid=target_uid,
            )
        )
    return SequenceRecord(
        frames=tuple(frames), target_uid=target_uid, d_appearance=d_a, seed=seed
    )


def write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"invalid JSON in {path}: {err}") from err


def tracker_config_to_dict(cfg: TrackerConfig) -> dict:
    return asdict(cfg)
