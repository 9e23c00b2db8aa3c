"""Deterministic synthetic multi-object world.

Objects random-walk across a small grid with reflecting borders, each
rendering a Gaussian score bump whose height is its (optionally wobbling)
amplitude. Bumps combine by max, so close encounters merge into a single
peak, and an object within the occlusion radius of a stronger one renders no
peak of its own that frame. Observed appearance vectors are noisy, slowly
drifting copies of each object's true appearance. Everything is a pure
function of (config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .scoremap import Candidate, ScoreMap, extract_candidates

PEAK_STD = 1.2
APPEARANCE_RADIUS = 3.0


@dataclass(frozen=True)
class ObjectSpec:
    """Explicit initial state for scripted scenarios."""

    position: tuple[float, float]
    velocity: tuple[float, float]
    amplitude: float


@dataclass(frozen=True)
class SimConfig:
    height: int = 30
    width: int = 30
    frames: int = 60
    d_appearance: int = 8
    min_objects: int = 1
    max_objects: int = 4
    motion_std: float = 0.15
    initial_speed_std: float = 0.25
    noise_std: float = 0.02
    peak_std: float = PEAK_STD
    amplitude_low: float = 0.3
    amplitude_high: float = 1.0
    amplitude_wobble: float = 0.0
    amplitude_wobble_period: float = 25.0
    occlusion_radius: float = 4.0
    appearance_noise: float = 0.05
    appearance_drift_max: float = 0.02
    enter_prob: float = 0.0
    leave_prob: float = 0.0
    initial_objects: tuple[ObjectSpec, ...] | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise ValueError("height, width and frames must be positive")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if not 0.3 <= self.amplitude_low <= self.amplitude_high <= 1.0:
            raise ValueError("amplitudes must satisfy 0.3 <= low <= high <= 1")


@dataclass(frozen=True)
class GtObject:
    """Ground truth for one visible object in one frame."""

    uid: int
    cell: tuple[int, int]
    score: float
    appearance: np.ndarray


@dataclass(frozen=True)
class FrameRecord:
    score_map: ScoreMap
    objects: tuple[GtObject, ...]  # visible (alive, non-occluded) objects
    target_uid: int
    events: tuple[tuple[str, int], ...] = ()

    def gt_cell(self, uid: int) -> tuple[int, int] | None:
        for o in self.objects:
            if o.uid == uid:
                return o.cell
        return None


@dataclass(frozen=True)
class SequenceRecord:
    frames: tuple[FrameRecord, ...]
    target_uid: int
    d_appearance: int
    seed: int

    @property
    def height(self) -> int:
        return self.frames[0].score_map.height

    @property
    def width(self) -> int:
        return self.frames[0].score_map.width


@dataclass
class _World:
    uid: int
    pos: np.ndarray
    vel: np.ndarray
    amplitude: float
    phase: float
    appearance: np.ndarray


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def _reflect(pos: np.ndarray, vel: np.ndarray, limits: tuple[float, float]) -> None:
    for axis, hi in enumerate(limits):
        if pos[axis] < 0:
            pos[axis] = -pos[axis]
            vel[axis] = -vel[axis]
        elif pos[axis] > hi:
            pos[axis] = 2 * hi - pos[axis]
            vel[axis] = -vel[axis]
        pos[axis] = min(max(pos[axis], 0.0), hi)


def _drift_appearance(
    vec: np.ndarray, rng: np.random.Generator, max_angle: float
) -> np.ndarray:
    direction = rng.normal(size=vec.shape[0])
    direction -= np.dot(direction, vec) * vec
    norm = np.linalg.norm(direction)
    angle = rng.uniform(0.0, max_angle)
    if norm < 1e-12:
        return vec
    return _unit(math.cos(angle) * vec + math.sin(angle) * direction / norm)


def _spawn(
    cfg: SimConfig, rng: np.random.Generator, uid: int, spec: ObjectSpec | None = None
) -> _World:
    if spec is None:
        pos = np.array(
            [rng.uniform(0, cfg.height - 1), rng.uniform(0, cfg.width - 1)]
        )
        vel = rng.normal(0.0, cfg.initial_speed_std, size=2)
        amp = rng.uniform(cfg.amplitude_low, cfg.amplitude_high)
    else:
        pos = np.array(spec.position, dtype=np.float64)
        vel = np.array(spec.velocity, dtype=np.float64)
        amp = spec.amplitude
    return _World(
        uid=uid,
        pos=pos,
        vel=vel,
        amplitude=amp,
        phase=rng.uniform(0, 2 * math.pi),
        appearance=_unit(rng.normal(size=cfg.d_appearance)),
    )


def _effective_amplitude(obj: _World, cfg: SimConfig, t: int) -> float:
    amp = obj.amplitude
    if cfg.amplitude_wobble > 0:
        amp += cfg.amplitude_wobble * math.sin(
            2 * math.pi * t / cfg.amplitude_wobble_period + obj.phase
        )
    return min(max(amp, 0.05), 1.0)


def generate_sequence(cfg: SimConfig, seed: int) -> SequenceRecord:
    """Simulate one sequence. The first initial object is the target and it
    never leaves the scene (it may still be occluded)."""
    rng = np.random.default_rng(seed)
    limits = (cfg.height - 1.0, cfg.width - 1.0)

    objects: list[_World] = []
    if cfg.initial_objects is not None:
        for spec in cfg.initial_objects:
            objects.append(_spawn(cfg, rng, uid=len(objects), spec=spec))
    else:
        count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        for _ in range(count):
            objects.append(_spawn(cfg, rng, uid=len(objects)))
    target_uid = 0 if objects else -1
    next_uid = len(objects)

    rows = np.arange(cfg.height).reshape(-1, 1)
    cols = np.arange(cfg.width).reshape(1, -1)
    frames: list[FrameRecord] = []
    for t in range(cfg.frames):
        events: list[tuple[str, int]] = []
        if t > 0:
            for obj in objects:
                obj.vel += rng.normal(0.0, cfg.motion_std, size=2)
                obj.pos += obj.vel
                _reflect(obj.pos, obj.vel, limits)
                obj.appearance = _drift_appearance(
                    obj.appearance, rng, cfg.appearance_drift_max
                )
            if cfg.leave_prob > 0:
                keep = []
                for obj in objects:
                    if (
                        obj.uid != target_uid
                        and len(objects) > cfg.min_objects
                        and rng.random() < cfg.leave_prob
                    ):
                        events.append(("leave", obj.uid))
                    else:
                        keep.append(obj)
                objects = keep
            if cfg.enter_prob > 0 and len(objects) < cfg.max_objects:
                if rng.random() < cfg.enter_prob:
                    newcomer = _spawn(cfg, rng, uid=next_uid)
                    next_uid += 1
                    objects.append(newcomer)
                    events.append(("enter", newcomer.uid))

        amps = {o.uid: _effective_amplitude(o, cfg, t) for o in objects}
        occluded: set[int] = set()
        order = sorted(objects, key=lambda o: (-amps[o.uid], o.uid))
        for i, weaker in enumerate(order):
            for stronger in order[:i]:
                dist = float(np.linalg.norm(weaker.pos - stronger.pos))
                if dist <= cfg.occlusion_radius:
                    occluded.add(weaker.uid)
                    events.append(("occlude", weaker.uid))
                    break

        values = np.zeros((cfg.height, cfg.width))
        visible: list[GtObject] = []
        denom = 2.0 * cfg.peak_std**2
        for obj in objects:
            if obj.uid in occluded:
                continue
            d2 = (rows - obj.pos[0]) ** 2 + (cols - obj.pos[1]) ** 2
            bump = amps[obj.uid] * np.exp(-d2 / denom)
            np.maximum(values, bump, out=values)
            cell = (
                int(min(max(round(obj.pos[0]), 0), cfg.height - 1)),
                int(min(max(round(obj.pos[1]), 0), cfg.width - 1)),
            )
            observed = obj.appearance + rng.normal(
                0.0, cfg.appearance_noise, size=cfg.d_appearance
            )
            visible.append(
                GtObject(
                    uid=obj.uid,
                    cell=cell,
                    score=float(bump[cell]),
                    appearance=observed,
                )
            )
        if cfg.noise_std > 0:
            values = values + rng.normal(0.0, cfg.noise_std, size=values.shape)
        values = np.clip(values, 0.0, 1.0)

        frames.append(
            FrameRecord(
                score_map=ScoreMap(values=values, frame_index=t),
                objects=tuple(sorted(visible, key=lambda o: o.uid)),
                target_uid=target_uid,
                events=tuple(events),
            )
        )

    return SequenceRecord(
        frames=tuple(frames),
        target_uid=target_uid,
        d_appearance=cfg.d_appearance,
        seed=seed,
    )


def make_crossing_config(
    rng: np.random.Generator,
    frames: int = 60,
    d_appearance: int = 8,
) -> SimConfig:
    """Two-object near-crossing scenario: similar, slowly wobbling amplitudes
    so the plain score argmax flips between the objects while they pass."""
    row = rng.uniform(8.0, 21.0)
    offset = rng.uniform(3.0, 7.0) * (1 if rng.random() < 0.5 else -1)
    speed = rng.uniform(0.30, 0.45)
    target_amp = rng.uniform(0.72, 0.82)
    distractor_amp = target_amp - rng.uniform(0.02, 0.08)
    target = ObjectSpec(
        position=(row, rng.uniform(2.0, 5.0)),
        velocity=(rng.uniform(-0.05, 0.05), speed),
        amplitude=target_amp,
    )
    distractor = ObjectSpec(
        position=(row + offset, rng.uniform(24.0, 27.0)),
        velocity=(rng.uniform(-0.05, 0.05), -speed),
        amplitude=max(distractor_amp, 0.3),
    )
    return SimConfig(
        frames=frames,
        d_appearance=d_appearance,
        min_objects=2,
        max_objects=2,
        motion_std=0.05,
        noise_std=0.015,
        amplitude_wobble=0.08,
        amplitude_wobble_period=float(rng.uniform(18.0, 32.0)),
        initial_objects=(target, distractor),
    )


class AppearanceLookup:
    """Cell -> appearance vector for one frame.

    Candidates take the observed appearance of the nearest visible object
    within a small radius; peaks with no nearby object (noise artifacts) get a
    deterministic pseudo-random unit vector derived from the frame and cell,
    standing in for whatever backbone features that location would produce.
    """

    def __init__(self, frame: FrameRecord, d_appearance: int, radius: float = APPEARANCE_RADIUS):
        self.frame = frame
        self.d_appearance = d_appearance
        self.radius = radius

    def __call__(self, cell: tuple[int, int]) -> np.ndarray:
        best, best_dist = None, math.inf
        for obj in self.frame.objects:
            d = math.hypot(cell[0] - obj.cell[0], cell[1] - obj.cell[1])
            if d < best_dist:
                best, best_dist = obj, d
        if best is not None and best_dist <= self.radius:
            return np.asarray(best.appearance, dtype=np.float64)
        seed = (
            self.frame.score_map.frame_index * 1_000_003
            + cell[0] * 1009
            + cell[1]
        )
        rng = np.random.default_rng(seed)
        vec = rng.normal(size=self.d_appearance)
        return _unit(vec)


@dataclass(frozen=True)
class TrackerLogEntry:
    """Per-frame record of the plain greedy selector, used for data mining."""

    frame: int
    candidates: tuple[Candidate, ...]
    selected_index: int | None
    gt_target_cell: tuple[int, int] | None


def greedy_baseline_track(
    seq: SequenceRecord,
    eta: float = 0.25,
    tau: float = 0.05,
    neighborhood: int = 5,
) -> list[TrackerLogEntry]:
    """Baseline selector: per frame, take the score argmax if it reaches eta.

    Candidates carry appearances so the log doubles as training input.
    """
    log: list[TrackerLogEntry] = []
    for t, frame in enumerate(seq.frames):
        lookup = AppearanceLookup(frame, seq.d_appearance)
        cands = [
            c.with_appearance(lookup(c.location))
            for c in extract_candidates(frame.score_map, tau, neighborhood)
        ]
        selected = 0 if cands and cands[0].score >= eta else None
        log.append(
            TrackerLogEntry(
                frame=t,
                candidates=tuple(cands),
                selected_index=selected,
                gt_target_cell=frame.gt_cell(seq.target_uid),
            )
        )
    return log


def simconfig_to_dict(cfg: SimConfig) -> dict:
    data = asdict(cfg)
    if cfg.initial_objects is not None:
        data["initial_objects"] = [asdict(s) for s in cfg.initial_objects]
    return data


def simconfig_from_dict(data: dict) -> SimConfig:
    known = {f for f in SimConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown simulator config keys: {sorted(unknown)}")
    data = dict(data)
    if data.get("initial_objects") is not None:
        data["initial_objects"] = tuple(
            ObjectSpec(
                position=tuple(s["position"]),
                velocity=tuple(s["velocity"]),
                amplitude=float(s["amplitude"]),
            )
            for s in data["initial_objects"]
        )
    return SimConfig(**data)
