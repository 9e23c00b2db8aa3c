"""Online object association and target selection.

The database keeps one object per currently visible candidate. A candidate
whose mutual match carries probability >= omega inherits the matched object's
id and appends its score to that object's history; everything else becomes a
fresh object. Objects without a surviving candidate are dropped. The selected
target follows its id when it survives, can be taken over by an object whose
current score beats every score the selected object ever achieved, and is
otherwise redetected from the highest-scoring object when that score reaches
eta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .matcher import MatchSet
from .scoremap import Candidate

DEFAULT_OMEGA = 0.75
DEFAULT_ETA = 0.25
INIT_DISTANCE = 2.0


@dataclass
class TrackedObject:
    uid: int
    score_history: list[float]

    def last_score(self) -> float:
        return self.score_history[-1]

    def max_score(self) -> float:
        return max(self.score_history)


@dataclass
class ObjectDatabase:
    """Objects visible in the current frame, aligned with candidate order."""

    objects: list[TrackedObject] = field(default_factory=list)
    selected_id: int | None = None
    initial_id: int | None = None
    next_id: int = 0

    def ids(self) -> list[int]:
        return [o.uid for o in self.objects]

    def get(self, uid: int) -> TrackedObject | None:
        for o in self.objects:
            if o.uid == uid:
                return o
        return None

    def selected(self) -> TrackedObject | None:
        return self.get(self.selected_id) if self.selected_id is not None else None


def init_database(
    first_frame_cands: list[Candidate],
    ground_truth_location: tuple[int, int],
    max_distance: float = INIT_DISTANCE,
) -> ObjectDatabase:
    """Start a sequence: one object per candidate, nearest to the annotation
    becomes the selected and initial target."""
    if not first_frame_cands:
        raise ValueError("cannot initialize from an empty candidate list")
    gr, gc = ground_truth_location
    best, best_dist = None, math.inf
    objects = []
    for i, cand in enumerate(first_frame_cands):
        objects.append(TrackedObject(uid=i, score_history=[cand.score]))
        d = math.hypot(cand.location[0] - gr, cand.location[1] - gc)
        if d < best_dist:
            best, best_dist = i, d
    if best_dist > max_distance:
        raise ValueError(
            f"no candidate within {max_distance} cells of the annotated target"
        )
    return ObjectDatabase(
        objects=objects,
        selected_id=best,
        initial_id=best,
        next_id=len(objects),
    )


def associate_frame(
    db: ObjectDatabase,
    cands: list[Candidate],
    matches: MatchSet,
    omega: float = DEFAULT_OMEGA,
    eta: float = DEFAULT_ETA,
) -> ObjectDatabase:
    """One step of the association algorithm; returns the new database.

    db.objects must be aligned with the previous frame's candidate order,
    which is also the row order of the match set.
    """
    if len(matches.curr) != len(cands):
        raise ValueError("match set does not cover the candidate list")
    if matches.prev and len(matches.prev) != len(db.objects):
        raise ValueError("match set rows do not align with the object database")

    next_id = db.next_id
    new_objects: list[TrackedObject] = []
    for i, cand in enumerate(cands):
        prev_idx, prob = matches.curr[i]
        if prev_idx is not None and prob >= omega:
            source = db.objects[prev_idx]
            new_objects.append(
                TrackedObject(
                    uid=source.uid,
                    score_history=source.score_history + [cand.score],
                )
            )
        else:
            new_objects.append(TrackedObject(uid=next_id, score_history=[cand.score]))
            next_id += 1

    surviving = {o.uid for o in new_objects}
    selected: int | None = None
    if db.selected_id is not None and db.selected_id in surviving:
        current = next(o for o in new_objects if o.uid == db.selected_id)
        for obj in new_objects:
            if current.max_score() < obj.last_score():
                current = obj
        selected = current.uid
    elif new_objects:
        best = new_objects[0]
        for obj in new_objects[1:]:
            if obj.last_score() > best.last_score():
                best = obj
        if best.last_score() >= eta:
            selected = best.uid

    return ObjectDatabase(
        objects=new_objects,
        selected_id=selected,
        initial_id=db.initial_id,
        next_id=next_id,
    )
