"""Tracking measures: inference error, ID measures, MOTA and MCTA."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from cantrack.association import AssociationEvent, BBox, iou
from cantrack.errors import DomainError, ValidationError

IOU_THRESHOLD = 0.5
EXHAUSTIVE_MAX_IDS = 6


@dataclass
class FrameLog:
    """Boxes per (camera, frame), each tagged with an identity (true or computed)."""

    entries: dict[tuple[int, int], list[tuple[int, BBox]]] = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, int, int, BBox]]) -> "FrameLog":
        log = cls()
        for camera, frame, identity, box in rows:
            log.add(camera, frame, identity, box)
        return log

    def add(self, camera: int, frame: int, identity: int, box: BBox) -> None:
        slot = self.entries.setdefault((int(camera), int(frame)), [])
        if any(i == identity for i, _ in slot):
            raise ValidationError(f"identity {identity} appears twice in camera {camera}, frame {frame}")
        slot.append((int(identity), box))

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def identities(self) -> list[int]:
        return sorted({i for v in self.entries.values() for i, _ in v})

    def rows(self):
        for (cam, frame), slot in sorted(self.entries.items()):
            for identity, box in slot:
                yield cam, frame, identity, box


GroundTruthLog = FrameLog
HypothesisLog = FrameLog


def match_frame(gt_boxes: Sequence[BBox], hyp_boxes: Sequence[BBox],
                threshold: float = IOU_THRESHOLD) -> list[tuple[int, int]]:
    """Greedy highest-IoU one-to-one matching inside one frame (ties: lower gt, then lower hyp index)."""
    cands = []
    for i, g in enumerate(gt_boxes):
        for j, h in enumerate(hyp_boxes):
            v = iou(g, h)
            if v >= threshold:
                cands.append((-v, i, j))
    cands.sort()
    used_g, used_h, out = set(), set(), []
    for _, i, j in cands:
        if i in used_g or j in used_h:
            continue
        used_g.add(i)
        used_h.add(j)
        out.append((i, j))
    return out


def correspondences(gt: FrameLog, hyp: FrameLog) -> list[tuple[int, int, int, int]]:
    """Matched (camera, frame, gt identity, hyp identity) over all frames."""
    out = []
    for key in sorted(set(gt.entries) | set(hyp.entries)):
        g = gt.entries.get(key, [])
        h = hyp.entries.get(key, [])
        if not g or not h:
            continue
        for i, j in match_frame([b for _, b in g], [b for _, b in h]):
            out.append((key[0], key[1], g[i][0], h[j][0]))
    return out


# ---------------------------------------------------------------------------
# identity measures


@dataclass
class IdMeasures:
    idp: float
    idr: float
    idf1: float
    idtp: int
    idfp: int
    idfn: int
    mapping: dict[int, int] = field(default_factory=dict)  # gt id -> hyp id


def overlap_counts(gt: FrameLog, hyp: FrameLog) -> tuple[list[int], list[int], np.ndarray]:
    """Frames in which each (gt id, hyp id) pair overlaps with IoU >= 0.5."""
    gids, hids = gt.identities(), hyp.identities()
    gi = {g: k for k, g in enumerate(gids)}
    hi = {h: k for k, h in enumerate(hids)}
    counts = np.zeros((len(gids), len(hids)), dtype=np.int64)
    for key, g_slot in gt.entries.items():
        h_slot = hyp.entries.get(key)
        if not h_slot:
            continue
        for g_id, g_box in g_slot:
            for h_id, h_box in h_slot:
                if iou(g_box, h_box) >= IOU_THRESHOLD:
                    counts[gi[g_id], hi[h_id]] += 1
    return gids, hids, counts


def _best_assignment(counts: np.ndarray) -> list[tuple[int, int]]:
    n_g, n_h = counts.shape
    if n_g == 0 or n_h == 0:
        return []
    k = max(n_g, n_h)
    if k <= EXHAUSTIVE_MAX_IDS:
        padded = np.zeros((k, k), dtype=np.int64)
        padded[:n_g, :n_h] = counts
        best, best_perm = -1, None
        for perm in itertools.permutations(range(k)):
            total = int(padded[np.arange(k), perm].sum())
            if total > best:
                best, best_perm = total, perm
        return [(i, j) for i, j in enumerate(best_perm) if i < n_g and j < n_h]
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def id_measures(gt: FrameLog, hyp: FrameLog) -> IdMeasures:
    """IDP / IDR / IDF1 under the one-to-one identity mapping maximizing correct detections."""
    gids, hids, counts = overlap_counts(gt, hyp)
    pairs = _best_assignment(counts)
    idtp = int(sum(counts[i, j] for i, j in pairs))
    n_gt, n_hyp = len(gt), len(hyp)
    idfp = n_hyp - idtp
    idfn = n_gt - idtp
    idp = idtp / n_hyp if n_hyp else 0.0
    idr = idtp / n_gt if n_gt else 0.0
    denom = 2 * idtp + idfp + idfn
    idf1 = 2 * idtp / denom if denom else 0.0
    mapping = {gids[i]: hids[j] for i, j in pairs if counts[i, j] > 0}
    return IdMeasures(idp, idr, idf1, idtp, idfp, idfn, mapping)


# ---------------------------------------------------------------------------
# event measures


@dataclass
class MismatchCounts:
    m_s: int = 0
    tp_s: int = 0
    m_i: int = 0
    tp_i: int = 0
    fragmentations: int = 0
    fn: int = 0
    fp: int = 0
    tp: int = 0
    num_gt: int = 0
    num_hyp: int = 0

    @property
    def precision(self) -> float:
        return self.tp / self.num_hyp if self.num_hyp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.num_gt if self.num_gt else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def count_mismatches(gt: FrameLog, hyp: FrameLog) -> MismatchCounts:
    """ID switches within cameras (M^s) and across camera handovers (M^i), plus FN/FP.

    For each true identity, its matched detections are ordered by (frame, camera).
    A consecutive pair in the same camera is a within-camera step; a pair in
    different cameras is a handover, counted in TP^i.  A change of computed
    identity across a step is a mismatch of that regime.  TP^s counts every
    matched detection that does not open a handover.
    """
    matched = correspondences(gt, hyp)
    c = MismatchCounts(num_gt=len(gt), num_hyp=len(hyp), tp=len(matched))
    c.fn = c.num_gt - c.tp
    c.fp = c.num_hyp - c.tp
    per_id: dict[int, list[tuple[int, int, int]]] = {}
    for cam, frame, g, h in matched:
        per_id.setdefault(g, []).append((frame, cam, h))
    for seq in per_id.values():
        seq.sort()
        for (_, cam_a, h_a), (_, cam_b, h_b) in zip(seq, seq[1:]):
            if cam_a == cam_b:
                c.m_s += h_a != h_b
            else:
                c.tp_i += 1
                c.m_i += h_a != h_b
    c.tp_s = c.tp - c.tp_i
    c.fragmentations = c.m_s + c.m_i
    return c


def mota(fn: int, fp: int, fragmentations: int, num_detections: int) -> float:
    if num_detections <= 0:
        raise DomainError("MOTA needs at least one ground-truth detection")
    return 1.0 - (fn + fp + fragmentations) / num_detections


def mcta(f1: float, m_s: int, tp_s: int, m_i: int, tp_i: int) -> float:
    """F1 * (1 - M^s/TP^s) * (1 - M^i/TP^i); a factor with no true positives counts as 1."""
    within = 1.0 - m_s / tp_s if tp_s > 0 else 1.0
    across = 1.0 - m_i / tp_i if tp_i > 0 else 1.0
    return f1 * within * across


# ---------------------------------------------------------------------------
# inference error


@dataclass
class GalleryState:
    """Tracks as known at some point of an online run, labelled by their first detection."""

    track_label: dict[int, int] = field(default_factory=dict)
    labels: Counter = field(default_factory=Counter)
    seen: set[int] = field(default_factory=set)

    def judge(self, event: AssociationEvent, identity: int) -> str | None:
        """Reason the event is a misassociation, or None when it is correct."""
        if event.decision == "new_track":
            if self.labels[identity] > 0:
                return "duplicate"
            return None
        if event.track_id not in self.track_label:
            raise ValidationError(f"event at t={event.time} matches unknown track {event.track_id}")
        if identity not in self.seen:
            return "unseen_identity"
        if self.track_label[event.track_id] != identity:
            return "wrong_track"
        return None

    def apply(self, event: AssociationEvent, identity: int) -> None:
        if event.decision == "new_track":
            if event.track_id in self.track_label:
                raise ValidationError(f"track {event.track_id} opened twice")
            self.track_label[event.track_id] = identity
            self.labels[identity] += 1
        self.seen.add(identity)


def misassociation_count(events: Sequence[AssociationEvent], state: GalleryState,
                         identities: Sequence[int | None]) -> int:
    """Misassociations among one timestep's events; advances ``state`` past them.

    Events are judged one after another in log order, each against the gallery
    as left by the events before it.
    """
    m = 0
    for ev, identity in zip(events, identities, strict=True):
        if identity is None:
            raise ValidationError(f"detection {ev.det_id} at t={ev.time} has no ground-truth identity")
        reason = state.judge(ev, identity)
        ev.correct = reason is None
        m += reason is not None
        state.apply(ev, identity)
    return m


@dataclass
class InferenceErrorResult:
    value: float
    steps: list[tuple[int, int, int]]  # (t, M_t, D_t)

    @property
    def misassociations(self) -> int:
        return sum(m for _, m, _ in self.steps)


def inference_error(events: Sequence[AssociationEvent],
                    identity_of: Mapping[int, int] | Callable[[AssociationEvent], int | None] | Sequence[int]
                    ) -> InferenceErrorResult:
    """Mean over timesteps with detections of M_t / D_t.

    ``identity_of`` gives each event's true identity: a sequence aligned with
    ``events``, a mapping keyed by ``det_id``, or a callable on the event.
    """
    if not events:
        raise DomainError("inference error of an empty event log")
    if callable(identity_of):
        ids = [identity_of(e) for e in events]
    elif isinstance(identity_of, Mapping):
        ids = [identity_of.get(e.det_id) for e in events]
    else:
        ids = list(identity_of)
    times = [e.time for e in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValidationError("event log is not time-ordered")

    state = GalleryState()
    steps = []
    start = 0
    while start < len(events):
        end = start
        while end < len(events) and events[end].time == events[start].time:
            end += 1
        m = misassociation_count(events[start:end], state, ids[start:end])
        steps.append((events[start].time, m, end - start))
        start = end
    value = sum(m / d for _, m, d in steps) / len(steps)
    return InferenceErrorResult(value, steps)


def identities_for_events(events: Sequence[AssociationEvent], gt: FrameLog) -> list[int | None]:
    """True identity of each event's detection, by IoU correspondence with the ground truth."""
    by_key: dict[tuple[int, int], list[int]] = {}
    for k, ev in enumerate(events):
        if ev.box is None:
            raise ValidationError(f"event {k} carries no box; cannot resolve its identity")
        by_key.setdefault((ev.camera, ev.time), []).append(k)
    out: list[int | None] = [None] * len(events)
    for key, idx in by_key.items():
        slot = gt.entries.get(key, [])
        for i, j in match_frame([b for _, b in slot], [events[k].box for k in idx]):
            out[idx[j]] = slot[i][0]
    return out


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    ie: float | None
    idp: float
    idr: float
    idf1: float
    mota: float
    mcta: float
    counts: dict
    ie_steps: list[tuple[int, int, int]] = field(default_factory=list)
    seed: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ie_steps"] = [list(s) for s in self.ie_steps]
        return d


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["ie", "idp", "idr", "idf1", "mota", "mcta", "counts", "ie_steps"],
    "properties": {
        "ie": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "idp": {"type": "number", "minimum": 0, "maximum": 1},
        "idr": {"type": "number", "minimum": 0, "maximum": 1},
        "idf1": {"type": "number", "minimum": 0, "maximum": 1},
        "mota": {"type": "number", "maximum": 1},
        "mcta": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": ["integer", "null"]},
        "counts": {
            "type": "object",
            "required": ["fn", "fp", "fragmentations", "num_gt", "num_hyp", "tp",
                         "m_s", "tp_s", "m_i", "tp_i", "idtp", "idfp", "idfn", "misassociations"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "ie_steps": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3},
        },
    },
}


def evaluate(gt: FrameLog, hyp: FrameLog, events: Sequence[AssociationEvent] | None = None,
             seed: int | None = None) -> MetricsReport:
    ids = id_measures(gt, hyp)
    mm = count_mismatches(gt, hyp)
    ie = None
    steps: list = []
    if events:
        res = inference_error(events, identities_for_events(events, gt))
        ie, steps = res.value, res.steps
    counts = {
        "fn": mm.fn, "fp": mm.fp, "fragmentations": mm.fragmentations,
        "num_gt": mm.num_gt, "num_hyp": mm.num_hyp, "tp": mm.tp,
        "m_s": mm.m_s, "tp_s": mm.tp_s, "m_i": mm.m_i, "tp_i": mm.tp_i,
        "idtp": ids.idtp, "idfp": ids.idfp, "idfn": ids.idfn,
        "misassociations": sum(m for _, m, _ in steps),
    }
    return MetricsReport(
        ie=ie, idp=ids.idp, idr=ids.idr, idf1=ids.idf1,
        mota=mota(mm.fn, mm.fp, mm.fragmentations, mm.num_gt) if mm.num_gt else 0.0,
        mcta=mcta(mm.f1, mm.m_s, mm.tp_s, mm.m_i, mm.tp_i),
        counts=counts, ie_steps=steps, seed=seed,
    )
