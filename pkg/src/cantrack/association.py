"""Greedy data association: single-camera tracklets, then inter-camera merging."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cantrack.aggregation import CanModel, DetectionMeta, MetaNorm, cosine_similarity, evalnet_input
from cantrack.errors import ContractError, ValidationError
from cantrack.nn_core import mlp_forward, segment_softmax

log = logging.getLogger(__name__)


class _Forbidden:
    """Marker for a gated-out association; never takes part in arithmetic."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "FORBIDDEN"


FORBIDDEN = _Forbidden()


@dataclass(frozen=True)
class BBox:
    x: float  # top-left
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box size must be positive, got w={self.w}, h={self.h}")


@dataclass
class Detection:
    camera: int
    frame: int
    box: BBox
    feature: np.ndarray
    gt_identity: int | None = None
    det_id: int = -1  # row in the feature file

    def meta(self) -> DetectionMeta:
        b = self.box
        return DetectionMeta.from_box(b.x, b.y, b.w, b.h, self.camera)


@dataclass
class Trajectory:
    track_id: int
    camera: int
    detections: list[Detection] = field(default_factory=list)
    global_identity: int | None = None

    @property
    def first_frame(self) -> int:
        return self.detections[0].frame

    @property
    def last_frame(self) -> int:
        return self.detections[-1].frame

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    def representative(self) -> Detection:
        """Temporally middle detection, used as the probe for this trajectory."""
        if not self.detections:
            raise ContractError(f"trajectory {self.track_id} is empty")
        return self.detections[len(self.detections) // 2]


@dataclass
class AssociationEvent:
    time: int
    camera: int
    det_id: int
    decision: str  # "matched" | "new_track"
    track_id: int
    score: float | None = None
    box: BBox | None = None
    correct: bool | None = None

    def to_dict(self) -> dict:
        d = {"time": self.time, "camera": self.camera, "det_id": self.det_id,
             "decision": self.decision, "track_id": self.track_id, "score": self.score}
        if self.box is not None:
            d["box"] = [self.box.x, self.box.y, self.box.w, self.box.h]
        if self.correct is not None:
            d["correct"] = self.correct
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AssociationEvent":
        if d.get("decision") not in ("matched", "new_track"):
            raise ValidationError(f"unknown decision {d.get('decision')!r}")
        box = BBox(*d["box"]) if d.get("box") is not None else None
        return cls(int(d["time"]), int(d["camera"]), int(d["det_id"]), d["decision"],
                   int(d["track_id"]), d.get("score"), box, d.get("correct"))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))  # rounding can overshoot for equal boxes


def gate(a: BBox, b: BBox):
    """1.0 when the boxes overlap with IoU >= 0.5, else FORBIDDEN."""
    return 1.0 if iou(a, b) >= 0.5 else FORBIDDEN


def sct_score(prev: Detection, cur: Detection):
    g = gate(prev.box, cur.box)
    if g is FORBIDDEN:
        return FORBIDDEN
    return cosine_similarity(prev.feature, cur.feature) + g


@dataclass
class ScoreMatrix:
    values: np.ndarray
    allowed: np.ndarray  # False where the entry is forbidden

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence], n_cols: int | None = None) -> "ScoreMatrix":
        n_rows = len(entries)
        if n_cols is None:
            n_cols = len(entries[0]) if n_rows else 0
        values = np.zeros((n_rows, n_cols))
        allowed = np.zeros((n_rows, n_cols), dtype=bool)
        for i, row in enumerate(entries):
            for j, v in enumerate(row):
                if v is not FORBIDDEN:
                    values[i, j] = v
                    allowed[i, j] = True
        return cls(values, allowed)

    @property
    def shape(self):
        return self.values.shape


def greedy_associate(scores, tau: float) -> tuple[list[tuple[int, int]], list[int]]:
    """Repeatedly take the best remaining (row, col) with score >= tau.

    ``scores`` is a :class:`ScoreMatrix`, a 2-D array, or nested lists that may
    contain FORBIDDEN.  Ties go to the lower row, then the lower column.
    Returns the matches in selection order and the unmatched columns.
    """
    if not isinstance(scores, ScoreMatrix):
        scores = ScoreMatrix.from_entries(scores)
    n_rows, n_cols = scores.shape
    rows, cols = np.nonzero(scores.allowed & (scores.values >= tau))
    vals = scores.values[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    used_r, used_c = set(), set()
    matches = []
    for k in order:
        r, c = int(rows[k]), int(cols[k])
        if r in used_r or c in used_c:
            continue
        used_r.add(r)
        used_c.add(c)
        matches.append((r, c))
    unmatched = [c for c in range(n_cols) if c not in used_c]
    return matches, unmatched


def window_partition(start: int, stop: int, window_len: int) -> list[tuple[int, int]]:
    """Half-overlapping windows [s, s+L) at stride L/2 covering [start, stop).

    The last window is truncated to the range when the range is not a whole
    number of half-windows.
    """
    if window_len < 2 or window_len % 2:
        raise ValidationError(f"window length must be even and >= 2, got {window_len}")
    if stop <= start:
        return []
    half = window_len // 2
    windows = []
    s = start
    while s == start or s + half < stop:
        windows.append((s, min(s + window_len, stop)))
        s += half
    return windows


def build_sct_trajectories(detections: Iterable[Detection], window_len: int = 60, tau_sct: float = 0.2,
                           first_track_id: int = 0) -> tuple[list[Trajectory], list[AssociationEvent]]:
    """Link detections into single-camera trajectories.

    Frames are visited window by window.  A tracklet stays open while its last
    detection lies inside the current window (which includes the half shared
    with the previous window); each incoming frame's detections are greedily
    matched to open tracklets by appearance + IoU gate, and unmatched
    detections start new tracklets.
    """
    by_cam: dict[int, list[Detection]] = {}
    for det in detections:
        by_cam.setdefault(det.camera, []).append(det)

    trajectories: list[Trajectory] = []
    events: list[AssociationEvent] = []
    next_id = first_track_id
    for cam in sorted(by_cam):
        dets = sorted(by_cam[cam], key=lambda d: (d.frame, d.det_id))
        by_frame: dict[int, list[Detection]] = {}
        for d in dets:
            by_frame.setdefault(d.frame, []).append(d)
        frames = sorted(by_frame)
        cam_tracks: list[Trajectory] = []
        done_until = frames[0]
        for w_start, w_end in window_partition(frames[0], frames[-1] + 1, window_len):
            for t in range(max(w_start, done_until), w_end):
                incoming = by_frame.get(t)
                if not incoming:
                    continue
                open_tracks = [tr for tr in cam_tracks if w_start <= tr.last_frame < t]
                entries = [[sct_score(tr.last, d) for d in incoming] for tr in open_tracks]
                matches, unmatched = greedy_associate(
                    ScoreMatrix.from_entries(entries, n_cols=len(incoming)), tau_sct)
                for r, c in matches:
                    tr, d = open_tracks[r], incoming[c]
                    tr.detections.append(d)
                    events.append(AssociationEvent(t, cam, d.det_id, "matched", tr.track_id,
                                                   float(entries[r][c]), d.box))
                for c in unmatched:
                    d = incoming[c]
                    tr = Trajectory(next_id, cam, [d])
                    next_id += 1
                    cam_tracks.append(tr)
                    events.append(AssociationEvent(t, cam, d.det_id, "new_track", tr.track_id, None, d.box))
            done_until = w_end
        trajectories.extend(cam_tracks)
    events.sort(key=lambda e: (e.time, e.camera, e.det_id))
    return trajectories, events


# ---------------------------------------------------------------------------
# inter-camera


def overlapping_same_camera(a: Trajectory, b: Trajectory) -> bool:
    return a.camera == b.camera and a.first_frame <= b.last_frame and b.first_frame <= a.last_frame


def _gallery_scores(a: Trajectory, probes: list[Detection], model: CanModel | None,
                    norm: MetaNorm) -> np.ndarray:
    """cos(probe_b, F_a(probe_b)) for every probe b against gallery a."""
    G = np.vstack([d.feature for d in a.detections]).astype(np.float64)
    n = G.shape[0]
    if model is None:
        F = np.tile(G.mean(axis=0), (len(probes), 1))
    else:
        metas = [d.meta() for d in a.detections]
        X = np.vstack([evalnet_input(G, metas, p.meta(), norm) for p in probes])
        logits, _ = mlp_forward(model.evalnet, X, mode="infer")
        seg = np.repeat(np.arange(len(probes)), n)
        e = segment_softmax(logits, seg, len(probes)).reshape(len(probes), n)
        F = e @ G
    P = np.vstack([p.feature for p in probes]).astype(np.float64)
    return np.array([cosine_similarity(p, f) for p, f in zip(P, F)])


def ict_score_matrix(trajectories: Sequence[Trajectory], model: CanModel | None = None,
                     norm: MetaNorm | None = None, threads: int = 1) -> ScoreMatrix:
    """Symmetric trajectory-pair scores.

    Each ordered pair scores the representative detection of one trajectory
    against the other's aggregated template; the two orders are averaged.
    ``model=None`` aggregates with uniform weights (mean pooling).
    Same-camera, temporally overlapping pairs and the diagonal are forbidden.
    """
    if norm is None:
        norm = model.norm if model is not None else MetaNorm()
    n = len(trajectories)
    for tr in trajectories:
        if not tr.detections:
            raise ContractError(f"trajectory {tr.track_id} is empty")
    probes = [tr.representative() for tr in trajectories]

    def row(a):
        return _gallery_scores(trajectories[a], probes, model, norm)

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            directed = np.vstack(list(pool.map(row, range(n))))
        # pool.map preserves order, so the result does not depend on scheduling
    else:
        directed = np.vstack([row(a) for a in range(n)]) if n else np.zeros((0, 0))
    values = (directed + directed.T) / 2.0 if n else directed
    allowed = np.ones((n, n), dtype=bool)
    for i in range(n):
        allowed[i, i] = False
        for j in range(i + 1, n):
            if overlapping_same_camera(trajectories[i], trajectories[j]):
                allowed[i, j] = allowed[j, i] = False
    return ScoreMatrix(values, allowed)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        lo, hi = min(ra, rb), max(ra, rb)
        self.parent[hi] = lo
        return lo


def ict_merge(trajectories: Sequence[Trajectory], scores: ScoreMatrix, tau_ict: float = 0.5
              ) -> tuple[list[int], list[AssociationEvent]]:
    """Greedy merging of trajectories into global identities.

    Pairs are visited by decreasing score (ties: lower index first); a pair at
    or above ``tau_ict`` joins its two groups unless that would put two
    same-camera, time-overlapping trajectories into one identity.  Returns the
    global identity per trajectory (numbered by first appearance in the input
    order) and one event per trajectory: ``new_track`` for the earliest
    trajectory of each identity, ``matched`` for the rest.
    """
    n = len(trajectories)
    if scores.shape != (n, n):
        raise ContractError(f"score matrix {scores.shape} does not fit {n} trajectories")
    if not np.allclose(scores.values, scores.values.T) or not np.array_equal(scores.allowed, scores.allowed.T):
        raise ContractError("ICT score matrix must be symmetric")
    iu, ju = np.triu_indices(n, k=1)
    keep = scores.allowed[iu, ju] & (scores.values[iu, ju] >= tau_ict)
    iu, ju = iu[keep], ju[keep]
    vals = scores.values[iu, ju]
    order = np.lexsort((ju, iu, -vals))

    uf = UnionFind(n)
    members = {i: [i] for i in range(n)}
    link_score: dict[int, float] = {}
    for k in order:
        a, b = int(iu[k]), int(ju[k])
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        if any(overlapping_same_camera(trajectories[x], trajectories[y])
               for x in members[ra] for y in members[rb]):
            continue
        root = uf.union(ra, rb)
        other = rb if root == ra else ra
        members[root].extend(members.pop(other))
        link_score.setdefault(a, float(vals[k]))
        link_score.setdefault(b, float(vals[k]))

    label_of_root: dict[int, int] = {}
    labels = []
    for i in range(n):
        labels.append(label_of_root.setdefault(uf.find(i), len(label_of_root)))

    events = []
    seen: set[int] = set()
    for i in sorted(range(n), key=lambda i: (trajectories[i].first_frame, trajectories[i].camera, i)):
        tr = trajectories[i]
        first = tr.detections[0]
        decision = "matched" if labels[i] in seen else "new_track"
        seen.add(labels[i])
        events.append(AssociationEvent(tr.first_frame, tr.camera, first.det_id, decision, labels[i],
                                       link_score.get(i) if decision == "matched" else None, first.box))
    return labels, events


def identity_event_log(trajectories: Sequence[Trajectory]) -> list[AssociationEvent]:
    """Replay every detection in time order against the final identities.

    A detection is ``new_track`` when its global identity has no earlier
    detection, otherwise ``matched`` to that identity.  This is the per-detection
    log scored by the inference error.
    """
    items = []
    for tr in trajectories:
        gid = tr.global_identity if tr.global_identity is not None else tr.track_id
        for d in tr.detections:
            items.append((d.frame, d.camera, d.det_id, gid, d))
    items.sort(key=lambda x: x[:3])
    seen: set[int] = set()
    events = []
    for frame, cam, det_id, gid, d in items:
        decision = "matched" if gid in seen else "new_track"
        seen.add(gid)
        events.append(AssociationEvent(frame, cam, det_id, decision, gid, None, d.box))
    return events


@dataclass
class TrackResult:
    trajectories: list[Trajectory]
    sct_events: list[AssociationEvent]
    ict_events: list[AssociationEvent]
    events: list[AssociationEvent]


def track(detections: Sequence[Detection], model: CanModel | None = None, norm: MetaNorm | None = None,
          window_len: int = 60, tau_sct: float = 0.2, tau_ict: float = 0.5, threads: int = 1) -> TrackResult:
    """Full pipeline: SCT tracklets, then ICT merging (model=None means mean pooling)."""
    trajectories, sct_events = build_sct_trajectories(detections, window_len, tau_sct)
    scores = ict_score_matrix(trajectories, model, norm, threads)
    labels, ict_events = ict_merge(trajectories, scores, tau_ict)
    for tr, gid in zip(trajectories, labels):
        tr.global_identity = gid
    log.info("%d detections -> %d tracklets -> %d identities",
             len(detections), len(trajectories), len(set(labels)))
    return TrackResult(trajectories, sct_events, ict_events, identity_event_log(trajectories))
