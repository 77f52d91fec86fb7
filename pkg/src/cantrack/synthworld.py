"""Deterministic multi-camera scenarios with ground truth.

Identities walk through a set of non-overlapping cameras.  Each visit is a
segment with constant-velocity box motion; the time between visits is a blind
spot.  Appearance features come from a per-identity prototype on the unit
sphere, a fixed per-camera bias, Gaussian noise, and a resolution-dependent
quality factor: small (far away) boxes carry less identity signal.

Random streams are split by purpose so they can be replayed independently:
``[seed, 0]`` prototypes, ``[seed, 1]`` occlusion draws, ``[seed, 2]``
embedding noise, ``[seed, 3]`` path planning.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from cantrack.association import BBox, Detection
from cantrack.errors import ValidationError
from cantrack.metrics import FrameLog

STREAM_PROTOTYPES, STREAM_OCCLUSION, STREAM_NOISE, STREAM_PATHS = 0, 1, 2, 3


@dataclass
class Segment:
    camera: int
    entry_frame: int
    exit_frame: int  # inclusive
    start_box: tuple[float, float, float, float]  # x, y, w, h at entry
    end_box: tuple[float, float, float, float]  # at exit

    @property
    def num_frames(self) -> int:
        return self.exit_frame - self.entry_frame + 1

    def box_at(self, frame: int) -> BBox:
        if self.num_frames == 1:
            return BBox(*self.start_box)
        a = (frame - self.entry_frame) / (self.exit_frame - self.entry_frame)
        s, e = np.asarray(self.start_box), np.asarray(self.end_box)
        return BBox(*(float(v) for v in (1 - a) * s + a * e))


@dataclass
class WorldConfig:
    num_cameras: int = 2
    frame_w: int = 1920
    frame_h: int = 1080
    fps: int = 60
    num_identities: int = 5
    num_frames: int = 300
    embedding_dim: int = 64
    sigma: float = 0.0  # expected norm of the per-detection noise vector
    beta: float = 0.0  # norm of the per-camera bias vector
    occlusion: float = 0.0
    seed: int = 0
    # resolution-dependent quality: signal scale = min(1, h / quality_ref_height) ** quality_exponent
    quality_ref_height: float = 300.0
    quality_exponent: float = 0.0
    # path planner, used when ``paths`` is None
    visits_per_identity: int = 3
    min_segment_len: int = 80
    max_segment_len: int = 160
    min_gap: int = 20
    max_gap: int = 80
    min_height: float = 60.0
    max_height: float = 400.0
    paths: list[list[Segment]] | None = None

    def validate(self) -> None:
        if self.num_cameras < 1:
            raise ValidationError("num_cameras must be >= 1")
        if self.num_identities < 1:
            raise ValidationError("num_identities must be >= 1")
        if self.embedding_dim < 2:
            raise ValidationError("embedding_dim must be >= 2")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if not 0 <= self.occlusion < 1:
            raise ValidationError("occlusion must lie in [0, 1)")
        if self.quality_ref_height <= 0 or self.quality_exponent < 0:
            raise ValidationError("quality_ref_height must be > 0 and quality_exponent >= 0")
        if not 1 <= self.min_segment_len <= self.max_segment_len:
            raise ValidationError("need 1 <= min_segment_len <= max_segment_len")
        if not 0 <= self.min_gap <= self.max_gap:
            raise ValidationError("need 0 <= min_gap <= max_gap")
        if not 0 < self.min_height <= self.max_height:
            raise ValidationError("need 0 < min_height <= max_height")
        if self.paths is not None:
            if len(self.paths) != self.num_identities:
                raise ValidationError(f"paths lists {len(self.paths)} identities, expected {self.num_identities}")
            for ident, segs in enumerate(self.paths):
                _validate_segments(ident, segs, self)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.paths is not None:
            d["paths"] = [[asdict(s) for s in segs] for segs in self.paths]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        if d.get("paths") is not None:
            try:
                d["paths"] = [[Segment(int(s["camera"]), int(s["entry_frame"]), int(s["exit_frame"]),
                                       tuple(map(float, s["start_box"])), tuple(map(float, s["end_box"])))
                               for s in segs] for segs in d["paths"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"paths: malformed segment ({exc})") from exc
        for f in fields(cls):
            if f.name in d and f.name != "paths":
                want = type(getattr(cls(), f.name))
                try:
                    d[f.name] = want(d[f.name])
                except (TypeError, ValueError) as exc:
                    raise ValidationError(f"{f.name}: cannot read {d[f.name]!r} as {want.__name__}") from exc
        return cls(**d)


def _validate_segments(ident: int, segs: list[Segment], cfg: WorldConfig) -> None:
    for s in segs:
        if not 1 <= s.camera <= cfg.num_cameras:
            raise ValidationError(f"identity {ident}: camera {s.camera} outside [1, {cfg.num_cameras}]")
        if s.exit_frame < s.entry_frame or s.entry_frame < 0:
            raise ValidationError(f"identity {ident}: segment frames {s.entry_frame}..{s.exit_frame} invalid")
        for x, y, w, h in (s.start_box, s.end_box):
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > cfg.frame_w or y + h > cfg.frame_h:
                raise ValidationError(f"identity {ident}: box {(x, y, w, h)} leaves the frame")
    for a in range(len(segs)):
        for b in range(a + 1, len(segs)):
            sa, sb = segs[a], segs[b]
            if sa.camera == sb.camera and sa.entry_frame <= sb.exit_frame and sb.entry_frame <= sa.exit_frame:
                raise ValidationError(f"identity {ident}: overlapping segments in camera {sa.camera}")


def plan_paths(cfg: WorldConfig) -> list[list[Segment]]:
    """Random visit sequences; identity i walks in its own vertical lane of every camera.

    Lanes keep boxes of different identities disjoint.  Within a visit the
    person walks toward or away from the camera, so the box grows or shrinks.
    """
    rng = np.random.default_rng([cfg.seed, STREAM_PATHS])
    lane_w = cfg.frame_w / cfg.num_identities
    aspect = 0.4
    h_cap = min(cfg.max_height, 0.9 * lane_w / aspect, cfg.frame_h / 1.6 * 0.9)
    h_lo = min(cfg.min_height, h_cap)
    paths = []
    for ident in range(cfg.num_identities):
        segs: list[Segment] = []
        t = int(rng.integers(0, cfg.max_gap + 1))
        prev_cam = None
        for _ in range(cfg.visits_per_identity):
            length = int(rng.integers(cfg.min_segment_len, cfg.max_segment_len + 1))
            if t + length > cfg.num_frames:
                break
            choices = [c for c in range(1, cfg.num_cameras + 1) if c != prev_cam] or [prev_cam]
            cam = int(choices[int(rng.integers(len(choices)))])
            h_small = float(rng.uniform(h_lo, h_lo + 0.25 * (h_cap - h_lo)))
            h_large = float(rng.uniform(h_lo + 0.6 * (h_cap - h_lo), h_cap))
            heights = (h_small, h_large) if rng.random() < 0.5 else (h_large, h_small)
            boxes = []
            for h in heights:
                w = aspect * h
                x = (ident + 0.5) * lane_w - w / 2
                bottom = min(0.3 * cfg.frame_h + 1.6 * h, cfg.frame_h - 1.0)
                boxes.append((x, bottom - h, w, h))
            segs.append(Segment(cam, t, t + length - 1, boxes[0], boxes[1]))
            prev_cam = cam
            t += length + int(rng.integers(cfg.min_gap, cfg.max_gap + 1))
        paths.append(segs)
    return paths


def make_prototypes(num: int, dim: int, rng: np.random.Generator, max_cos: float = 0.5,
                    max_tries: int = 10000) -> np.ndarray:
    """Unit vectors with pairwise cosine below ``max_cos`` (rejection sampling)."""
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < num:
        tries += 1
        if tries > max_tries:
            raise ValidationError(f"cannot place {num} prototypes with cosine < {max_cos} in dimension {dim}")
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) < max_cos for p in protos):
            protos.append(v)
    return np.array(protos)


def camera_bias_direction(camera: int, dim: int) -> np.ndarray:
    """Unit vector fixed by camera id and dimension alone."""
    v = np.random.default_rng([camera, dim, 7919]).standard_normal(dim)
    return v / np.linalg.norm(v)


def quality_for_height(h: float, cfg: WorldConfig) -> float:
    return min(1.0, h / cfg.quality_ref_height) ** cfg.quality_exponent


def sample_embedding(prototype: np.ndarray, camera: int, sigma: float, beta: float,
                     rng: np.random.Generator, quality: float = 1.0) -> np.ndarray:
    """normalize(quality * prototype + beta * camera_bias + noise), noise ~ N(0, sigma^2 / d) per entry."""
    if sigma < 0 or beta < 0:
        raise ValidationError("sigma and beta must be non-negative")
    d = prototype.shape[0]
    noise = rng.standard_normal(d) * (sigma / np.sqrt(d))
    if sigma == 0 and beta == 0:
        return prototype.copy()
    v = quality * prototype + beta * camera_bias_direction(camera, d) + noise
    return v / np.linalg.norm(v)


@dataclass
class SyntheticDataset:
    detections: list[Detection]
    features: np.ndarray  # (N, d); row k belongs to the detection with det_id k
    ground_truth: FrameLog
    config: WorldConfig
    prototypes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def generate_scenario(config: WorldConfig) -> SyntheticDataset:
    config.validate()
    cfg = WorldConfig.from_dict(config.to_dict())  # private copy
    if cfg.paths is None:
        cfg.paths = plan_paths(cfg)
        for ident, segs in enumerate(cfg.paths):
            _validate_segments(ident, segs, cfg)

    protos = make_prototypes(cfg.num_identities, cfg.embedding_dim,
                             np.random.default_rng([cfg.seed, STREAM_PROTOTYPES]))
    occ_rng = np.random.default_rng([cfg.seed, STREAM_OCCLUSION])
    noise_rng = np.random.default_rng([cfg.seed, STREAM_NOISE])

    raw = []
    for ident, segs in enumerate(cfg.paths):
        for seg in segs:
            visible = occ_rng.random(seg.num_frames) >= cfg.occlusion
            for k in np.flatnonzero(visible):
                frame = seg.entry_frame + int(k)
                box = seg.box_at(frame)
                feat = sample_embedding(protos[ident], seg.camera, cfg.sigma, cfg.beta, noise_rng,
                                        quality_for_height(box.h, cfg))
                raw.append((frame, seg.camera, ident, box, feat))
    raw.sort(key=lambda r: (r[0], r[1], r[2]))

    detections = []
    gt = FrameLog()
    features = np.zeros((len(raw), cfg.embedding_dim))
    for det_id, (frame, cam, ident, box, feat) in enumerate(raw):
        features[det_id] = feat
        detections.append(Detection(cam, frame, box, features[det_id], ident, det_id))
        gt.add(cam, frame, ident, box)
    return SyntheticDataset(detections, features, gt, cfg, protos)


def benchmark_config(seed: int) -> WorldConfig:
    """The standard comparison scenario: 8 identities, 4 cameras, d=64, noisy and biased."""
    return WorldConfig(
        num_cameras=4, num_identities=8, num_frames=700, embedding_dim=64,
        sigma=0.35, beta=0.3, occlusion=0.1, seed=seed,
        quality_ref_height=300.0, quality_exponent=3.0,
        visits_per_identity=4,
    )
