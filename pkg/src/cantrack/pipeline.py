"""Glue between the generator, trainer, tracker and metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cantrack.aggregation import CanModel, GalleryTemplate, MetaNorm, TrainConfig, fit, new_model
from cantrack.association import Detection, TrackResult, track
from cantrack.errors import ValidationError
from cantrack.metrics import FrameLog, MetricsReport, evaluate
from cantrack.synthworld import WorldConfig, benchmark_config, generate_scenario

log = logging.getLogger(__name__)


def templates_from_detections(detections: Sequence[Detection], max_gap: int = 30) -> list[GalleryTemplate]:
    """Ground-truth trajectories: one template per identity per camera visit.

    A visit ends when the identity is unseen in that camera for more than
    ``max_gap`` frames.
    """
    groups: dict[tuple[int, int], list[Detection]] = {}
    for d in detections:
        if d.gt_identity is None:
            raise ValidationError(f"detection {d.det_id} has no gt_identity; training needs labels")
        groups.setdefault((d.gt_identity, d.camera), []).append(d)
    templates = []
    for (ident, _), dets in sorted(groups.items()):
        dets.sort(key=lambda d: d.frame)
        run = [dets[0]]
        for d in dets[1:]:
            if d.frame - run[-1].frame > max_gap:
                templates.append(run)
                run = []
            run.append(d)
        templates.append(run)
    out = []
    for r, run in enumerate(templates):
        out.append(GalleryTemplate(np.vstack([d.feature for d in run]), [d.meta() for d in run],
                                   trajectory_index=r, class_label=run[0].gt_identity))
    return out


def hypothesis_log(result: TrackResult) -> FrameLog:
    hyp = FrameLog()
    for tr in result.trajectories:
        for d in tr.detections:
            hyp.add(d.camera, d.frame, tr.global_identity, d.box)
    return hyp


def train_on_detections(detections: Sequence[Detection], norm: MetaNorm, config: TrainConfig,
                        model: CanModel | None = None, callback=None) -> tuple[CanModel, list[float]]:
    templates = templates_from_detections(detections)
    identities = {t.class_label for t in templates}
    if len(identities) < 2:
        raise ValidationError(f"training needs at least 2 identities, found {len(identities)}")
    if model is None:
        model = new_model(templates, norm, config)
    history = fit(model, templates, config, callback)
    return model, history


def norm_for_world(cfg: WorldConfig) -> MetaNorm:
    return MetaNorm(float(cfg.frame_w), float(cfg.frame_h), cfg.num_cameras)


@dataclass
class ComparisonResult:
    seed: int
    can: MetricsReport
    mean: MetricsReport
    final_cost: float


BENCHMARK_TRAIN = TrainConfig(hidden=(64, 32, 16), lr=0.01, momentum=0.9, steps=600,
                              positives_per_batch=8, max_template_len=12)


def compare_can_vs_mean(seed: int, train: TrainConfig = BENCHMARK_TRAIN, threads: int = 1) -> ComparisonResult:
    """Train on one benchmark world, then track a fresh world with learned and uniform weights."""
    train_world = generate_scenario(benchmark_config(10_000 + seed))
    test_world = generate_scenario(benchmark_config(seed))
    norm = norm_for_world(test_world.config)
    cfg = TrainConfig(**{**train.__dict__, "seed": seed})
    model, history = train_on_detections(train_world.detections, norm, cfg)
    reports = {}
    for mode, m in (("can", model), ("mean", None)):
        res = track(test_world.detections, m, norm, threads=threads)
        reports[mode] = evaluate(test_world.ground_truth, hypothesis_log(res), res.events, seed=seed)
    return ComparisonResult(seed, reports["can"], reports["mean"], history[-1] if history else float("nan"))
