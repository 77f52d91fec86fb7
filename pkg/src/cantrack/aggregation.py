"""Template aggregation with EvalNet weights, the joint match/identity cost, and training.

A gallery template (one trajectory) is summarized into a single feature
F = sum_k e_k g_k, where e_k is a softmax over EvalNet logits computed from
[g_k || gallery meta_k || probe meta].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from cantrack.errors import ContractError, DomainError, ValidationError
from cantrack.nn_core import (
    MlpParams,
    backprop,
    init_mlp,
    mlp_forward,
    segment_softmax,
    sgd_momentum_step,
    softmax_normalize,
    update_running_stats,
)

log = logging.getLogger(__name__)

META_LEN = 5  # w, h, x, y, camID
PAIRED_META_LEN = 2 * META_LEN


@dataclass(frozen=True)
class DetectionMeta:
    w: float
    h: float
    x: float  # box center, pixels
    y: float
    cam: int

    @classmethod
    def from_box(cls, x: float, y: float, w: float, h: float, cam: int) -> "DetectionMeta":
        """Build from a top-left anchored box."""
        return cls(w, h, x + w / 2.0, y + h / 2.0, cam)


@dataclass(frozen=True)
class MetaNorm:
    """Constants that map raw metadata into (0, 1]."""

    frame_w: float = 1920.0
    frame_h: float = 1080.0
    num_cameras: int = 8

    def to_dict(self) -> dict:
        return {"frame_w": self.frame_w, "frame_h": self.frame_h, "num_cameras": self.num_cameras}


def normalize_meta(meta: DetectionMeta, norm: MetaNorm) -> np.ndarray:
    if not 1 <= meta.cam <= norm.num_cameras:
        raise ValidationError(f"camID {meta.cam} outside [1, {norm.num_cameras}]")
    if meta.w <= 0 or meta.h <= 0:
        raise ValidationError(f"box size must be positive, got w={meta.w}, h={meta.h}")
    return np.array([
        meta.w / norm.frame_w,
        meta.h / norm.frame_h,
        meta.x / norm.frame_w,
        meta.y / norm.frame_h,
        meta.cam / norm.num_cameras,
    ])


def build_meta_rows(gallery_metas: Sequence[DetectionMeta], probe_meta: DetectionMeta,
                    norm: MetaNorm) -> np.ndarray:
    """One length-10 row per gallery detection: [gallery meta, probe meta]."""
    if len(gallery_metas) == 0:
        raise ValidationError("gallery metadata list is empty")
    probe = normalize_meta(probe_meta, norm)
    rows = np.empty((len(gallery_metas), PAIRED_META_LEN))
    for k, m in enumerate(gallery_metas):
        rows[k, :META_LEN] = normalize_meta(m, norm)
        rows[k, META_LEN:] = probe
    return rows


@dataclass
class GalleryTemplate:
    features: np.ndarray  # (n, d)
    metas: list[DetectionMeta]
    trajectory_index: int = 0
    class_label: int | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if len(self.metas) != self.features.shape[0] or len(self.metas) == 0:
            raise ValidationError(
                f"template needs matching, non-empty features/metas (got {self.features.shape[0]} and {len(self.metas)})")

    def __len__(self):
        return len(self.metas)

    def subset(self, idx) -> "GalleryTemplate":
        idx = list(idx)
        return GalleryTemplate(self.features[idx], [self.metas[i] for i in idx],
                               self.trajectory_index, self.class_label)


@dataclass
class ProbeSample:
    feature: np.ndarray
    meta: DetectionMeta
    class_label: int | None = None


@dataclass
class ClassifierHead:
    weight: np.ndarray  # (C, d)
    bias: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weight.copy(), self.bias.copy())


def init_head(num_classes: int, dim: int, seed: int | np.random.Generator = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (num_classes + dim))
    return ClassifierHead(rng.uniform(-limit, limit, size=(num_classes, dim)), np.zeros(num_classes))


def evalnet_input(features: np.ndarray, gallery_metas: Sequence[DetectionMeta],
                  probe_meta: DetectionMeta, norm: MetaNorm) -> np.ndarray:
    return np.hstack([np.atleast_2d(features), build_meta_rows(gallery_metas, probe_meta, norm)])


def evalnet_weights(template: GalleryTemplate, probe: ProbeSample | DetectionMeta,
                    params: MlpParams, norm: MetaNorm = MetaNorm()) -> np.ndarray:
    """Simplex weights over the template's detections, in infer mode."""
    probe_meta = probe.meta if isinstance(probe, ProbeSample) else probe
    X = evalnet_input(template.features, template.metas, probe_meta, norm)
    if X.shape[1] != params.layers[0].in_dim:
        raise ContractError(f"EvalNet expects width {params.layers[0].in_dim}, template gives {X.shape[1]}")
    logits, _ = mlp_forward(params, X, mode="infer")
    return softmax_normalize(logits)


def aggregate_template(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.shape[0] != features.shape[0]:
        raise ContractError(f"{weights.shape[0]} weights for {features.shape[0]} features")
    if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-6:
        raise ContractError("aggregation weights must lie on the simplex")
    return weights @ features


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def mse_match_loss(probe: np.ndarray, F: np.ndarray, Y: int) -> float:
    return (cosine_similarity(probe, F) - Y) ** 2


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cce_loss(head: ClassifierHead, F: np.ndarray, class_label: int) -> float:
    if not 0 <= class_label < head.num_classes:
        raise ValidationError(f"class label {class_label} outside [0, {head.num_classes})")
    logits = head.weight @ np.asarray(F, dtype=np.float64) + head.bias
    return float(-_log_softmax(logits)[class_label])


# ---------------------------------------------------------------------------
# batched cost


@dataclass
class TrainBatch:
    """Detections of every (probe i, gallery j) pair stacked into one matrix.

    Row k belongs to pair segment ``segment[k] = i * m_g + j`` and to template
    ``r[k] = j``; softmax and aggregation never mix segments.
    """

    X: np.ndarray  # (N, d + 10) EvalNet input
    G: np.ndarray  # (N, d) gallery features
    segment: np.ndarray
    r: np.ndarray
    probes: np.ndarray  # (m_p, d)
    Y: np.ndarray  # (m_p, m_g)
    classes: np.ndarray  # (m_g,) head class index per template

    @property
    def m_p(self) -> int:
        return self.probes.shape[0]

    @property
    def m_g(self) -> int:
        return self.Y.shape[1]


def build_train_batch(probes: Sequence[ProbeSample], galleries: Sequence[GalleryTemplate],
                      norm: MetaNorm, class_index: dict[int, int] | None = None,
                      Y: np.ndarray | None = None) -> TrainBatch:
    if not probes or not galleries:
        raise DomainError("a batch needs at least one probe and one gallery template")
    m_p, m_g = len(probes), len(galleries)
    if Y is None:
        if any(p.class_label is None for p in probes) or any(g.class_label is None for g in galleries):
            raise ValidationError("match labels need class labels on every probe and template")
        Y = np.array([[int(p.class_label == g.class_label) for g in galleries] for p in probes])
    Y = np.asarray(Y)
    if Y.shape != (m_p, m_g):
        raise ValidationError(f"match labels have shape {Y.shape}, expected {(m_p, m_g)}")
    if class_index is None:
        class_index = {c: i for i, c in enumerate(sorted({g.class_label for g in galleries}))}
    classes = np.array([class_index[g.class_label] for g in galleries])

    X_parts, G_parts, seg_parts, r_parts = [], [], [], []
    for i, p in enumerate(probes):
        for j, g in enumerate(galleries):
            X_parts.append(evalnet_input(g.features, g.metas, p.meta, norm))
            G_parts.append(g.features)
            seg_parts.append(np.full(len(g), i * m_g + j))
            r_parts.append(np.full(len(g), j))
    return TrainBatch(
        X=np.vstack(X_parts), G=np.vstack(G_parts),
        segment=np.concatenate(seg_parts), r=np.concatenate(r_parts),
        probes=np.vstack([np.asarray(p.feature, dtype=np.float64) for p in probes]),
        Y=Y.astype(np.float64), classes=classes,
    )


def validate_batch(batch: TrainBatch) -> None:
    counts = np.bincount(batch.r, minlength=batch.m_g)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValidationError(f"trajectory index r={int(empty[0])} has no detections")
    seg_counts = np.bincount(batch.segment, minlength=batch.m_p * batch.m_g)
    if np.any(seg_counts == 0):
        raise ValidationError("a probe/template pair has no detections")


def cost_and_grads(batch: TrainBatch, params: MlpParams, head: ClassifierHead,
                   mode: str = "train", need_grads: bool = True):
    """J = 1/(m_p m_g) * sum_ij [ (cos(P_i, F_ij) - Y_ij)^2 + CE(head(F_ij), class_j) ].

    Returns ``(J, grads, cache)``; grads cover EvalNet and head parameters.
    """
    S = batch.m_p * batch.m_g
    logits, cache = mlp_forward(params, batch.X, mode=mode)
    e = segment_softmax(logits, batch.segment, S)
    F = np.zeros((S, batch.G.shape[1]))
    np.add.at(F, batch.segment, e[:, None] * batch.G)

    P = np.repeat(batch.probes, batch.m_g, axis=0)  # segment s = i*m_g + j
    Y = batch.Y.reshape(-1)
    cls = np.tile(batch.classes, batch.m_p)
    nP = np.linalg.norm(P, axis=1)
    nF = np.linalg.norm(F, axis=1)
    if np.any(nP == 0) or np.any(nF == 0):
        raise DomainError("cosine similarity of a zero vector")
    cos = np.einsum("sd,sd->s", P, F) / (nP * nF)
    mse = (cos - Y) ** 2

    head_logits = F @ head.weight.T + head.bias
    logq = _log_softmax(head_logits)
    cce = -logq[np.arange(S), cls]
    J = float((mse.sum() + cce.sum()) / S)
    if not need_grads:
        return J, None, cache

    dcos = 2.0 * (cos - Y) / S
    dF = dcos[:, None] * (P / (nP * nF)[:, None] - cos[:, None] * F / (nF ** 2)[:, None])
    dlogits_head = np.exp(logq)
    dlogits_head[np.arange(S), cls] -= 1.0
    dlogits_head /= S
    dF += dlogits_head @ head.weight

    de = np.einsum("nd,nd->n", batch.G, dF[batch.segment])
    weighted = np.bincount(batch.segment, weights=e * de, minlength=S)
    dz = e * (de - weighted[batch.segment])
    grads = backprop(params, cache, dz) if mode == "train" else None
    if grads is not None:
        grads.pop("input")
        grads["head.weight"] = dlogits_head.T @ F
        grads["head.bias"] = dlogits_head.sum(axis=0)
    return J, grads, cache


def batch_cost(probes: Sequence[ProbeSample], galleries: Sequence[GalleryTemplate],
               params: MlpParams, head: ClassifierHead, norm: MetaNorm = MetaNorm(),
               class_index: dict[int, int] | None = None, mode: str = "train") -> float:
    batch = build_train_batch(probes, galleries, norm, class_index)
    return cost_and_grads(batch, params, head, mode=mode, need_grads=False)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class OptimizerState:
    step: int = 0
    velocity: dict[str, np.ndarray] | None = None


def all_trainable(params: MlpParams, head: ClassifierHead) -> dict[str, np.ndarray]:
    out = params.trainable()
    out.update(head.trainable())
    return out


def train_step(batch: TrainBatch, params: MlpParams, head: ClassifierHead, state: OptimizerState,
               lr: float = 0.01, momentum: float = 0.9):
    """One SGD-with-momentum update on the joint cost; returns the pre-step cost."""
    validate_batch(batch)
    J, grads, cache = cost_and_grads(batch, params, head, mode="train")
    update_running_stats(params, cache)
    _, state.velocity = sgd_momentum_step(all_trainable(params, head), grads, lr, momentum, state.velocity)
    state.step += 1
    return params, head, state, J


@dataclass
class PairBatch:
    probes: list[ProbeSample]
    galleries: list[GalleryTemplate]


def pair_sampler(templates: Sequence[GalleryTemplate], seed: int, positives_per_batch: int = 8,
                 negatives_per_batch: int = 0, max_template_len: int = 16,
                 start_step: int = 0) -> Iterator[PairBatch]:
    """Endless stream of probe/gallery batches.

    Each batch holds ``positives_per_batch`` gallery templates of distinct
    identities, one matching probe per template (drawn from another template of
    that identity when one exists, otherwise held out of the gallery copy), and
    ``negatives_per_batch`` probes whose identity is absent from the gallery.
    Batch k depends only on (seed, k), so a stream can be resumed mid-way.
    """
    by_id: dict[int, list[GalleryTemplate]] = {}
    for t in templates:
        if t.class_label is None:
            raise ValidationError("training templates need class labels")
        by_id.setdefault(t.class_label, []).append(t)
    if len(by_id) < 2:
        raise ValidationError(f"need at least 2 identities, got {len(by_id)}")
    usable = sorted(c for c, ts in by_id.items() if len(ts) > 1 or len(ts[0]) > 1)
    if positives_per_batch < 1:
        raise ValidationError("positives_per_batch must be at least 1")
    if len(usable) < positives_per_batch:
        raise ValidationError(
            f"{positives_per_batch} positives need as many identities with 2+ detections, have {len(usable)}")
    if negatives_per_batch and len(by_id) < positives_per_batch + 1:
        raise ValidationError("negative probes need an identity outside the gallery")
    all_ids = sorted(by_id)

    def clip(t: GalleryTemplate, rng) -> GalleryTemplate:
        if len(t) <= max_template_len:
            return t
        idx = np.sort(rng.choice(len(t), max_template_len, replace=False))
        return t.subset(idx)

    def probe_from(t: GalleryTemplate, k: int) -> ProbeSample:
        return ProbeSample(t.features[k].copy(), t.metas[k], t.class_label)

    step = start_step
    while True:
        rng = np.random.default_rng([seed, step])
        chosen = rng.choice(usable, positives_per_batch, replace=False)
        galleries, probes = [], []
        for j, c in enumerate(chosen):
            ts = by_id[int(c)]
            gi = int(rng.integers(len(ts)))
            gallery = ts[gi]
            others = [t for i, t in enumerate(ts) if i != gi]
            if others:
                src = others[int(rng.integers(len(others)))]
                probes.append(probe_from(src, int(rng.integers(len(src)))))
            else:
                k = int(rng.integers(len(gallery)))
                probes.append(probe_from(gallery, k))
                gallery = gallery.subset(i for i in range(len(gallery)) if i != k)
            g = clip(gallery, rng)
            galleries.append(GalleryTemplate(g.features, g.metas, j, g.class_label))
        outside = [c for c in all_ids if c not in set(int(x) for x in chosen)]
        for _ in range(negatives_per_batch):
            ts = by_id[outside[int(rng.integers(len(outside)))]]
            src = ts[int(rng.integers(len(ts)))]
            probes.append(probe_from(src, int(rng.integers(len(src)))))
        yield PairBatch(probes, galleries)
        step += 1


@dataclass
class TrainConfig:
    hidden: tuple[int, int, int] = (256, 128, 64)
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    positives_per_batch: int = 8
    negatives_per_batch: int = 0
    max_template_len: int = 16
    seed: int = 0


@dataclass
class CanModel:
    evalnet: MlpParams
    head: ClassifierHead | None
    norm: MetaNorm
    classes: list[int] = field(default_factory=list)  # identity label per head row
    optimizer: OptimizerState | None = None
    seed: int = 0


def new_model(templates: Sequence[GalleryTemplate], norm: MetaNorm, config: TrainConfig) -> CanModel:
    classes = sorted({t.class_label for t in templates})
    d = templates[0].features.shape[1]
    rng = np.random.default_rng([config.seed, 7])
    evalnet = init_mlp(d + PAIRED_META_LEN, config.hidden, rng)
    head = init_head(len(classes), d, rng)
    return CanModel(evalnet, head, norm, classes, OptimizerState(), config.seed)


def fit(model: CanModel, templates: Sequence[GalleryTemplate], config: TrainConfig,
        callback=None) -> list[float]:
    """Continue training ``model`` until ``config.steps`` total steps; returns per-step costs."""
    if model.head is None:
        raise ContractError("training needs a classifier head")
    if model.optimizer is None:
        model.optimizer = OptimizerState()
    class_index = {c: i for i, c in enumerate(model.classes)}
    state = model.optimizer
    stream = pair_sampler(templates, config.seed, config.positives_per_batch,
                          config.negatives_per_batch, config.max_template_len, start_step=state.step)
    history = []
    while state.step < config.steps:
        pb = next(stream)
        batch = build_train_batch(pb.probes, pb.galleries, model.norm, class_index)
        _, _, _, J = train_step(batch, model.evalnet, model.head, state, config.lr, config.momentum)
        history.append(J)
        if callback is not None:
            callback(state.step, J)
        if state.step % 100 == 0:
            log.debug("step %d  J=%.5f", state.step, J)
    return history
