"""Shared builders for the test suite."""
import numpy as np

from cantrack.aggregation import (
    DetectionMeta,
    GalleryTemplate,
    MetaNorm,
    ProbeSample,
    TrainConfig,
    all_trainable,
    build_train_batch,
    cost_and_grads,
    new_model,
)
from cantrack.association import BBox, Detection
from cantrack.nn_core import activation_pattern, finite_difference_report

NORM4 = MetaNorm(1920.0, 1080.0, 4)


def random_meta(rng, cam=None, num_cameras=4) -> DetectionMeta:
    if cam is None:
        cam = int(rng.integers(1, num_cameras + 1))
    return DetectionMeta.from_box(rng.uniform(0, 1500), rng.uniform(0, 600),
                                  rng.uniform(40, 200), rng.uniform(80, 400), cam)


def toy_problem(seed, d=16, ids=8, n=4, noise=0.3, distinct_probe_cams=False):
    """Separable identities: orthonormal prototypes plus small noise."""
    rng = np.random.default_rng(seed)
    protos = np.linalg.qr(rng.normal(size=(d, d)))[0][:ids]

    def feat(c):
        v = protos[c] + rng.normal(size=d) * noise / np.sqrt(d)
        return v / np.linalg.norm(v)

    galleries = [GalleryTemplate(np.array([feat(c) for _ in range(n)]), [random_meta(rng) for _ in range(n)], c, c)
                 for c in range(ids)]
    probes = [ProbeSample(feat(c), random_meta(rng, cam=(c % 4) + 1 if distinct_probe_cams else None), c)
              for c in range(ids)]
    return probes, galleries


def joint_cost_fd(seed, d=16, ids=3, hidden=(12, 8, 6)):
    """Finite-difference report of the full EvalNet + joint cost on a small random batch.

    Inputs are deliberately non-degenerate: random features and metadata, with
    probes in distinct cameras so no EvalNet input column is constant.
    """
    rng = np.random.default_rng(seed)
    galleries = [GalleryTemplate(rng.normal(size=(k, d)), [random_meta(rng) for _ in range(k)], c, c)
                 for c, k in enumerate(rng.integers(2, 6, size=ids))]
    probes = [ProbeSample(rng.normal(size=d), random_meta(rng, cam=c + 1), c) for c in range(ids)]
    model = new_model(galleries, NORM4, TrainConfig(hidden=hidden, seed=seed))
    batch = build_train_batch(probes, galleries, NORM4)
    _, grads, _ = cost_and_grads(batch, model.evalnet, model.head)

    def loss(_p):
        J, _, cache = cost_and_grads(batch, model.evalnet, model.head, need_grads=False)
        return J, activation_pattern(cache)

    return finite_difference_report(all_trainable(model.evalnet, model.head), loss, grads, step=1e-4)


def det(cam, frame, x, y, w, h, feature, ident=None, det_id=0) -> Detection:
    return Detection(cam, frame, BBox(x, y, w, h), np.asarray(feature, dtype=float), ident, det_id)
