import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cantrack.errors import ValidationError
from cantrack.synthworld import (
    STREAM_OCCLUSION,
    Segment,
    WorldConfig,
    benchmark_config,
    camera_bias_direction,
    generate_scenario,
    make_prototypes,
    plan_paths,
    quality_for_height,
    sample_embedding,
)


def test_same_seed_same_world():
    cfg = WorldConfig(num_identities=4, num_cameras=3, sigma=0.3, beta=0.2, occlusion=0.1, seed=5)
    a, b = generate_scenario(cfg), generate_scenario(cfg)
    assert np.array_equal(a.features, b.features)
    assert list(a.ground_truth.rows()) == list(b.ground_truth.rows())
    c = generate_scenario(WorldConfig(num_identities=4, num_cameras=3, sigma=0.3, beta=0.2, occlusion=0.1, seed=6))
    assert not np.array_equal(a.features[:10], c.features[:10])


def test_noise_free_features_are_prototypes():
    data = generate_scenario(WorldConfig(num_identities=4, seed=2))
    for d in data.detections:
        assert np.array_equal(d.feature, data.prototypes[d.gt_identity])


@pytest.mark.parametrize("seed", range(5))
def test_detection_count_matches_occlusion_replay(seed):
    cfg = WorldConfig(num_identities=5, num_cameras=2, num_frames=300, occlusion=0.1, seed=seed)
    data = generate_scenario(cfg)
    occ = np.random.default_rng([seed, STREAM_OCCLUSION])
    expected = 0
    for segs in plan_paths(cfg):
        for seg in segs:
            expected += int(np.sum(occ.random(seg.num_frames) >= 0.1))
    assert len(data.detections) == expected == len(data.ground_truth)


def mean_cos_to_proto(sigma, seed=0):
    data = generate_scenario(WorldConfig(num_identities=5, sigma=sigma, seed=seed))
    return float(np.mean([d.feature @ data.prototypes[d.gt_identity] for d in data.detections]))


def test_noise_reduces_cosine_monotonically():
    c0, c1, c2 = mean_cos_to_proto(0.0), mean_cos_to_proto(0.2), mean_cos_to_proto(0.5)
    assert c0 == pytest.approx(1.0) and c0 > c1 > c2


def test_camera_bias_makes_same_camera_features_closer():
    data = generate_scenario(WorldConfig(num_identities=4, num_cameras=3, beta=0.3, seed=1))
    f = data.features
    same, cross = [], []
    for i, a in enumerate(data.detections[:400]):
        for b in data.detections[i + 1:400:7]:
            if a.gt_identity == b.gt_identity:
                (same if a.camera == b.camera else cross).append(float(f[a.det_id] @ f[b.det_id]))
    assert same and cross and np.mean(same) > np.mean(cross)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 1))
def test_embeddings_unit_norm(seed, sigma, beta, quality):
    rng = np.random.default_rng(seed)
    proto = make_prototypes(1, 16, rng)[0]
    v = sample_embedding(proto, 1 + seed % 4, sigma, beta, rng, quality)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)


def test_quality_factor():
    cfg = WorldConfig(quality_ref_height=300.0, quality_exponent=3.0)
    assert quality_for_height(300.0, cfg) == 1.0
    assert quality_for_height(600.0, cfg) == 1.0
    assert quality_for_height(150.0, cfg) == 0.125
    assert quality_for_height(10.0, WorldConfig()) == 1.0


def test_camera_bias_is_fixed_unit_vector():
    a, b = camera_bias_direction(2, 32), camera_bias_direction(2, 32)
    assert np.array_equal(a, b) and np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.allclose(a, camera_bias_direction(3, 32))


def test_prototypes_are_separated():
    p = make_prototypes(12, 64, np.random.default_rng(0))
    g = p @ p.T
    assert np.allclose(np.diag(g), 1.0)
    assert np.max(g - 2 * np.eye(12)) < 0.5
    with pytest.raises(ValidationError):
        make_prototypes(50, 2, np.random.default_rng(0), max_tries=200)


@pytest.mark.parametrize("seed", range(3))
def test_ground_truth_consistent_with_detections(seed):
    data = generate_scenario(benchmark_config(seed))
    assert len(data.detections) == len(data.ground_truth)
    for k, d in enumerate(data.detections):
        assert d.det_id == k and np.array_equal(d.feature, data.features[k])
        assert 1 <= d.camera <= 4
    keys = [(d.camera, d.frame, d.gt_identity) for d in data.detections]
    assert len(set(keys)) == len(keys)
    # an identity is never in two cameras at once
    by_frame = {}
    for d in data.detections:
        by_frame.setdefault((d.frame, d.gt_identity), set()).add(d.camera)
    assert all(len(v) == 1 for v in by_frame.values())


def test_segments_interpolate_boxes():
    s = Segment(1, 10, 20, (0.0, 0.0, 10.0, 20.0), (100.0, 0.0, 20.0, 40.0))
    assert s.box_at(10).x == 0.0 and s.box_at(20).w == 20.0
    assert s.box_at(15).h == pytest.approx(30.0)


@pytest.mark.parametrize("field,value", [
    ("sigma", -0.1), ("beta", -1.0), ("occlusion", 1.0), ("num_cameras", 0),
    ("num_identities", 0), ("embedding_dim", 1), ("quality_exponent", -1.0),
])
def test_config_validation_names_field(field, value):
    with pytest.raises(ValidationError, match=field):
        generate_scenario(WorldConfig(**{field: value}))


def test_config_from_dict_errors():
    with pytest.raises(ValidationError, match="colour"):
        WorldConfig.from_dict({"colour": 3})
    with pytest.raises(ValidationError, match="sigma"):
        WorldConfig.from_dict({"sigma": "lots"})
    cfg = WorldConfig(num_identities=2, paths=[[Segment(1, 0, 9, (0, 0, 10, 20), (0, 0, 10, 20))], []])
    assert WorldConfig.from_dict(cfg.to_dict()) == cfg


def test_explicit_paths_validated():
    bad = [[Segment(3, 0, 9, (0, 0, 10, 20), (0, 0, 10, 20))]]
    with pytest.raises(ValidationError, match="camera 3"):
        generate_scenario(WorldConfig(num_identities=1, num_cameras=2, paths=bad))
    overlap = [[Segment(1, 0, 9, (0, 0, 10, 20), (0, 0, 10, 20)), Segment(1, 5, 12, (0, 0, 10, 20), (0, 0, 10, 20))]]
    with pytest.raises(ValidationError, match="overlapping"):
        generate_scenario(WorldConfig(num_identities=1, paths=overlap))
    outside = [[Segment(1, 0, 9, (1900, 0, 50, 20), (0, 0, 10, 20))]]
    with pytest.raises(ValidationError, match="leaves the frame"):
        generate_scenario(WorldConfig(num_identities=1, paths=outside))
