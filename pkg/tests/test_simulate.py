import numpy as np
import pytest

from sparseloc.model import GaussianPsf, GridGeometry, apply_forward, build_measurement_matrix
from sparseloc.simulate import (
    Emitter,
    FrameSequence,
    NoiseModel,
    bin_positions,
    render_sequence,
    render_ulm_sequence,
    sample_structure,
)


@pytest.fixture(scope="module")
def op():
    return build_measurement_matrix(GaussianPsf(1.0), GridGeometry(8, 2))


def point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0, 1)
    return np.linalg.norm(p - (a + t * ab))


def test_emitter_validation():
    with pytest.raises(ValueError):
        Emitter((0, 0), mean_photons=0)
    with pytest.raises(ValueError):
        Emitter((0, 0), on_probability=0)
    with pytest.raises(ValueError):
        Emitter((0, 0), on_probability=1.5)


def test_noise_validation():
    with pytest.raises(ValueError):
        NoiseModel(gaussian_sigma=-1)


def test_uniform_points_count_zero():
    assert sample_structure("uniform-points", {"count": 0, "side": 16}, 0) == []


def test_uniform_points_inside_fov():
    em = sample_structure("uniform-points", {"count": 200, "side": 16, "margin": 2}, 1)
    pos = np.array([e.position for e in em])
    assert len(em) == 200
    assert pos.min() >= 1.5 and pos.max() <= 13.5


def test_structure_is_deterministic():
    params = {"side": 32, "n_filaments": 2, "spacing": 1.0, "thickness": 0.5}
    a = sample_structure("polyline-filament", params, 9)
    b = sample_structure("polyline-filament", params, 9)
    assert a == b
    assert a != sample_structure("polyline-filament", params, 10)


def test_filament_thickness_zero_lies_on_segments():
    em = sample_structure("polyline-filament",
                          {"side": 64, "n_filaments": 3, "n_segments": 4, "spacing": 0.7}, 2)
    assert len(em) > 50
    for e in em:
        p = np.array(e.position)
        d = min(point_segment_distance(p, a, b) for a, b in em.segments)
        assert d < 1e-9


def test_filament_jitter_bounded_by_thickness():
    em = sample_structure("polyline-filament",
                          {"side": 64, "n_filaments": 2, "spacing": 0.5, "thickness": 1.5}, 3)
    for e in em:
        p = np.array(e.position)
        assert min(point_segment_distance(p, a, b) for a, b in em.segments) <= 1.5 + 1e-9


def test_filament_min_separation():
    em = sample_structure("polyline-filament",
                          {"side": 64, "n_filaments": 4, "spacing": 3.0, "min_separation": 5.0}, 4)
    pos = np.array([e.position for e in em])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2) + np.eye(len(pos)) * 1e9
    assert d.min() >= 5.0


@pytest.mark.parametrize("kind, params", [
    ("uniform-points", {"count": 3}),
    ("uniform-points", {"count": 3, "side": 8, "margin": 4}),
    ("polyline-filament", {"side": 8, "thickness": 5}),
    ("polyline-filament", {"side": 8, "spacing": 0}),
    ("spiral", {"side": 8}),
])
def test_structure_rejects_bad_params(kind, params):
    with pytest.raises(ValueError):
        sample_structure(kind, params, 0)


def test_bin_positions_rounds_to_nearest_cell():
    idx = bin_positions([(0.4, 0.6), (2.49, 3.51), (-3, 100)], 8)
    np.testing.assert_array_equal(idx, [1, 2 * 8 + 4, 7])


def test_no_emitters_no_noise_all_zero(op):
    seq, truth = render_sequence([], op, NoiseModel(), 5, 0)
    np.testing.assert_array_equal(seq.frames, 0)
    assert all(len(p) == 0 for p in truth.frame_points)


def test_always_on_emitter_is_scaled_column(op):
    e = Emitter((5.0, 9.0), mean_photons=300, on_probability=1.0)
    seq, _ = render_sequence([e], op, NoiseModel(), 4, 1)
    col = op.matrix[:, bin_positions([e.position], 16)[0]]
    for f in seq.frames:
        np.testing.assert_allclose(f.ravel(), 300 * col, rtol=1e-15)


def test_blinking_variance_matches_bernoulli(op):
    p, photons = 0.3, 100.0
    e = Emitter((7.0, 8.0), photons, p)
    seq, _ = render_sequence([e], op, NoiseModel(), 20000, 2)
    col = op.matrix[:, bin_positions([e.position], 16)[0]]
    expected = p * (1 - p) * (photons * col) ** 2
    mask = expected > 1e-3 * expected.max()
    got = seq.as_matrix().var(axis=0)
    np.testing.assert_allclose(got[mask], expected[mask], rtol=0.05)


def test_blinking_has_no_lag_one_correlation(op):
    _, truth = render_sequence([Emitter((4.0, 4.0), 1.0, 0.2)], op, NoiseModel(), 20000, 3)
    s = truth.per_frame_x.sum(axis=1) > 0
    rho = np.corrcoef(s[:-1], s[1:])[0, 1]
    assert abs(rho) < 0.05


def test_noiseless_frames_equal_forward_of_truth(op):
    em = sample_structure("uniform-points", {"count": 10, "side": 16}, 4)
    seq, truth = render_sequence(em, op, NoiseModel(background=7.0), 30, 5)
    for frame, x in zip(seq.as_matrix(), truth.per_frame_x):
        np.testing.assert_array_equal(frame, apply_forward(op, x) + 7.0)


def test_render_is_deterministic_and_thread_invariant(op):
    em = sample_structure("uniform-points", {"count": 10, "side": 16}, 6)
    noise = NoiseModel(gaussian_sigma=2.0, background=5.0, poisson=True)
    a, ta = render_sequence(em, op, noise, 20, 11)
    b, tb = render_sequence(em, op, noise, 20, 11, threads=4)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(ta.per_frame_x, tb.per_frame_x)
    c, _ = render_sequence(em, op, noise, 20, 12)
    assert not np.array_equal(a.frames, c.frames)


def test_frame_substreams_are_order_independent(op):
    em = sample_structure("uniform-points", {"count": 5, "side": 16}, 7)
    noise = NoiseModel(gaussian_sigma=1.0)
    long, _ = render_sequence(em, op, noise, 10, 3)
    short, _ = render_sequence(em, op, noise, 4, 3)
    np.testing.assert_array_equal(long.frames[:4], short.frames)


def test_poisson_noise_mean(op):
    e = Emitter((8.0, 8.0), 500.0, 1.0)
    seq, _ = render_sequence([e], op, NoiseModel(background=20.0, poisson=True), 4000, 8)
    clean = 500.0 * op.matrix[:, bin_positions([e.position], 16)[0]] + 20.0
    np.testing.assert_allclose(seq.as_matrix().mean(axis=0), clean, rtol=0.02)
    np.testing.assert_allclose(seq.as_matrix().var(axis=0), clean, rtol=0.1)


def test_ulm_density_zero_is_noise_plus_background(op):
    seq, truth = render_ulm_sequence(0.0, op, NoiseModel(gaussian_sigma=0.1, background=2.0), 200, 0)
    assert truth.per_frame_x.sum() == 0
    assert abs(seq.frames.mean() - 2.0) < 0.01
    assert abs(seq.frames.std() - 0.1) < 0.005


def test_ulm_mean_bubble_count(op):
    _, truth = render_ulm_sequence(6.0, op, NoiseModel(), 10000, 1)
    counts = np.array([len(p) for p in truth.frame_points])
    assert abs(counts.mean() - 6.0) / 6.0 < 0.02


def test_ulm_deterministic(op):
    noise = NoiseModel(gaussian_sigma=0.05)
    a, _ = render_ulm_sequence(3.0, op, noise, 10, 5)
    b, _ = render_ulm_sequence(3.0, op, noise, 10, 5)
    np.testing.assert_array_equal(a.frames, b.frames)


def test_ulm_bubbles_move_between_frames(op):
    _, truth = render_ulm_sequence(5.0, op, NoiseModel(), 3, 2)
    assert not np.array_equal(truth.frame_points[0], truth.frame_points[1])


def test_frame_sequence_shape_checked():
    with pytest.raises(ValueError):
        FrameSequence(np.zeros((2, 4, 5)), GridGeometry(4, 2))
    with pytest.raises(ValueError):
        FrameSequence(np.zeros((0, 4, 4)), GridGeometry(4, 2))


def test_static_grid_sums_frames(op):
    em = sample_structure("uniform-points", {"count": 4, "side": 16}, 9)
    _, truth = render_sequence(em, op, NoiseModel(), 12, 1)
    np.testing.assert_array_equal(truth.static_grid, truth.per_frame_x.sum(axis=0))
