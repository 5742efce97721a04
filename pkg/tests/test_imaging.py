import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionrecomp.errors import InvalidInputError
from motionrecomp.imaging import (
    MotionParams,
    Pose2,
    build_se2_dataset,
    compose,
    generate_se2_sequence,
    interpolate_pose,
    inverse,
    pad_to_canvas,
    sample_motion_params,
    warp_image,
)

poses = st.builds(
    Pose2,
    st.floats(-50, 50, allow_nan=False),
    st.floats(-50, 50, allow_nan=False),
    st.floats(0, 360, allow_nan=False, exclude_max=True),
)


def gaussian_blob(size=64, sigma=6.0):
    ys, xs = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    return np.exp(-((xs - c) ** 2 + (ys - c) ** 2) / (2 * sigma**2))


# -- pose group ------------------------------------------------------------


@given(poses, poses, poses)
def test_compose_is_associative(a, b, c):
    assert compose(a, compose(b, c)).allclose(compose(compose(a, b), c), atol=1e-9)


@given(poses)
def test_inverse_gives_identity_both_sides(p):
    assert compose(p, inverse(p)).allclose(Pose2.identity(), atol=1e-9)
    assert compose(inverse(p), p).allclose(Pose2.identity(), atol=1e-9)


@given(poses)
def test_identity_is_neutral(p):
    assert compose(p, Pose2.identity()).allclose(p)
    assert compose(Pose2.identity(), p).allclose(p)


@given(poses, poses)
def test_closure_and_matrix_agreement(a, b):
    c = compose(a, b)
    assert 0.0 <= c.theta < 360.0
    np.testing.assert_allclose(c.matrix(), a.matrix() @ b.matrix(), atol=1e-9)


def test_theta_is_wrapped():
    assert Pose2(0, 0, 370).theta == pytest.approx(10)
    assert Pose2(0, 0, -90).theta == pytest.approx(270)
    assert Pose2(0, 0, -1e-18).theta < 360.0


# -- warping ---------------------------------------------------------------


def test_identity_warp_is_exact():
    img = np.random.default_rng(0).random((64, 64)).astype(np.float32)
    np.testing.assert_array_equal(warp_image(img, Pose2.identity()), img)


def test_integer_translation_moves_a_pixel_exactly():
    img = np.zeros((32, 32))
    img[10, 10] = 1.0  # row 10, column 10
    out = warp_image(img, Pose2(3, 0, 0))
    expected = np.zeros_like(img)
    expected[10, 13] = 1.0
    np.testing.assert_array_equal(out, expected)


def test_round_trip_error_on_smooth_image():
    # Measured max over 200 random poses: 5.2e-4 mean abs error.
    blob = gaussian_blob()
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = Pose2(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0, 360))
        back = warp_image(warp_image(blob, p), inverse(p))
        assert np.abs(back - blob).mean() < 2e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6), st.integers(-6, 6), st.integers(-6, 6))
def test_integer_translations_compose_exactly(x1, y1, x2, y2):
    img = np.random.default_rng(1).random((24, 24))
    two_step = warp_image(warp_image(img, Pose2(x1, y1, 0)), Pose2(x2, y2, 0))
    one_step = warp_image(img, Pose2(x1 + x2, y1 + y2, 0))
    # zero fill may lose pixels the first warp pushed off the canvas
    ys, xs = np.mgrid[0:24, 0:24]
    keep = (xs - x2 >= 0) & (xs - x2 < 24) & (ys - y2 >= 0) & (ys - y2 < 24)
    np.testing.assert_array_equal(two_step[keep], one_step[keep])


def test_rotation_about_center_matches_composition():
    blob = gaussian_blob(sigma=4.0)
    blob = np.roll(blob, 8, axis=1)  # off-center so rotation is visible
    a = warp_image(warp_image(blob, Pose2(0, 0, 30)), Pose2(0, 0, 60))
    b = warp_image(blob, Pose2(0, 0, 90))
    assert np.abs(a - b).mean() < 2e-3
    # 90 degrees about the center maps a +x offset to a +y offset
    ys, xs = np.mgrid[0:64, 0:64]
    row = (ys * b).sum() / b.sum()
    col = (xs * b).sum() / b.sum()
    assert row == pytest.approx(31.5 + 8, abs=0.1)
    assert col == pytest.approx(31.5, abs=0.1)


def test_warp_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        warp_image(np.zeros((0, 0)), Pose2())
    with pytest.raises(InvalidInputError):
        warp_image(np.zeros((8, 8)), Pose2(), center=(20.0, 3.0))


# -- motion sampling -------------------------------------------------------


def test_motion_params_deterministic():
    a = sample_motion_params(np.random.default_rng(42))
    b = sample_motion_params(np.random.default_rng(42))
    assert a == b
    assert a.num_frames == 20


def test_motion_params_distribution():
    rng = np.random.default_rng(7)
    draws = [sample_motion_params(rng) for _ in range(10_000)]
    tx = np.array([d.total_tx for d in draws])
    theta = np.array([d.total_theta for d in draws])
    # standard errors of the mean: 0.0577 for Uniform[-10, 10], 1.04 for Uniform[0, 360)
    se_tx = (20 / math.sqrt(12)) / math.sqrt(10_000)
    se_theta = (360 / math.sqrt(12)) / math.sqrt(10_000)
    assert abs(tx.mean()) < min(0.35, 6 * se_tx)
    assert abs(theta.mean() - 180) < min(3.2, 3.1 * se_theta)
    assert tx.min() >= -10 and tx.max() <= 10
    assert theta.min() >= 0 and theta.max() < 360


def test_motion_params_need_two_frames():
    with pytest.raises(InvalidInputError):
        MotionParams(1, 1, 1, num_frames=1)


# -- sequences -------------------------------------------------------------


def test_null_motion_gives_copies():
    base = gaussian_blob()
    seq, poses = generate_se2_sequence(base, MotionParams(0, 0, 0, 20))
    assert len(seq) == 20
    for f in seq.frames:
        np.testing.assert_array_equal(f, base.astype(np.float32))


def test_first_frame_is_base():
    base = gaussian_blob()
    seq, poses = generate_se2_sequence(base, MotionParams(7, -3, 120, 20))
    np.testing.assert_array_equal(seq.frames[0], base.astype(np.float32))
    assert poses[0] == Pose2.identity()
    assert poses[-1].allclose(Pose2(7, -3, 120))


def test_frames_match_direct_warps():
    base = gaussian_blob().astype(np.float32)
    seq, _ = generate_se2_sequence(base, MotionParams(10, 0, 0, 20))
    for k in range(20):
        direct = warp_image(base, Pose2(10 * k / 19, 0, 0))
        assert np.abs(seq.frames[k] - direct).mean() < 1e-6


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 359.9), st.integers(2, 30))
def test_per_frame_pose_steps_are_uniform(tx, ty, theta, n):
    params = MotionParams(tx, ty, theta, n)
    steps = [interpolate_pose(params, k / (n - 1)).as_array() for k in range(n)]
    deltas = np.diff(np.array(steps), axis=0)
    expected = np.array([tx, ty, theta]) / (n - 1)
    np.testing.assert_allclose(np.abs(deltas).max(axis=0), np.abs(expected), rtol=1e-12, atol=1e-12)


def test_dataset_empty_and_invalid():
    rng = np.random.default_rng(0)
    assert build_se2_dataset([np.ones((8, 8))], 0, rng) == []
    with pytest.raises(InvalidInputError):
        build_se2_dataset([], 3, rng)


def test_dataset_deterministic():
    bases = [pad_to_canvas(np.random.default_rng(i).random((28, 28))) for i in range(5)]
    a = build_se2_dataset(bases, 4, np.random.default_rng(3))
    b = build_se2_dataset(bases, 4, np.random.default_rng(3))
    for (sa, pa), (sb, pb) in zip(a, b):
        np.testing.assert_array_equal(sa.frames, sb.frames)
        assert pa == pb and sa.source_id == sb.source_id


def test_base_images_are_chosen_uniformly():
    bases = [np.full((4, 4), i / 100, dtype=np.float32) for i in range(100)]
    data = build_se2_dataset(bases, 1000, np.random.default_rng(11), num_frames=2, rotate=False)
    counts = np.bincount([int(s.source_id.split("base")[1]) for s, _ in data], minlength=100)
    # Binomial(1000, 0.01): mean 10, sd ~ sqrt(10)
    assert counts.sum() == 1000
    assert np.all(np.abs(counts - 10) <= 3 * math.sqrt(10))
    chi2 = ((counts - 10) ** 2 / 10).sum()
    assert chi2 < 148.2  # 99.9% quantile of chi-square with 99 dof


def test_pad_to_canvas_centers():
    digit = np.ones((28, 28), dtype=np.float32)
    canvas = pad_to_canvas(digit, 64)
    assert canvas.shape == (64, 64)
    assert canvas.sum() == 28 * 28
    assert canvas[18, 18] == 1 and canvas[17, 17] == 0 and canvas[45, 45] == 1 and canvas[46, 46] == 0
