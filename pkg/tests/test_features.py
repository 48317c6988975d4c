import numpy as np
import pytest

from elplab import features as ft
from elplab.corpus import renewal_blinks, synthesize_eye_landmarks
from elplab.errors import DomainError, NonFiniteError, ShapeError

from . import toy

DERIVATIVE_CASES = [
    ([[1.0], [3.0], [6.0]], [[0.0], [2.0], [3.0]]),
    ([[2.0, -1.0]] * 4, [[0.0, 0.0]] * 4),
    ([[5.0]], [[0.0]]),
]


@pytest.mark.parametrize("seq,expected", DERIVATIVE_CASES)
def test_temporal_derivative(seq, expected):
    np.testing.assert_array_equal(ft.temporal_derivative(seq), expected)


def test_temporal_derivative_matches_loop():
    seq = toy.rng(1).normal(size=(50, 100))
    expected = np.zeros_like(seq)
    for t in range(1, 50):
        for d in range(100):
            expected[t, d] = seq[t, d] - seq[t - 1, d]
    np.testing.assert_array_equal(ft.temporal_derivative(seq), expected)


def test_temporal_derivative_rejects_empty():
    with pytest.raises(ShapeError):
        ft.temporal_derivative(np.zeros((0, 3)))


STD_CASES = [
    ([[0.0], [2.0]], [1.0]),
    ([[3.0, 3.0]] * 5, [0.0, 0.0]),
]


@pytest.mark.parametrize("seq,expected", STD_CASES)
def test_clip_std(seq, expected):
    np.testing.assert_allclose(ft.clip_std(seq), expected, rtol=0, atol=1e-15)


def test_clip_std_matches_two_pass():
    seq = toy.rng(2).normal(size=(50, 6))
    mean = seq.sum(axis=0) / 50
    expected = np.sqrt(((seq - mean) ** 2).sum(axis=0) / 50)
    np.testing.assert_allclose(ft.clip_std(seq), expected, rtol=0, atol=1e-12)


def test_clip_std_needs_two_frames():
    with pytest.raises(ShapeError):
        ft.clip_std([[1.0, 2.0]])


def test_speaker_style_width_at_default_dims():
    gen = toy.rng(3)
    motion = ft.MotionSequence(gen.normal(size=(50, 100)), gen.normal(size=(50, 6)))
    style = ft.compute_speaker_style(gen.normal(size=(50, 128)), motion)
    assert style.s_sty.shape == (50, 334)
    assert ft.style_width(128, 100, 6) == 334


def test_speaker_style_constant_motion():
    gen = toy.rng(4)
    audio = gen.normal(size=(20, 5))
    motion = ft.MotionSequence(np.ones((20, 4)), np.full((20, 2), 3.0))
    style = ft.compute_speaker_style(audio, motion).s_sty
    np.testing.assert_array_equal(style[:, :5], audio)
    np.testing.assert_array_equal(style[:, 5:], 0.0)


def test_speaker_style_blocks_match_clip_std():
    gen = toy.rng(5)
    motion = toy.motion(gen)
    style = ft.compute_speaker_style(gen.normal(size=(20, 4)), motion).s_sty
    d_beta = toy.DIMS["beta_dim"]
    expected = np.concatenate(
        [
            ft.clip_std(motion.beta),
            ft.clip_std(ft.temporal_derivative(motion.beta)),
            ft.clip_std(ft.temporal_derivative(motion.pose)),
        ]
    )
    assert style.shape[1] == 4 + 2 * d_beta + toy.DIMS["pose_dim"]
    for t in range(20):
        np.testing.assert_allclose(style[t, 4:], expected, rtol=0, atol=1e-12)


def test_speaker_style_windowed():
    gen = toy.rng(6)
    motion = toy.motion(gen)
    stats = ft.style_statistics(motion, window=5)
    assert stats.shape == (20, 2 * toy.DIMS["beta_dim"] + toy.DIMS["pose_dim"])
    np.testing.assert_allclose(stats[10, : toy.DIMS["beta_dim"]], motion.beta[8:13].std(axis=0))


def test_speaker_style_length_mismatch():
    gen = toy.rng(7)
    with pytest.raises(ShapeError):
        ft.compute_speaker_style(gen.normal(size=(19, 4)), toy.motion(gen))


def test_motion_sequence_contracts():
    with pytest.raises(ShapeError):
        ft.MotionSequence(np.zeros((5, 3)), np.zeros((4, 2)))
    with pytest.raises(NonFiniteError):
        ft.MotionSequence(np.full((2, 2), np.nan), np.zeros((2, 1)))


def test_blink_sequence_rejects_non_binary():
    with pytest.raises(DomainError):
        ft.BlinkSequence([0, 2, 1])


def test_emotion_vector_must_be_one_hot():
    with pytest.raises(DomainError):
        ft.EmotionVector([0.5, 0.5])
    assert ft.EmotionVector.from_slot(2, 3).slot == 2


def _eye(upper, lower, frames=1):
    # one eye repeated on both sides; corners two units apart
    eye = np.array(
        [[0.0, 0.0], [0.6, upper], [1.4, upper], [2.0, 0.0], [1.4, -lower], [0.6, -lower]]
    )
    return ft.EyeLandmarkSequence(np.broadcast_to(eye, (frames, 2, 6, 2)).copy())


def test_eye_aspect_ratio_collapsed():
    ear = ft.eye_aspect_ratio(_eye(0.0, 0.0))
    np.testing.assert_array_equal(ear, [0.0])


def test_eye_closure_ratio_open_and_closed():
    points = np.concatenate([_eye(0.3, 0.3, 4).points, _eye(0.0, 0.0).points])
    ratio = ft.eye_closure_ratio(ft.EyeLandmarkSequence(points))
    np.testing.assert_allclose(ratio[:4], 0.0, atol=1e-12)
    assert ratio[4] == 1.0


def test_eye_closure_ratio_degenerate_corners():
    points = _eye(0.3, 0.3).points.copy()
    points[0, 1, 3] = points[0, 1, 0]
    with pytest.raises(DomainError, match="frame 0"):
        ft.eye_aspect_ratio(ft.EyeLandmarkSequence(points))


@pytest.mark.parametrize("seed", range(5))
def test_closure_ratio_is_invariant_to_scale_and_shift(seed):
    gen = toy.rng(seed)
    base = synthesize_eye_landmarks(renewal_blinks(60, 0.05, 3, 5, gen), gen)
    moved = ft.EyeLandmarkSequence(base.points * 2.5 + np.array([10.0, -4.0]))
    np.testing.assert_allclose(
        ft.eye_closure_ratio(base), ft.eye_closure_ratio(moved), rtol=0, atol=1e-12
    )


@pytest.mark.parametrize("seed", range(5))
def test_blink_dips_exceed_threshold_exactly(seed):
    gen = toy.rng(seed)
    phi = renewal_blinks(200, 0.04, 3, 5, gen)
    ratio = ft.eye_closure_ratio(synthesize_eye_landmarks(phi, gen))
    np.testing.assert_array_equal(ratio > 0.5, phi == 1)
    blinks = ft.extract_blink(ratio)
    assert blinks.count() == ft.BlinkSequence(phi).count()


EXTRACT_CASES = [
    ([0.0] * 6, [0] * 6, 0),
    ([0.1, 0.9, 0.8, 0.7, 0.2, 0.0], [0, 1, 1, 1, 0, 0], 1),
    ([0.6, 0.1, 0.6, 0.5], [1, 0, 1, 0], 2),
]


@pytest.mark.parametrize("ratio,phi,count", EXTRACT_CASES)
def test_extract_blink(ratio, phi, count):
    blinks = ft.extract_blink(ratio, 0.5)
    np.testing.assert_array_equal(blinks.phi, phi)
    assert blinks.count() == count


def test_extract_blink_is_monotone_in_threshold():
    gen = toy.rng(8)
    for _ in range(200):
        ratio = gen.uniform(size=30)
        low, high = sorted(gen.uniform(0.05, 0.95, size=2))
        assert np.all(ft.extract_blink(ratio, high).phi <= ft.extract_blink(ratio, low).phi)


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2, 1.5])
def test_extract_blink_threshold_domain(threshold):
    with pytest.raises(DomainError):
        ft.extract_blink([0.2, 0.4], threshold)


DECISION_CASES = [
    ([0.1, 0.6, 0.9, 0.2], [0, 1, 1, 0]),
    ([0.05, 0.1, 0.05, 0.1], [0, 0, 0, 0]),
    ([0.3, 0.3, 0.2, 0.3], [1, 0, 0, 0]),
    ([0.1, 0.4, 0.2, 0.4, 0.5], [0, 1, 0, 0, 1]),
]


@pytest.mark.parametrize("prob,phi", DECISION_CASES)
def test_expected_count_decision(prob, phi):
    np.testing.assert_array_equal(ft.decide_blinks(prob).phi, phi)


def test_expected_count_fires_on_rare_blinks():
    prob = np.full(50, 0.04)
    prob[[10, 11, 12]] = 0.3
    phi = ft.decide_blinks(prob).phi
    assert phi.sum() == 3
    np.testing.assert_array_equal(np.flatnonzero(phi), [10, 11, 12])
    assert ft.decide_blinks(prob, "threshold").count() == 0


def test_threshold_decision_is_strict():
    prob = [0.5, 0.51, 0.49]
    np.testing.assert_array_equal(ft.decide_blinks(prob, "threshold", 0.5).phi, [0, 1, 0])
    np.testing.assert_array_equal(
        ft.decide_blinks(prob, "threshold", 0.5).phi, ft.extract_blink(prob, 0.5).phi
    )


@pytest.mark.parametrize(
    "prob,rule", [([0.2, 1.2], "expected"), ([[0.2, 0.3]], "expected"), ([0.2], "sample")]
)
def test_decision_errors(prob, rule):
    with pytest.raises((DomainError, ShapeError)):
        ft.decide_blinks(prob, rule)
