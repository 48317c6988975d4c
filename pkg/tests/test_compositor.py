import numpy as np
import pytest

from elplab import compositor as cp
from elplab.errors import DomainError, ShapeError

from . import toy

GROUP_CASES = [
    ([0, 1, 1, 0, 1], [(1, 2), (4, 1)]),
    ([0, 0, 0], []),
    ([1, 1, 1], [(0, 3)]),
    ([1, 0, 0, 1, 1, 1, 0], [(0, 1), (3, 3)]),
]


@pytest.mark.parametrize("phi,groups", GROUP_CASES)
def test_group_blinks(phi, groups):
    assert [(g.start, g.length) for g in cp.group_blinks(phi)] == groups


def _run_length(phi):
    groups, t = [], 0
    while t < len(phi):
        if phi[t] == 1:
            start = t
            while t < len(phi) and phi[t] == 1:
                t += 1
            groups.append((start, t - start))
        else:
            t += 1
    return groups


def test_group_blinks_matches_linear_scan():
    gen = toy.rng(0)
    for _ in range(200):
        phi = gen.integers(0, 2, 40)
        assert [(g.start, g.length) for g in cp.group_blinks(phi)] == _run_length(phi)


def _beta(frames=8, dim=3, seed=1):
    return toy.rng(seed).normal(size=(frames, dim))


def test_no_blinks_is_identity():
    beta = _beta()
    out = cp.apply_blink(beta, np.zeros(8, dtype=int), cp.ClosureBlendshape.unit(3, 0))
    np.testing.assert_array_equal(out, beta)
    assert out is not beta


def test_unit_closure_blendshape_is_accepted():
    out = cp.apply_blink(np.zeros((5, 4)), [0, 1, 0, 0, 0], cp.ClosureBlendshape.unit(4, 0))
    np.testing.assert_array_equal(out[1], [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(out[[0, 2, 3, 4]], np.zeros((4, 4)))


def test_single_frame_group_reaches_closure():
    beta = _beta()
    closure = cp.ClosureBlendshape(np.array([5.0, -1.0, 2.0]))
    out = cp.apply_blink(beta, [0, 0, 0, 1, 0, 0, 0, 0], closure)
    np.testing.assert_array_equal(out[3], closure.beta_c)


def test_two_frame_group():
    beta = _beta()
    closure = cp.ClosureBlendshape(np.array([5.0, -1.0, 2.0]))
    out = cp.apply_blink(beta, [0, 0, 1, 1, 0, 0, 0, 0], closure)
    np.testing.assert_array_equal(out[2], closure.beta_c)
    np.testing.assert_allclose(out[3], 0.5 * (closure.beta_c + beta[4]), rtol=0, atol=1e-15)


def test_odd_group_schedule():
    beta = np.zeros((7, 1))
    beta[0] = 1.0
    beta[6] = 3.0
    out = cp.apply_blink(beta, [0, 1, 1, 1, 1, 1, 0], np.array([10.0]))
    # three closing frames from beta[0], two opening frames towards beta[6]
    expected = [1.0, 4.0, 7.0, 10.0, 10.0 * 2 / 3 + 1.0, 10.0 / 3 + 2.0, 3.0]
    np.testing.assert_allclose(out[:, 0], expected, rtol=0, atol=1e-12)


def test_groups_at_sequence_edges():
    beta = np.arange(6.0)[:, None]
    out = cp.apply_blink(beta, [1, 1, 0, 0, 1, 1], np.array([-4.0]))
    # the missing endpoints are the nearest in-group frames
    np.testing.assert_allclose(out[:, 0], [-4.0, 0.5 * (-4.0 + 2.0), 2.0, 3.0, -4.0, 0.5 * (-4.0 + 5.0)])


@pytest.mark.parametrize("seed", range(20))
def test_outside_groups_unchanged_and_inside_convex(seed):
    gen = toy.rng(seed)
    beta = gen.normal(size=(30, 4))
    phi = (gen.random(30) < 0.3).astype(int)
    closure = gen.normal(size=4)
    out = cp.apply_blink(beta, phi, closure)
    np.testing.assert_array_equal(out[phi == 0], beta[phi == 0])
    for group in cp.group_blinks(phi):
        before = beta[max(group.start - 1, 0)]
        after = beta[min(group.stop, 29)]
        low = np.minimum(np.minimum(before, after), closure) - 1e-12
        high = np.maximum(np.maximum(before, after), closure) + 1e-12
        for t in range(group.start, group.stop):
            assert np.all((out[t] >= low) & (out[t] <= high))


def test_unit_closure():
    np.testing.assert_array_equal(cp.ClosureBlendshape.unit(4, 2).beta_c, [0.0, 0.0, 1.0, 0.0])
    with pytest.raises(DomainError):
        cp.ClosureBlendshape.unit(4, 4)


def test_closure_must_be_finite():
    with pytest.raises(DomainError):
        cp.ClosureBlendshape(np.array([1.0, np.inf]))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        cp.apply_blink(_beta(), [0, 1, 0], np.zeros(3))
    with pytest.raises(ShapeError):
        cp.apply_blink(_beta(), np.zeros(8, dtype=int), np.zeros(4))
