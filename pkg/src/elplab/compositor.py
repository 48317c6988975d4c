"""Blink compositing by linear blendshape interpolation.

Every run of 1s in a blink sequence is one blink group of length L. The
expression coefficients of the group are replaced by a closing ramp from the
frame before the group to the eye-closure blendshape over ``ceil(L/2)``
frames, followed by an opening ramp back to the frame after the group over
``floor(L/2)`` frames.
"""

from dataclasses import dataclass

import numpy as np

from elplab.errors import DomainError, ShapeError
from elplab.features import BlinkSequence


@dataclass(frozen=True)
class BlinkGroup:
    start: int
    length: int

    @property
    def stop(self):
        return self.start + self.length


@dataclass(frozen=True, eq=False)
class ClosureBlendshape:
    """Expression coefficients of a fully closed eye."""

    beta_c: np.ndarray

    def __post_init__(self):
        beta_c = np.asarray(self.beta_c, dtype=np.float64)
        if beta_c.ndim != 1 or not np.all(np.isfinite(beta_c)):
            raise DomainError("ClosureBlendshape: expected a finite coefficient vector")
        object.__setattr__(self, "beta_c", beta_c)

    @classmethod
    def unit(cls, dim, index):
        """Unit weight on coefficient ``index``, zeros elsewhere."""
        if not 0 <= index < dim:
            raise DomainError(f"closure index {index} outside 0..{dim - 1}")
        beta_c = np.zeros(dim)
        beta_c[index] = 1.0
        return cls(beta_c)


def group_blinks(phi):
    """Maximal runs of 1s as ordered, disjoint :class:`BlinkGroup`."""
    phi = phi if isinstance(phi, BlinkSequence) else BlinkSequence(phi)
    padded = np.concatenate([[0], phi.phi.astype(np.int64), [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [BlinkGroup(int(a), int(b - a)) for a, b in zip(starts, stops)]


def apply_blink(beta, phi, closure):
    """Interpolate expression coefficients through the closure blendshape.

    Parameters
    ----------
    beta : array, T x D
    phi : BlinkSequence or T binary values
    closure : ClosureBlendshape or D vector

    Returns
    -------
    array, T x D
        A copy of ``beta``; frames outside blink groups are unchanged.
    """
    beta = np.asarray(beta, dtype=np.float64)
    phi = phi if isinstance(phi, BlinkSequence) else BlinkSequence(phi)
    if isinstance(closure, ClosureBlendshape):
        beta_c = closure.beta_c
    else:
        beta_c = np.asarray(closure, dtype=np.float64)
    if beta.ndim != 2 or beta.shape[0] != phi.frames:
        raise ShapeError(f"apply_blink: beta {beta.shape} and blink {phi.frames} frames")
    if beta_c.shape != (beta.shape[1],):
        raise ShapeError(f"apply_blink: closure {beta_c.shape} for {beta.shape[1]} coefficients")
    out = beta.copy()
    frames = beta.shape[0]
    for group in group_blinks(phi):
        before = beta[group.start - 1] if group.start > 0 else beta[group.start]
        after = beta[group.stop] if group.stop < frames else beta[group.stop - 1]
        closing = -(-group.length // 2)
        opening = group.length - closing
        for j in range(1, closing + 1):
            w = j / closing
            out[group.start + j - 1] = (1.0 - w) * before + w * beta_c
        for j in range(1, opening + 1):
            w = j / (opening + 1)
            out[group.start + closing + j - 1] = (1.0 - w) * beta_c + w * after
    return out
