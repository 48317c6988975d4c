"""Multi-head discrete latent space split by emotion.

Head logits (... x H x V) become a one-hot Base Space through Gumbel-Softmax.
An emotion one-hot over N types gates N copies of the Base Space, which are
concatenated into the Transformed Space (... x H x N*V). Its argmax is the
codeword grid U: emotion slot ``i`` (0-based) only ever produces codewords in
``[i*V + 1, (i+1)*V]``.

All functions accept an optional leading batch axis.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from elplab import autodiff as ad
from elplab.errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

UNIFORM_CLAMP = 1e-12

_ties = {"count": 0}


def tie_count():
    """Number of argmax ties resolved since the last reset."""
    return _ties["count"]


def reset_tie_count():
    _ties["count"] = 0


@dataclass(frozen=True, eq=False)
class BaseSpace:
    """Per-head categorical samples, ... x H x V."""

    onehot: ad.Tensor
    hard: bool

    @property
    def categories(self):
        return self.onehot.shape[-1]

    @property
    def heads(self):
        return self.onehot.shape[-2]


@dataclass(frozen=True, eq=False)
class TransformedSpace:
    """Emotion-gated Base Space, ... x H x N*V."""

    expanded: ad.Tensor
    emotions: int
    categories: int


@dataclass(frozen=True, eq=False)
class CodewordGrid:
    """1-based codewords, ... x H, each in ``[1, emotions*categories]``."""

    codes: np.ndarray
    emotions: int
    categories: int

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if not np.issubdtype(codes.dtype, np.integer):
            raise DomainError("CodewordGrid: codes must be integers")
        object.__setattr__(self, "codes", codes.astype(np.int64))

    @property
    def width(self):
        return self.emotions * self.categories

    def block(self, slot):
        """Inclusive codeword range reserved for emotion ``slot``."""
        return slot * self.categories + 1, (slot + 1) * self.categories


def sample_gumbel(shape, rng):
    """Standard Gumbel noise ``-log(-log(u))`` with u clamped away from 0 and 1."""
    u = np.clip(rng.random(shape), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def _onehot_argmax(values):
    idx = np.argmax(values, axis=-1)
    out = np.zeros(values.shape)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def gumbel_softmax(logits, temperature=1.0, hard=True, rng=None, noise=None):
    """Sample the Base Space from head logits.

    Parameters
    ----------
    logits : Tensor or array, ... x H x V
        Unnormalized head scores.
    temperature : float
        Softmax temperature, > 0.
    hard : bool
        Emit exact one-hots in the forward pass; gradients flow through the
        soft sample (straight-through).
    rng : numpy.random.Generator, optional
        Source of the Gumbel noise. With neither ``rng`` nor ``noise`` the
        noise is zero, which makes the sample a deterministic argmax.
    noise : array, optional
        Explicit noise of the logits' shape; overrides ``rng``.

    Returns
    -------
    BaseSpace
    """
    if not temperature > 0:
        raise DomainError(f"gumbel_softmax: temperature must be > 0, got {temperature}")
    logits = ad.as_tensor(logits)
    if logits.ndim < 2:
        raise ShapeError(f"gumbel_softmax: expected ... x H x V, got {logits.shape}")
    if noise is None:
        noise = sample_gumbel(logits.shape, rng) if rng is not None else None
    elif np.shape(noise) != logits.shape:
        raise ShapeError(
            f"gumbel_softmax: noise {np.shape(noise)} does not match {logits.shape}"
        )
    scores = logits if noise is None else logits + noise
    soft = ad.softmax(scores * (1.0 / temperature), axis=-1)
    if not hard:
        return BaseSpace(soft, hard=False)
    return BaseSpace(ad.straight_through(soft, _onehot_argmax(soft.values)), hard=True)


def emotion_matrix(e, n=None):
    """Validate one-hot emotion rows and return them as a float array."""
    arr = np.asarray(getattr(e, "e", e), dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise ShapeError(f"emotion: expected N or B x N one-hots, got {arr.shape}")
    if n is not None and arr.shape[-1] != n:
        raise ShapeError(f"emotion: expected {n} emotion types, got {arr.shape[-1]}")
    rows = arr.reshape(-1, arr.shape[-1])
    ones = np.sum(rows == 1.0, axis=1)
    zeros = np.sum(rows == 0.0, axis=1)
    if np.any(ones != 1) or np.any(zeros != rows.shape[1] - 1):
        raise DomainError("emotion vectors must be one-hot; harden soft labels first")
    return arr


def split_rearrange(base, e):
    """Gate N copies of the Base Space by the emotion one-hot and concatenate.

    ``e`` is an EmotionVector or an N array for an unbatched base, or a B x N
    array matching a base with leading batch axis B.
    """
    arr = emotion_matrix(e)
    n = arr.shape[-1]
    v = base.categories
    shape = base.onehot.shape[:-1] + (n * v,)
    gate = np.repeat(arr, v, axis=-1)
    if arr.ndim == 2:
        if base.onehot.ndim < 3 or base.onehot.shape[0] != arr.shape[0]:
            raise ShapeError(
                f"split_rearrange: {arr.shape[0]} emotions for base {base.onehot.shape}"
            )
        gate = gate.reshape((arr.shape[0],) + (1,) * (len(shape) - 2) + (n * v,))
    mask = np.ascontiguousarray(np.broadcast_to(gate, shape))
    tiled = ad.concat([base.onehot] * n, axis=-1)
    return TransformedSpace(tiled * mask, emotions=n, categories=v)


def identity_space(base):
    """The Base Space used directly as latent (no emotion partition)."""
    return TransformedSpace(base.onehot, emotions=1, categories=base.categories)


def to_codewords(transformed):
    """1-based argmax over the N*V axis; ties resolve to the lowest index."""
    values = transformed.expanded.values
    top = values.max(axis=-1, keepdims=True)
    ties = int(np.sum(np.sum(values == top, axis=-1) > 1))
    if ties:
        _ties["count"] += ties
        logger.debug("to_codewords: %d fibers had tied maxima", ties)
    codes = np.argmax(values, axis=-1) + 1
    return CodewordGrid(codes, transformed.emotions, transformed.categories)


def embed_codewords(codes):
    """Exact one-hot expansion of a codeword grid, ... x H x N*V."""
    width = codes.width
    if codes.codes.size and (codes.codes.min() < 1 or codes.codes.max() > width):
        raise DomainError(
            f"embed_codewords: codes must lie in [1, {width}], found "
            f"[{codes.codes.min()}, {codes.codes.max()}]"
        )
    out = np.zeros(codes.codes.shape + (width,))
    np.put_along_axis(out, (codes.codes - 1)[..., None], 1.0, axis=-1)
    return out


def random_codewords(shape, emotions, categories, rng):
    """Uniform codewords over the whole ``[1, emotions*categories]`` range."""
    codes = rng.integers(1, emotions * categories + 1, size=shape)
    return CodewordGrid(codes, emotions, categories)


def log_configurations(heads, emotions, categories):
    """Natural log of the number of distinct codeword rows per frame."""
    return heads * math.log(emotions * categories)


def write_codewords(path, grid):
    """Write a T x H grid as CSV, one row per frame, columns h1..hH."""
    codes = grid.codes
    if codes.ndim != 2:
        raise ShapeError(f"write_codewords: expected T x H codes, got {codes.shape}")
    with open(path, "w", newline="", encoding="utf-8") as fpointer:
        writer = csv.writer(fpointer, lineterminator="\n")
        writer.writerow([f"h{i + 1}" for i in range(codes.shape[1])])
        writer.writerows(codes.tolist())


def read_codewords(path, emotions, categories):
    """Read a codeword CSV written by :func:`write_codewords`."""
    with open(path, newline="", encoding="utf-8") as fpointer:
        rows = list(csv.reader(fpointer))
    codes = np.array([[int(v) for v in row] for row in rows[1:]], dtype=np.int64)
    return CodewordGrid(codes.reshape(-1, len(rows[0])), emotions, categories)
