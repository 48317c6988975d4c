"""Hand-crafted listener baselines scored next to the trained model."""

import heapq
import logging

import numpy as np

from elplab import latent
from elplab.errors import CheckpointError, DomainError, ShapeError
from elplab.features import MotionSequence, decide_blinks

logger = logging.getLogger(__name__)


def _require(train_set):
    if not train_set:
        raise DomainError("baseline: the training set is empty")


def _mean_frame_l2(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"baseline: query {a.shape} and train clip {b.shape} differ")
    return float(np.sqrt(((a - b) ** 2).sum(axis=1)).mean())


def _nearest(query, train_set, key):
    _require(train_set)
    scored = ((_mean_frame_l2(query, key(c)), i) for i, c in enumerate(train_set))
    _, index = heapq.nsmallest(1, scored)[0]
    return train_set[index]


def nn_motion(query_speaker, train_set):
    """Listener of the train clip whose speaker motion is closest to the query.

    Distance is the mean over frames of the L2 distance between stacked
    expression and pose coefficients; ties go to the lower clip index.
    """
    clip = _nearest(query_speaker.stacked(), train_set, lambda c: c.speaker.stacked())
    return clip.listener, clip.blink


def nn_audio(query_audio, train_set):
    """As :func:`nn_motion` with the distance taken on audio features."""
    clip = _nearest(query_audio.feats, train_set, lambda c: c.audio.feats)
    return clip.listener, clip.blink


def train_listener_std(train_set):
    """Per-dimension std of all training listener frames, (beta, pose)."""
    _require(train_set)
    beta = np.vstack([c.listener.beta for c in train_set])
    pose = np.vstack([c.listener.pose for c in train_set])
    return beta.std(axis=0), pose.std(axis=0)


def random_listener(train_set, rng, scale=0.05, std=None):
    """A uniformly drawn training listener plus small Gaussian perturbation.

    The perturbation std is ``scale`` times the per-dimension training std.
    """
    _require(train_set)
    beta_std, pose_std = std if std is not None else train_listener_std(train_set)
    clip = train_set[int(rng.integers(len(train_set)))]
    beta = clip.listener.beta + rng.normal(size=clip.listener.beta.shape) * (scale * beta_std)
    pose = clip.listener.pose + rng.normal(size=clip.listener.pose.shape) * (scale * pose_std)
    return MotionSequence(beta, pose, clip.listener.fps), clip.blink


def dls_random(model, frames, rng, blink_rule="expected", threshold=0.5):
    """Decode uniformly random codewords with the model's trained decoders.

    There is no speaker, so the decoders get no audio conditioning.
    """
    if model is None:
        raise CheckpointError("dls_random needs trained decoders; no checkpoint was loaded")
    grid = latent.random_codewords(
        (frames, model.latent.heads),
        model.latent_emotions,
        model.latent.categories,
        rng,
    )
    beta, pose, blink = model.decode_codewords(grid)
    phi = decide_blinks(blink.values[0], blink_rule, threshold)
    return MotionSequence(beta.values[0], pose.values[0]), phi
