"""Motion, audio and blink sequences, speaker style features and blink extraction.

Shapes follow the conversation-clip convention: ``T`` frames at ``fps``
frames per second, expression coefficients ``beta`` (T x 100 by default) and
head pose ``pose`` (T x 6).
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from elplab.errors import DomainError, NonFiniteError, ShapeError

DEFAULT_FPS = 25


def _as_2d(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a T x D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """Per-frame expression (``beta``) and head pose (``pose``) coefficients."""

    beta: np.ndarray
    pose: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        beta = _as_2d("MotionSequence.beta", self.beta)
        pose = _as_2d("MotionSequence.pose", self.pose)
        if beta.shape[0] != pose.shape[0]:
            raise ShapeError(
                f"MotionSequence: beta has {beta.shape[0]} frames, "
                f"pose has {pose.shape[0]}"
            )
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pose", pose)

    @property
    def frames(self):
        return self.beta.shape[0]

    def stacked(self):
        """``beta`` and ``pose`` side by side, T x (Dbeta + Dpose)."""
        return np.hstack([self.beta, self.pose])


@dataclass(frozen=True, eq=False)
class AudioFeatureSequence:
    """Per-frame acoustic features, frame-aligned with a MotionSequence."""

    feats: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "feats", _as_2d("AudioFeatureSequence.feats", self.feats)
        )

    @property
    def frames(self):
        return self.feats.shape[0]


@dataclass(frozen=True, eq=False)
class BlinkSequence:
    """Binary per-frame eyelid state, 1 while a blink is happening."""

    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi)
        if phi.ndim != 1:
            raise ShapeError(f"BlinkSequence: expected T values, got shape {phi.shape}")
        if not np.all((phi == 0) | (phi == 1)):
            raise DomainError("BlinkSequence: values must be 0 or 1")
        object.__setattr__(self, "phi", phi.astype(np.int8))

    @property
    def frames(self):
        return self.phi.shape[0]

    def count(self):
        """Number of blinks (maximal runs of 1s)."""
        padded = np.concatenate([[0], self.phi, [0]])
        return int(np.sum(np.diff(padded) == 1))


@dataclass(frozen=True, eq=False)
class EmotionVector:
    """One-hot emotion label over N emotion types."""

    e: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.e, dtype=np.float64)
        if e.ndim != 1 or e.size == 0:
            raise ShapeError(f"EmotionVector: expected N values, got shape {e.shape}")
        if not (np.sum(e == 1.0) == 1 and np.sum(e == 0.0) == e.size - 1):
            raise DomainError(f"EmotionVector: not one-hot: {e.tolist()}")
        object.__setattr__(self, "e", e)

    @classmethod
    def from_slot(cls, slot, n):
        if not 0 <= slot < n:
            raise DomainError(f"emotion slot {slot} outside 0..{n - 1}")
        e = np.zeros(n)
        e[slot] = 1.0
        return cls(e)

    @property
    def slot(self):
        return int(np.argmax(self.e))

    @property
    def n(self):
        return self.e.size


@dataclass(frozen=True, eq=False)
class EyeLandmarkSequence:
    """Six 2-D landmarks per eye per frame, shape T x 2 x 6 x 2.

    Within an eye the points follow the usual ring order: p1 and p4 are the
    corners, p2/p3 the upper lid and p5/p6 the lower lid.
    """

    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 4 or points.shape[1:] != (2, 6, 2):
            raise ShapeError(
                f"EyeLandmarkSequence: expected T x 2 x 6 x 2, got {points.shape}"
            )
        if not np.all(np.isfinite(points)):
            raise NonFiniteError("EyeLandmarkSequence: non-finite values")
        object.__setattr__(self, "points", points)

    @property
    def frames(self):
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class SpeakerStyleSequence:
    """Per-frame speaker style feature ``a(t)`` + motion fluctuation statistics."""

    s_sty: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s_sty", _as_2d("SpeakerStyleSequence", self.s_sty))

    @property
    def width(self):
        return self.s_sty.shape[1]


def style_width(audio_width, beta_dim, pose_dim):
    """Width of the style feature: a(t) plus std(beta), std(dbeta), std(dpose)."""
    return audio_width + 2 * beta_dim + pose_dim


def temporal_derivative(seq):
    """Forward difference along time; the first frame is defined as zero."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 0 or seq.shape[0] == 0:
        raise ShapeError("temporal_derivative: empty sequence")
    return np.diff(seq, axis=0, prepend=seq[:1])


def clip_std(seq):
    """Population standard deviation of every dimension over the clip."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 2:
        raise ShapeError(
            f"clip_std: needs at least 2 frames of a T x D array, got {seq.shape}"
        )
    return seq.std(axis=0)


def _window_std(seq, window):
    half = window // 2
    padded = np.pad(seq, ((half, window - 1 - half), (0, 0)), mode="edge")
    return sliding_window_view(padded, window, axis=0).std(axis=-1)


def style_statistics(motion, window=0):
    """The motion part of the style feature, T x (2*Dbeta + Dpose).

    With ``window`` 0 the statistics are clip-level and repeated on every
    frame; otherwise each frame gets the std over a centered window of
    ``window`` frames (edges padded by repetition).
    """
    if motion.frames < 2:
        raise ShapeError(f"style_statistics: needs at least 2 frames, got {motion.frames}")
    blocks = (
        motion.beta,
        temporal_derivative(motion.beta),
        temporal_derivative(motion.pose),
    )
    if window:
        if window < 2:
            raise DomainError(f"style window must be 0 or >= 2, got {window}")
        return np.hstack([_window_std(b, window) for b in blocks])
    stats = np.concatenate([clip_std(b) for b in blocks])
    return np.tile(stats, (motion.frames, 1))


def compute_speaker_style(audio_encoded, motion, window=0):
    """Concatenate encoded audio with the motion fluctuation statistics.

    Parameters
    ----------
    audio_encoded : array, T x A
        Encoded per-frame audio features ``a(t)``.
    motion : MotionSequence
        The speaker's motion over the same frames.
    window : int
        0 for clip-level statistics, else a centered window length.

    Returns
    -------
    SpeakerStyleSequence
        T x (A + 2*Dbeta + Dpose); 334 wide for the default dimensions.
    """
    audio_encoded = _as_2d("compute_speaker_style", audio_encoded)
    if audio_encoded.shape[0] != motion.frames:
        raise ShapeError(
            f"compute_speaker_style: audio has {audio_encoded.shape[0]} frames, "
            f"motion has {motion.frames}"
        )
    return SpeakerStyleSequence(
        np.hstack([audio_encoded, style_statistics(motion, window)])
    )


def eye_aspect_ratio(landmarks):
    """Per-frame eye aspect ratio averaged over both eyes."""
    pts = landmarks.points
    corner = np.linalg.norm(pts[:, :, 0] - pts[:, :, 3], axis=-1)
    if np.any(corner < 1e-9):
        frame = int(np.argwhere(corner < 1e-9)[0][0])
        raise DomainError(f"eye_aspect_ratio: degenerate eye corners at frame {frame}")
    upper = np.linalg.norm(pts[:, :, 1] - pts[:, :, 5], axis=-1)
    lower = np.linalg.norm(pts[:, :, 2] - pts[:, :, 4], axis=-1)
    return ((upper + lower) / (2.0 * corner)).mean(axis=1)


def eye_closure_ratio(landmarks, open_percentile=95.0):
    """Closure ratio ``r = 1 - EAR / EAR_open``, clipped to [0, 1].

    ``EAR_open`` is the clip's ``open_percentile`` EAR, so a clip that starts
    mid-blink is still normalized by its open-eye frames.
    """
    ear = eye_aspect_ratio(landmarks)
    ear_open = np.percentile(ear, open_percentile)
    if ear_open <= 1e-12:
        return np.ones_like(ear)
    return np.clip(1.0 - ear / ear_open, 0.0, 1.0)


def extract_blink(ratio, threshold=0.5):
    """Frames whose closure ratio exceeds ``threshold`` are blinking."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"extract_blink: threshold must lie in (0, 1), got {threshold}")
    ratio = np.asarray(ratio, dtype=np.float64)
    return BlinkSequence((ratio > threshold).astype(np.int8))


BLINK_DECISIONS = ("expected", "threshold")


def decide_blinks(prob, rule="expected", threshold=0.5):
    """Binary blink labels from per-frame blink probabilities.

    ``threshold`` labels the frames whose probability exceeds ``threshold``,
    the same convention as :func:`extract_blink`. ``expected`` labels the
    ``round(sum(prob))`` most probable frames, ties going to the earlier
    frame, so a decoder trained on rare blinks still fires as often as its
    probabilities say.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 1:
        raise ShapeError(f"decide_blinks: expected T probabilities, got {prob.shape}")
    if not np.all((prob >= 0.0) & (prob <= 1.0)):
        raise DomainError("decide_blinks: probabilities must lie in [0, 1]")
    if rule == "threshold":
        return extract_blink(prob, threshold)
    if rule != "expected":
        raise DomainError(f"decide_blinks: rule must be one of {BLINK_DECISIONS}, not {rule!r}")
    count = int(np.rint(prob.sum()))
    phi = np.zeros(prob.size, dtype=np.int8)
    phi[np.argsort(-prob, kind="stable")[:count]] = 1
    return BlinkSequence(phi)
