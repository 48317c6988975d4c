"""Training objectives: motion L2, blink cross-entropy and regularizer,
emotion cross-entropy and their weighted total.

Every loss accepts a single clip (T x D, T, or N) or a batch with a leading
axis B; batched losses are summed over frames and averaged over clips.
"""

import math
from dataclasses import dataclass

import numpy as np

from elplab import autodiff as ad
from elplab.errors import ConfigError, NonFiniteError, ShapeError
from elplab.latent import emotion_matrix

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the blink CE, emotion CE and blink regularizer."""

    lambda1: float = 5.0
    lambda2: float = 5.0
    lambda3: float = 0.01
    squared_l2: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")


@dataclass(eq=False)
class LossParts:
    """The four loss terms of one evaluation."""

    l2: object
    ce1: object
    ce2: object
    reg: object

    def items(self):
        return (("L_L2", self.l2), ("L_CE1", self.ce1), ("L_CE2", self.ce2), ("L_reg", self.reg))


def _values(x):
    return x.values if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _batch_size(shape, ndim_single):
    if len(shape) == ndim_single:
        return 1
    if len(shape) != ndim_single + 1:
        raise ShapeError(f"expected {ndim_single} or {ndim_single + 1} axes, got {shape}")
    return shape[0]


def _check_pair(name, pred, gt):
    if pred.shape != np.shape(gt):
        raise ShapeError(f"{name}: prediction {pred.shape} and target {np.shape(gt)} differ")


def motion_l2(beta_pred, pose_pred, beta_gt, pose_gt, squared=False):
    """Sum over frames of ``||beta_pred - beta'|| + ||p_pred - p'||``.

    With ``squared`` the squared norms are summed instead.
    """
    beta_pred, pose_pred = ad.as_tensor(beta_pred), ad.as_tensor(pose_pred)
    _check_pair("motion_l2", beta_pred, _values(beta_gt))
    _check_pair("motion_l2", pose_pred, _values(pose_gt))
    batch = _batch_size(beta_pred.shape, 2)
    total = None
    for pred, gt in ((beta_pred, beta_gt), (pose_pred, pose_gt)):
        diff = pred - _values(gt)
        sq = ad.tsum(diff * diff, axis=-1)
        term = ad.tsum(sq if squared else ad.sqrt(sq))
        total = term if total is None else total + term
    return total * (1.0 / batch)


def _clamped(prob):
    return ad.clip(ad.as_tensor(prob), PROB_CLAMP, 1.0 - PROB_CLAMP)


def blink_ce(pred_prob, gt):
    """Binary cross-entropy of per-frame blink probabilities, summed over frames."""
    pred_prob = ad.as_tensor(pred_prob)
    phi = np.asarray(getattr(gt, "phi", gt), dtype=np.float64)
    _check_pair("blink_ce", pred_prob, phi)
    batch = _batch_size(pred_prob.shape, 1)
    p = _clamped(pred_prob)
    ll = ad.log(p) * phi + ad.log(1.0 - p) * (1.0 - phi)
    return ad.tsum(ll) * (-1.0 / batch)


def blink_reg(pred_prob):
    """Total variation of the blink probabilities along time."""
    pred_prob = ad.as_tensor(pred_prob)
    batch = _batch_size(pred_prob.shape, 1)
    if pred_prob.shape[-1] < 2:
        return ad.Tensor(0.0)
    steps = pred_prob[..., 1:] - pred_prob[..., :-1]
    return ad.tsum(ad.tabs(steps)) * (1.0 / batch)


def emotion_ce(pred, gt):
    """Per-class binary cross-entropy of a softmax output against a one-hot."""
    pred = ad.as_tensor(pred)
    e = emotion_matrix(gt)
    _check_pair("emotion_ce", pred, e)
    batch = _batch_size(pred.shape, 1)
    p = _clamped(pred)
    ll = ad.log(p) * e + ad.log(1.0 - p) * (1.0 - e)
    return ad.tsum(ll) * (-1.0 / batch)


def total_loss(parts, weights):
    """``L_L2 + lambda1*L_CE1 + lambda2*L_CE2 + lambda3*L_reg``."""
    for name, part in parts.items():
        value = part.item() if isinstance(part, ad.Tensor) else float(part)
        if not math.isfinite(value):
            raise NonFiniteError(f"total_loss: term {name} is not finite ({value})")
    return (
        ad.as_tensor(parts.l2)
        + ad.as_tensor(parts.ce1) * weights.lambda1
        + ad.as_tensor(parts.ce2) * weights.lambda2
        + ad.as_tensor(parts.reg) * weights.lambda3
    )


def loss_parts(prediction, beta_gt, pose_gt, blink_gt, emotion_gt, squared=False):
    """All four terms for a :class:`~elplab.networks.ListenerPrediction`."""
    probs = ad.softmax(prediction.emotion_logits, axis=-1)
    return LossParts(
        l2=motion_l2(prediction.beta_pred, prediction.pose_pred, beta_gt, pose_gt, squared),
        ce1=blink_ce(prediction.blink_prob, blink_gt),
        ce2=emotion_ce(probs, emotion_gt),
        reg=blink_reg(prediction.blink_prob),
    )
