"""Toy-scale Adaptive Space Encoder: encoders, decoders and the forward pass.

Every network works on batches shaped B x T x C. Parameters are plain
:class:`~elplab.autodiff.Tensor` leaves collected by :class:`Module` in
declaration order, which is also the order of the checkpoint file.
"""

import hashlib
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from elplab import autodiff as ad
from elplab import latent
from elplab.errors import CheckpointError, ConfigError, ShapeError
from elplab.features import AudioFeatureSequence, MotionSequence, style_statistics
from elplab.utils import canonical_json

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ELPCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")


@dataclass(frozen=True)
class NetworkConfig:
    """Widths, kernels and dilations of the toy networks."""

    audio_dim: int = 29
    beta_dim: int = 100
    pose_dim: int = 6
    audio_channels: tuple = (32, 64, 128)
    audio_kernel: int = 3
    dropout: float = 0.1
    tdnn_channels: tuple = (32, 32, 32)
    tdnn_kernel: int = 2
    tdnn_dilations: tuple = (1, 2, 4)
    mlp_hidden: int = 32
    head_channels: tuple = (64, 64, 64)
    head_kernel: int = 3
    recurrent_size: int = 32
    decoder_channels: int = 64
    blink_channels: int = 16
    blink_kernel: int = 5
    activation: str = "tanh"
    style_window: int = 0
    teacher_forcing: bool = True

    def __post_init__(self):
        for name in ("audio_channels", "tdnn_channels", "tdnn_dilations", "head_channels"):
            value = tuple(int(v) for v in getattr(self, name))
            if not value or min(value) < 1:
                raise ConfigError(f"network.{name} must be a nonempty list of positive ints")
            object.__setattr__(self, name, value)
        if len(self.tdnn_dilations) != len(self.tdnn_channels):
            raise ConfigError(
                "network.tdnn_dilations and network.tdnn_channels differ in length"
            )
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"network.activation must be tanh or relu, not {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"network.dropout must lie in [0, 1), got {self.dropout}")
        for name in (
            "audio_dim",
            "beta_dim",
            "pose_dim",
            "audio_kernel",
            "tdnn_kernel",
            "mlp_hidden",
            "head_kernel",
            "recurrent_size",
            "decoder_channels",
            "blink_channels",
            "blink_kernel",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"network.{name} must be >= 1")

    @property
    def style_width(self):
        return self.audio_channels[-1] + 2 * self.beta_dim + self.pose_dim

    @property
    def receptive_field(self):
        """Minimum clip length accepted by the TDNN emotion classifier."""
        return 1 + sum((self.tdnn_kernel - 1) * d for d in self.tdnn_dilations)

    @classmethod
    def reduced(cls, **kwargs):
        """Small widths for gradient checks."""
        small = dict(
            audio_channels=(4, 6),
            dropout=0.0,
            tdnn_channels=(4, 4, 4),
            mlp_hidden=4,
            head_channels=(4, 4, 4),
            recurrent_size=3,
            decoder_channels=4,
            blink_channels=3,
        )
        small.update(kwargs)
        return cls(**small)


@dataclass(frozen=True)
class LatentConfig:
    """Heads, categories and Gumbel temperature schedule of the latent space."""

    heads: int = 128
    categories: int = 64
    space: str = "U"
    tau_start: float = 1.0
    tau_end: float = 0.5
    hard: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.categories < 1:
            raise ConfigError("latent.heads and latent.categories must be >= 1")
        if self.space not in ("U", "V"):
            raise ConfigError(f"latent.space must be 'U' or 'V', not {self.space!r}")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ConfigError("latent.tau_start and latent.tau_end must be > 0")

    def temperature(self, step, total):
        """Exponential schedule from ``tau_start`` at step 0 to ``tau_end`` at the end."""
        if total <= 1:
            return self.tau_end
        frac = min(max(step / (total - 1), 0.0), 1.0)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


@dataclass(eq=False)
class ListenerPrediction:
    """Decoded listener motion, blink probabilities and emotion logits."""

    beta_pred: ad.Tensor
    pose_pred: ad.Tensor
    blink_prob: ad.Tensor
    emotion_logits: ad.Tensor


@dataclass(eq=False)
class ForwardResult:
    """Everything one ASE forward pass produces."""

    prediction: ListenerPrediction
    codewords: latent.CodewordGrid
    transformed: latent.TransformedSpace
    emotion: np.ndarray


class Module:
    """Container that collects parameters and sub-modules in declaration order."""

    def __init__(self):
        self._params = []
        self._children = []

    def param(self, name, values):
        tensor = ad.Tensor(values, requires_grad=True)
        self._params.append((name, tensor))
        return tensor

    def child(self, name, module):
        self._children.append((name, module))
        return module

    def parameters(self, prefix=""):
        """(dotted name, Tensor) pairs in declaration order."""
        for name, tensor in self._params:
            yield f"{prefix}{name}", tensor
        for name, module in self._children:
            yield from module.parameters(f"{prefix}{name}.")

    def groups(self):
        """Top-level parameter groups: name -> list of Tensors."""
        out = {}
        for name, module in self._children:
            out[name] = [t for _, t in module.parameters()]
        if self._params:
            out["root"] = [t for _, t in self._params]
        return out

    def zero_grad(self):
        for _, tensor in self.parameters():
            tensor.zero_grad()

    def parameter_count(self):
        return sum(t.size for _, t in self.parameters())


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _activate(x, kind):
    return ad.tanh(x) if kind == "tanh" else ad.relu(x)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", _uniform(rng, n_in, (n_in, n_out)))
        self.bias = self.param("bias", _uniform(rng, n_in, (n_out,)))

    def __call__(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear: expected width {self.n_in}, got {x.shape}")
        lead = x.shape[:-1]
        flat = x.reshape(-1, self.n_in) @ self.weight + self.bias
        return flat.reshape(lead + (self.n_out,))


class Conv1d(Module):
    """Temporal convolution over B x T x C as an im2col matmul."""

    def __init__(self, n_in, n_out, kernel, rng, dilation=1, padding="same"):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.kernel, self.dilation, self.padding = kernel, dilation, padding
        fan_in = kernel * n_in
        self.weight = self.param("weight", _uniform(rng, fan_in, (fan_in, n_out)))
        self.bias = self.param("bias", _uniform(rng, fan_in, (n_out,)))

    @property
    def span(self):
        return self.dilation * (self.kernel - 1)

    def __call__(self, x):
        if x.ndim != 3 or x.shape[-1] != self.n_in:
            raise ShapeError(f"Conv1d: expected B x T x {self.n_in}, got {x.shape}")
        batch, frames, _ = x.shape
        if self.padding == "same" and self.span:
            left = self.span // 2
            right = self.span - left
            parts = [x]
            if left:
                parts.insert(0, ad.Tensor(np.zeros((batch, left, self.n_in))))
            if right:
                parts.append(ad.Tensor(np.zeros((batch, right, self.n_in))))
            x = ad.concat(parts, axis=1)
        out_frames = x.shape[1] - self.span
        if out_frames < 1:
            raise ShapeError(
                f"Conv1d: {frames} frames shorter than the kernel span {self.span + 1}"
            )
        if self.kernel == 1:
            cols = x
        else:
            cols = ad.concat(
                [
                    x[:, j * self.dilation : j * self.dilation + out_frames, :]
                    for j in range(self.kernel)
                ],
                axis=-1,
            )
        flat = cols.reshape(batch * out_frames, self.kernel * self.n_in)
        out = flat @ self.weight + self.bias
        return out.reshape(batch, out_frames, self.n_out)


class GRU(Module):
    """Single-layer gated recurrent unit over B x T x C."""

    def __init__(self, n_in, hidden, rng):
        super().__init__()
        self.n_in, self.hidden = n_in, hidden
        self.w_input = self.param("w_input", _uniform(rng, n_in, (n_in, 3 * hidden)))
        self.b_input = self.param("b_input", _uniform(rng, n_in, (3 * hidden,)))
        self.w_gates = self.param("w_gates", _uniform(rng, hidden, (hidden, 2 * hidden)))
        self.w_cand = self.param("w_cand", _uniform(rng, hidden, (hidden, hidden)))

    def __call__(self, x):
        batch, frames, _ = x.shape
        hid = self.hidden
        proj = (x.reshape(batch * frames, self.n_in) @ self.w_input + self.b_input).reshape(
            batch, frames, 3 * hid
        )
        state = ad.Tensor(np.zeros((batch, hid)))
        outputs = []
        for t in range(frames):
            step = proj[:, t, :]
            gates = ad.sigmoid(step[:, : 2 * hid] + state @ self.w_gates)
            update, reset = gates[:, :hid], gates[:, hid:]
            cand = ad.tanh(step[:, 2 * hid :] + (reset * state) @ self.w_cand)
            state = state + update * (cand - state)
            outputs.append(state.reshape(batch, 1, hid))
        return ad.concat(outputs, axis=1)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


class AudioEncoder(Module):
    """Per-frame acoustic features to the ``a(t)`` encoding."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        widths = (config.audio_dim,) + config.audio_channels
        self.convs = [
            self.child(f"conv{i}", Conv1d(a, b, config.audio_kernel, rng))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, feats, rng=None):
        x = feats
        for conv in self.convs:
            x = dropout(_activate(conv(x), self.config.activation), self.config.dropout, rng)
        return x


class EmotionClassifier(Module):
    """Dilated time-delay convolutions, temporal mean pool, MLP to N logits."""

    def __init__(self, config, n_emotions, rng):
        super().__init__()
        self.config = config
        widths = (config.style_width,) + config.tdnn_channels
        self.layers = [
            self.child(
                f"tdnn{i}",
                Conv1d(a, b, config.tdnn_kernel, rng, dilation=d, padding="valid"),
            )
            for i, (a, b, d) in enumerate(
                zip(widths[:-1], widths[1:], config.tdnn_dilations)
            )
        ]
        self.hidden = self.child("mlp0", Linear(widths[-1], config.mlp_hidden, rng))
        self.out = self.child("mlp1", Linear(config.mlp_hidden, n_emotions, rng))

    def __call__(self, style):
        frames = style.shape[1]
        if frames < self.config.receptive_field:
            raise ShapeError(
                f"classify_emotion: {frames} frames, the TDNN needs at least "
                f"{self.config.receptive_field}"
            )
        x = style
        for layer in self.layers:
            x = _activate(layer(x), self.config.activation)
        pooled = ad.mean(x, axis=1)
        return self.out(_activate(self.hidden(pooled), self.config.activation))


class HeadEncoder(Module):
    """Style features to T x H x V head logits."""

    def __init__(self, config, heads, categories, rng):
        super().__init__()
        self.config = config
        self.heads, self.categories = heads, categories
        widths = (config.style_width,) + config.head_channels
        self.convs = [
            self.child(f"conv{i}", Conv1d(a, b, config.head_kernel, rng))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        self.recurrent = self.child("gru", GRU(widths[-1], config.recurrent_size, rng))
        self.proj = self.child(
            "proj", Linear(config.recurrent_size, heads * categories, rng)
        )

    def __call__(self, style):
        x = style
        for conv in self.convs:
            x = _activate(conv(x), self.config.activation)
        logits = self.proj(self.recurrent(x))
        batch, frames, _ = logits.shape
        return logits.reshape(batch, frames, self.heads, self.categories)


class MotionDecoder(Module):
    """Codeword embedding and speaker conditioning to listener expression and pose (D1)."""

    def __init__(self, config, width, rng):
        super().__init__()
        self.config = config
        self.width = width
        self.conv0 = self.child(
            "conv0", Conv1d(width, config.decoder_channels, 3, rng)
        )
        self.conv1 = self.child(
            "conv1",
            Conv1d(config.decoder_channels, config.beta_dim + config.pose_dim, 3, rng),
        )

    def __call__(self, inputs):
        out = self.conv1(_activate(self.conv0(inputs), self.config.activation))
        beta_dim = self.config.beta_dim
        return out[:, :, :beta_dim], out[:, :, beta_dim:]


class BlinkDecoder(Module):
    """Codeword embedding and speaker conditioning to per-frame blink probability (D2)."""

    def __init__(self, config, width, rng):
        super().__init__()
        self.config = config
        self.conv0 = self.child(
            "conv0", Conv1d(width, config.blink_channels, config.blink_kernel, rng)
        )
        self.conv1 = self.child("conv1", Conv1d(config.blink_channels, 1, 3, rng))

    def __call__(self, inputs):
        hidden = _activate(self.conv0(inputs), self.config.activation)
        out = ad.sigmoid(self.conv1(hidden))
        return out.reshape(out.shape[0], out.shape[1])


def _batched(value, ndim, name):
    arr = value.values if isinstance(value, ad.Tensor) else np.asarray(value, dtype=np.float64)
    if arr.ndim == ndim - 1:
        arr = arr[None]
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim - 1} or {ndim} axes, got {arr.shape}")
    return arr


class ASEModel(Module):
    """Audio encoder, emotion classifier, head encoder and decoders D1/D2."""

    def __init__(self, network, latent_config, n_emotions, seed=0):
        super().__init__()
        if n_emotions < 1:
            raise ConfigError("the model needs at least one emotion type")
        self.network = network
        self.latent = latent_config
        self.n_emotions = n_emotions
        rng = np.random.default_rng(seed)
        decoder_width = latent_config.heads * self.latent_width + self.condition_width
        self.audio_encoder = self.child("audio_encoder", AudioEncoder(network, rng))
        self.classifier = self.child(
            "classifier", EmotionClassifier(network, n_emotions, rng)
        )
        self.head_encoder = self.child(
            "head_encoder",
            HeadEncoder(network, latent_config.heads, latent_config.categories, rng),
        )
        self.motion_decoder = self.child(
            "motion_decoder", MotionDecoder(network, decoder_width, rng)
        )
        self.blink_decoder = self.child(
            "blink_decoder", BlinkDecoder(network, decoder_width, rng)
        )

    @property
    def latent_width(self):
        """N*V for the partitioned space U, V for the plain Base Space."""
        if self.latent.space == "U":
            return self.n_emotions * self.latent.categories
        return self.latent.categories

    @property
    def condition_width(self):
        """Width of the speaker conditioning read by D1 and D2 next to the codewords.

        The encoded audio ``a(t)`` is split into one gated copy per emotion in
        U, like the codewords, and passed as is in V.
        """
        width = self.network.audio_channels[-1]
        return self.n_emotions * width if self.latent.space == "U" else width

    @property
    def latent_emotions(self):
        return self.n_emotions if self.latent.space == "U" else 1

    def digest(self):
        """sha256 over everything that fixes the parameter layout."""
        layout = {
            "network": asdict(self.network),
            "latent": {
                "heads": self.latent.heads,
                "categories": self.latent.categories,
                "space": self.latent.space,
            },
            "emotions": self.n_emotions,
        }
        return hashlib.sha256(canonical_json(layout).encode("utf-8")).digest()

    def audio_encode(self, feats, rng=None):
        """B x T x Da features to B x T x 128 (``rng`` enables dropout)."""
        feats = ad.as_tensor(_batched(feats, 3, "audio_encode"))
        if feats.shape[-1] != self.network.audio_dim:
            raise ShapeError(
                f"audio_encode: expected {self.network.audio_dim} features, "
                f"got {feats.shape[-1]}"
            )
        return self.audio_encoder(feats, rng)

    def speaker_style(self, encoded_audio, motions):
        """Concatenate ``a(t)`` with the constant motion statistics per clip."""
        stats = np.stack(
            [style_statistics(m, self.network.style_window) for m in motions]
        )
        if stats.shape[:2] != encoded_audio.shape[:2]:
            raise ShapeError(
                f"speaker_style: audio {encoded_audio.shape[:2]} and motion "
                f"{stats.shape[:2]} disagree on batch or frames"
            )
        return ad.concat([encoded_audio, ad.Tensor(stats)], axis=-1)

    def _check_style(self, style, name):
        style = ad.as_tensor(style)
        if style.ndim == 2:
            style = style.reshape((1,) + style.shape)
        if style.shape[-1] != self.network.style_width:
            raise ShapeError(
                f"{name}: expected style width {self.network.style_width}, "
                f"got {style.shape[-1]}"
            )
        return style

    def classify_emotion(self, style):
        """B x T x 334 style to B x N emotion logits."""
        return self.classifier(self._check_style(style, "classify_emotion"))

    def encode_heads(self, style):
        """B x T x 334 style to B x T x H x V head logits."""
        return self.head_encoder(self._check_style(style, "encode_heads"))

    def _flatten_embedding(self, embedding, name):
        embedding = ad.as_tensor(embedding)
        if embedding.ndim == 3:
            embedding = embedding.reshape((1,) + embedding.shape)
        expected = (self.latent.heads, self.latent_width)
        if embedding.ndim != 4 or embedding.shape[2:] != expected:
            raise ShapeError(
                f"{name}: expected B x T x {expected[0]} x {expected[1]}, "
                f"got {embedding.shape}"
            )
        batch, frames = embedding.shape[:2]
        return embedding.reshape(batch, frames, expected[0] * expected[1])

    def speaker_condition(self, encoded_audio, gate):
        """Decoder conditioning from ``a(t)`` (B x T x A) and the B x N emotion gate."""
        encoded_audio = ad.as_tensor(encoded_audio)
        if self.latent.space != "U":
            return encoded_audio
        batch, frames, width = encoded_audio.shape
        gate = np.asarray(gate, dtype=np.float64)
        if gate.shape != (batch, self.n_emotions):
            raise ShapeError(
                f"speaker_condition: gate {gate.shape} for {batch} clips "
                f"and {self.n_emotions} emotions"
            )
        mask = np.repeat(gate, width, axis=-1)[:, None, :]
        mask = np.ascontiguousarray(np.broadcast_to(mask, (batch, frames, mask.shape[-1])))
        return ad.concat([encoded_audio] * self.n_emotions, axis=-1) * mask

    def _decoder_input(self, embedding, condition, name):
        flat = self._flatten_embedding(embedding, name)
        shape = flat.shape[:2] + (self.condition_width,)
        if condition is None:
            # no speaker: the codewords alone drive the decoders
            condition = np.zeros(shape)
        condition = ad.as_tensor(condition)
        if condition.ndim == 2:
            condition = condition.reshape((1,) + condition.shape)
        if condition.shape != shape:
            raise ShapeError(f"{name}: expected conditioning {shape}, got {condition.shape}")
        return ad.concat([flat, condition], axis=-1)

    def decode_motion(self, embedding, condition=None):
        """Codeword one-hots to (B x T x 100, B x T x 6).

        ``condition`` is the output of :meth:`speaker_condition`; zeros when
        omitted.
        """
        return self.motion_decoder(self._decoder_input(embedding, condition, "decode_motion"))

    def decode_blink(self, embedding, condition=None):
        """Codeword one-hots to B x T blink probabilities."""
        return self.blink_decoder(self._decoder_input(embedding, condition, "decode_blink"))

    def decode_codewords(self, grid, condition=None):
        """Decode an explicit codeword grid (B x T x H or T x H)."""
        embedding = latent.embed_codewords(grid)
        beta, pose = self.decode_motion(embedding, condition)
        return beta, pose, self.decode_blink(embedding, condition)


def _motions(speaker_motion):
    if isinstance(speaker_motion, MotionSequence):
        return [speaker_motion]
    return list(speaker_motion)


def _audio_array(audio):
    if isinstance(audio, AudioFeatureSequence):
        return audio.feats[None]
    if isinstance(audio, (list, tuple)):
        return np.stack([a.feats if isinstance(a, AudioFeatureSequence) else a for a in audio])
    return audio


def ase_forward(
    model,
    audio,
    speaker_motion,
    emotion=None,
    emotion_override=None,
    mode="infer",
    rng=None,
    temperature=1.0,
    hard=None,
):
    """One pass of the Adaptive Space Encoder.

    Parameters
    ----------
    model : ASEModel
    audio : AudioFeatureSequence, list of them, or B x T x Da array
    speaker_motion : MotionSequence or list of them
    emotion : array, optional
        Ground-truth one-hots (N or B x N); gates the latent in ``train``
        mode when the network uses teacher forcing.
    emotion_override : EmotionVector or array, optional
        Gates the latent instead of the classifier prediction.
    mode : {"train", "infer"}
        ``train`` samples Gumbel noise and dropout from ``rng``; ``infer`` is
        a deterministic argmax without noise or dropout.
    rng : numpy.random.Generator, optional
    temperature : float
        Gumbel-Softmax temperature (train mode).
    hard : bool, optional
        Straight-through one-hots; defaults to ``model.latent.hard`` in
        train mode and is always true in infer mode.

    Returns
    -------
    ForwardResult
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', not {mode!r}")
    motions = _motions(speaker_motion)
    training = mode == "train"
    encoded = model.audio_encode(_audio_array(audio), rng if training else None)
    style = model.speaker_style(encoded, motions)
    emotion_logits = model.classify_emotion(style)
    head_logits = model.encode_heads(style)
    batch = style.shape[0]
    n = model.n_emotions

    if emotion_override is not None:
        gate = latent.emotion_matrix(emotion_override, n)
    elif training and model.network.teacher_forcing:
        if emotion is None:
            raise ConfigError("train mode with teacher forcing needs the ground-truth emotion")
        gate = latent.emotion_matrix(emotion, n)
    else:
        gate = np.eye(n)[np.argmax(emotion_logits.values, axis=-1)]
    if gate.ndim == 1:
        gate = np.tile(gate, (batch, 1))

    if training:
        use_hard = model.latent.hard if hard is None else hard
        base = latent.gumbel_softmax(
            head_logits, temperature=temperature, hard=use_hard, rng=rng
        )
    else:
        base = latent.gumbel_softmax(head_logits, temperature=1.0, hard=True)
    if model.latent.space == "U":
        transformed = latent.split_rearrange(base, gate)
    else:
        transformed = latent.identity_space(base)
    codewords = latent.to_codewords(transformed)
    condition = model.speaker_condition(encoded, gate)
    beta, pose = model.decode_motion(transformed.expanded, condition)
    blink = model.decode_blink(transformed.expanded, condition)
    prediction = ListenerPrediction(beta, pose, blink, emotion_logits)
    return ForwardResult(prediction, codewords, transformed, gate)


def save_checkpoint(model, path):
    """Write the versioned binary checkpoint of ``model``'s parameters."""
    values = [t.values.ravel() for _, t in model.parameters()]
    flat = np.concatenate(values) if values else np.zeros(0)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.digest(), flat.size)
    Path(path).write_bytes(header + flat.astype("<f8").tobytes())
    logger.info("wrote checkpoint %s (%d parameters)", path, flat.size)


def load_checkpoint(model, path):
    """Load parameters written by :func:`save_checkpoint` into ``model``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"checkpoint {path} is truncated")
    magic, version, digest, count = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an elplab checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if digest != model.digest():
        raise CheckpointError(
            f"{path}: config digest mismatch, the checkpoint was trained with "
            "a different network/latent configuration"
        )
    if count != model.parameter_count():
        raise CheckpointError(
            f"{path}: {count} parameters, the model has {model.parameter_count()}"
        )
    payload = len(data) - _HEADER.size
    if payload != 8 * count:
        raise CheckpointError(f"{path}: expected {8 * count} payload bytes, found {payload}")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    offset = 0
    for _, tensor in model.parameters():
        tensor.assign_(flat[offset : offset + tensor.size].reshape(tensor.shape))
        offset += tensor.size
    return model
