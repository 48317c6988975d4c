"""Synthetic conversation corpus with a known oracle, and its on-disk format.

Each clip has a speaker whose motion is a low-rank mix of emotion-indexed
sinusoidal factors, audio features that are an emotion-indexed linear
projection of that motion, and a listener that answers with an
emotion-modulated, lagged, per-coefficient linear response plus an emotion
offset. Listener blinks follow a renewal process whose rate depends on the
emotion (positive < neutral < negative) and whose hazard can be coupled to
the lagged speaker drive.

Clip file layout (UTF-8 text)::

    #elp-clip v1 T=<int> N=<int> emotion=<int> dims=<beta>,<pose>,<audio>
    [speaker_beta]
    <T rows>
    [speaker_pose]
    ...
    [audio]
    [listener_beta]
    [listener_pose]
    [blink]
    [eye_landmarks]      (optional, 24 values per row)

Floats are written with 17 significant digits, so a write/read round trip is
lossless.
"""

import functools
import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from elplab.errors import ConfigError, CorpusFormatError, ShapeError
from elplab.features import (
    AudioFeatureSequence,
    BlinkSequence,
    EmotionVector,
    EyeLandmarkSequence,
    MotionSequence,
    extract_blink,
    eye_closure_ratio,
)
from elplab.utils import digest, ensure_dir, rng, write_json

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_HEADER_RE = re.compile(
    r"^#elp-clip v1 T=(\d+) N=(\d+) emotion=(\d+) dims=(\d+),(\d+),(\d+)$"
)
_CLIP_RE = re.compile(r"^clip_(\d+)$")
_OPEN_LID = 0.3
_CLOSED_LID = 0.03
BURN_IN_SPACINGS = 4.0


def emotion_names(n):
    """Human names of the emotion slots, in slot order."""
    if n == 3:
        return ("positive", "neutral", "negative")
    if n == 2:
        return ("positive", "negative")
    return tuple(f"emotion{i}" for i in range(n))


@dataclass(frozen=True)
class CorpusSpec:
    """Generator settings; the seed fixes every random draw."""

    clips: int = 300
    frames: int = 50
    fps: int = 25
    emotions: int = 3
    beta_dim: int = 100
    pose_dim: int = 6
    audio_dim: int = 29
    factors: int = 6
    motion_noise: float = 0.05
    audio_noise: float = 0.05
    listener_noise: float = 0.02
    lag: int = 2
    blink_rates: tuple = ()
    blink_length: int = 3
    refractory: int = 5
    blink_coupling: float = 1.5
    eye_landmarks: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blink_rates", tuple(float(r) for r in self.blink_rates))
        if self.clips < 1 or self.emotions < 1:
            raise ConfigError("corpus.clips and corpus.emotions must be >= 1")
        if self.frames < 2 or self.fps < 1:
            raise ConfigError("corpus.frames must be >= 2 and corpus.fps >= 1")
        if not 0 <= self.lag < self.frames:
            raise ConfigError(f"corpus.lag must lie in [0, {self.frames})")
        if not 1 <= self.factors <= self.audio_dim:
            raise ConfigError("corpus.factors must lie in [1, corpus.audio_dim]")
        if min(self.beta_dim, self.pose_dim, self.audio_dim) < 1:
            raise ConfigError("corpus dims must be >= 1")
        if min(self.motion_noise, self.audio_noise, self.listener_noise) < 0:
            raise ConfigError("corpus noise levels must be >= 0")
        if self.blink_length < 1 or self.refractory < 0 or self.blink_coupling < 0:
            raise ConfigError("corpus blink settings must be non-negative")
        if self.blink_rates and len(self.blink_rates) != self.emotions:
            raise ConfigError(
                f"corpus.blink_rates needs {self.emotions} values, got {len(self.blink_rates)}"
            )
        min_gap = self.blink_length + self.refractory
        for rate in self.rates():
            if rate <= 0 or self.fps / rate <= min_gap:
                raise ConfigError(
                    f"blink rate {rate}/s is not reachable with blinks of "
                    f"{self.blink_length} frames and a {self.refractory}-frame refractory period"
                )

    def rates(self):
        """Blink rate per emotion slot, in blinks per second."""
        if self.blink_rates:
            return self.blink_rates
        if self.emotions == 1:
            return (0.5,)
        return tuple(float(r) for r in np.linspace(0.3, 0.8, self.emotions))

    def digest(self):
        return digest(asdict(self))


@dataclass(frozen=True, eq=False)
class ConversationClip:
    """Speaker input, listener ground truth and the emotion of one clip."""

    clip_id: int
    speaker: MotionSequence
    audio: AudioFeatureSequence
    listener: MotionSequence
    blink: BlinkSequence
    emotion: EmotionVector
    eye_landmarks: EyeLandmarkSequence = None

    def __post_init__(self):
        frames = {
            self.speaker.frames,
            self.audio.frames,
            self.listener.frames,
            self.blink.frames,
        }
        if self.eye_landmarks is not None:
            frames.add(self.eye_landmarks.frames)
        if len(frames) != 1:
            raise ShapeError(f"clip {self.clip_id}: components disagree on T ({sorted(frames)})")

    @property
    def frames(self):
        return self.speaker.frames


@dataclass(frozen=True, eq=False)
class CorpusSplits:
    train: list
    val: list
    test: list

    def all(self):
        return sorted(self.train + self.val + self.test, key=lambda c: c.clip_id)

    def __getitem__(self, name):
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass(frozen=True, eq=False)
class _World:
    """Generator parameters shared by all clips of a corpus."""

    amplitude: np.ndarray
    frequency: np.ndarray
    beta_basis: np.ndarray
    pose_basis: np.ndarray
    audio_projection: np.ndarray
    response: np.ndarray
    gain: np.ndarray
    offset: np.ndarray


def _world(spec):
    gen = rng(spec.seed, 1)
    n = spec.emotions
    width = spec.beta_dim + spec.pose_dim
    slots = np.arange(n)
    base_freq = 0.4 + 0.4 * slots
    spread = 1.0 + 0.25 * np.arange(spec.factors)
    return _World(
        amplitude=0.5 + 0.5 * slots,
        frequency=base_freq[:, None] * spread[None, :],
        beta_basis=gen.normal(0.0, 1.0 / np.sqrt(spec.factors), (spec.factors, spec.beta_dim)),
        pose_basis=gen.normal(0.0, 0.3 / np.sqrt(spec.factors), (spec.factors, spec.pose_dim)),
        audio_projection=gen.normal(0.0, 1.0 / np.sqrt(width), (n, width, spec.audio_dim)),
        response=gen.uniform(0.5, 1.5, width),
        gain=0.8 + 0.2 * slots,
        offset=gen.normal(0.0, 0.5, (n, width)),
    )


def hazard_for_rate(rate_per_frame, length, refractory):
    """Per-frame onset probability giving a mean onset spacing of 1/rate."""
    spacing = 1.0 / rate_per_frame
    return 1.0 / (spacing - length - refractory + 1.0)


def blink_burn_in(rate_per_frame):
    """Frames simulated and dropped before a clip so it starts in steady state."""
    return int(np.ceil(BURN_IN_SPACINGS / rate_per_frame))


def coupled_hazard(base, drive, coupling):
    """Onset probability ``base * exp(coupling * drive)``, capped at 1."""
    return np.minimum(1.0, base * np.exp(coupling * np.asarray(drive, dtype=np.float64)))


def renewal_blinks(frames, hazard, length, refractory, gen, burn_in=0):
    """Binary blink sequence from a renewal process.

    A blink lasts ``length`` frames and is followed by ``refractory`` frames
    without onsets. Otherwise frame ``t`` starts a blink with probability
    ``hazard[t]`` (a scalar or one value per frame). The first ``burn_in``
    frames are simulated and dropped; a blink running across that edge is
    kept in part.
    """
    total = burn_in + frames
    hazard = np.broadcast_to(np.asarray(hazard, dtype=np.float64), (total,))
    phi = np.zeros(total, dtype=np.int8)
    draws = gen.random(total)
    t = 0
    while t < total:
        if draws[t] < hazard[t]:
            phi[t : t + length] = 1
            t += length + refractory
        else:
            t += 1
    return phi[burn_in:]


def expected_blinks(
    base, length, refractory, frames, burn_in=0, coupling=0.0, omega=0.0, phases=128
):
    """Mean blink count of :func:`renewal_blinks` over the kept frames.

    The hazard follows :func:`coupled_hazard` on the drive
    ``sqrt(2) * sin(omega * t + phase)``, averaged over evenly spaced phases.
    """
    offsets = (np.arange(phases) + 0.5) * (2.0 * np.pi / phases)
    steps = np.arange(-burn_in, frames)
    hazard = coupled_hazard(
        base, np.sqrt(2.0) * np.sin(omega * steps[:, None] + offsets[None, :]), coupling
    )
    span = length + refractory
    # state[:, j]: probability of j more blocked frames; j = 0 may start a blink
    state = np.zeros((phases, span))
    state[:, 0] = 1.0
    count = np.zeros(phases)
    for i in range(steps.size):
        if i == burn_in:
            # a blink started during the burn-in is still closing the eye
            count += state[:, refractory + 1 :].sum(axis=1)
        onset = state[:, 0] * hazard[i]
        if i >= burn_in:
            count += onset
        if span > 1:
            state = np.concatenate(
                [(state[:, 0] - onset + state[:, 1])[:, None], state[:, 2:], onset[:, None]],
                axis=1,
            )
    return float(count.mean())


@functools.lru_cache(maxsize=64)
def calibrate_hazard(rate_per_frame, length, refractory, frames, coupling=0.0, omega=0.0):
    """Base hazard whose expected blink count over ``frames`` is ``rate * frames``.

    The count includes the steady-state burn-in of :func:`blink_burn_in` and
    the drive coupling of :func:`expected_blinks`.
    """
    burn_in = blink_burn_in(rate_per_frame)
    target = rate_per_frame * frames

    def gap(base):
        return (
            expected_blinks(base, length, refractory, frames, burn_in, coupling, omega) - target
        )

    # every frame has hazard 1 from this base on
    ceiling = float(np.exp(coupling * np.sqrt(2.0)))
    high = hazard_for_rate(rate_per_frame, length, refractory)
    if not 0.0 < high < ceiling:
        high = ceiling
    while gap(high) < 0.0:
        if high >= ceiling:
            raise ConfigError(
                f"blink rate {rate_per_frame} per frame is not reachable over {frames} frames"
            )
        high = min(2.0 * high, ceiling)
    return float(optimize.brentq(gap, 0.0, high, xtol=1e-14))


def synthesize_eye_landmarks(phi, gen, noise=0.003):
    """Two-eye landmark tracks whose lids close on the blink frames of ``phi``."""
    phi = np.asarray(phi)
    frames = phi.size
    lid = np.where(phi == 1, _CLOSED_LID, _OPEN_LID)
    scale = gen.uniform(0.8, 1.2)
    shift = gen.uniform(-5.0, 5.0, size=2)
    points = np.zeros((frames, 2, 6, 2))
    for eye, cx in enumerate((-1.5, 1.5)):
        xs = cx + np.array([-1.0, -0.4, 0.4, 1.0, 0.4, -0.4])
        ys = np.array([0.0, 1.0, 1.0, 0.0, -1.0, -1.0])
        points[:, eye, :, 0] = xs
        points[:, eye, :, 1] = ys[None, :] * lid[:, None]
    points += gen.normal(0.0, noise, points.shape)
    return EyeLandmarkSequence(points * scale + shift)


def generate_clip(spec, clip_id, slot, world=None):
    """One clip of emotion ``slot``; deterministic in (spec, clip_id)."""
    world = world if world is not None else _world(spec)
    gen = np.random.default_rng(spec.seed ^ clip_id)
    frames = spec.frames
    t = np.arange(frames) / spec.fps
    phase = gen.uniform(0.0, 2.0 * np.pi, spec.factors)
    factors = world.amplitude[slot] * np.sin(
        2.0 * np.pi * world.frequency[slot][None, :] * t[:, None] + phase[None, :]
    )
    beta = factors @ world.beta_basis
    pose = factors @ world.pose_basis
    motion = np.hstack([beta, pose]) + gen.normal(
        0.0, spec.motion_noise, (frames, spec.beta_dim + spec.pose_dim)
    )
    audio = motion @ world.audio_projection[slot] + gen.normal(
        0.0, spec.audio_noise, (frames, spec.audio_dim)
    )
    src = np.concatenate([np.repeat(motion[:1], spec.lag, axis=0), motion[: frames - spec.lag]])
    listener = (
        world.gain[slot] * world.response[None, :] * src
        + world.offset[slot][None, :]
        + gen.normal(0.0, spec.listener_noise, motion.shape)
    )
    rate = spec.rates()[slot] / spec.fps
    omega = 2.0 * np.pi * world.frequency[slot][0] / spec.fps
    burn_in = blink_burn_in(rate)
    # the first speaker factor, lagged and scaled to unit variance
    steps = np.arange(-burn_in, frames) - spec.lag
    drive = np.sqrt(2.0) * np.sin(omega * steps + phase[0])
    base = calibrate_hazard(
        rate, spec.blink_length, spec.refractory, frames, spec.blink_coupling, omega
    )
    phi = renewal_blinks(
        frames,
        coupled_hazard(base, drive, spec.blink_coupling),
        spec.blink_length,
        spec.refractory,
        gen,
        burn_in,
    )
    eyes = None
    blink = BlinkSequence(phi)
    if spec.eye_landmarks:
        # labels are read back from the eye tracks, as for recorded video
        eyes = synthesize_eye_landmarks(phi, gen)
        blink = extract_blink(eye_closure_ratio(eyes))
    split = spec.beta_dim
    return ConversationClip(
        clip_id=clip_id,
        speaker=MotionSequence(motion[:, :split], motion[:, split:], spec.fps),
        audio=AudioFeatureSequence(audio),
        listener=MotionSequence(listener[:, :split], listener[:, split:], spec.fps),
        blink=blink,
        emotion=EmotionVector.from_slot(slot, spec.emotions),
        eye_landmarks=eyes,
    )


def split_of(clip_id):
    """70/10/20 train/val/test assignment from a hash of the clip id."""
    bucket = int.from_bytes(hashlib.sha256(f"clip-{clip_id}".encode()).digest()[:8], "big") % 100
    if bucket < 70:
        return "train"
    if bucket < 80:
        return "val"
    return "test"


def balanced_labels(spec):
    """Emotion slot per clip id: a seeded shuffle of a round-robin labelling."""
    labels = np.arange(spec.clips) % spec.emotions
    return rng(spec.seed, 2).permutation(labels)


def generate_corpus(spec):
    """All clips of ``spec`` split into train/val/test."""
    world = _world(spec)
    labels = balanced_labels(spec)
    parts = {name: [] for name in SPLITS}
    for clip_id, slot in enumerate(labels):
        parts[split_of(clip_id)].append(generate_clip(spec, clip_id, int(slot), world))
    logger.info(
        "generated %d clips (%s)",
        spec.clips,
        ", ".join(f"{k}={len(v)}" for k, v in parts.items()),
    )
    return CorpusSplits(**parts)


def _rows(arr):
    arr = np.atleast_2d(arr)
    return [" ".join(f"{float(v):.17g}" for v in row) for row in arr]


def format_clip(clip):
    """The text of a clip file."""
    n = clip.emotion.n
    dims = (clip.speaker.beta.shape[1], clip.speaker.pose.shape[1], clip.audio.feats.shape[1])
    lines = [
        f"#elp-clip v1 T={clip.frames} N={n} emotion={clip.emotion.slot} "
        f"dims={dims[0]},{dims[1]},{dims[2]}"
    ]
    sections = [
        ("speaker_beta", _rows(clip.speaker.beta)),
        ("speaker_pose", _rows(clip.speaker.pose)),
        ("audio", _rows(clip.audio.feats)),
        ("listener_beta", _rows(clip.listener.beta)),
        ("listener_pose", _rows(clip.listener.pose)),
        ("blink", [str(int(v)) for v in clip.blink.phi]),
    ]
    if clip.eye_landmarks is not None:
        sections.append(
            ("eye_landmarks", _rows(clip.eye_landmarks.points.reshape(clip.frames, -1)))
        )
    for name, rows in sections:
        lines.append(f"[{name}]")
        lines.extend(rows)
    return "\n".join(lines) + "\n"


def write_clip(clip, path):
    Path(path).write_text(format_clip(clip), encoding="utf-8")


def _read_section(lines, pos, name, frames, width, path, cast=float):
    if pos >= len(lines) or lines[pos].strip() != f"[{name}]":
        found = lines[pos].strip() if pos < len(lines) else "end of file"
        raise CorpusFormatError(f"expected section [{name}], found {found!r}", path, pos + 1)
    pos += 1
    rows = []
    while pos < len(lines) and len(rows) < frames and not lines[pos].startswith("["):
        fields = lines[pos].split()
        if len(fields) != width:
            raise CorpusFormatError(
                f"[{name}] expects {width} values per row, found {len(fields)}", path, pos + 1
            )
        try:
            rows.append([cast(v) for v in fields])
        except ValueError as exc:
            raise CorpusFormatError(f"[{name}]: {exc}", path, pos + 1) from exc
        pos += 1
    if len(rows) != frames:
        raise CorpusFormatError(
            f"[{name}] expects {frames} rows, found {len(rows)}", path, pos + 1
        )
    return np.array(rows), pos


def parse_clip(text, path=None, clip_id=None):
    """Parse the text of a clip file; see the module docstring for the layout."""
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError("empty clip file", path, 1)
    match = _HEADER_RE.match(lines[0].strip())
    if match is None:
        raise CorpusFormatError(f"malformed header {lines[0]!r}", path, 1)
    frames, n, slot, d_beta, d_pose, d_audio = (int(g) for g in match.groups())
    if not 0 <= slot < n:
        raise CorpusFormatError(f"emotion {slot} outside 0..{n - 1}", path, 1)
    pos = 1
    data = {}
    for name, width in (
        ("speaker_beta", d_beta),
        ("speaker_pose", d_pose),
        ("audio", d_audio),
        ("listener_beta", d_beta),
        ("listener_pose", d_pose),
    ):
        data[name], pos = _read_section(lines, pos, name, frames, width, path)
    blink_start = pos
    blink, pos = _read_section(lines, pos, "blink", frames, 1, path, cast=int)
    bad = np.flatnonzero((blink != 0) & (blink != 1))
    if bad.size:
        raise CorpusFormatError(
            f"blink values must be 0 or 1, found {int(blink[bad[0], 0])}",
            path,
            blink_start + 2 + int(bad[0]),
        )
    eyes = None
    rest = [i for i in range(pos, len(lines)) if lines[i].strip()]
    if rest:
        eye_rows, pos = _read_section(lines, rest[0], "eye_landmarks", frames, 24, path)
        eyes = EyeLandmarkSequence(eye_rows.reshape(frames, 2, 6, 2))
        trailing = [i for i in range(pos, len(lines)) if lines[i].strip()]
        if trailing:
            raise CorpusFormatError("unexpected content after the last section", path, trailing[0] + 1)
    if clip_id is None:
        stem = _CLIP_RE.match(Path(path).stem) if path is not None else None
        clip_id = int(stem.group(1)) if stem else 0
    return ConversationClip(
        clip_id=clip_id,
        speaker=MotionSequence(data["speaker_beta"], data["speaker_pose"]),
        audio=AudioFeatureSequence(data["audio"]),
        listener=MotionSequence(data["listener_beta"], data["listener_pose"]),
        blink=BlinkSequence(blink[:, 0]),
        emotion=EmotionVector.from_slot(slot, n),
        eye_landmarks=eyes,
    )


def read_clip(path, clip_id=None):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(f"cannot read clip: {exc}", path) from exc
    return parse_clip(text, path, clip_id)


def clip_path(root, split, clip_id):
    return Path(root) / split / f"clip_{clip_id}.txt"


def write_corpus(splits, root, spec):
    """Write every clip and ``manifest.json``; returns the manifest path."""
    root = ensure_dir(root)
    entries = []
    for split in SPLITS:
        ensure_dir(root / split)
        for clip in splits[split]:
            write_clip(clip, clip_path(root, split, clip.clip_id))
            entries.append({"id": clip.clip_id, "emotion": clip.emotion.slot, "split": split})
    entries.sort(key=lambda e: e["id"])
    manifest = {
        "format": "elp-corpus v1",
        "spec": asdict(spec),
        "spec_digest": spec.digest(),
        "clips": entries,
    }
    path = root / "manifest.json"
    write_json(path, manifest)
    return path


def manifest_digest(root):
    """sha256 of the manifest file bytes."""
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def load_corpus(root):
    """Read a corpus directory written by :func:`write_corpus`."""
    root = Path(root)
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorpusFormatError(f"cannot read manifest: {exc}", path) from exc
    try:
        spec = CorpusSpec(**manifest["spec"])
        entries = manifest["clips"]
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(f"malformed manifest: {exc}", path) from exc
    parts = {name: [] for name in SPLITS}
    for entry in entries:
        clip = read_clip(clip_path(root, entry["split"], entry["id"]), entry["id"])
        parts[entry["split"]].append(clip)
    return spec, CorpusSplits(**parts)
