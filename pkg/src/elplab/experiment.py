"""Experiment orchestration behind the ``elp`` sub-commands.

Every ``run_*`` function takes a resolved :class:`~elplab.config.ExperimentConfig`,
writes its primary outputs plus ``config.json`` into ``config.output`` (or the
corpus directory for :func:`run_gen_data`) and returns a small result object.
Primary outputs depend only on the config and its seeds.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from elplab import autodiff as ad
from elplab import baselines, corpus, latent
from elplab.compositor import ClosureBlendshape, apply_blink
from elplab.config import write_resolved
from elplab.errors import (
    ConfigError,
    DivergenceError,
    GradientCheckError,
    NonFiniteError,
)
from elplab.features import BlinkSequence, EmotionVector, MotionSequence, decide_blinks
from elplab.metrics import REPORT_COLUMNS, score_method, write_reports
from elplab.networks import (
    ASEModel,
    NetworkConfig,
    ase_forward,
    load_checkpoint,
    save_checkpoint,
)
from elplab.objectives import (
    LossParts,
    blink_ce,
    blink_reg,
    emotion_ce,
    loss_parts,
    motion_l2,
    total_loss,
)
from elplab.optim import AdamW
from elplab.utils import ensure_dir, rng, version, write_csv

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_L2", "L_CE1", "L_CE2", "L_reg", "L_total")
CHECKPOINT_NAME = "model.ckpt"
GRADCHECK_TOLERANCE = 1e-3


@dataclass(eq=False)
class ClipBatch:
    """Stacked model inputs and targets of a list of clips."""

    audio: np.ndarray
    speakers: list
    beta: np.ndarray
    pose: np.ndarray
    blink: np.ndarray
    emotion: np.ndarray

    @classmethod
    def from_clips(cls, clips):
        return cls(
            audio=np.stack([c.audio.feats for c in clips]),
            speakers=[c.speaker for c in clips],
            beta=np.stack([c.listener.beta for c in clips]),
            pose=np.stack([c.listener.pose for c in clips]),
            blink=np.stack([c.blink.phi for c in clips]).astype(np.float64),
            emotion=np.stack([c.emotion.e for c in clips]),
        )


@dataclass(eq=False)
class TrainResult:
    model: ASEModel
    losses: list
    val_losses: list
    checkpoint: Path


@dataclass(eq=False)
class ClipPrediction:
    """Decoded listener of one clip."""

    motion: MotionSequence
    blink_prob: np.ndarray
    blink: BlinkSequence
    codes: np.ndarray
    gate_slot: int
    predicted_slot: int


def load_data(config):
    """Corpus of ``config.corpus_dir``, checked against the network dims."""
    spec, splits = corpus.load_corpus(config.corpus_dir)
    net = config.network
    if (spec.beta_dim, spec.pose_dim, spec.audio_dim) != (
        net.beta_dim,
        net.pose_dim,
        net.audio_dim,
    ):
        raise ConfigError(
            f"corpus {config.corpus_dir} has dims {spec.beta_dim},{spec.pose_dim},"
            f"{spec.audio_dim}; the network expects {net.beta_dim},{net.pose_dim},"
            f"{net.audio_dim}"
        )
    if not splits.train:
        raise ConfigError(f"corpus {config.corpus_dir} has no training clips")
    return spec, splits


def build_model(config, n_emotions, latent_config=None):
    return ASEModel(
        config.network,
        latent_config if latent_config is not None else config.latent,
        n_emotions,
        seed=config.seed,
    )


def compute_losses(model, batch, weights, mode="train", rng=None, temperature=1.0, hard=None):
    """Loss terms and their weighted total for one batch."""
    if mode == "train":
        result = ase_forward(
            model,
            batch.audio,
            batch.speakers,
            emotion=batch.emotion,
            mode="train",
            rng=rng,
            temperature=temperature,
            hard=hard,
        )
    else:
        override = batch.emotion if model.network.teacher_forcing else None
        result = ase_forward(
            model, batch.audio, batch.speakers, emotion_override=override, mode="infer"
        )
    parts = loss_parts(
        result.prediction, batch.beta, batch.pose, batch.blink, batch.emotion, weights.squared_l2
    )
    return parts, total_loss(parts, weights)


def _loss_row(step, parts, total):
    return [step] + [float(p.item()) for _, p in parts.items()] + [float(total.item())]


def _check_grads(params):
    for tensor in params:
        if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
            raise NonFiniteError("backward produced a non-finite gradient")


def validation_loss(model, clips, weights):
    _, total = compute_losses(model, ClipBatch.from_clips(clips), weights, mode="infer")
    return float(total.item())


def train_model(model, train, val, config, out_dir):
    """Minimize the weighted total loss with AdamW.

    Writes ``loss.csv`` (one row per step), ``val_loss.csv`` (every
    ``optim.val_every`` steps) and the checkpoint into ``out_dir``. A
    non-finite loss restores the last parameters that gave a finite loss,
    saves them and raises :class:`DivergenceError`.
    """
    out_dir = ensure_dir(out_dir)
    opt_cfg = config.optim
    params = [t for _, t in model.parameters()]
    optimizer = AdamW(params, opt_cfg)
    batches = rng(config.seed, 10)
    noise = rng(config.seed, 11)
    checkpoint = out_dir / CHECKPOINT_NAME
    losses, val_losses = [], []
    size = min(opt_cfg.batch_size, len(train))
    last_good = optimizer.state()

    def flush():
        write_csv(out_dir / "loss.csv", LOSS_COLUMNS, losses)
        write_csv(out_dir / "val_loss.csv", ("step", "L_total"), val_losses)

    for step in range(opt_cfg.iterations):
        picks = batches.choice(len(train), size=size, replace=False)
        batch = ClipBatch.from_clips([train[i] for i in picks])
        tau = config.latent.temperature(step, opt_cfg.iterations)
        optimizer.zero_grad()
        try:
            with ad.Tape() as tape:
                parts, total = compute_losses(
                    model, batch, config.loss, mode="train", rng=noise, temperature=tau
                )
            ad.backward(tape, total)
            _check_grads(params)
        except NonFiniteError as exc:
            optimizer.restore(last_good)
            save_checkpoint(model, checkpoint)
            flush()
            raise DivergenceError(
                f"training diverged at step {step} ({exc}); last good parameters "
                f"saved to {checkpoint}",
                step=step,
                checkpoint=checkpoint,
            ) from exc
        losses.append(_loss_row(step, parts, total))
        last_good = optimizer.state()
        optimizer.step()
        if step % opt_cfg.log_every == 0:
            logger.info("step %d  L_total %.6g  tau %.3f", step, losses[-1][-1], tau)
        if val and ((step + 1) % opt_cfg.val_every == 0 or step + 1 == opt_cfg.iterations):
            val_total = validation_loss(model, val, config.loss)
            val_losses.append([step + 1, val_total])
            logger.info("step %d  validation L_total %.6g", step + 1, val_total)
    save_checkpoint(model, checkpoint)
    flush()
    return TrainResult(model, losses, val_losses, checkpoint)


def predict_clips(
    model, clips, emotion_override=None, blink_rule="expected", threshold=0.5, batch_size=32
):
    """Decode every clip in infer mode; ``emotion_override`` is a slot or None.

    Blink labels come from :func:`~elplab.features.decide_blinks` with
    ``blink_rule`` and ``threshold``.
    """
    override = None
    if emotion_override is not None:
        override = EmotionVector.from_slot(emotion_override, model.n_emotions)
    out = []
    for start in range(0, len(clips), batch_size):
        chunk = clips[start : start + batch_size]
        batch = ClipBatch.from_clips(chunk)
        result = ase_forward(
            model, batch.audio, batch.speakers, emotion_override=override, mode="infer"
        )
        pred = result.prediction
        predicted = np.argmax(pred.emotion_logits.values, axis=-1)
        gates = np.argmax(result.emotion, axis=-1)
        for i in range(len(chunk)):
            prob = pred.blink_prob.values[i]
            out.append(
                ClipPrediction(
                    motion=MotionSequence(pred.beta_pred.values[i], pred.pose_pred.values[i]),
                    blink_prob=prob,
                    blink=decide_blinks(prob, blink_rule, threshold),
                    codes=result.codewords.codes[i],
                    gate_slot=int(gates[i]),
                    predicted_slot=int(predicted[i]),
                )
            )
    return out


def classification_accuracy(predictions, clips):
    hits = [p.predicted_slot == c.emotion.slot for p, c in zip(predictions, clips)]
    return float(np.mean(hits)) if hits else 0.0


def emotion_separation(motions, slots):
    """Mean pairwise L2 distance between per-emotion mean output frames."""
    means = []
    for slot in sorted(set(slots)):
        frames = [m.stacked() for m, s in zip(motions, slots) if s == slot]
        means.append(np.vstack(frames).mean(axis=0))
    pairs = list(itertools.combinations(means, 2))
    if not pairs:
        return 0.0
    return float(np.mean([np.linalg.norm(a - b) for a, b in pairs]))


def override_separation(model, clips):
    """Emotion separation of the same clips decoded under every override."""
    motions, slots = [], []
    for slot in range(model.n_emotions):
        for pred in predict_clips(model, clips, emotion_override=slot):
            motions.append(pred.motion)
            slots.append(slot)
    return emotion_separation(motions, slots)


def evaluate(model, test, train, config, metadata=None, methods=None):
    """MetricReport per method: the model, the ground truth and the baselines."""
    if not test:
        raise ConfigError("evaluation needs at least one test clip")
    methods = tuple(methods) if methods is not None else ("model", "gt") + config.eval.baselines
    ev = config.eval
    speakers = [c.speaker for c in test]
    gt_motion = [c.listener for c in test]
    gt_blink = [c.blink for c in test]
    meta = dict(metadata or {})
    reports = {}
    for method in methods:
        if method == "model":
            preds = predict_clips(
                model, test, blink_rule=ev.blink_decision, threshold=ev.blink_threshold
            )
            generated = [(p.motion, p.blink) for p in preds]
            meta["emotion_accuracy"] = classification_accuracy(preds, test)
        elif method == "gt":
            generated = list(zip(gt_motion, gt_blink))
        elif method == "nn_motion":
            generated = [baselines.nn_motion(c.speaker, train) for c in test]
        elif method == "nn_audio":
            generated = [baselines.nn_audio(c.audio, train) for c in test]
        elif method == "random":
            gen = rng(config.seed, 20)
            std = baselines.train_listener_std(train)
            generated = [
                baselines.random_listener(train, gen, ev.random_scale, std) for _ in test
            ]
        elif method == "dls_random":
            gen = rng(config.seed, 21)
            generated = [
                baselines.dls_random(
                    model, c.frames, gen, ev.blink_decision, ev.blink_threshold
                )
                for c in test
            ]
        else:
            raise ConfigError(f"unknown evaluation method {method!r}")
        motions, blinks = zip(*generated)
        reports[method] = score_method(
            speakers, list(motions), list(blinks), gt_motion, gt_blink, ev, meta
        )
        logger.info("scored %s on %d clips", method, len(test))
    return reports


def _checkpoint_path(config, checkpoint):
    return Path(checkpoint) if checkpoint else Path(config.output) / CHECKPOINT_NAME


def _metadata(config, model, clips):
    return {
        "config_digest": config.config_digest(),
        "model_digest": model.digest().hex(),
        "seed": config.seed,
        "clips": clips,
        "version": version(),
    }


def run_gen_data(config):
    """Generate the synthetic corpus into ``config.corpus_dir``."""
    splits = corpus.generate_corpus(config.corpus)
    manifest = corpus.write_corpus(splits, config.corpus_dir, config.corpus)
    write_resolved(config, config.corpus_dir)
    logger.info("corpus written to %s (manifest %s)", config.corpus_dir, corpus.manifest_digest(config.corpus_dir))
    return manifest


def run_train(config):
    spec, splits = load_data(config)
    write_resolved(config)
    model = build_model(config, spec.emotions)
    logger.info("training %d parameters on %d clips", model.parameter_count(), len(splits.train))
    return train_model(model, splits.train, splits.val, config, config.output)


def parse_emotion(value, n):
    """Emotion slot from an index or a name such as ``negative``."""
    if value is None:
        return None
    text = str(value).strip().lower()
    names = corpus.emotion_names(n)
    if text in names:
        return names.index(text)
    try:
        slot = int(text)
    except ValueError as exc:
        raise ConfigError(f"unknown emotion {value!r}; use 0..{n - 1} or one of {names}") from exc
    if not 0 <= slot < n:
        raise ConfigError(f"emotion {slot} outside 0..{n - 1}")
    return slot


def run_infer(config, clip_path, checkpoint=None, emotion=None):
    """Decode one clip; writes the prediction, its blink-composited variant and codewords."""
    clip = corpus.read_clip(clip_path)
    n = clip.emotion.n
    slot = parse_emotion(emotion, n)
    model = build_model(config, n)
    load_checkpoint(model, _checkpoint_path(config, checkpoint))
    out_dir = ensure_dir(config.output)
    write_resolved(config)
    ev = config.eval
    pred = predict_clips(
        model, [clip], slot, blink_rule=ev.blink_decision, threshold=ev.blink_threshold
    )[0]
    gate = EmotionVector.from_slot(pred.gate_slot, n)
    predicted = corpus.ConversationClip(
        clip_id=clip.clip_id,
        speaker=clip.speaker,
        audio=clip.audio,
        listener=pred.motion,
        blink=pred.blink,
        emotion=gate,
    )
    closure = ClosureBlendshape.unit(config.network.beta_dim, config.compositor.closure_index)
    composited = replace(
        predicted,
        listener=MotionSequence(apply_blink(pred.motion.beta, pred.blink, closure), pred.motion.pose),
    )
    corpus.write_clip(predicted, out_dir / "prediction.txt")
    corpus.write_clip(composited, out_dir / "prediction_blink.txt")
    latent.write_codewords(
        out_dir / "codewords.csv",
        latent.CodewordGrid(pred.codes, model.latent_emotions, model.latent.categories),
    )
    logger.info("clip %d decoded with emotion slot %d", clip.clip_id, pred.gate_slot)
    return pred


def run_eval(config, checkpoint=None):
    """Score the model, the ground truth and the configured baselines on the test split."""
    spec, splits = load_data(config)
    model = build_model(config, spec.emotions)
    load_checkpoint(model, _checkpoint_path(config, checkpoint))
    out_dir = ensure_dir(config.output)
    write_resolved(config)
    meta = _metadata(config, model, len(splits.test))
    reports = evaluate(model, splits.test, splits.train, config, meta)
    meta = reports["model"].metadata if "model" in reports else meta
    write_reports(reports, out_dir / "report.csv", out_dir / "report.json", meta)
    return reports


def write_features(path, clips, predictions):
    """Decoded per-frame listener coefficients with the clip's emotion label."""
    first = predictions[0].motion
    header = (
        ["clip", "frame", "emotion"]
        + [f"beta{i + 1}" for i in range(first.beta.shape[1])]
        + [f"pose{i + 1}" for i in range(first.pose.shape[1])]
    )
    rows = []
    for clip, pred in zip(clips, predictions):
        stacked = pred.motion.stacked()
        for frame in range(stacked.shape[0]):
            rows.append([clip.clip_id, frame, clip.emotion.slot] + list(stacked[frame]))
    write_csv(path, header, rows)


def _train_and_score(config, latent_config, splits, n, tag):
    sub = replace(config, latent=latent_config, output=str(Path(config.output) / tag))
    write_resolved(sub)
    model = build_model(sub, n)
    train_model(model, splits.train, splits.val, sub, sub.output)
    test = splits.test
    ev = config.eval
    preds = predict_clips(
        model, test, blink_rule=ev.blink_decision, threshold=ev.blink_threshold
    )
    separation = emotion_separation([p.motion for p in preds], [c.emotion.slot for c in test])
    report = evaluate(model, test, splits.train, sub, _metadata(sub, model, len(test)), ("model",))
    write_features(Path(config.output) / f"features_{tag}.csv", test, preds)
    return model, separation, report["model"]


def run_ablate(config, mode):
    """Twin U/V training (``space``) or a sweep over the head count (``heads``)."""
    if mode not in ("space", "heads"):
        raise ConfigError(f"ablate mode must be 'space' or 'heads', not {mode!r}")
    spec, splits = load_data(config)
    if not splits.test:
        raise ConfigError("ablation needs test clips")
    out_dir = ensure_dir(config.output)
    write_resolved(config)
    metric_columns = REPORT_COLUMNS[1:]
    rows = []
    if mode == "space":
        for space in ("U", "V"):
            model, separation, report = _train_and_score(
                config, replace(config.latent, space=space), splits, spec.emotions, space
            )
            shift = override_separation(model, splits.test)
            rows.append([space, separation, shift] + report.row(space)[1:])
            logger.info("space %s: separation %.6g, override shift %.6g", space, separation, shift)
        write_csv(
            out_dir / "ablation_space.csv",
            ["space", "separation", "override_separation"] + metric_columns,
            rows,
        )
    else:
        for heads in config.ablation.heads_sweep:
            _, separation, report = _train_and_score(
                config, replace(config.latent, heads=heads), splits, spec.emotions, f"h{heads}"
            )
            log_configs = latent.log_configurations(
                heads, spec.emotions if config.latent.space == "U" else 1, config.latent.categories
            )
            rows.append([heads, log_configs, separation] + report.row(str(heads))[1:])
            logger.info("heads %d: separation %.6g", heads, separation)
        write_csv(
            out_dir / "ablation_heads.csv",
            ["heads", "log_configs", "separation"] + metric_columns,
            rows,
        )
    return rows


def _gradcheck_data(config, frames):
    spec = corpus.CorpusSpec(
        clips=2,
        frames=frames,
        emotions=2,
        beta_dim=config.network.beta_dim,
        pose_dim=config.network.pose_dim,
        audio_dim=config.network.audio_dim,
        factors=min(6, config.network.audio_dim),
        lag=1,
        eye_landmarks=False,
        seed=config.seed,
    )
    return ClipBatch.from_clips([corpus.generate_clip(spec, i, i % 2) for i in range(2)])


def _param_errors(model, loss_fn, tensors, h, max_coords, chooser):
    """Worst relative error of d(loss)/d(param) over sampled coordinates."""
    model.zero_grad()
    with ad.Tape() as tape:
        loss = loss_fn()
    ad.backward(tape, loss)
    worst = 0.0
    for tensor in tensors:
        analytic = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        base = np.array(tensor.values)
        coords = np.arange(base.size)
        if base.size > max_coords:
            coords = np.sort(chooser.choice(base.size, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, base.shape)
            values = []
            for step in (h, -h):
                moved = base.copy()
                moved[idx] += step
                tensor.assign_(moved)
                values.append(loss_fn().item())
            tensor.assign_(base)
            central = (values[0] - values[1]) / (2.0 * h)
            grad = float(analytic[idx])
            worst = max(worst, abs(grad - central) / (abs(grad) + abs(central) + 1e-8))
    model.zero_grad()
    return worst


def _straight_through_error(gen, heads, categories):
    """Gradient of a linear readout: hard straight-through vs the soft sample."""
    logits = gen.normal(size=(3, heads, categories))
    weights = gen.normal(size=(3, heads, categories))
    noise = latent.sample_gumbel(logits.shape, gen)
    grads = []
    for hard in (True, False):
        leaf = ad.Tensor(logits, requires_grad=True)
        with ad.Tape() as tape:
            sample = latent.gumbel_softmax(leaf, 0.7, hard=hard, noise=noise)
            out = ad.tsum(sample.onehot * weights)
        ad.backward(tape, out)
        grads.append(leaf.grad)
    diff = np.abs(grads[0] - grads[1]) / (np.abs(grads[0]) + np.abs(grads[1]) + 1e-8)
    return float(diff.max())


def _zigzag(gen, shape):
    """Blink probabilities alternating between low and high values along time.

    Every frame is then a strict local extremum, so the total variation has a
    gradient of magnitude 1 or 2 at every coordinate and is smooth nearby.
    """
    low = gen.uniform(0.05, 0.35, size=shape)
    high = gen.uniform(0.65, 0.95, size=shape)
    odd = (np.arange(shape[-1]) % 2).astype(bool)
    return np.where(odd, high, low)


def gradient_report(config, heads=4, categories=4, frames=10, h=1e-5, max_coords=6):
    """(component, max relative error) for every loss and parameter group."""
    net = config.network
    small = NetworkConfig.reduced(
        beta_dim=net.beta_dim, pose_dim=net.pose_dim, audio_dim=net.audio_dim
    )
    cfg = replace(
        config,
        network=small,
        latent=replace(config.latent, heads=heads, categories=categories),
    )
    gen = rng(config.seed, 30)
    batch = _gradcheck_data(cfg, frames)
    weights = cfg.loss
    point = [
        gen.normal(size=batch.beta.shape),
        gen.normal(size=batch.pose.shape),
        _zigzag(gen, batch.blink.shape),
        gen.normal(size=batch.emotion.shape),
    ]

    def l2(beta, pose):
        return motion_l2(beta, pose, batch.beta, batch.pose, weights.squared_l2)

    def ce1(prob):
        return blink_ce(prob, batch.blink)

    def ce2(logits):
        return emotion_ce(ad.softmax(logits, axis=-1), batch.emotion)

    def total(beta, pose, prob, logits):
        parts = LossParts(l2(beta, pose), ce1(prob), ce2(logits), blink_reg(prob))
        return total_loss(parts, weights)

    rows = [
        ("L_L2", ad.finite_difference_check(l2, point[:2], h)),
        ("L_CE1", ad.finite_difference_check(ce1, point[2:3], h)),
        ("L_CE2", ad.finite_difference_check(ce2, point[3:4], h)),
        ("L_reg", ad.finite_difference_check(blink_reg, point[2:3], h)),
        ("L_total", ad.finite_difference_check(total, point, h)),
        ("straight_through", _straight_through_error(gen, heads, categories)),
    ]

    model = build_model(cfg, batch.emotion.shape[1])

    def objective():
        # fresh generator per call: identical Gumbel noise at every evaluation
        _, value = compute_losses(
            model,
            batch,
            weights,
            mode="train",
            rng=rng(config.seed, 31),
            temperature=1.0,
            hard=False,
        )
        return value

    chooser = rng(config.seed, 32)
    for group, tensors in model.groups().items():
        rows.append(
            (f"end_to_end.{group}", _param_errors(model, objective, tensors, h, max_coords, chooser))
        )
    return rows


def run_gradcheck(config):
    """Write ``gradcheck.csv``; raise :class:`GradientCheckError` on any failure."""
    out_dir = ensure_dir(config.output)
    write_resolved(config)
    rows = gradient_report(config)
    write_csv(
        out_dir / "gradcheck.csv",
        ("component", "max_rel_error", "passed"),
        [(name, err, str(err < GRADCHECK_TOLERANCE).lower()) for name, err in rows],
    )
    failed = [name for name, err in rows if not err < GRADCHECK_TOLERANCE]
    if failed:
        raise GradientCheckError(
            f"gradient check failed for {', '.join(failed)} (tolerance {GRADCHECK_TOLERANCE})"
        )
    return rows
