import numpy as np
import pytest

from elplab import autodiff as ad
from elplab import latent as lt
from elplab import networks as nw
from elplab.errors import CheckpointError, ConfigError, ShapeError
from elplab.features import AudioFeatureSequence, EmotionVector, MotionSequence

from . import toy

GROUP_NAMES = ["audio_encoder", "classifier", "head_encoder", "motion_decoder", "blink_decoder"]


def _model(seed=0, emotions=3, **latent):
    return nw.ASEModel(toy.network(), toy.latent_config(**latent), emotions, seed=seed)


def _clip(seed=0, frames=20):
    gen = toy.rng(seed)
    return toy.audio(gen, frames), toy.motion(gen, frames)


def _style(model, seed=0, batch=1, frames=20):
    return toy.rng(seed).normal(size=(batch, frames, model.network.style_width))


def test_default_dimensions():
    config = nw.NetworkConfig()
    assert config.style_width == 334
    assert config.receptive_field == 8
    gen = toy.rng(0)
    encoder = nw.AudioEncoder(config, gen)
    assert encoder(ad.Tensor(gen.normal(size=(1, 50, 29)))).shape == (1, 50, 128)
    style = ad.Tensor(gen.normal(size=(1, 50, 334)))
    assert nw.EmotionClassifier(config, 3, gen)(style).shape == (1, 3)
    assert nw.HeadEncoder(config, 128, 64, gen)(style).shape == (1, 50, 128, 64)


@pytest.mark.slow
def test_default_decoders():
    model = nw.ASEModel(nw.NetworkConfig(), nw.LatentConfig(), 3, seed=0)
    grid = lt.random_codewords((1, 50, 128), 3, 64, toy.rng(1))
    beta, pose, blink = model.decode_codewords(grid)
    assert beta.shape == (1, 50, 100)
    assert pose.shape == (1, 50, 6)
    assert blink.shape == (1, 50)


def test_layer_widths_chain():
    model = _model()
    audio, motion = _clip()
    encoded = model.audio_encode(audio.feats)
    assert encoded.shape == (1, 20, model.network.audio_channels[-1])
    style = model.speaker_style(encoded, [motion])
    assert style.shape == (1, 20, model.network.style_width)
    assert model.classify_emotion(style).shape == (1, 3)
    assert model.encode_heads(style).shape == (1, 20, 2, 3)
    embedding = np.zeros((1, 20, 2, 9))
    embedding[..., 0] = 1.0
    beta, pose = model.decode_motion(embedding)
    assert beta.shape == (1, 20, toy.DIMS["beta_dim"])
    assert pose.shape == (1, 20, toy.DIMS["pose_dim"])
    assert model.decode_blink(embedding).shape == (1, 20)
    condition = model.speaker_condition(encoded, np.eye(3)[[1]])
    assert condition.shape == (1, 20, 3 * model.network.audio_channels[-1])
    assert model.decode_motion(embedding, condition)[0].shape == (1, 20, toy.DIMS["beta_dim"])


def test_parameter_groups():
    model = _model()
    groups = model.groups()
    assert list(groups) == GROUP_NAMES
    assert sum(t.size for ts in groups.values() for t in ts) == model.parameter_count()


def test_initialization_is_seeded():
    first, second, other = _model(seed=4), _model(seed=4), _model(seed=5)
    for (_, a), (_, b), (_, c) in zip(first.parameters(), second.parameters(), other.parameters()):
        np.testing.assert_array_equal(a.values, b.values)
    assert any(
        not np.array_equal(a.values, c.values)
        for (_, a), (_, c) in zip(first.parameters(), other.parameters())
    )


def test_initialization_bound():
    model = _model()
    conv = model.audio_encoder.convs[0]
    bound = 1.0 / np.sqrt(conv.kernel * conv.n_in)
    assert np.all(np.abs(conv.weight.values) <= bound)


def test_audio_width_mismatch():
    with pytest.raises(ShapeError, match="expected 6 features"):
        _model().audio_encode(np.zeros((20, 5)))


def test_classifier_receptive_field():
    model = _model()
    with pytest.raises(ShapeError, match="at least 8"):
        model.classify_emotion(_style(model, frames=7))
    assert model.classify_emotion(_style(model, frames=8)).shape == (1, 3)


def test_classifier_batch_independence():
    model = _model()
    style = _style(model, batch=3)
    logits = model.classify_emotion(style).values
    permuted = model.classify_emotion(style[[2, 0, 1]]).values
    np.testing.assert_allclose(permuted, logits[[2, 0, 1]], rtol=0, atol=1e-12)


def test_head_logits_finite_for_zero_input():
    model = _model()
    logits = model.encode_heads(np.zeros((1, 20, model.network.style_width)))
    assert np.all(np.isfinite(logits.values))
    assert np.any(logits.values != 0.0)


def test_decoder_shape_mismatch():
    model = _model()
    with pytest.raises(ShapeError):
        model.decode_motion(np.zeros((1, 20, 2, 4)))


def test_one_codeword_changes_the_output():
    model = _model()
    grid = lt.random_codewords((1, 20, 2), 3, 3, toy.rng(2))
    changed = grid.codes.copy()
    changed[0, 10, 1] = changed[0, 10, 1] % 9 + 1
    before = model.decode_codewords(grid)
    after = model.decode_codewords(lt.CodewordGrid(changed, 3, 3))
    assert not np.array_equal(before[0].values, after[0].values)
    assert np.all((after[2].values >= 0.0) & (after[2].values <= 1.0))


def test_condition_fills_the_active_emotion_block():
    model = _model()
    width = model.network.audio_channels[-1]
    encoded = toy.rng(6).normal(size=(2, 20, width))
    gate = np.eye(3)[[2, 0]]
    condition = model.speaker_condition(encoded, gate).values
    np.testing.assert_array_equal(condition[0, :, 2 * width :], encoded[0])
    np.testing.assert_array_equal(condition[0, :, : 2 * width], 0.0)
    np.testing.assert_array_equal(condition[1, :, :width], encoded[1])
    np.testing.assert_array_equal(condition[1, :, width:], 0.0)


def test_base_space_condition_is_ungated():
    model = _model(space="V")
    encoded = toy.rng(6).normal(size=(1, 20, model.network.audio_channels[-1]))
    assert model.condition_width == model.network.audio_channels[-1]
    condition = model.speaker_condition(encoded, np.eye(3)[[1]])
    np.testing.assert_array_equal(condition.values, encoded)


def test_condition_gate_mismatch():
    model = _model()
    encoded = np.zeros((2, 20, model.network.audio_channels[-1]))
    with pytest.raises(ShapeError, match="speaker_condition"):
        model.speaker_condition(encoded, np.eye(3)[[0]])


def test_missing_condition_is_zero():
    model = _model()
    grid = lt.random_codewords((1, 20, 2), 3, 3, toy.rng(2))
    embedding = lt.embed_codewords(grid)
    zeros = np.zeros((1, 20, model.condition_width))
    np.testing.assert_array_equal(
        model.decode_motion(embedding)[0].values, model.decode_motion(embedding, zeros)[0].values
    )
    np.testing.assert_array_equal(
        model.decode_blink(embedding).values, model.decode_blink(embedding, zeros).values
    )
    with pytest.raises(ShapeError, match="conditioning"):
        model.decode_blink(embedding, np.zeros((1, 20, 4)))


def test_condition_changes_the_output():
    model = _model()
    grid = lt.random_codewords((1, 20, 2), 3, 3, toy.rng(2))
    condition = toy.rng(7).normal(size=(1, 20, model.condition_width))
    before = model.decode_codewords(grid)
    after = model.decode_codewords(grid, condition)
    assert not np.array_equal(before[0].values, after[0].values)
    assert not np.array_equal(before[2].values, after[2].values)


def _weights(shape):
    return toy.rng(99).normal(size=shape)


def test_audio_encoder_gradient():
    model = _model()
    point = toy.rng(3).normal(size=(1, 6, toy.DIMS["audio_dim"]))
    w = _weights((1, 6, model.network.audio_channels[-1]))
    assert ad.finite_difference_check(lambda x: ad.tsum(model.audio_encoder(x) * w), [point]) < 1e-4


def test_head_encoder_gradient():
    model = _model()
    point = _style(model, seed=4, frames=6)
    w = _weights((1, 6, 2, 3))
    assert ad.finite_difference_check(lambda x: ad.tsum(model.encode_heads(x) * w), [point]) < 1e-4


def test_decoder_gradients():
    model = _model()
    point = toy.rng(5).uniform(size=(1, 6, 2, 9))
    w_beta = _weights((1, 6, toy.DIMS["beta_dim"]))
    w_blink = _weights((1, 6))

    def motion(x):
        beta, pose = model.decode_motion(x)
        return ad.tsum(beta * w_beta) + ad.tsum(pose)

    assert ad.finite_difference_check(motion, [point]) < 1e-4
    blink = lambda x: ad.tsum(model.decode_blink(x) * w_blink)  # noqa: E731
    assert ad.finite_difference_check(blink, [point]) < 1e-4


def test_decoder_condition_gradients():
    model = _model()
    embedding = lt.embed_codewords(lt.random_codewords((1, 6, 2), 3, 3, toy.rng(2)))
    point = toy.rng(5).normal(size=(1, 6, model.condition_width))
    w_pose = _weights((1, 6, toy.DIMS["pose_dim"]))
    w_blink = _weights((1, 6))

    def objective(c):
        _, pose = model.decode_motion(embedding, c)
        return ad.tsum(pose * w_pose) + ad.tsum(model.decode_blink(embedding, c) * w_blink)

    assert ad.finite_difference_check(objective, [point]) < 1e-4


def test_infer_is_deterministic():
    model = _model()
    audio, motion = _clip()
    first = nw.ase_forward(model, audio, motion, mode="infer")
    second = nw.ase_forward(model, audio, motion, mode="infer")
    np.testing.assert_array_equal(first.codewords.codes, second.codewords.codes)
    np.testing.assert_array_equal(
        first.prediction.beta_pred.values, second.prediction.beta_pred.values
    )


def test_train_mode_is_seeded():
    model = _model(seed=1)
    audio, motion = _clip()
    emotion = np.array([0.0, 1.0, 0.0])
    runs = [
        nw.ase_forward(model, audio, motion, emotion=emotion, mode="train", rng=toy.rng(8))
        for _ in range(2)
    ]
    np.testing.assert_array_equal(runs[0].codewords.codes, runs[1].codewords.codes)
    np.testing.assert_array_equal(
        runs[0].prediction.blink_prob.values, runs[1].prediction.blink_prob.values
    )


def test_overrides_occupy_disjoint_blocks():
    model = _model()
    audio, motion = _clip()
    seen = []
    for slot in range(3):
        result = nw.ase_forward(
            model, audio, motion, emotion_override=EmotionVector.from_slot(slot, 3)
        )
        low, high = result.codewords.block(slot)
        assert np.all((result.codewords.codes >= low) & (result.codewords.codes <= high))
        seen.append(set(result.codewords.codes.ravel()))
    assert not (seen[0] & seen[1]) and not (seen[1] & seen[2]) and not (seen[0] & seen[2])


def test_classifier_gates_without_override():
    model = _model()
    audio, motion = _clip()
    result = nw.ase_forward(model, audio, motion)
    slot = int(np.argmax(result.prediction.emotion_logits.values[0]))
    np.testing.assert_array_equal(result.emotion[0], np.eye(3)[slot])


def test_base_space_ignores_emotion():
    model = _model(space="V")
    audio, motion = _clip()
    for slot in range(3):
        result = nw.ase_forward(model, audio, motion, emotion_override=np.eye(3)[slot])
        assert result.codewords.codes.max() <= 3
        assert result.transformed.emotions == 1


def test_teacher_forcing_needs_emotion():
    audio, motion = _clip()
    with pytest.raises(ConfigError):
        nw.ase_forward(_model(), audio, motion, mode="train", rng=toy.rng(0))


def test_unknown_mode():
    audio, motion = _clip()
    with pytest.raises(ConfigError):
        nw.ase_forward(_model(), audio, motion, mode="eval")


EXTREME_INPUTS = [0.0, 1.0, 1e3, -1e3]


@pytest.mark.parametrize("value", EXTREME_INPUTS)
def test_outputs_finite_for_extreme_inputs(value):
    frames = 20
    sign = np.where(np.arange(frames) % 2 == 0, 1.0, -1.0)[:, None]
    audio = AudioFeatureSequence(np.full((frames, toy.DIMS["audio_dim"]), value))
    motion = MotionSequence(
        value * sign * np.ones((frames, toy.DIMS["beta_dim"])),
        value * sign * np.ones((frames, toy.DIMS["pose_dim"])),
    )
    pred = nw.ase_forward(_model(), audio, motion).prediction
    for tensor in (pred.beta_pred, pred.pose_pred, pred.blink_prob, pred.emotion_logits):
        assert np.all(np.isfinite(tensor.values))


def test_batched_forward_matches_single():
    model = _model()
    clips = [_clip(seed) for seed in range(2)]
    batched = nw.ase_forward(model, [a for a, _ in clips], [m for _, m in clips])
    single = nw.ase_forward(model, clips[1][0], clips[1][1])
    np.testing.assert_allclose(
        batched.prediction.beta_pred.values[1], single.prediction.beta_pred.values[0], atol=1e-12
    )


def test_temperature_schedule():
    config = nw.LatentConfig(tau_start=1.0, tau_end=0.5)
    assert config.temperature(0, 11) == pytest.approx(1.0)
    assert config.temperature(10, 11) == pytest.approx(0.5)
    assert config.temperature(5, 11) == pytest.approx(0.5**0.5)
    assert config.temperature(0, 1) == 0.5


CONFIG_ERRORS = [
    (nw.NetworkConfig, {"tdnn_dilations": (1, 2)}),
    (nw.NetworkConfig, {"activation": "gelu"}),
    (nw.NetworkConfig, {"dropout": 1.0}),
    (nw.NetworkConfig, {"audio_channels": ()}),
    (nw.LatentConfig, {"space": "W"}),
    (nw.LatentConfig, {"heads": 0}),
    (nw.LatentConfig, {"tau_end": 0.0}),
]


@pytest.mark.parametrize("cls,kwargs", CONFIG_ERRORS)
def test_config_validation(cls, kwargs):
    with pytest.raises(ConfigError):
        cls(**kwargs)


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    source = _model(seed=1)
    nw.save_checkpoint(source, path)
    target = nw.load_checkpoint(_model(seed=2), path)
    for (name, a), (_, b) in zip(source.parameters(), target.parameters()):
        np.testing.assert_array_equal(a.values, b.values, err_msg=name)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "model.ckpt"
    with pytest.raises(CheckpointError, match="does not exist"):
        nw.load_checkpoint(_model(), path)
    nw.save_checkpoint(_model(), path)
    data = path.read_bytes()

    with pytest.raises(CheckpointError, match="digest"):
        nw.load_checkpoint(_model(heads=3), path)

    path.write_bytes(data[:20])
    with pytest.raises(CheckpointError, match="truncated"):
        nw.load_checkpoint(_model(), path)

    path.write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="not an elplab checkpoint"):
        nw.load_checkpoint(_model(), path)

    path.write_bytes(data + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="payload"):
        nw.load_checkpoint(_model(), path)
