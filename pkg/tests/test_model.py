import numpy as np
import pytest
import torch

from gazedebias.dataset import ConfigError
from gazedebias.losses import LossWeights
from gazedebias.model import (
    ENCODER_PATH,
    IDENTITY_PATH,
    ArchConfig,
    classifier_forward,
    encoder_forward,
    get_params,
    gradients,
    init_model,
    load_checkpoint,
    path_loss,
    save_checkpoint,
    set_params,
)

from conftest import finite_difference_check


SMALL = ArchConfig(
    image_shape=(2, 8, 8), conv_blocks=((3, 3, 2), (4, 3, 1)), feature_dim=5, classifier_hidden=(6,), identity_count=3
)


def test_parameter_count_by_hand():
    # conv0: 3*2*3*3 + 3 = 57; conv1: 4*3*3*3 + 4 = 112; feature: 5*4 + 5 = 25; gaze: 2*5 + 2 = 12
    assert SMALL.encoder_size == 57 + 112 + 25 + 12
    # fc0: 6*5 + 6 = 36; fc1: 3*6 + 3 = 21
    assert SMALL.classifier_size == 36 + 21
    state = init_model(SMALL, 0)
    assert state.encoder_params.shape == (206,)
    assert state.classifier_params.shape == (57,)


def test_default_arch_sizes():
    arch = ArchConfig(identity_count=9)
    conv = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32)
    assert arch.encoder_size == conv + 256 * 32 + 256 + 2 * 256 + 2
    assert arch.classifier_size == 64 * 256 + 64 + 9 * 64 + 9


def test_init_is_deterministic_and_seeded():
    a, b, c = init_model(SMALL, 3), init_model(SMALL, 3), init_model(SMALL, 4)
    assert torch.equal(a.encoder_params, b.encoder_params)
    assert torch.equal(a.classifier_params, b.classifier_params)
    assert not torch.equal(a.encoder_params, c.encoder_params)


def test_init_biases_zero():
    state = init_model(SMALL, 0)
    offset = 0
    for name, shape in SMALL.encoder_layout():
        n = int(np.prod(shape))
        if name.endswith(".bias"):
            assert torch.all(state.encoder_params[offset:offset + n] == 0)
        offset += n


def test_arch_validation():
    with pytest.raises(ConfigError):
        ArchConfig(feature_dim=1)


@pytest.fixture
def images():
    return torch.from_numpy(np.random.default_rng(0).uniform(0, 1, (4, 2, 8, 8)))


class TestEncoderForward:
    def test_shapes(self, images):
        gaze, feats = encoder_forward(init_model(SMALL, 0), images)
        assert gaze.shape == (4, 2)
        assert feats.shape == (4, 5)

    def test_duplicate_rows_identical(self, images):
        batch = torch.cat([images[:1], images[1:2], images[:1]])
        gaze, feats = encoder_forward(init_model(SMALL, 0, torch.float64), batch)
        assert torch.equal(gaze[0], gaze[2])
        assert torch.equal(feats[0], feats[2])

    def test_zero_params_give_gaze_bias(self, images):
        state = init_model(SMALL, 0)
        state = set_params(state, "encoder", torch.zeros(SMALL.encoder_size))
        gaze, _ = encoder_forward(state, images)
        assert torch.all(gaze == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            encoder_forward(init_model(SMALL, 0), torch.zeros(1, 3, 8, 8))


class TestClassifierForward:
    def test_normalised(self):
        state = init_model(SMALL, 1, torch.float64)
        feats = torch.from_numpy(np.random.default_rng(1).normal(size=(7, 5)) * 10)
        probs = classifier_forward(state, feats)
        assert torch.all(probs >= 0)
        assert torch.allclose(probs.sum(1), torch.ones(7, dtype=torch.float64), atol=1e-6)

    def test_zero_params_uniform(self):
        state = set_params(init_model(SMALL, 1), "classifier", torch.zeros(SMALL.classifier_size))
        probs = classifier_forward(state, torch.randn(3, 5))
        assert torch.allclose(probs, torch.full((3, 3), 1 / 3))

    def test_scaling_keeps_argmax(self):
        # biases are zero at init and ReLU is positively homogeneous, so logits scale exactly
        state = init_model(SMALL, 2, torch.float64)
        feats = torch.from_numpy(np.random.default_rng(2).normal(size=(20, 5)))
        p1 = classifier_forward(state, feats)
        p10 = classifier_forward(state, 10 * feats)
        assert torch.equal(p1.argmax(1), p10.argmax(1))
        assert torch.all(p10.max(1).values >= p1.max(1).values - 1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            classifier_forward(init_model(SMALL, 0), torch.zeros(2, 4))


def test_params_round_trip_and_independence(images):
    state = init_model(SMALL, 0)
    enc = get_params(state, "encoder")
    cls_before = get_params(state, "classifier")
    new = set_params(state, "encoder", enc + 1.0)
    assert torch.equal(get_params(new, "encoder"), enc + 1.0)
    assert torch.equal(get_params(new, "classifier"), cls_before)
    same = set_params(state, "encoder", get_params(state, "encoder") + torch.zeros_like(enc))
    assert torch.equal(encoder_forward(same, images)[0], encoder_forward(state, images)[0])
    with pytest.raises(ConfigError):
        set_params(state, "encoder", enc[:-1])


def _batch(arch, n, seed, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    images = torch.from_numpy(rng.uniform(0, 1, (n,) + arch.image_shape)).to(dtype)
    gazes = torch.from_numpy(rng.uniform(-0.5, 0.5, (n, 2))).to(dtype)
    labels = torch.from_numpy(rng.integers(0, arch.identity_count, n))
    return images, gazes, labels


def test_gradient_shapes_and_independence():
    state = init_model(SMALL, 0, torch.float64)
    batch = _batch(SMALL, 4, 0)
    g_enc, g_cls = gradients(state, batch, ENCODER_PATH, LossWeights(lambda_adv=0.0))
    assert g_enc.shape == state.encoder_params.shape
    assert g_cls.shape == state.classifier_params.shape
    # with lambda_adv = 0 the encoder objective is L_g alone, which ignores the classifier
    assert torch.all(g_cls == 0)


@pytest.mark.parametrize("selector", [IDENTITY_PATH, ENCODER_PATH])
def test_gradients_match_finite_differences_small(selector):
    state = init_model(SMALL, 5, torch.float64)
    batch = _batch(SMALL, 6, 5)
    errs = finite_difference_check(state, batch, selector, LossWeights(), n_coords=25, seed=0)
    assert max(errs) < 1e-4


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    state = init_model(ArchConfig(identity_count=4), 0)
    save_checkpoint(state, tmp_path / "ck", epoch=3, cfg_hash="abc")
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert torch.equal(loaded.encoder_params, state.encoder_params)
    assert torch.equal(loaded.classifier_params, state.classifier_params)
    assert loaded.arch == state.arch
    assert manifest["epoch"] == 3 and manifest["config_hash"] == "abc"
    assert manifest["dtype"] == "float32"
    raw = (tmp_path / "ck" / "encoder.bin").read_bytes()
    assert len(raw) == 4 * state.arch.encoder_size


def test_path_loss_values_consistent():
    state = init_model(SMALL, 0, torch.float64)
    batch = _batch(SMALL, 4, 1)
    loss, vals = path_loss(state.encoder_params, state.classifier_params, SMALL, batch, ENCODER_PATH,
                           LossWeights(lambda_adv=2.0))
    assert float(loss) == pytest.approx(2.0 * vals["L_adv"] + vals["L_g"])
