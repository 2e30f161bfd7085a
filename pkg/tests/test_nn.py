import numpy as np
import pytest

from src.engine import Tensor, backward
from src.engine import functional as F
from src.nn import (
    EMBEDDING_DIM,
    Adam,
    AdamState,
    PretextHead,
    StageHead,
    adam_step,
    bce_loss,
    build_encoder,
    cce_loss,
    images_to_tensor,
    pretext_head,
    stage_head,
)
from src.nn.encoder import encoder_layer_specs
from src.utils.errors import CheckpointError, LabelError, NonFiniteError, ShapeError


def test_encoder_maps_images_to_sixteen_dims(tiny_encoder_config):
    encoder = build_encoder(tiny_encoder_config, seed=0)
    images = np.random.default_rng(0).random((3, 16, 16, 3))
    out = encoder(images_to_tensor(images))
    assert out.shape == (3, EMBEDDING_DIM)


def test_tiny_encoder_parameter_count(tiny_encoder_config):
    encoder = build_encoder(tiny_encoder_config, seed=0)
    # stem 112, block0 148+292, transition 78, block1 220+364, dense 240
    assert encoder.parameter_count() == 1454


def test_encoder_layer_order(tiny_encoder_config):
    kinds = [spec.kind for spec in encoder_layer_specs(tiny_encoder_config)]
    assert kinds == [
        "conv",
        "activation",
        "pool",
        "dense_block",
        "conv",
        "activation",
        "pool",
        "dense_block",
        "pool",
        "dense",
    ]


def test_encoder_initialisation_is_seeded(tiny_encoder_config):
    a = build_encoder(tiny_encoder_config, seed=5).state_dict()
    b = build_encoder(tiny_encoder_config, seed=5).state_dict()
    c = build_encoder(tiny_encoder_config, seed=6).state_dict()
    assert list(a) == list(b)
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert not all(np.array_equal(a[n], c[n]) for n in a)


def test_encoder_rejects_image_too_small_for_depth(tiny_encoder_config):
    config = dict(tiny_encoder_config, image_size=4)
    with pytest.raises(ShapeError) as excinfo:
        build_encoder(config)
    assert "layers[" in str(excinfo.value)


def test_encoder_rejects_wrong_input_shape(tiny_encoder_config):
    encoder = build_encoder(tiny_encoder_config)
    with pytest.raises(ShapeError):
        encoder(images_to_tensor(np.zeros((1, 12, 12, 3))))


def test_load_state_dict_reports_missing_and_misshaped(tiny_encoder_config):
    encoder = build_encoder(tiny_encoder_config)
    state = encoder.state_dict()
    first = next(iter(state))
    del state[first]
    with pytest.raises(CheckpointError) as excinfo:
        encoder.load_state_dict(state)
    assert first in str(excinfo.value)

    state = encoder.state_dict()
    state[first] = np.zeros((1, 1))
    with pytest.raises(CheckpointError):
        encoder.load_state_dict(state)


def test_load_state_dict_copies_values(tiny_encoder_config):
    source = build_encoder(tiny_encoder_config, seed=1)
    target = build_encoder(tiny_encoder_config, seed=2)
    target.load_state_dict(source.state_dict())
    images = images_to_tensor(np.random.default_rng(3).random((2, 16, 16, 3)))
    np.testing.assert_array_equal(source(images).data, target(images).data)


def test_pretext_head_outputs_column_of_probabilities():
    head = PretextHead(np.random.default_rng(0), dropout=0.3).eval()
    emb = Tensor(np.random.default_rng(1).standard_normal((5, EMBEDDING_DIM)))
    probs = head.forward_pair(emb, emb)
    assert probs.shape == (5, 1)
    assert np.all((probs.data > 0) & (probs.data < 1))
    assert head.parameter_count() == 2 * EMBEDDING_DIM + 1


def test_pretext_head_single_pair_matches_batch():
    head = PretextHead(np.random.default_rng(0)).eval()
    rng = np.random.default_rng(2)
    a = rng.standard_normal(EMBEDDING_DIM)
    b = rng.standard_normal(EMBEDDING_DIM)
    batch = head.forward_pair(Tensor(a[None]), Tensor(b[None])).data[0, 0]
    assert pretext_head(head, a, b) == pytest.approx(batch)


def test_pretext_head_rejects_mismatched_pairs():
    head = PretextHead(np.random.default_rng(0)).eval()
    with pytest.raises(ShapeError):
        head.forward_pair(
            Tensor(np.zeros((2, EMBEDDING_DIM))), Tensor(np.zeros((3, EMBEDDING_DIM)))
        )


def test_stage_head_rows_are_distributions():
    head = StageHead(np.random.default_rng(0)).eval()
    emb = np.random.default_rng(1).standard_normal((4, EMBEDDING_DIM))
    probs = head.forward(Tensor(emb)).data
    assert probs.shape == (4, 4)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(4))
    np.testing.assert_allclose(stage_head(head, emb[0]), probs[0])


def test_dropout_in_training_requires_rng():
    head = StageHead(np.random.default_rng(0), dropout=0.5).train()
    with pytest.raises(ValueError):
        head.forward(Tensor(np.zeros((1, EMBEDDING_DIM))))


def test_bce_values_and_label_validation():
    p = Tensor(np.array([0.5, 0.5]))
    assert bce_loss(p, [1, 0]).item() == pytest.approx(np.log(2))
    assert np.isfinite(bce_loss(Tensor(np.array([0.0, 1.0])), [1, 0]).item())
    with pytest.raises(LabelError):
        bce_loss(p, [1, 2])
    with pytest.raises(ShapeError):
        bce_loss(p, [1, 0, 1])


def test_cce_value_and_label_validation():
    probs = Tensor(np.full((2, 4), 0.25))
    assert cce_loss(probs, [0, 3]).item() == pytest.approx(np.log(4))
    with pytest.raises(LabelError):
        cce_loss(probs, [0, 4])


def test_adam_first_step_moves_by_learning_rate():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    optimiser = Adam({"x": x}, lr=0.1)
    backward(F.sum_all(F.mul(x, x)))
    optimiser.step()
    np.testing.assert_allclose(x.data, [0.9, -0.9], atol=1e-6)
    assert optimiser.state.t == 1


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0]), requires_grad=True)
    target = Tensor(np.array([-1.0]))
    optimiser = Adam({"x": x}, lr=0.05)
    for _ in range(500):
        optimiser.zero_grad()
        diff = F.add(x, F.mul(target, Tensor(np.array([-1.0]))))
        backward(F.sum_all(F.mul(diff, diff)))
        optimiser.step()
    assert x.data[0] == pytest.approx(-1.0, abs=1e-2)


def test_adam_treats_missing_gradient_as_zero():
    x = Tensor(np.array([2.0]), requires_grad=True)
    adam_step({"x": x}, {}, AdamState(lr=0.1))
    assert x.data[0] == 2.0


def test_adam_rejects_non_finite_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState()
    with pytest.raises(NonFiniteError) as excinfo:
        adam_step({"x": x}, {"x": np.array([np.inf])}, state)
    assert "x" in str(excinfo.value)
    assert state.t == 0


def test_adam_rejects_misshaped_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"x": x}, {"x": np.zeros(2)}, AdamState())


def test_adam_failed_step_leaves_parameters_and_state_untouched():
    a = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    with pytest.raises(ShapeError):
        adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.zeros(2)}, state)
    assert state.t == 0
    assert state.m == {} and state.v == {}
    np.testing.assert_array_equal(a.data, [1.0, -1.0])

    adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.ones(1)}, state)
    m_before = {n: buf.copy() for n, buf in state.m.items()}
    a_before = a.data.copy()
    state.v["b"] = np.zeros(3)
    with pytest.raises(ShapeError):
        adam_step({"a": a, "b": b}, {"a": np.ones(2), "b": np.ones(1)}, state)
    assert state.t == 1
    np.testing.assert_array_equal(a.data, a_before)
    for name, buf in m_before.items():
        np.testing.assert_array_equal(state.m[name], buf)
