import numpy as np
import pytest

from src.engine import grad_check
from src.engine import functional as F
from src.engine.gradcheck import OP_CASES, check_function, relative_error
from src.nn import bce_loss, cce_loss

TOLERANCE = 1e-4


@pytest.mark.parametrize("op_kind", sorted(OP_CASES))
def test_analytic_gradient_matches_finite_difference(op_kind):
    worst = max(grad_check(op_kind, seed=seed) for seed in range(20))
    assert worst < TOLERANCE


def test_conv2d_with_stride_and_padding():
    shapes = [(1, 2, 6, 6), (2, 2, 3, 3), (2,)]
    assert grad_check("conv2d", shapes, seed=3, stride=2, padding=1) < TOLERANCE


def test_overlapping_max_pool():
    assert grad_check("max_pool2d", [(1, 1, 5, 5)], seed=1, size=3, stride=1) < TOLERANCE


def test_unknown_op_kind_is_rejected():
    with pytest.raises(KeyError):
        grad_check("gelu")


@pytest.mark.parametrize("seed", range(20))
def test_binary_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    probs = rng.uniform(0.1, 0.9, size=6)
    labels = rng.integers(0, 2, size=6)
    error = check_function(lambda ins: bce_loss(ins[0], labels), [probs], seed=seed)
    assert error < TOLERANCE


@pytest.mark.parametrize("seed", range(20))
def test_categorical_cross_entropy_gradient_through_softmax(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    error = check_function(
        lambda ins: cce_loss(F.softmax(ins[0]), labels), [logits], seed=seed
    )
    assert error < TOLERANCE


def test_categorical_cross_entropy_gradient_on_probabilities():
    rng = np.random.default_rng(11)
    probs = rng.uniform(0.1, 0.9, size=(4, 4))
    labels = np.array([0, 1, 2, 3])
    assert check_function(lambda ins: cce_loss(ins[0], labels), [probs]) < TOLERANCE


def test_relative_error_uses_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([0.5])) == pytest.approx(0.5)
