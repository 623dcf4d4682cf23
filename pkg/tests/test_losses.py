import math

import numpy as np
import pytest

from trupnet.errors import ShapeError
from trupnet.losses import bce_loss, combined_loss, dice_loss
from trupnet.tensor import Tape, Tensor, backward, finite_diff_grad


def test_bce_half_probability():
    pred = Tensor(np.full((2, 2), 0.5, dtype=np.float32))
    target = Tensor(np.ones((2, 2), dtype=np.float32))
    assert bce_loss(pred, target).item() == pytest.approx(math.log(2.0), abs=1e-5)


def test_bce_perfect_prediction():
    target = Tensor(np.array([1.0, 0.0, 1.0], dtype=np.float32))
    assert bce_loss(Tensor(target.data.copy()), target).item() <= 1e-6


def test_bce_closed_form_wrong_prediction():
    pred = Tensor(np.array([0.75], dtype=np.float32))
    target = Tensor(np.array([0.0], dtype=np.float32))
    assert bce_loss(pred, target).item() == pytest.approx(-math.log(0.25), abs=1e-5)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_dice_trivial_cases():
    ones = Tensor(np.ones((1, 4), dtype=np.float32))
    assert dice_loss(Tensor(ones.data.copy()), ones).item() == pytest.approx(0.0, abs=1e-6)
    zeros = Tensor(np.zeros((1, 4), dtype=np.float32))
    assert dice_loss(Tensor(zeros.data.copy()), zeros).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_hand_counted():
    # inter=1, sums 2+1 -> 1 - 2/3
    pred = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]], dtype=np.float32))
    target = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]], dtype=np.float32))
    assert dice_loss(pred, target, smooth=0.0).item() == pytest.approx(1.0 - 2.0 / 3.0, abs=1e-6)


def test_dice_per_image_then_mean():
    pred = Tensor(np.array([[1.0, 1.0], [1.0, 0.0]], dtype=np.float32))
    target = Tensor(np.array([[1.0, 1.0], [0.0, 1.0]], dtype=np.float32))
    # image 0: dice 1 -> loss 0; image 1: inter 0, sums 1+1 -> loss 1
    assert dice_loss(pred, target, smooth=0.0).item() == pytest.approx(0.5, abs=1e-6)


def test_combined_is_sum_of_parts():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.uniform(0.1, 0.9, (2, 1, 4, 4)).astype(np.float32))
    target = Tensor((rng.uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(np.float32))
    total = combined_loss(pred, target).item()
    assert total == pytest.approx(bce_loss(pred, target).item() + dice_loss(pred, target).item(), abs=1e-6)
    perfect = Tensor(target.data.copy())
    assert combined_loss(perfect, target).item() <= 1e-6


def test_combined_gradient_is_sum_of_part_gradients():
    rng = np.random.default_rng(1)
    base = rng.uniform(0.15, 0.85, (2, 6)).astype(np.float32)
    target = Tensor((rng.uniform(0, 1, (2, 6)) > 0.5).astype(np.float32))

    def grad_of(fn):
        p = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            loss = fn(p)
        backward(loss, tape)
        return p.grad

    g_combined = grad_of(lambda p: combined_loss(p, target))
    g_parts = grad_of(lambda p: bce_loss(p, target)) + grad_of(lambda p: dice_loss(p, target))
    np.testing.assert_allclose(g_combined, g_parts, atol=1e-6)
    numeric = finite_diff_grad(lambda p: combined_loss(p, target), Tensor(base.copy())).data
    np.testing.assert_allclose(g_combined, numeric, atol=1e-2)
