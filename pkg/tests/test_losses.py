import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from transferattack import losses
from transferattack.attacks import class_loss


def test_class_loss_hand_cases():
    # misclassified: positive margin
    assert class_loss([1.0, 5.0, 2.0], 0) == 4.0
    # correctly classified: negative margin
    assert class_loss([6.0, 1.0, 2.0], 0) == -4.0


def test_class_loss_clamps_at_minus_kappa():
    assert class_loss([500.0, 0.0], 0, kappa=200) == -200.0
    assert class_loss([500.0, 0.0], 0, kappa=10) == -10.0


def test_saturating_margin_clamps_above():
    assert class_loss([0.0, 500.0], 0, kappa=200, saturating=True) == 200.0
    assert class_loss([0.0, 500.0], 0, kappa=200) == 500.0


def test_class_loss_label_out_of_range():
    with pytest.raises(IndexError):
        class_loss([1.0, 2.0], 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.data())
def test_margin_against_direct_formula(z, data):
    t = data.draw(st.integers(0, len(z) - 1))
    others = [v for i, v in enumerate(z) if i != t]
    assert class_loss(z, t, kappa=200) == pytest.approx(max(max(others) - z[t], -200))


def test_featuremap_distance_is_l2_norm():
    a = torch.tensor([[[[3.0]], [[4.0]]]])
    b = torch.zeros_like(a)
    assert float(losses.featuremap_distance(a, b)[0]) == pytest.approx(5.0)


def test_cross_entropy_matches_log_softmax():
    z = torch.tensor([[1.0, 2.0, 0.5]])
    expected = -torch.log_softmax(z, dim=1)[0, 1]
    assert float(losses.cross_entropy(z, torch.tensor([1]))[0]) == pytest.approx(float(expected))
