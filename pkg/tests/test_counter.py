import pytest
import torch
import torch.nn as nn

from t2icount.counter import CountHead, integrate
from t2icount.errors import DimensionError, NumericError


def test_shape_and_nonnegative():
    head = CountHead(16, 8, 4)
    for _ in range(5):
        nn.init.normal_(head.conv3.weight, std=1.0)
        nn.init.normal_(head.conv3.bias, std=1.0)
        D = head(torch.randn(2, 16, 12, 12))
        assert D.shape == (2, 12, 12)
        assert (D >= 0).all()


def test_zero_final_layer_gives_zero_density():
    head = CountHead(16, 8, 4)
    nn.init.zeros_(head.conv3.weight)
    nn.init.zeros_(head.conv3.bias)
    D = head(torch.randn(1, 16, 6, 6))
    assert (D == 0).all() and integrate(D).item() == 0


def test_deterministic():
    head = CountHead(16, 8, 4).eval()
    x = torch.randn(1, 16, 6, 6)
    assert torch.equal(head(x), head(x))


def test_gradient_reaches_input():
    head = CountHead(16, 8, 4)
    x = torch.randn(1, 16, 6, 6, requires_grad=True)
    integrate(head(x)).sum().backward()
    assert x.grad.abs().sum() > 0


def test_non_finite_names_layer():
    head = CountHead(16, 8, 4)
    with pytest.raises(NumericError, match="attn"):
        head(torch.full((1, 16, 4, 4), float("nan")))


def test_integrate_examples():
    assert integrate(torch.zeros(4, 4)).item() == 0
    assert integrate(torch.full((4, 5), 1 / 20)).item() == pytest.approx(1.0)


def test_integrate_additive_over_disjoint_masks():
    D = torch.rand(6, 6, dtype=torch.float64)
    a = torch.zeros(6, 6, dtype=torch.bool)
    a[:3] = True
    b = torch.zeros(6, 6, dtype=torch.bool)
    b[4:, 2:] = True
    assert integrate(D, a).item() + integrate(D, b).item() == pytest.approx(integrate(D, a | b).item(), abs=1e-12)


def test_integrate_mask_shape():
    with pytest.raises(DimensionError):
        integrate(torch.zeros(4, 4), torch.ones(3, 4))
