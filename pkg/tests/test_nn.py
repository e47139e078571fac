import math

import numpy as np
import pytest
import torch

from ctrlsynth.nn import (
    Adam,
    Block,
    StateError,
    attention_layer,
    backward,
    causal_mask,
    cross_entropy,
    softmax,
)

from .helpers import finite_difference_check, tiny_model_and_batch


def test_softmax_examples():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
    assert softmax([3.7]).tolist() == [1.0]
    np.testing.assert_allclose(softmax([0.0, math.log(3)]).numpy(), [0.25, 0.75], atol=1e-15)


def test_softmax_stable_and_order_preserving():
    p = softmax([1000.0, 1001.0, 999.0])
    assert torch.isfinite(p).all()
    assert abs(float(p.sum()) - 1) < 1e-6
    assert p[1] > p[0] > p[2]


def test_softmax_empty():
    with pytest.raises(ValueError):
        softmax([])


def test_cross_entropy_examples():
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4), abs=1e-12)
    assert cross_entropy([0.0, 1.0], 1) == 0.0
    assert cross_entropy([0.5, 0.25, 0.25], 1) == pytest.approx(-math.log(0.25), abs=1e-12)
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


def _block(width=16, heads=4, seed=0):
    torch.manual_seed(seed)
    return Block(width, heads, 32).double()


def test_attention_single_token():
    block = _block()
    x = torch.randn(1, 16, dtype=torch.float64)
    y = attention_layer(x, block, torch.ones(1, 1, dtype=torch.bool))
    assert y.shape == (1, 16)
    # a lone token attends to itself only, so the result is a pointwise function of it
    z = attention_layer(x, block, torch.ones(1, 1, dtype=torch.bool))
    assert torch.equal(y, z)


def test_attention_causal_masking_is_exact():
    block = _block()
    x = torch.randn(6, 16, dtype=torch.float64)
    mask = causal_mask(6)
    y = attention_layer(x, block, mask)
    x2 = x.clone()
    x2[4:] += torch.randn(2, 16, dtype=torch.float64)
    y2 = attention_layer(x2, block, mask)
    assert torch.equal(y[:4], y2[:4])
    assert not torch.equal(y[4:], y2[4:])


def test_attention_permutation_equivariance():
    block = _block()
    x = torch.randn(7, 16, dtype=torch.float64)
    perm = torch.randperm(7)
    full = torch.ones(7, 7, dtype=torch.bool)
    y = attention_layer(x, block, full)
    y_perm = attention_layer(x[perm], block, full)
    torch.testing.assert_close(y_perm, y[perm], atol=1e-12, rtol=0)


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention_layer(torch.randn(3, 16), _block().float(), torch.ones(2, 2, dtype=torch.bool))


def test_attention_rows_are_distributions():
    block = _block()
    x = torch.randn(1, 9, 16, dtype=torch.float64)
    block.attn(x, causal_mask(9)[None], keep_weights=True)
    w = block.attn.last_weights
    torch.testing.assert_close(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6, rtol=0)


def test_backward_sum_of_parameter_gives_ones():
    module = torch.nn.Linear(3, 2).double()
    loss = module.weight.sum()
    grads = backward(loss, module)
    assert torch.equal(grads["weight"], torch.ones(2, 3, dtype=torch.float64))
    assert torch.equal(grads["bias"], torch.zeros(2, dtype=torch.float64))


def test_backward_twice_is_state_error():
    module = torch.nn.Linear(3, 2).double()
    loss = (module(torch.ones(1, 3, dtype=torch.float64)) ** 2).sum()
    backward(loss, module)
    with pytest.raises(StateError):
        backward(loss, module)


def test_backward_matches_finite_differences():
    model, loss_fn = tiny_model_and_batch(width=16, n_layers=1)
    worst = finite_difference_check(model, loss_fn, eps=1e-4, per_tensor=12)
    assert worst < 1e-3


def test_adam_zero_gradient_leaves_params():
    module = torch.nn.Linear(2, 2).double()
    before = {k: v.clone() for k, v in module.state_dict().items()}
    opt = Adam(module, lr=1e-2)
    opt.step({n: torch.zeros_like(p) for n, p in module.named_parameters()})
    for k, v in module.state_dict().items():
        assert torch.equal(v, before[k])


def test_adam_hand_computed_step():
    p = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    module = torch.nn.Module()
    module.p = p
    lr, b1, b2, eps, g = 3e-4, 0.9, 0.999, 1e-8, 0.2
    opt = Adam(module, lr=lr, betas=(b1, b2), eps=eps)
    opt.step({"p": torch.tensor([g], dtype=torch.float64)})
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    expected = 0.5 - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(p.item() - expected) < 1e-12
    # second step, same gradient
    opt.step({"p": torch.tensor([g], dtype=torch.float64)})
    m = (1 - b1) * g * (1 + b1)
    v = (1 - b2) * g * g * (1 + b2)
    expected -= lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
    assert abs(p.item() - expected) < 1e-12


def test_adam_is_deterministic():
    def run():
        torch.manual_seed(3)
        module = torch.nn.Linear(4, 3).double()
        opt = Adam(module, lr=1e-2)
        for _ in range(3):
            loss = (module(torch.ones(2, 4, dtype=torch.float64)) ** 2).sum()
            opt.step(backward(loss, module))
        return [v.clone() for v in module.state_dict().values()]

    for a, b in zip(run(), run()):
        assert torch.equal(a, b)


def test_adam_rejects_nan():
    module = torch.nn.Linear(2, 1).double()
    opt = Adam(module)
    grads = {n: torch.zeros_like(p) for n, p in module.named_parameters()}
    grads["bias"][0] = float("nan")
    with pytest.raises(FloatingPointError, match="bias"):
        opt.step(grads)
