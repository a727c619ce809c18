import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from haploomni.numeric import (
    DimensionError,
    OracleFailure,
    finite_difference_check,
    layer_norm,
    matmul,
    parameter_digests,
    silu,
    softmax,
    tensor_digest,
)

finite = st.floats(-50, 50, allow_nan=False, width=64)


def test_matmul_checks_inner_dimension():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    assert matmul(torch.ones(2, 3), torch.ones(3, 4)).shape == (2, 4)


@given(arrays(np.float64, (3, 7), elements=finite))
def test_layer_norm_zero_mean_unit_variance(x):
    x = torch.from_numpy(x)
    y = layer_norm(x)
    assert torch.allclose(y.mean(-1), torch.zeros(3, dtype=torch.float64), atol=1e-9)
    var = x.var(-1, unbiased=False)
    expect = var / (var + 1e-5)
    assert torch.allclose(y.var(-1, unbiased=False), expect, atol=1e-9)


@given(arrays(np.float64, (4, 6), elements=finite), st.floats(-1e3, 1e3, allow_nan=False))
def test_softmax_is_shift_invariant_and_normalised(x, c):
    x = torch.from_numpy(x)
    p = softmax(x)
    assert torch.allclose(p.sum(-1), torch.ones(4, dtype=torch.float64))
    assert torch.allclose(softmax(x + c), p, atol=1e-12)


def test_softmax_huge_logits_stay_finite():
    p = softmax(torch.tensor([1e4, 1e4 - 1.0, -1e4]))
    assert torch.isfinite(p).all()
    assert p[0] > p[1] > p[2]


def test_silu_matches_definition():
    x = torch.linspace(-6, 6, 25, dtype=torch.float64)
    assert torch.allclose(silu(x), x / (1 + torch.exp(-x)))


def test_digest_sensitive_to_value_dtype_shape():
    a = torch.arange(6, dtype=torch.float32)
    assert tensor_digest(a) == tensor_digest(a.clone())
    assert tensor_digest(a) != tensor_digest(a.double())
    assert tensor_digest(a) != tensor_digest(a.view(2, 3))
    b = a.clone()
    b[3] += 1e-6
    assert tensor_digest(a) != tensor_digest(b)


def test_parameter_digests_cover_every_parameter():
    m = torch.nn.Linear(3, 2)
    d = parameter_digests(m)
    assert set(d) == {"weight", "bias"}


def test_finite_difference_accepts_correct_gradients():
    torch.manual_seed(0)
    w = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, 4, dtype=torch.float64)
    rep = finite_difference_check(lambda: torch.tanh(x @ w).pow(2).sum(), {"w": w})
    assert rep.passed
    assert rep.checked_entries == 12
    assert rep.max_rel_error < 1e-8


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.pow(3)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2 * x  # should be 3 x^2


def test_finite_difference_rejects_wrong_backward():
    w = torch.tensor([0.7, -1.3, 2.0], dtype=torch.float64, requires_grad=True)
    rep = finite_difference_check(lambda: _WrongGrad.apply(w).sum(), {"w": w})
    assert not rep.passed
    assert rep.worst()[0] == "w"


def test_frozen_parameters_are_reported():
    w = torch.ones(2, dtype=torch.float64, requires_grad=True)
    z = torch.ones(2, dtype=torch.float64)
    rep = finite_difference_check(lambda: (w * z).sum(), {"w": w, "z": z})
    assert rep.frozen == ["z"]
    assert rep.passed


def test_max_entries_samples_subset():
    w = torch.randn(10, 10, dtype=torch.float64, requires_grad=True)
    rep = finite_difference_check(lambda: w.pow(2).sum(), {"w": w}, max_entries=7)
    assert rep.checked_entries == 7


def test_nonfinite_objective_raises():
    w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(OracleFailure):
        finite_difference_check(lambda: (w / 0.0).sum() * math.inf, {"w": w})
