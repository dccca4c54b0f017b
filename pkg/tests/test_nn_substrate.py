import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from singface.errors import NonFiniteGradient, ShapeMismatch
from singface.nn import (
    LstmState,
    Mlp,
    ResidualBlock1d,
    TemporalUNet,
    adam_update,
    conv_out_len,
    dense_forward,
    grad_check,
    lr_at,
    lstm_step,
    make_adam,
)


def dbl(seed=0):
    return torch.Generator().manual_seed(seed)


# -- dense ------------------------------------------------------------------------


def test_dense_identity():
    x = torch.tensor([0.3, -1.2, 4.0], dtype=torch.float64)
    out = dense_forward(x, torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64), "none")
    assert torch.equal(out, x)


def test_dense_relu():
    x = torch.tensor([-1.0, 2.0])
    assert dense_forward(x, torch.eye(2), torch.zeros(2), "relu").tolist() == [0.0, 2.0]


def test_dense_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dense_forward(torch.zeros(3), torch.zeros(2, 4), torch.zeros(2))


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid", "none"])
def test_dense_gradient(act):
    g = dbl(1)
    W = torch.randn(4, 5, dtype=torch.float64, generator=g)
    b = torch.randn(4, dtype=torch.float64, generator=g)
    x = torch.randn(5, dtype=torch.float64, generator=g)
    rep = grad_check(lambda: (dense_forward(x, W, b, act) ** 2).sum(), [W, b, x], tolerance=1e-5, h=1e-5)
    assert rep.passed, rep


# -- residual block --------------------------------------------------------------------


@pytest.mark.parametrize("L,expected", [(39, 20), (20, 10), (10, 5), (5, 3)])
def test_downsample_lengths(L, expected):
    assert conv_out_len(L, 2) == expected
    block = ResidualBlock1d(4, 8, downsample=True).eval()
    assert block(torch.randn(2, 4, L)).shape == (2, 8, expected)


def test_zero_conv_identity_skip_is_relu():
    block = ResidualBlock1d(4, 4, downsample=False).eval()
    for m in block.modules():
        if isinstance(m, torch.nn.Conv1d):
            torch.nn.init.zeros_(m.weight)
            torch.nn.init.zeros_(m.bias)
    x = torch.randn(3, 4, 11)
    assert torch.allclose(block(x), torch.relu(x))


def test_residual_wrong_channels():
    with pytest.raises(ShapeMismatch):
        ResidualBlock1d(4, 8)(torch.zeros(1, 5, 10))


def test_residual_gradient():
    torch.manual_seed(0)
    block = ResidualBlock1d(4, 6, downsample=True).double().train()
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    params = [x] + list(block.parameters())
    rep = grad_check(lambda: (block(x) * torch.linspace(-1, 1, 24, dtype=torch.float64).view(1, 6, 4)).sum(),
                     params, tolerance=1e-5, h=1e-6)
    assert rep.passed, rep


# -- LSTM ---------------------------------------------------------------------------------


def test_lstm_zero_weights_zero_output():
    lstm = torch.nn.LSTM(268, 128, batch_first=True)
    for p in lstm.parameters():
        torch.nn.init.zeros_(p)
    out, state = lstm_step(torch.randn(2, 268), LstmState.zeros(2), lstm)
    assert torch.all(out == 0) and torch.all(state.cell == 0)


def test_lstm_step_deterministic_and_matches_sequence():
    torch.manual_seed(0)
    lstm = torch.nn.LSTM(5, 7, batch_first=True)
    xs = torch.randn(2, 4, 5)
    s = LstmState.zeros(2, 7)
    outs = []
    for t in range(4):
        o, s = lstm_step(xs[:, t], s, lstm)
        outs.append(o)
    o2, _ = lstm_step(xs[:, 0], LstmState.zeros(2, 7), lstm)
    assert torch.equal(o2, outs[0])
    full, _ = lstm(xs)
    assert torch.allclose(torch.stack(outs, 1), full, atol=1e-6)


def test_lstm_shape_check():
    with pytest.raises(ShapeMismatch):
        lstm_step(torch.zeros(1, 3), LstmState.zeros(1, 4), torch.nn.LSTM(5, 4))


def test_lstm_gradient_three_steps():
    torch.manual_seed(0)
    lstm = torch.nn.LSTM(3, 4, batch_first=True).double()
    xs = torch.randn(1, 3, 3, dtype=torch.float64)

    def f():
        s = LstmState.zeros(1, 4, torch.float64)
        total = 0.0
        for t in range(3):
            o, s = lstm_step(xs[:, t], s, lstm)
            total = total + (o * (t + 1)).sum()
        return total

    rep = grad_check(f, [xs] + list(lstm.parameters()), tolerance=1e-4)
    assert rep.passed, rep


# -- U-net --------------------------------------------------------------------------------


@pytest.mark.parametrize("T", [1, 2, 7, 128])
def test_unet_preserves_length(T):
    net = TemporalUNet(16, (8, 4, 4))
    assert net(torch.randn(2, 16, T)).shape == (2, 8, T)


# -- Adam and schedule -----------------------------------------------------------------------


def test_adam_first_step_sign():
    for g in (0.3, -2.0, 1e-3):
        x = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = make_adam([x], lr=0.01)
        x.grad = torch.tensor([g], dtype=torch.float64)
        adam_update(opt)
        assert float(x.detach()) == pytest.approx(1.0 - 0.01 * np.sign(g), abs=1e-6)


def test_adam_zero_gradient_noop():
    x = torch.nn.Parameter(torch.tensor([1.5, -2.0]))
    opt = make_adam([x], lr=0.1)
    x.grad = torch.zeros(2)
    adam_update(opt)
    assert x.tolist() == [1.5, -2.0]


def test_adam_quadratic_descends():
    x = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = make_adam([x], lr=0.1)
    prev = 1.0
    for _ in range(10):
        opt.zero_grad()
        (x ** 2).sum().backward()
        adam_update(opt)
        assert abs(float(x.detach())) < prev
        prev = abs(float(x.detach()))


def test_adam_rejects_nonfinite():
    x = torch.nn.Parameter(torch.tensor([1.0]))
    opt = make_adam([x])
    x.grad = torch.tensor([float("nan")])
    with pytest.raises(NonFiniteGradient):
        adam_update(opt)


def test_lr_schedule_examples():
    assert lr_at(0, 50) == 1e-4
    assert lr_at(20, 50) == 1e-4
    assert lr_at(35, 50) == pytest.approx(5e-5, rel=1e-12)
    assert lr_at(19, 50, 2e-3) == 2e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=200))
def test_lr_non_increasing(total):
    lrs = [lr_at(e, total) for e in range(total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(v > 0 for v in lrs)


# -- grad_check --------------------------------------------------------------------------------


def test_grad_check_square():
    x = torch.tensor([3.0], dtype=torch.float64)
    rep = grad_check(lambda: (x ** 2).sum(), [x], tolerance=1e-6)
    assert rep.passed and rep.n_checked == 1


def test_grad_check_abs_kink_excluded():
    x = torch.tensor([0.0], dtype=torch.float64)
    rep = grad_check(lambda: x.abs().sum(), [x], tolerance=1e-6)
    assert rep.n_excluded == 1 and rep.n_checked == 0
    assert rep.excluded == [(0, 0)]


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    x = torch.tensor([1.3, -0.4], dtype=torch.float64)
    assert not grad_check(lambda: Wrong.apply(x).sum(), [x]).passed


def test_grad_check_directions_mode():
    torch.manual_seed(0)
    mlp = Mlp(6, 3, 8).double()
    x = torch.randn(4, 6, dtype=torch.float64)
    rep = grad_check(lambda: (mlp(x) ** 2).sum(), list(mlp.parameters()), mode="directions", n_directions=6)
    assert rep.passed and rep.n_checked == 6
