"""Layer set, optimizer helpers and a finite-difference gradient checker.

Layers are thin torch modules; analytic gradients come from autograd and
are verified against central differences with :func:`grad_check`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteGradient, ShapeMismatch

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "none": lambda x: x,
}


def dense_forward(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor, activation: str = "none") -> torch.Tensor:
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise ShapeMismatch(f"dense: x {tuple(x.shape)}, W {tuple(W.shape)}, b {tuple(b.shape)}")
    return ACTIVATIONS[activation](F.linear(x, W, b))


class Mlp(nn.Module):
    """FC -> ReLU -> FC, the head used by every decoder."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def conv_out_len(length: int, stride: int) -> int:
    """Output length of a kernel-3, padding-1 conv: ceil(L / stride)."""
    return (length + stride - 1) // stride


class ResidualBlock1d(nn.Module):
    """conv-BN-ReLU-conv-BN plus skip, ReLU after the sum.

    The skip is the identity unless channels or stride change, in which case
    it is a strided 1x1 conv followed by BN.
    """

    def __init__(self, in_ch: int, out_ch: int, downsample: bool = False):
        super().__init__()
        stride = 2 if downsample else 1
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.bn1 = nn.BatchNorm1d(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm1d(out_ch)
        if in_ch != out_ch or downsample:
            self.skip = nn.Sequential(nn.Conv1d(in_ch, out_ch, 1, stride=stride), nn.BatchNorm1d(out_ch))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ShapeMismatch(f"residual block expects {self.conv1.in_channels} channels, got {x.shape[1]}")
        h = torch.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return torch.relu(h + self.skip(x))


@dataclass
class LstmState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, size: int = 128, dtype=torch.float32) -> "LstmState":
        z = torch.zeros(batch, size, dtype=dtype)
        return cls(z, z.clone())


def lstm_step(x: torch.Tensor, state: LstmState, lstm: nn.LSTM) -> tuple[torch.Tensor, LstmState]:
    """One time step of a single-layer batch-first LSTM. x is (batch, input)."""
    if x.shape[-1] != lstm.input_size:
        raise ShapeMismatch(f"LSTM input width {x.shape[-1]} != {lstm.input_size}")
    out, (h, c) = lstm(x.unsqueeze(1), (state.hidden.unsqueeze(0), state.cell.unsqueeze(0)))
    return out[:, 0], LstmState(h[0], c[0])


class TemporalUNet(nn.Module):
    """Three-level 1D U-net over time.

    (B, C, T) -> (B, C_out, T). Encoder 256->128 (stride 1), 128->64
    (stride 2), 64->64 (stride 2); decoder upsamples by nearest neighbour to
    the matching encoder length and concatenates the skip.
    """

    def __init__(self, in_ch: int = 256, widths: Sequence[int] = (128, 64, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = nn.Conv1d(in_ch, w1, 3, padding=1)
        self.enc2 = nn.Conv1d(w1, w2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv1d(w2, w3, 3, stride=2, padding=1)
        self.dec2 = nn.Conv1d(w3 + w2, w2, 3, padding=1)
        self.dec1 = nn.Conv1d(w2 + w1, w1, 3, padding=1)
        self.out_channels = w1

    def forward(self, x):
        e1 = torch.relu(self.enc1(x))
        e2 = torch.relu(self.enc2(e1))
        e3 = torch.relu(self.enc3(e2))
        u2 = F.interpolate(e3, size=e2.shape[-1], mode="nearest")
        d2 = torch.relu(self.dec2(torch.cat([u2, e2], dim=1)))
        u1 = F.interpolate(d2, size=e1.shape[-1], mode="nearest")
        return torch.relu(self.dec1(torch.cat([u1, e1], dim=1)))


def lr_at(epoch: int, total_epochs: int, base_lr: float = 1e-4) -> float:
    """Constant for the first 40% of epochs, then linear decay reaching 0 at total_epochs."""
    decay_start = 0.4 * total_epochs
    if epoch < decay_start:
        return base_lr
    # the min guards a 1-ulp overshoot when 0.4 * total is not exact
    return min(base_lr, base_lr * (total_epochs - epoch) / (total_epochs - decay_start))


def make_adam(params, lr: float = 1e-4) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_update(optimizer: torch.optim.Optimizer, lr: float | None = None) -> None:
    """Bias-corrected Adam step at ``lr``; refuses non-finite gradients."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteGradient("non-finite gradient in optimizer step")
        if lr is not None:
            group["lr"] = lr
    optimizer.step()


def clip_grad_norm(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(list(params), max_norm))


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int
    n_excluded: int = 0
    excluded: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel(a: np.ndarray, b: np.ndarray, atol: float = 0.0) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den <= atol:
        return 0.0
    return float(num / den)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-6,
    mode: str = "coordinates",
    n_directions: int = 4,
    seed: int = 0,
    kink_tol: float = 1e-3,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    ``mode="coordinates"`` perturbs every entry and reports the relative
    error of each parameter's gradient vector (entries where forward and
    backward one-sided differences disagree by more than ``kink_tol`` are
    treated as kinks and excluded). ``mode="directions"`` compares
    directional derivatives along random unit directions spanning all
    parameters, which scales to large models.
    Gradients whose analytic and numeric norms are both below ``atol`` count
    as agreeing: they are zero up to finite-difference noise (a conv bias
    feeding a batch-norm is the usual case).
    Params are perturbed in place and restored.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    def f() -> float:
        with torch.no_grad():
            return float(fn())

    worst = 0.0
    n_checked = 0
    excluded = []
    if mode == "coordinates":
        for pi, (p, g) in enumerate(zip(params, grads)):
            flat = p.data.view(-1)
            analytic = g.detach().reshape(-1).cpu().numpy().astype(np.float64)
            numeric = np.zeros_like(analytic)
            keep = np.ones(len(analytic), dtype=bool)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                f0 = f()
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    keep[i] = False
                    excluded.append((pi, i))
                    continue
                numeric[i] = (fp - fm) / (2 * h)
            n_checked += int(keep.sum())
            if keep.any():
                worst = max(worst, _rel(analytic[keep], numeric[keep], atol))
    elif mode == "directions":
        rng = np.random.default_rng(seed)
        analytic_all, numeric_all = [], []
        for _ in range(n_directions):
            dirs = [torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype) for p in params]
            norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic_all.append(sum(float((g * d).sum()) for g, d in zip(grads, dirs)))
            with torch.no_grad():
                for p, d in zip(params, dirs):
                    p.add_(h * d)
                fp = f()
                for p, d in zip(params, dirs):
                    p.sub_(2 * h * d)
                fm = f()
                for p, d in zip(params, dirs):
                    p.add_(h * d)
            numeric_all.append((fp - fm) / (2 * h))
            n_checked += 1
        worst = _rel(np.array(analytic_all), np.array(numeric_all), atol)
    else:
        raise ValueError(f"unknown grad_check mode {mode!r}")
    return GradCheckReport(worst, tolerance, n_checked, len(excluded), excluded)
