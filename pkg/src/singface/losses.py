"""Regression, distribution-matching and adversarial objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .errors import EmptySet, LengthMismatch, MissingMask, ShapeMismatch, TooShort

MMD_SCALES = (1.0, 2.0, 4.0, 8.0, 16.0)
MMD_MIN_BANDWIDTH = 0.05


@dataclass(frozen=True)
class LossWeights:
    w1: float = 5.0  # expression MSE
    w2: float = 50.0  # expression velocity
    w3: float = 1.0  # pose MMD
    w4: float = 10.0  # pose speed L1
    w5: float = 5.0  # long-closure L1
    w6: float = 1.0  # long-closure MMD
    lambda1: float = 1.0  # regression total
    lambda2: float = 0.1  # adversarial

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    l_exp: float = 0.0
    l_pose: float = 0.0
    l_eye: float = 0.0
    l_att: float = 0.0
    l_reg: float = 0.0
    l_adv_g: float = 0.0
    l_adv_d: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _as_frames(x: torch.Tensor) -> torch.Tensor:
    # (T,) -> (T, 1) so per-frame norms work for scalar tracks
    return x.unsqueeze(-1) if x.dim() == 1 else x


def _check_same(x, y):
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """(1/T) sum_t ||x_t - x_hat_t||^2.

    The last axis is the feature axis for 2-D and higher inputs (leading batch
    axes are averaged); a 1-D input is a scalar track.
    """
    _check_same(x, x_hat)
    d = _as_frames(x - x_hat)
    return (d ** 2).sum(-1).mean()


def l1_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same(x, x_hat)
    d = _as_frames(x - x_hat)
    return d.abs().sum(-1).mean()


def velocity_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between frame-to-frame differences. Time is axis -2 (or -1 for 1-D)."""
    _check_same(x, x_hat)
    x, x_hat = _as_frames(x), _as_frames(x_hat)
    if x.shape[-2] < 2:
        raise TooShort("velocity loss needs at least 2 frames")
    dv = (x[..., 1:, :] - x[..., :-1, :]) - (x_hat[..., 1:, :] - x_hat[..., :-1, :])
    return (dv ** 2).sum(-1).mean()


def mmd_loss(x: torch.Tensor, y: torch.Tensor, bandwidth: float | None = None) -> torch.Tensor:
    """Unbiased MMD^2 between sample sets x (n, d) and y (m, d), clamped at 0.

    Kernel: mean of RBF kernels with bandwidths {1, 2, 4, 8, 16} x base, where
    base is the median pairwise distance of the pooled sample (floored at
    ``MMD_MIN_BANDWIDTH``) unless given. A leading batch axis is averaged.
    """
    if x.dim() == 3:
        return torch.stack([mmd_loss(a, b, bandwidth) for a, b in zip(x, y)]).mean()
    x, y = _as_frames(x), _as_frames(y)
    if len(x) == 0 or len(y) == 0:
        raise EmptySet("MMD needs non-empty sample sets")
    if x.shape[-1] != y.shape[-1]:
        raise ShapeMismatch(f"dimensionality {x.shape[-1]} vs {y.shape[-1]}")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise EmptySet("unbiased MMD needs at least 2 samples per set")
    z = torch.cat([x, y], 0)
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    if bandwidth is None:
        iu = torch.triu_indices(n + m, n + m, offset=1)
        base2 = torch.clamp_min(d2[iu[0], iu[1]].median(), MMD_MIN_BANDWIDTH ** 2)
    else:
        base2 = torch.as_tensor(float(bandwidth) ** 2, dtype=z.dtype)
    k = sum(torch.exp(-d2 / (2.0 * s * s * base2)) for s in MMD_SCALES) / len(MMD_SCALES)
    kxx, kyy, kxy = k[:n, :n], k[n:, n:], k[:n, n:]
    term_x = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
    term_y = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
    return torch.clamp_min(term_x + term_y - 2.0 * kxy.mean(), 0.0)


def attention_sparsity_loss(masks) -> torch.Tensor:
    """Sum over the three tasks of the mean absolute attention."""
    masks = list(masks) if masks is not None else []
    if len(masks) != 3 or any(m is None for m in masks):
        raise MissingMask("need the exp, pose and eye attention masks")
    return sum(m.abs().mean() for m in masks)


def regression_loss(gt: dict, pred: dict, masks, w: LossWeights = LossWeights()):
    """Weighted regression objective.

    ``gt`` holds ``expr`` (B,T,64), ``pose`` (B,T,6), ``eye_long`` (B,T);
    ``pred`` holds ``expr``, ``pose``, ``vel`` (B,T-1,6) and ``eye_long``.
    Returns (l_reg tensor, dict of component tensors).
    """
    l_exp = w.w1 * mse_loss(gt["expr"], pred["expr"]) + w.w2 * velocity_loss(gt["expr"], pred["expr"])
    vel_gt = gt["pose"][:, 1:] - gt["pose"][:, :-1]
    l_pose = w.w3 * mmd_loss(gt["pose"], pred["pose"]) + w.w4 * l1_loss(vel_gt.abs(), pred["vel"].abs())
    eye_gt, eye_pred = gt["eye_long"].unsqueeze(-1), pred["eye_long"].unsqueeze(-1)
    l_eye = w.w5 * l1_loss(eye_gt, eye_pred) + w.w6 * mmd_loss(eye_gt, eye_pred)
    l_att = attention_sparsity_loss(masks)
    l_reg = l_exp + l_pose + l_eye + l_att
    return l_reg, {"l_exp": l_exp, "l_pose": l_pose, "l_eye": l_eye, "l_att": l_att}


DISC_IN_CHANNELS = 26 + 26 + 6 + 1


class Discriminator(nn.Module):
    """Strided Conv1D/BN/LeakyReLU stack scoring (pose, long-eye, audio) windows.

    Input (B, T, 59); for T = 128 the temporal lengths go 64, 32, 16, 8 and
    the output is a (B, 8) score map.
    """

    def __init__(self, in_channels: int = DISC_IN_CHANNELS, slope: float = 0.2):
        super().__init__()
        self.in_channels = in_channels
        self.slope = slope
        self.conv1 = nn.Conv1d(in_channels, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(32, 64, 3, stride=2, padding=1)
        self.bn2 = nn.BatchNorm1d(64)
        self.conv3 = nn.Conv1d(64, 128, 3, stride=2, padding=1)
        self.bn3 = nn.BatchNorm1d(128)
        self.conv4 = nn.Conv1d(128, 224, 3, stride=2, padding=1)
        self.bn4 = nn.BatchNorm1d(224)
        self.conv5 = nn.Conv1d(224, 224, 3, stride=1, padding=1)
        self.bn5 = nn.BatchNorm1d(224)
        self.conv6 = nn.Conv1d(224, 1, 3, stride=1, padding=1)

    def trace(self, x: torch.Tensor) -> list[tuple[str, torch.Tensor]]:
        if x.shape[-1] != self.in_channels:
            raise ShapeMismatch(f"discriminator expects {self.in_channels} channels, got {x.shape[-1]}")
        act = lambda h: torch.nn.functional.leaky_relu(h, self.slope)
        steps = []
        h = x.transpose(1, 2)
        h = act(self.conv1(h)); steps.append(("conv1", h))
        h = act(self.bn2(self.conv2(h))); steps.append(("conv2", h))
        h = act(self.bn3(self.conv3(h))); steps.append(("conv3", h))
        h = act(self.bn4(self.conv4(h))); steps.append(("conv4", h))
        h = act(self.bn5(self.conv5(h))); steps.append(("conv5", h))
        h = self.conv6(h); steps.append(("score", h))
        return steps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trace(x)[-1][1][:, 0, :]


def discriminator_input(pose, eye_long, voice_rows, music_rows) -> torch.Tensor:
    """Per-frame concatenation (B, T, 26 + 26 + 6 + 1)."""
    T = pose.shape[1]
    for name, t in (("eye", eye_long), ("voice", voice_rows), ("music", music_rows)):
        if t.shape[1] != T:
            raise LengthMismatch(f"{name} length {t.shape[1]} != pose length {T}")
    return torch.cat([voice_rows, music_rows, pose, eye_long.unsqueeze(-1)], dim=-1)


def discriminator_forward(pose, eye_long, voice_rows, music_rows, disc: Discriminator) -> torch.Tensor:
    return disc(discriminator_input(pose, eye_long, voice_rows, music_rows))


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN objectives (L_D, L_G)."""
    l_d = 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    l_g = 0.5 * ((d_fake - 1.0) ** 2).mean()
    return l_d, l_g
