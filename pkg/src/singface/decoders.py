"""Expression, pose and eye-state generators.

Pose is produced as speed x direction: an MLP gives non-negative per-frame
speeds, an LSTM fed with the previous pose and velocity gives directions in
[-1, 1], and the track is integrated from a starting pose ``p0``. Eye state
is random blinks from a uniform interval/duration sampler, overridden by a
learned long-closure signal, then Gaussian-smoothed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d
from torch import nn

from .encoder import EMBED_DIM, ModulatedPair
from .errors import LengthMismatch, ShapeMismatch, TaskMismatch
from .nn import LstmState, Mlp, lstm_step

EXPR_DIM = 64
POSE_DIM = 6
HIDDEN = 128


def _check_task(pair: ModulatedPair, task: str):
    if pair.task != task:
        raise TaskMismatch(f"expected a {task!r} pair, got {pair.task!r}")


class ExpressionNet(nn.Module):
    def __init__(self, in_dim: int = 2 * EMBED_DIM):
        super().__init__()
        self.mlp = Mlp(in_dim, EXPR_DIM, HIDDEN)

    def forward(self, pair: ModulatedPair) -> torch.Tensor:
        _check_task(pair, "exp")
        return self.mlp(pair.joined())


class PoseNet(nn.Module):
    """Speed MLP plus LSTM direction head."""

    def __init__(self, in_dim: int = 2 * EMBED_DIM):
        super().__init__()
        self.speed_mlp = Mlp(in_dim, POSE_DIM, HIDDEN)
        self.lstm = nn.LSTM(in_dim + 2 * POSE_DIM, HIDDEN, batch_first=True)
        self.direc = nn.Linear(HIDDEN, POSE_DIM)
        # rescales the position part of the LSTM input (set from data by the generator)
        self.register_buffer("pos_gain", torch.ones(POSE_DIM))

    def speed(self, pair: ModulatedPair) -> torch.Tensor:
        _check_task(pair, "pose")
        return torch.abs(self.speed_mlp(pair.joined()))

    def direction_step(self, feat_t, p_prev, p_prev2, state: LstmState):
        """feat_t: (B, in_dim) audio embedding at t; returns d_t in [-1, 1]^6 and the new state."""
        if p_prev.shape[-1] != POSE_DIM or p_prev2.shape[-1] != POSE_DIM:
            raise ShapeMismatch("poses must be 6-d")
        v_prev = p_prev - p_prev2
        x = torch.cat([feat_t, p_prev * self.pos_gain, v_prev], dim=-1)
        o, state = lstm_step(x, state, self.lstm)
        return torch.tanh(self.direc(o)), state

    def directions_teacher_forced(self, pair: ModulatedPair, pose_gt: torch.Tensor) -> torch.Tensor:
        """Directions for frames 1..T-1 given ground-truth history; row 0 is zero."""
        _check_task(pair, "pose")
        feat = pair.joined()
        B, T, _ = feat.shape
        p_prev = pose_gt[:, :-1]
        p_prev2 = torch.cat([pose_gt[:, :1], pose_gt[:, :-2]], dim=1)
        x = torch.cat([feat[:, 1:], p_prev * self.pos_gain, p_prev - p_prev2], dim=-1)
        o, _ = self.lstm(x)
        d = torch.tanh(self.direc(o))
        return torch.cat([torch.zeros_like(d[:, :1]), d], dim=1)

    def forward(self, pair: ModulatedPair, p0: torch.Tensor, pose_gt: torch.Tensor | None = None):
        """Returns (speeds, directions, poses), each (B, T, 6).

        Frame 0 of the pose track is ``p0``; frames 1..T-1 follow
        p_t = p_{t-1} + s_t * d_t. With ``pose_gt`` the LSTM history is the
        ground truth (teacher forcing); otherwise it is the model's own track.
        """
        speeds = self.speed(pair)
        B, T, _ = speeds.shape
        if pose_gt is not None:
            dirs = self.directions_teacher_forced(pair, pose_gt)
            steps = speeds[:, 1:] * dirs[:, 1:]
            poses = torch.cat([p0[:, None], p0[:, None] + torch.cumsum(steps, dim=1)], dim=1)
            return speeds, dirs, poses
        feat = pair.joined()
        state = LstmState.zeros(B, HIDDEN, feat.dtype)
        poses = [p0]
        dirs = [torch.zeros_like(p0)]
        p_prev2 = p0
        for t in range(1, T):
            d, state = self.direction_step(feat[:, t], poses[-1], p_prev2, state)
            p_prev2 = poses[-1]
            poses.append(poses[-1] + speeds[:, t] * d)
            dirs.append(d)
        return speeds, torch.stack(dirs, 1), torch.stack(poses, 1)


class EyeNet(nn.Module):
    def __init__(self, in_dim: int = 2 * EMBED_DIM):
        super().__init__()
        self.mlp = Mlp(in_dim, 1, HIDDEN)

    def forward(self, pair: ModulatedPair, clamp: bool = True) -> torch.Tensor:
        """(B, T) long-closure signal; clamped to [0, 1] unless ``clamp=False``."""
        _check_task(pair, "eye")
        raw = self.mlp(pair.joined())[..., 0]
        return raw.clamp(0.0, 1.0) if clamp else raw


def egn_forward(pair: ModulatedPair, net: ExpressionNet) -> torch.Tensor:
    return net(pair)


def pgn_speed(pair: ModulatedPair, net: PoseNet) -> torch.Tensor:
    return net.speed(pair)


def pgn_direction_step(feat_t, p_prev, p_prev2, state, net: PoseNet):
    return net.direction_step(feat_t, p_prev, p_prev2, state)


def esgn_long(pair: ModulatedPair, net: EyeNet) -> torch.Tensor:
    return net(pair, clamp=True)


def integrate_pose(p0, speeds, dirs) -> np.ndarray:
    """p_t = p_{t-1} + s_t * d_t for t = 1..T starting at p0; returns the T poses after p0.

    Accumulates sequentially in float64.
    """
    speeds = np.asarray(speeds, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if speeds.shape != dirs.shape:
        raise LengthMismatch(f"speeds {speeds.shape} vs directions {dirs.shape}")
    p = np.array(p0, dtype=np.float64)
    out = np.empty_like(speeds)
    for t in range(len(speeds)):
        p = p + speeds[t] * dirs[t]
        out[t] = p
    return out


def decompose_pose(poses) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a track into (p0, |dp|, sign(dp)); the inverse of :func:`integrate_pose`."""
    poses = np.asarray(poses, dtype=np.float64)
    dp = np.diff(poses, axis=0)
    return poses[0].copy(), np.abs(dp), np.sign(dp)


@dataclass(frozen=True)
class BlinkParams:
    interval_lo: float = 1.2
    interval_hi: float = 2.0
    duration_lo: float = 0.10
    duration_hi: float = 0.45

    def __post_init__(self):
        if not (0 < self.interval_lo < self.interval_hi and 0 < self.duration_lo < self.duration_hi):
            raise ValueError(f"invalid blink parameters {self}")


@dataclass
class BlinkSample:
    track: np.ndarray  # (n_frames,) of {0., 1.}
    starts: np.ndarray  # closure onset times, s
    intervals: np.ndarray  # open interval preceding each closure, s
    durations: np.ndarray  # closure lengths, s
    fps: int = 30


def sample_blink_events(n: int, params: BlinkParams = BlinkParams(), rng=None):
    """Draw ``n`` (open interval, closed duration) pairs."""
    rng = np.random.default_rng(rng)
    intervals = rng.uniform(params.interval_lo, params.interval_hi, n)
    durations = rng.uniform(params.duration_lo, params.duration_hi, n)
    return intervals, durations


def sample_blinks(duration_s: float, fps: int = 30, params: BlinkParams = BlinkParams(), seed=None) -> BlinkSample:
    """Binary blink track: open for U(a_i, b_i) s, closed for U(a_d, b_d) s, repeated.

    Frame k is closed when its time k / fps lies inside a closed span.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n_frames = int(np.floor(duration_s * fps + 1e-9))
    starts, intervals, durations = [], [], []
    t = 0.0
    while True:
        gap = rng.uniform(params.interval_lo, params.interval_hi)
        dur = rng.uniform(params.duration_lo, params.duration_hi)
        onset = t + gap
        if onset >= n_frames / fps:
            break
        starts.append(onset)
        intervals.append(gap)
        durations.append(dur)
        t = onset + dur
    track = np.zeros(n_frames)
    times = np.arange(n_frames) / fps
    for s, d in zip(starts, durations):
        track[(times >= s) & (times < s + d)] = 1.0
    return BlinkSample(track, np.array(starts), np.array(intervals), np.array(durations), fps)


def composite_eye(blink, long) -> np.ndarray:
    """Long-closure value where it is positive, otherwise the blink state."""
    blink = np.asarray(blink, dtype=np.float64)
    long = np.asarray(long, dtype=np.float64)
    if blink.shape != long.shape:
        raise LengthMismatch(f"blink {blink.shape} vs long {long.shape}")
    return np.where(long > 0, long, blink)


def smooth_eye(track, sigma_frames: float = 2.0) -> np.ndarray:
    """Gaussian filter truncated at 3 sigma with edge replication, clamped to [0, 1]."""
    if sigma_frames <= 0:
        raise ValueError("sigma must be positive")
    out = gaussian_filter1d(np.asarray(track, dtype=np.float64), sigma_frames, mode="nearest", truncate=3.0)
    return np.clip(out, 0.0, 1.0)
