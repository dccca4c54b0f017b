"""The full generator: two-stream encoder, three attention modulators, three decoders."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .audio import HALF_WINDOW, N_FEATURES
from .decoders import EXPR_DIM, ExpressionNet, EyeNet, PoseNet
from .encoder import EMBED_DIM, TASKS, AttentionModulator, TwoStreamEncoder, attach_subject_latent
from .errors import InvalidConfig, SubjectOutOfRange


@dataclass(frozen=True)
class ModelConfig:
    n_subjects: int = 1
    width: float = 1.0  # encoder channel multiplier; 1.0 is the published size
    subject_at_atm: bool = False  # also append the subject code to l and m

    def __post_init__(self):
        if self.n_subjects < 1:
            raise InvalidConfig("n_subjects must be >= 1")
        if not 0 < self.width <= 4:
            raise InvalidConfig("width must be in (0, 4]")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class SingingFaceGenerator(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        S = config.n_subjects
        self.encoder = TwoStreamEncoder(N_FEATURES + S, config.width)
        self.atm = nn.ModuleDict({t: AttentionModulator(t, 2 * EMBED_DIM) for t in TASKS})
        dec_in = 2 * EMBED_DIM + (2 * S if config.subject_at_atm else 0)
        self.egn = ExpressionNet(dec_in)
        self.pgn = PoseNet(dec_in)
        self.esgn = EyeNet(dec_in)
        # input statistics and per-subject mean pose, filled from training data
        self.register_buffer("feat_mean", torch.zeros(N_FEATURES))
        self.register_buffer("feat_std", torch.ones(N_FEATURES))
        self.register_buffer("mean_pose", torch.zeros(S, 6))
        # the expression net predicts offsets from each subject's mean expression
        self.register_buffer("mean_expr", torch.zeros(S, EXPR_DIM))
        # the pose net works in q = (p - mean_pose[subject]) / pose_scale
        self.register_buffer("pose_scale", torch.ones(6))

    def set_feature_stats(self, mean, std):
        self.feat_mean.copy_(torch.as_tensor(mean, dtype=self.feat_mean.dtype))
        self.feat_std.copy_(torch.clamp_min(torch.as_tensor(std, dtype=self.feat_std.dtype), 1e-3))

    def set_pose_frame(self, step, spread):
        """``step``: pose-net unit per channel; ``spread``: std of the pose about the subject mean.

        Speeds and poses of the pose net are in units of ``step``; the LSTM sees positions in units of ``spread``.
        """
        step = torch.clamp_min(torch.as_tensor(step, dtype=self.pose_scale.dtype), 1e-6)
        spread = torch.clamp_min(torch.as_tensor(spread, dtype=self.pose_scale.dtype), 1e-6)
        self.pose_scale.copy_(step)
        self.pgn.pos_gain.copy_(step / spread)

    def to_pose_frame(self, pose: torch.Tensor, subject: torch.Tensor) -> torch.Tensor:
        """Real pose units -> the normalised frame of the pose net; pose is (B, ..., 6)."""
        centre = self.mean_pose[subject].reshape(len(subject), *[1] * (pose.dim() - 2), 6)
        return (pose - centre) / self.pose_scale

    def normalize(self, windows: torch.Tensor) -> torch.Tensor:
        """Standardise MFCC channels; zero-padded rows stay zero."""
        mfcc = windows[..., :N_FEATURES]
        pad = (mfcc == 0).all(dim=-1, keepdim=True)
        mfcc = torch.where(pad, torch.zeros_like(mfcc), (mfcc - self.feat_mean) / self.feat_std)
        return torch.cat([mfcc, windows[..., N_FEATURES:]], dim=-1)

    def with_subject(self, windows: torch.Tensor, subject: torch.Tensor) -> torch.Tensor:
        """Append one-hot subject channels to (B, T, 39, 26) windows if not already present."""
        S = self.config.n_subjects
        if windows.shape[-1] == N_FEATURES + S:
            return windows
        if (subject < 0).any() or (subject >= S).any():
            raise SubjectOutOfRange(f"subject not in [0, {S})")
        code = torch.nn.functional.one_hot(subject.long(), S).to(windows.dtype)
        code = code[:, None, None, :].expand(*windows.shape[:3], S)
        return torch.cat([windows, code], dim=-1)

    def center_rows(self, windows: torch.Tensor) -> torch.Tensor:
        """Normalised centre MFCC row of each window, (B, T, 26)."""
        return self.normalize(windows)[:, :, HALF_WINDOW, :N_FEATURES]

    def forward(self, voice, music, subject, p0, pose_gt=None, att_override=None) -> dict:
        """voice/music: (B, T, 39, 26[+S]); subject: (B,) ints; p0: (B, 6).

        ``pose_gt`` switches the direction LSTM to teacher forcing.
        ``att_override`` maps task -> fixed attention tensor (bypass hook).
        """
        subject = torch.as_tensor(subject).reshape(-1)
        voice = self.normalize(self.with_subject(voice, subject))
        music = self.normalize(self.with_subject(music, subject))
        fv, fb = self.encoder(voice, music)
        att, pairs = {}, {}
        for t in TASKS:
            override = None if att_override is None else att_override.get(t)
            att[t], pair = self.atm[t](fv, fb, override)
            pairs[t] = attach_subject_latent(pair, subject, self.config.n_subjects, self.config.subject_at_atm)
        expr = self.egn(pairs["exp"]) + self.mean_expr[subject][:, None]
        q0 = self.to_pose_frame(p0, subject)
        q_gt = None if pose_gt is None else self.to_pose_frame(pose_gt, subject)
        speeds_q, dirs, pose_q = self.pgn(pairs["pose"], q0, q_gt)
        vel_q = speeds_q[:, 1:] * dirs[:, 1:]
        # integrate the real-unit steps from p0 so that frame 0 is p0 exactly
        steps = (pose_q[:, 1:] - pose_q[:, :1]) * self.pose_scale
        pose = torch.cat([p0[:, None], p0[:, None] + steps], dim=1)
        eye_raw = self.esgn(pairs["eye"], clamp=False)
        return {
            "fv": fv,
            "fb": fb,
            "att": att,
            "pairs": pairs,
            "expr": expr,
            "speed": speeds_q * self.pose_scale,
            "dirs": dirs,
            "pose": pose,
            "vel": vel_q * self.pose_scale,
            "pose_q": pose_q,
            "vel_q": vel_q,
            "eye_long_raw": eye_raw,
            "eye_long": eye_raw.clamp(0.0, 1.0),
        }
