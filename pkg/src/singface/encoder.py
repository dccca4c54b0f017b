"""Two-stream audio encoder and the per-task attention modulators."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .audio import N_FEATURES, WINDOW
from .errors import LengthMismatch, ShapeMismatch, SubjectOutOfRange
from .nn import ResidualBlock1d, TemporalUNet

TASKS = ("exp", "pose", "eye")
EMBED_DIM = 128

# (out_channels, downsample) per residual block, after a 32-channel stem conv
_AE_BLOCKS = [(32, False), (64, True), (64, False), (128, True), (128, False),
              (256, True), (256, False), (512, True)]


def _scaled(c: int, width: float) -> int:
    return max(4, int(round(c * width)))


class AudioEncoder(nn.Module):
    """Single-stream encoder: one 39 x C MFCC window -> 128-d embedding.

    At width 1.0 the trace is 26x39 -> 32x39 -> 64x20 -> 128x10 -> 256x5 ->
    512x3 -> 1536 -> 768 -> 256 -> 128. ``width`` scales the conv channels
    and the 768-unit layer for desk-scale runs.
    """

    def __init__(self, in_channels: int = N_FEATURES, width: float = 1.0, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.in_channels = in_channels
        stem = _scaled(32, width)
        self.stem = nn.Conv1d(in_channels, stem, 3, padding=1)
        blocks = []
        c = stem
        for out, down in _AE_BLOCKS:
            out = _scaled(out, width)
            blocks.append(ResidualBlock1d(c, out, down))
            c = out
        self.blocks = nn.ModuleList(blocks)
        length = WINDOW
        for _, down in _AE_BLOCKS:
            length = (length + 1) // 2 if down else length
        self.flat_dim = c * length
        self.fc1 = nn.Linear(self.flat_dim, _scaled(768, width))
        self.fc2 = nn.Linear(_scaled(768, width), 256)
        self.fc3 = nn.Linear(256, embed_dim)

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """windows: (N, 39, C) time-major -> (N, embed_dim)."""
        return self.trace(windows)[-1][1]

    def trace(self, windows: torch.Tensor) -> list[tuple[str, torch.Tensor]]:
        if windows.shape[-2:] != (WINDOW, self.in_channels):
            raise ShapeMismatch(f"encoder expects (*, {WINDOW}, {self.in_channels}), got {tuple(windows.shape)}")
        steps = []
        x = windows.transpose(1, 2)
        steps.append(("input", x))
        x = torch.relu(self.stem(x))
        steps.append(("conv", x))
        for i, block in enumerate(self.blocks):
            x = block(x)
            steps.append((f"res{i}", x))
        x = x.flatten(1)
        steps.append(("flatten", x))
        x = torch.relu(self.fc1(x))
        steps.append(("fc768", x))
        x = torch.relu(self.fc2(x))
        steps.append(("fc256", x))
        x = self.fc3(x)
        steps.append(("embed", x))
        return steps


class TwoStreamEncoder(nn.Module):
    """Separate, unshared encoders for the voice and the background-music stems."""

    def __init__(self, in_channels: int = N_FEATURES, width: float = 1.0):
        super().__init__()
        self.voice = AudioEncoder(in_channels, width)
        self.music = AudioEncoder(in_channels, width)

    def forward(self, voice: torch.Tensor, music: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, 39, C) x 2 -> (B, T, 128) x 2. Frames are encoded independently."""
        if voice.shape != music.shape:
            if voice.shape[:2] != music.shape[:2]:
                raise LengthMismatch(f"voice {tuple(voice.shape)} vs music {tuple(music.shape)}")
            raise ShapeMismatch(f"voice {tuple(voice.shape)} vs music {tuple(music.shape)}")
        B, T = voice.shape[:2]
        fv = self.voice(voice.reshape(B * T, *voice.shape[2:])).reshape(B, T, -1)
        fb = self.music(music.reshape(B * T, *music.shape[2:])).reshape(B, T, -1)
        return fv, fb


@dataclass
class ModulatedPair:
    l: torch.Tensor  # (B, T, 128[+S])
    m: torch.Tensor
    task: str

    def joined(self) -> torch.Tensor:
        return torch.cat([self.l, self.m], dim=-1)


class AttentionModulator(nn.Module):
    """Sigmoid channel gates over f_v (+) f_b from a temporal U-net, then a per-frame FC."""

    def __init__(self, task: str, channels: int = 2 * EMBED_DIM):
        super().__init__()
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.unet = TemporalUNet(channels)
        self.fc = nn.Linear(self.unet.out_channels, channels)
        nn.init.zeros_(self.fc.bias)

    def logits(self, joined: torch.Tensor) -> torch.Tensor:
        h = self.unet(joined.transpose(1, 2))  # (B, C, T)
        return self.fc(h.transpose(1, 2))  # (B, T, 256)

    def forward(self, fv: torch.Tensor, fb: torch.Tensor, att_override: torch.Tensor | None = None):
        if fv.shape[:2] != fb.shape[:2]:
            raise LengthMismatch(f"f_v {tuple(fv.shape)} vs f_b {tuple(fb.shape)}")
        joined = torch.cat([fv, fb], dim=-1)
        att = torch.sigmoid(self.logits(joined)) if att_override is None else att_override
        out = att * joined
        d = fv.shape[-1]
        return att, ModulatedPair(out[..., :d], out[..., d:], self.task)


def attach_subject_latent(pair: ModulatedPair, subject, n_subjects: int, enabled: bool = True) -> ModulatedPair:
    """Append the one-hot subject code to every frame of l and m.

    ``subject`` is an int or a (B,) tensor of ints.
    """
    if not enabled:
        return pair
    B, T = pair.l.shape[:2]
    subj = torch.as_tensor(subject).reshape(-1).expand(B) if torch.as_tensor(subject).numel() == 1 else torch.as_tensor(subject)
    if (subj < 0).any() or (subj >= n_subjects).any():
        raise SubjectOutOfRange(f"subject {subject} not in [0, {n_subjects})")
    code = torch.nn.functional.one_hot(subj.long(), n_subjects).to(pair.l.dtype)
    code = code[:, None, :].expand(B, T, n_subjects)
    return ModulatedPair(torch.cat([pair.l, code], -1), torch.cat([pair.m, code], -1), pair.task)


def tsae_forward(voice: torch.Tensor, music: torch.Tensor, encoder: TwoStreamEncoder):
    return encoder(voice, music)


def atm_forward(fv: torch.Tensor, fb: torch.Tensor, modulator: AttentionModulator):
    return modulator(fv, fb)
