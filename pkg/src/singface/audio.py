"""Audio front end: WAV stems to per-video-frame MFCC windows.

Each stem (voice or background music) is turned into 13 MFCCs plus 13
deltas at 100 Hz (25 ms window, 10 ms hop) and then cut into overlapping
39-frame windows, one per 30 fps video frame.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import resample_poly

from .containers import load_container, read_csv, save_container, write_csv
from .errors import (
    EmptyTrack,
    ShapeMismatch,
    SubjectOutOfRange,
    TooShort,
    UnreadableFile,
    UnsupportedFormat,
    WrongSampleRate,
)

SAMPLE_RATE = 16000
MFCC_RATE = 100
VIDEO_FPS = 30
WIN_LEN = 400  # 25 ms at 16 kHz
HOP = 160  # 10 ms
NFFT = 512
N_MELS = 26
N_CEPS = 13
N_FEATURES = 2 * N_CEPS
PREEMPH = 0.97
DELTA_N = 2
WINDOW = 39
HALF_WINDOW = WINDOW // 2


@dataclass
class SampledAudio:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise WrongSampleRate(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ShapeMismatch("audio must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def n_video_frames(self) -> int:
        return (VIDEO_FPS * len(self.samples)) // self.sample_rate


@dataclass
class MfccTrack:
    frames: np.ndarray  # (n_frames, 26): 13 MFCC then 13 deltas
    frame_rate: int = MFCC_RATE

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"MFCC track must be (n, {N_FEATURES}), got {self.frames.shape}")


@dataclass
class FeatureTrack:
    windows: np.ndarray  # (n_video_frames, 39, 26 + subject_channels), float32
    fps: int = VIDEO_FPS
    subject_channels: int = 0

    def __post_init__(self):
        w = self.windows
        if w.ndim != 3 or w.shape[1] != WINDOW or w.shape[2] != N_FEATURES + self.subject_channels:
            raise ShapeMismatch(f"bad feature track shape {w.shape}")

    def __len__(self):
        return self.windows.shape[0]

    def center_rows(self) -> np.ndarray:
        """The 26 MFCC features of the 100 Hz frame aligned with each video frame."""
        return self.windows[:, HALF_WINDOW, :N_FEATURES]


def load_wav(path, resample: bool = True) -> SampledAudio:
    """Read a PCM/float WAV file as 16 kHz mono in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, struct.error, wave.Error) as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "bit depth" in msg or "Unsupported" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from exc
        raise UnreadableFile(f"{path}: {msg}") from exc
    if data.size == 0:
        raise UnreadableFile(f"{path}: no audio samples")

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        x = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = np.clip(x, -1.0, 1.0)

    if rate != SAMPLE_RATE:
        if not resample:
            raise WrongSampleRate(f"{path}: {rate} Hz, resampling disabled")
        g = gcd(int(rate), SAMPLE_RATE)
        n_out = int(round(len(x) * SAMPLE_RATE / rate))
        x = resample_poly(x, SAMPLE_RATE // g, int(rate) // g)[:n_out]
        x = np.clip(x, -1.0, 1.0)
    return SampledAudio(x, SAMPLE_RATE)


def write_wav(path, audio: SampledAudio | np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM."""
    samples = audio.samples if isinstance(audio, SampledAudio) else np.asarray(audio)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, sample_rate, pcm)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def mel_filterbank(n_filters: int = N_MELS, nfft: int = NFFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on FFT bins, (n_filters, nfft // 2 + 1)."""
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_filters + 2)
    bins = np.floor((nfft + 1) * _mel_to_hz(mel_points) / sample_rate).astype(int)
    fb = np.zeros((n_filters, nfft // 2 + 1))
    for j in range(n_filters):
        lo, mid, hi = bins[j], bins[j + 1], bins[j + 2]
        for k in range(lo, mid):
            fb[j, k] = (k - lo) / (mid - lo)
        for k in range(mid, hi):
            fb[j, k] = (hi - k) / (hi - mid)
    return fb


_FILTERBANK = mel_filterbank()


def delta(feat: np.ndarray, n: int = DELTA_N) -> np.ndarray:
    """Regression deltas over +-n frames with edge replication."""
    T = len(feat)
    denom = 2 * sum(i * i for i in range(1, n + 1))
    padded = np.pad(feat, ((n, n), (0, 0)), mode="edge")
    out = np.zeros_like(feat)
    for i in range(1, n + 1):
        out += i * (padded[n + i:n + i + T] - padded[n - i:n - i + T])
    return out / denom


def compute_mfcc(audio: SampledAudio) -> MfccTrack:
    """13 MFCCs (c0 replaced by log frame energy) plus their deltas, at 100 Hz.

    Rectangular 25 ms frames, 512-point FFT, 26 mel filters, pre-emphasis 0.97,
    no liftering. Zero energies are floored at machine epsilon before the log.
    """
    x = audio.samples
    if len(x) < WIN_LEN:
        raise TooShort(f"need at least {WIN_LEN} samples, got {len(x)}")
    x = np.append(x[0], x[1:] - PREEMPH * x[:-1])
    n_frames = 1 + (len(x) - WIN_LEN) // HOP
    idx = np.arange(WIN_LEN)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = x[idx]
    pspec = np.abs(np.fft.rfft(frames, NFFT)) ** 2 / NFFT
    eps = np.finfo(float).eps
    energy = np.maximum(pspec.sum(axis=1), eps)
    fbank = np.maximum(pspec @ _FILTERBANK.T, eps)
    ceps = dct(np.log(fbank), type=2, axis=1, norm="ortho")[:, :N_CEPS]
    ceps[:, 0] = np.log(energy)
    return MfccTrack(np.hstack([ceps, delta(ceps)]), MFCC_RATE)


def center_frame_index(k: int) -> int:
    """Index of the 100 Hz frame nearest to video frame k (time k/30 s)."""
    # round(100 k / 30) with halves rounded up, in integer arithmetic
    return (20 * k + 3) // 6


def window_features(mfcc: MfccTrack, duration_s: float | None = None, n_video_frames: int | None = None) -> FeatureTrack:
    """Cut 39-frame windows centred on each video frame; rows outside the track are zero."""
    if mfcc.frame_rate != MFCC_RATE:
        raise ValueError("window_features expects a 100 Hz MFCC track")
    if n_video_frames is None:
        if duration_s is None:
            raise ValueError("give duration_s or n_video_frames")
        n_video_frames = int(np.floor(VIDEO_FPS * duration_s + 1e-9))
    if n_video_frames <= 0 or len(mfcc.frames) == 0:
        raise EmptyTrack("no video frames to window")
    src = mfcc.frames.astype(np.float32)
    padded = np.zeros((len(src) + 2 * HALF_WINDOW, N_FEATURES), dtype=np.float32)
    padded[HALF_WINDOW:HALF_WINDOW + len(src)] = src
    centers = np.array([center_frame_index(k) for k in range(n_video_frames)])
    # padded index of row r in window k is centers[k] + r
    idx = centers[:, None] + np.arange(WINDOW)[None, :]
    idx_clipped = np.minimum(idx, len(padded) - 1)
    windows = padded[idx_clipped]
    windows[idx >= len(padded)] = 0.0
    return FeatureTrack(windows, VIDEO_FPS, 0)


def attach_subject(track: FeatureTrack, subject: int, n_subjects: int) -> FeatureTrack:
    """Append a one-hot subject code to every window row."""
    if n_subjects < 1 or not 0 <= subject < n_subjects:
        raise SubjectOutOfRange(f"subject {subject} not in [0, {n_subjects})")
    base = track.windows[..., :N_FEATURES]
    code = np.zeros(base.shape[:2] + (n_subjects,), dtype=np.float32)
    code[..., subject] = 1.0
    return FeatureTrack(np.concatenate([base, code], axis=-1), track.fps, n_subjects)


def features_from_audio(audio: SampledAudio, n_video_frames: int | None = None) -> FeatureTrack:
    mfcc = compute_mfcc(audio)
    n = audio.n_video_frames if n_video_frames is None else n_video_frames
    return window_features(mfcc, n_video_frames=n)


def features_from_wav(path) -> FeatureTrack:
    return features_from_audio(load_wav(path))


def save_feature_track(path, track: FeatureTrack) -> None:
    save_container(path, track.windows, "features", track.fps, track.subject_channels)


def load_feature_track(path) -> FeatureTrack:
    c = load_container(path)
    if c.kind != "features":
        raise UnsupportedFormat(f"{path}: container holds {c.kind!r}, not features")
    return FeatureTrack(c.data, int(round(c.fps)), c.subject_channels)


def feature_track_to_csv(path, track: FeatureTrack) -> None:
    """One line per (video frame, window row); the subject width goes in the header."""
    width = track.windows.shape[2]
    header = ["frame", "row"] + [f"c{j}" for j in range(N_FEATURES)]
    header += [f"s{j}" for j in range(width - N_FEATURES)]
    rows = (
        [str(k), str(r)] + [float(v) for v in track.windows[k, r]]
        for k in range(len(track))
        for r in range(WINDOW)
    )
    write_csv(path, header, rows)


def feature_track_from_csv(path) -> FeatureTrack:
    header, rows = read_csv(path)
    subj = sum(1 for h in header if h.startswith("s"))
    vals = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float32)
    n = len(rows) // WINDOW
    return FeatureTrack(vals.reshape(n, WINDOW, N_FEATURES + subj), VIDEO_FPS, subj)
