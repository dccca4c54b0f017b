"""End-to-end inference, result files, and attention inspection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import SAMPLE_RATE, VIDEO_FPS, SampledAudio, features_from_audio, load_wav
from .containers import atomic_write_text, load_container, read_csv, save_container, write_csv
from .dataset import EXPR_COLS, POSE_COLS, SequenceRecord
from .decoders import EXPR_DIM, POSE_DIM, composite_eye, sample_blinks, smooth_eye
from .encoder import EMBED_DIM, TASKS
from .errors import (
    DurationMismatch,
    LengthMismatch,
    MissingResult,
    MissingTrack,
    SchemaViolation,
    ShapeMismatch,
    SubjectOutOfRange,
)
from .model import SingingFaceGenerator
from .training import load_generator, read_checkpoint, state_hash

log = logging.getLogger(__name__)

RESULT_HEADER = ["frame"] + EXPR_COLS + POSE_COLS + ["eye"]
SIGNAL_HEADER = ["frame", "voice_rms", "eye_long", "blink"]
ATT_HEADER = ["frame"] + [f"a{j}" for j in range(2 * EMBED_DIM)]
SILENCE_RMS = 1e-3  # about -60 dBFS


@dataclass
class GenerationResult:
    expr: np.ndarray  # (T, 64)
    pose: np.ndarray  # (T, 6)
    eye: np.ndarray  # (T,) composite, smoothed
    attention: dict  # task -> (T, 256)
    eye_long: np.ndarray  # (T,) decoder output before compositing
    blink: np.ndarray  # (T,) sampled blink state
    voice_rms: np.ndarray  # (T,) per-frame RMS of the voice stem
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.expr)
        if self.expr.shape != (T, EXPR_DIM) or self.pose.shape != (T, POSE_DIM):
            raise ShapeMismatch(f"expr {self.expr.shape}, pose {self.pose.shape}")
        for name in ("eye", "eye_long", "blink", "voice_rms"):
            if getattr(self, name).shape != (T,):
                raise LengthMismatch(f"{name} has shape {getattr(self, name).shape}, expected ({T},)")
        if set(self.attention) != set(TASKS):
            raise SchemaViolation(f"attention needs tasks {TASKS}")
        for t, a in self.attention.items():
            if a.shape != (T, 2 * EMBED_DIM):
                raise ShapeMismatch(f"attention {t} has shape {a.shape}")

    def __len__(self):
        return len(self.expr)


def frame_rms(audio: SampledAudio, n_frames: int) -> np.ndarray:
    """RMS of the samples inside each video frame's 1/30 s span."""
    x = audio.samples
    out = np.zeros(n_frames, dtype=np.float32)
    for k in range(n_frames):
        i0, i1 = (k * SAMPLE_RATE) // VIDEO_FPS, ((k + 1) * SAMPLE_RATE) // VIDEO_FPS
        seg = x[i0:i1]
        out[k] = np.sqrt(np.mean(seg ** 2)) if len(seg) else 0.0
    return out


def wrap_angles(pose: np.ndarray) -> np.ndarray:
    """Bring the three Euler angles into [-pi, pi]; in-range values are left untouched."""
    out = np.array(pose, copy=True)
    a = out[:, :3]
    out[:, :3] = np.where(np.abs(a) > np.pi, (a + np.pi) % (2 * np.pi) - np.pi, a)
    return out


def model_hash(generator: SingingFaceGenerator) -> str:
    return state_hash(generator)[:16]


def generate_from_features(generator: SingingFaceGenerator, voice: np.ndarray, music: np.ndarray, subject: int,
                           p0=None, seed: int = 0, voice_rms=None, sigma_frames: float = 2.0) -> GenerationResult:
    """Run the free-running generator on (T, 39, 26) windows of each stem."""
    S = generator.config.n_subjects
    if not 0 <= subject < S:
        raise SubjectOutOfRange(f"subject {subject} not in [0, {S})")
    if len(voice) != len(music):
        raise LengthMismatch(f"voice {len(voice)} vs music {len(music)} frames")
    T = len(voice)
    if p0 is None:
        p0 = generator.mean_pose[subject].detach().numpy()
    p0 = np.asarray(p0, dtype=np.float32).reshape(-1)
    if p0.shape != (POSE_DIM,):
        raise ShapeMismatch(f"p0 must have {POSE_DIM} values, got {p0.shape}")
    generator.eval()
    with torch.no_grad():
        out = generator(torch.as_tensor(np.asarray(voice, dtype=np.float32))[None],
                        torch.as_tensor(np.asarray(music, dtype=np.float32))[None],
                        torch.tensor([subject]), torch.from_numpy(p0)[None])
    eye_long = out["eye_long"][0].numpy().astype(np.float32)
    blink = sample_blinks(T / VIDEO_FPS, VIDEO_FPS, seed=seed).track[:T]
    if len(blink) < T:
        blink = np.pad(blink, (0, T - len(blink)))
    eye = smooth_eye(composite_eye(blink, eye_long), sigma_frames).astype(np.float32)
    rms = np.zeros(T, dtype=np.float32) if voice_rms is None else np.asarray(voice_rms, dtype=np.float32)
    return GenerationResult(
        expr=out["expr"][0].numpy().astype(np.float32),
        pose=wrap_angles(out["pose"][0].numpy().astype(np.float32)),
        eye=eye,
        attention={t: out["att"][t][0].numpy().astype(np.float32) for t in TASKS},
        eye_long=eye_long,
        blink=blink.astype(np.float32),
        voice_rms=rms,
        metadata={
            "model_hash": model_hash(generator),
            "config": generator.config.to_dict(),
            "config_hash": generator.config.hash(),
            "seed": int(seed),
            "subject": int(subject),
            "p0": [float(v) for v in p0],
            "n_frames": T,
            "fps": VIDEO_FPS,
        },
    )


def generate_from_audio(generator: SingingFaceGenerator, voice: SampledAudio, music: SampledAudio, subject: int,
                        p0=None, seed: int = 0) -> GenerationResult:
    nv, nm = voice.n_video_frames, music.n_video_frames
    if abs(nv - nm) > 1:
        raise DurationMismatch(f"voice is {nv} frames, music {nm} frames; stems must match within 1 frame")
    n = min(nv, nm)
    fv = features_from_audio(voice, n).windows
    fm = features_from_audio(music, n).windows
    return generate_from_features(generator, fv, fm, subject, p0, seed, frame_rms(voice, n))


def generate(voice_wav, music_wav, checkpoint, subject: int = 0, p0=None, seed: int = 0) -> GenerationResult:
    """Stems + checkpoint -> expression, pose and eye tracks at 30 fps."""
    generator = load_generator(checkpoint)
    result = generate_from_audio(generator, load_wav(voice_wav), load_wav(music_wav), subject, p0, seed)
    result.metadata["checkpoint"] = str(checkpoint)
    result.metadata["checkpoint_config_hash"] = read_checkpoint(checkpoint)["config_hash"]
    return result


def generate_record(generator: SingingFaceGenerator, record: SequenceRecord, seed: int = 0,
                    use_gt_p0: bool = True) -> GenerationResult:
    """Generate for a dataset sequence, starting from its first ground-truth pose."""
    p0 = record.pose_gt[0] if use_gt_p0 else None
    result = generate_from_audio(generator, record.voice_audio(), record.music_audio(), record.subject, p0, seed)
    result.metadata["sequence"] = record.id
    return result


# -- result files --------------------------------------------------------------


def save_result(result: GenerationResult, out_dir) -> Path:
    """tracks.csv/.bin, signals.csv, attention_<task>.csv/.bin and result.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T = len(result)
    tracks = np.concatenate([result.expr, result.pose, result.eye[:, None]], axis=1).astype(np.float32)
    write_csv(out / "tracks.csv", RESULT_HEADER, ([str(k), *map(float, tracks[k])] for k in range(T)))
    save_container(out / "tracks.bin", tracks, "tracks", VIDEO_FPS)
    signals = np.stack([result.voice_rms, result.eye_long, result.blink], axis=1).astype(np.float32)
    write_csv(out / "signals.csv", SIGNAL_HEADER, ([str(k), *map(float, signals[k])] for k in range(T)))
    for t, a in result.attention.items():
        write_csv(out / f"attention_{t}.csv", ATT_HEADER, ([str(k), *map(float, a[k])] for k in range(T)))
        save_container(out / f"attention_{t}.bin", a, f"attention_{t}", VIDEO_FPS)
    atomic_write_text(out / "result.json", json.dumps(result.metadata, indent=2, sort_keys=True) + "\n")
    return out


def _csv_array(path, header: list[str]) -> np.ndarray:
    got, rows = read_csv(path)
    if got != header:
        raise SchemaViolation(f"{path}: unexpected header")
    return np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32).reshape(len(rows), len(header) - 1)


def load_tracks(path) -> dict:
    """Read a generated ``tracks.csv`` into expr/pose/eye arrays; missing columns raise MissingTrack."""
    path = Path(path)
    if not path.is_file():
        raise MissingTrack(f"no tracks file at {path}")
    header, rows = read_csv(path)
    col = {c: i for i, c in enumerate(header)}
    out = {}
    for name, cols in (("expr", EXPR_COLS), ("pose", POSE_COLS), ("eye", ["eye"])):
        missing = [c for c in cols if c not in col]
        if missing:
            raise MissingTrack(f"{path}: {name} track missing (columns {missing[:3]})")
        try:
            vals = np.array([[float(r[col[c]]) for c in cols] for r in rows], dtype=np.float32)
        except (IndexError, ValueError) as exc:
            raise MissingTrack(f"{path}: {name} track incomplete ({exc})") from exc
        out[name] = vals.reshape(len(rows), len(cols))
    out["eye"] = out["eye"][:, 0]
    return out


def load_result(result_dir, from_binary: bool = False) -> GenerationResult:
    d = Path(result_dir)
    if not (d / "result.json").is_file() or not (d / "tracks.csv").is_file():
        raise MissingResult(f"{d} does not contain a generation result")
    meta = json.loads((d / "result.json").read_text())
    if from_binary:
        tracks = load_container(d / "tracks.bin").data
        att = {t: load_container(d / f"attention_{t}.bin").data for t in TASKS}
    else:
        tracks = _csv_array(d / "tracks.csv", RESULT_HEADER)
        att = {}
        for t in TASKS:
            if not (d / f"attention_{t}.csv").is_file():
                raise MissingResult(f"{d}: attention_{t}.csv missing")
            att[t] = _csv_array(d / f"attention_{t}.csv", ATT_HEADER)
    signals = _csv_array(d / "signals.csv", SIGNAL_HEADER)
    return GenerationResult(
        expr=tracks[:, :EXPR_DIM], pose=tracks[:, EXPR_DIM:EXPR_DIM + POSE_DIM], eye=tracks[:, -1],
        attention=att, eye_long=signals[:, 1], blink=signals[:, 2], voice_rms=signals[:, 0], metadata=meta,
    )


# -- attention inspection --------------------------------------------------------


@dataclass
class AttentionSummary:
    task: str
    voice_mean: np.ndarray  # (T,) mean over the 128 voice channels
    music_mean: np.ndarray  # (T,) mean over the 128 music channels
    silent: np.ndarray  # (T,) bool, voice RMS below SILENCE_RMS

    def stats(self) -> dict:
        s = self.silent
        pick = lambda x, m: float(x[m].mean()) if m.any() else None
        return {
            "voice_mean": float(self.voice_mean.mean()),
            "music_mean": float(self.music_mean.mean()),
            "silent_frames": int(s.sum()),
            "silent_voice_mean": pick(self.voice_mean, s),
            "silent_music_mean": pick(self.music_mean, s),
            "active_voice_mean": pick(self.voice_mean, ~s),
            "active_music_mean": pick(self.music_mean, ~s),
        }


def attention_halves(att: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame mean attention over the voice half and the music half of the channels."""
    att = np.asarray(att)
    if att.ndim != 2 or att.shape[1] != 2 * EMBED_DIM:
        raise ShapeMismatch(f"attention grid must be (T, {2 * EMBED_DIM}), got {att.shape}")
    return att[:, :EMBED_DIM].mean(1), att[:, EMBED_DIM:].mean(1)


def summarize_attention(result: GenerationResult, silence_rms: float = SILENCE_RMS) -> dict[str, AttentionSummary]:
    silent = result.voice_rms < silence_rms
    out = {}
    for t in TASKS:
        v, m = attention_halves(result.attention[t])
        out[t] = AttentionSummary(t, v, m, silent)
    return out


def inspect_attention(result_dir, out_dir=None, plots: bool = True) -> dict:
    """Write per-task half-mean series, a summary JSON and heatmap figures."""
    result = load_result(result_dir)
    out = Path(out_dir) if out_dir is not None else Path(result_dir) / "attention"
    out.mkdir(parents=True, exist_ok=True)
    summaries = summarize_attention(result)
    T = len(result)
    for t, s in summaries.items():
        rows = ([str(k), float(s.voice_mean[k]), float(s.music_mean[k]), str(int(s.silent[k]))] for k in range(T))
        write_csv(out / f"halves_{t}.csv", ["frame", "voice_mean", "music_mean", "voice_silent"], rows)
    doc = {"n_frames": T, "silence_rms": SILENCE_RMS, "tasks": {t: s.stats() for t, s in summaries.items()}}
    atomic_write_text(out / "summary.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if plots:
        from . import plotting

        for t in TASKS:
            plotting.attention_heatmap(result.attention[t], out / f"heatmap_{t}.png", title=f"{t} attention")
        plotting.attention_halves_figure(summaries, out / "halves.png")
        plotting.tracks_figure(result, out.parent / "tracks.png" if out_dir is None else out / "tracks.png")
    return doc
