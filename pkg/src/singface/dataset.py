"""Ground-truth tracks: eye-state preprocessing, manifests, and a synthetic dataset.

Track CSV columns: ``frame, e0..e63, rx, ry, rz, tx, ty, tz, au45r``. A JSON
sidecar carries the subject and the renderer-bound reference parameters
(identity 80, texture 80, illumination 27). A manifest ties sequences
together::

    {"version": 1, "fps": 30, "n_subjects": 2,
     "sequences": [{"id": "seq000", "subject": 0,
                    "voice_wav": "seq000/voice.wav", "music_wav": "seq000/music.wav",
                    "tracks_csv": "seq000/tracks.csv", "sidecar": "seq000/sidecar.json"}]}

Relative paths resolve against the manifest's directory. ``mix_wav`` is optional.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, VIDEO_FPS, SampledAudio, load_wav, write_wav
from .containers import atomic_write_text, read_csv, write_csv
from .decoders import BlinkParams, sample_blinks
from .errors import (
    ConstantTrack,
    InvalidConfig,
    LengthMismatch,
    MissingFile,
    SchemaViolation,
)

log = logging.getLogger(__name__)

EXPR_COLS = [f"e{i}" for i in range(64)]
POSE_COLS = ["rx", "ry", "rz", "tx", "ty", "tz"]
TRACK_HEADER = ["frame"] + EXPR_COLS + POSE_COLS + ["au45r"]
TRIM_TOLERANCE = 2
CLOSE_THRESHOLD = 0.5
TAU_S = 0.5


@dataclass
class ReferenceFaceParams:
    identity: np.ndarray
    texture: np.ndarray
    illumination: np.ndarray

    def __post_init__(self):
        for name, arr, n in (("identity", self.identity, 80), ("texture", self.texture, 80),
                             ("illumination", self.illumination, 27)):
            if np.asarray(arr).shape != (n,):
                raise SchemaViolation(f"{name} must have {n} entries")

    def to_json(self) -> dict:
        return {"identity": [float(x) for x in self.identity],
                "texture": [float(x) for x in self.texture],
                "illumination": [float(x) for x in self.illumination]}

    @classmethod
    def from_json(cls, d: dict) -> "ReferenceFaceParams":
        try:
            return cls(np.array(d["identity"], float), np.array(d["texture"], float),
                       np.array(d["illumination"], float))
        except KeyError as exc:
            raise SchemaViolation(f"sidecar missing key {exc.args[0]!r}") from exc


@dataclass
class SequenceRecord:
    id: str
    subject: int
    expr_gt: np.ndarray  # (N, 64) float32
    pose_gt: np.ndarray  # (N, 6) float32
    eye_raw: np.ndarray  # (N,) float32, AU45r
    reference: ReferenceFaceParams
    voice_wav: Path | None = None
    music_wav: Path | None = None
    mix_wav: Path | None = None
    voice: SampledAudio | None = None  # in-memory stems for synthetic data
    music: SampledAudio | None = None
    fps: int = VIDEO_FPS
    drivers: "SynthDrivers | None" = None  # synthetic data only

    def __post_init__(self):
        n = len(self.expr_gt)
        if self.expr_gt.shape != (n, 64) or self.pose_gt.shape != (n, 6) or self.eye_raw.shape != (n,):
            raise LengthMismatch(
                f"{self.id}: track shapes {self.expr_gt.shape}, {self.pose_gt.shape}, {self.eye_raw.shape}"
            )
        if self.fps != VIDEO_FPS:
            raise SchemaViolation(f"{self.id}: fps must be {VIDEO_FPS}")

    def __len__(self):
        return len(self.expr_gt)

    def voice_audio(self) -> SampledAudio:
        return self.voice if self.voice is not None else load_wav(self.voice_wav)

    def music_audio(self) -> SampledAudio:
        return self.music if self.music is not None else load_wav(self.music_wav)

    def mix_audio(self) -> SampledAudio:
        if self.mix_wav is not None:
            return load_wav(self.mix_wav)
        v, m = self.voice_audio().samples, self.music_audio().samples
        n = min(len(v), len(m))
        return SampledAudio(np.clip(v[:n] + m[:n], -1.0, 1.0))


@dataclass
class EyeLabels:
    blink_mask: np.ndarray  # binary
    long_mask: np.ndarray  # normalised values inside long closures, 0 elsewhere
    normalized: np.ndarray
    blink_events: list = field(default_factory=list)  # (start, length) in frames
    long_events: list = field(default_factory=list)


def normalize_eye(raw) -> np.ndarray:
    """Per-sequence min-max normalisation to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ConstantTrack("empty eye track")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        raise ConstantTrack("eye track is constant; cannot min-max normalise")
    return (raw - lo) / (hi - lo)


def closure_runs(eye, close_threshold: float = CLOSE_THRESHOLD) -> list[tuple[int, int]]:
    """(start, length) of contiguous runs with eye >= threshold."""
    closed = np.asarray(eye) >= close_threshold
    edges = np.diff(np.concatenate([[0], closed.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e - s)) for s, e in zip(starts, ends)]


def split_eye_states(eye, close_threshold: float = CLOSE_THRESHOLD, tau: float = TAU_S, fps: int = VIDEO_FPS) -> EyeLabels:
    """Closures shorter than tau are blinks; closures of tau or longer are long closures."""
    eye = np.asarray(eye, dtype=np.float64)
    blink = np.zeros_like(eye)
    long = np.zeros_like(eye)
    blinks, longs = [], []
    min_long = tau * fps
    for start, length in closure_runs(eye, close_threshold):
        if length >= min_long - 1e-9:
            long[start:start + length] = eye[start:start + length]
            longs.append((start, length))
        else:
            blink[start:start + length] = 1.0
            blinks.append((start, length))
    return EyeLabels(blink, long, eye, blinks, longs)


def long_closure_target(eye_raw) -> np.ndarray:
    """Training target for the long-closure decoder: normalise, then keep only long closures."""
    return split_eye_states(normalize_eye(eye_raw)).long_mask


def split_dataset(records: list, seed: int = 0, test_fraction: float = 0.1):
    """Deterministic split by sequence; at least one test sequence when there are two or more."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_test = int(round(test_fraction * len(records)))
    if len(records) > 1:
        n_test = min(max(1, n_test), len(records) - 1)
    test_idx = set(order[:n_test].tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


# ----------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SynthConfig:
    n_sequences: int = 6
    duration_s: float = 60.0
    n_subjects: int = 2

    def __post_init__(self):
        if self.n_sequences < 1 or self.n_subjects < 1 or self.duration_s < 5.0:
            raise InvalidConfig("need n_sequences >= 1, n_subjects >= 1 and duration_s >= 5")


@dataclass
class SynthDrivers:
    """Per-frame signals the closed-form rule maps to parameter tracks."""

    voice_env: np.ndarray  # syllable loudness envelope in [0, 1]
    pitch: np.ndarray  # normalised pitch of the sung note, 0 when silent
    music_env: np.ndarray  # percussive energy envelope in [0, 1]
    climax: np.ndarray  # 1 inside bright-tone sections
    beat_frames: np.ndarray  # frame index of every beat


def _smooth_noise(rng, n, fps, lo_hz=0.05, hi_hz=0.25, k=3):
    t = np.arange(n) / fps
    out = np.zeros(n)
    for _ in range(k):
        out += np.sin(2 * np.pi * rng.uniform(lo_hz, hi_hz) * t + rng.uniform(0, 2 * np.pi))
    return out / k


def _frame_times(n_frames):
    return np.arange(n_frames) / VIDEO_FPS


def _synth_voice(rng, duration_s):
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    wave_out = np.zeros(n)
    notes = []  # (start, length, f0, amp)
    pos = rng.uniform(1.5, 3.0)  # music-only intro
    while pos < duration_s - 0.5:
        phrase_end = min(pos + rng.uniform(3.0, 6.0), duration_s - 0.2)
        while pos < phrase_end - 0.15:
            length = min(rng.uniform(0.18, 0.4), phrase_end - pos)
            notes.append((pos, length, rng.uniform(170.0, 330.0), rng.uniform(0.5, 1.0)))
            pos += length + rng.uniform(0.03, 0.1)
        pos = phrase_end + rng.uniform(1.5, 3.5)
    for start, length, f0, amp in notes:
        i0, i1 = int(start * SAMPLE_RATE), min(n, int((start + length) * SAMPLE_RATE))
        tt = t[i0:i1] - start
        env = np.sin(np.pi * tt / length)
        vib = 1.0 + 0.01 * np.sin(2 * np.pi * 5.5 * tt)
        phase = 2 * np.pi * f0 * np.cumsum(vib) / SAMPLE_RATE
        tone = sum(np.sin(k * phase) / k for k in range(1, 11) if k * f0 < 4000)
        wave_out[i0:i1] += 0.35 * amp * env * tone
    return wave_out, notes


def _synth_music(rng, duration_s):
    n = int(round(duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    bpm = rng.uniform(90.0, 130.0)
    period = 60.0 / bpm
    beats = np.arange(rng.uniform(0.0, period), duration_s, period)
    sections = rng.choice([0.35, 0.7, 1.0], size=len(beats) // 8 + 1)
    out = 0.04 * (np.sin(2 * np.pi * 110 * t) + np.sin(2 * np.pi * 165 * t) + 0.7 * np.sin(2 * np.pi * 220 * t))
    hits = []  # (time, strength)
    kick_len = int(0.25 * SAMPLE_RATE)
    kt = np.arange(kick_len) / SAMPLE_RATE
    kick = np.sin(2 * np.pi * (55 + 60 * np.exp(-kt / 0.03)) * kt) * np.exp(-kt / 0.08)
    hat_len = int(0.08 * SAMPLE_RATE)
    ht = np.arange(hat_len) / SAMPLE_RATE
    for i, b in enumerate(beats):
        strength = sections[i // 8] * (1.0 if i % 4 == 0 else 0.65)
        i0 = int(b * SAMPLE_RATE)
        seg = min(kick_len, n - i0)
        out[i0:i0 + seg] += 0.45 * strength * kick[:seg]
        hits.append((b, strength))
        hb = b + period / 2
        if hb < duration_s:
            h_strength = sections[i // 8] * rng.uniform(0.3, 0.7)
            j0 = int(hb * SAMPLE_RATE)
            seg = min(hat_len, n - j0)
            noise = np.diff(rng.standard_normal(hat_len + 1))
            out[j0:j0 + seg] += 0.08 * h_strength * noise[:seg] * np.exp(-ht[:seg] / 0.025)
            hits.append((hb, 0.5 * h_strength))
    climax = []
    n_climax = max(1, int(round(duration_s / 30.0)))
    slots = np.linspace(0.0, duration_s, n_climax + 1)
    for k in range(n_climax):
        length = rng.uniform(2.5, 4.0)
        start = rng.uniform(slots[k] + 1.0, max(slots[k] + 1.0, slots[k + 1] - length - 1.0))
        climax.append((start, length))
        i0, i1 = int(start * SAMPLE_RATE), min(n, int((start + length) * SAMPLE_RATE))
        tt = t[i0:i1] - start
        ramp = np.minimum(1.0, np.minimum(tt, length - tt) / 0.1)
        out[i0:i1] += 0.12 * ramp * (np.sin(2 * np.pi * 1760 * tt) + 0.5 * np.sin(2 * np.pi * 2640 * tt))
    return out, beats, hits, climax


def synth_drivers(notes, beats, hits, climax, n_frames) -> SynthDrivers:
    ft = _frame_times(n_frames)
    voice_env = np.zeros(n_frames)
    pitch = np.zeros(n_frames)
    for start, length, f0, amp in notes:
        inside = (ft >= start) & (ft < start + length)
        voice_env[inside] = amp * np.sin(np.pi * (ft[inside] - start) / length)
        pitch[inside] = (f0 - 170.0) / 160.0
    music_env = np.zeros(n_frames)
    for time, strength in hits:
        after = ft >= time
        music_env[after] += strength * np.exp(-(ft[after] - time) / 0.12)
    music_env /= max(music_env.max(), 1e-9)
    clim = np.zeros(n_frames)
    for start, length in climax:
        clim[(ft >= start) & (ft < start + length)] = 1.0
    beat_frames = np.unique(np.minimum(np.round(beats * VIDEO_FPS).astype(int), n_frames - 1))
    return SynthDrivers(voice_env, pitch, music_env, clim, beat_frames)


@dataclass(frozen=True)
class SubjectStyle:
    expr_gain: float
    speed_gain: float
    expr_bias: np.ndarray
    mean_pose: np.ndarray


def subject_styles(n_subjects: int, seed: int) -> list[SubjectStyle]:
    rng = np.random.default_rng([seed, 7919])
    styles = []
    for s in range(n_subjects):
        styles.append(SubjectStyle(
            expr_gain=1.0 + 0.4 * s,
            speed_gain=1.0 - 0.5 * s / max(1, n_subjects),
            expr_bias=0.3 * rng.standard_normal(64),
            mean_pose=np.concatenate([0.1 * rng.standard_normal(3), 5.0 * rng.standard_normal(3)]),
        ))
    return styles


# pose units: Euler angles in radians, translations in model units (about mm)
SPEED_SCALE = np.array([0.006, 0.008, 0.004, 0.2, 0.2, 0.15])  # per frame
POSE_LIMIT = np.array([0.35, 0.5, 0.25, 12.0, 12.0, 8.0])


def expression_rule(drivers: SynthDrivers, style: SubjectStyle, basis: np.ndarray) -> np.ndarray:
    """expr = bias + gain * (A v + B v p) with v the voice envelope and p the pitch."""
    v, p = drivers.voice_env, drivers.pitch
    core = np.outer(v, basis[0]) + np.outer(v * p, basis[1])
    return (style.expr_bias[None, :] + style.expr_gain * core).astype(np.float32)


def pose_rule(drivers: SynthDrivers, style: SubjectStyle, rng) -> np.ndarray:
    """Speed follows the music envelope; direction flips at beats at random and reflects at limits."""
    n = len(drivers.music_env)
    slow = np.stack([_smooth_noise(rng, n, VIDEO_FPS) for _ in range(6)], axis=1)
    speed = style.speed_gain * SPEED_SCALE[None, :] * (0.15 + drivers.music_env[:, None]) * (1.0 + 0.25 * slow)
    is_beat = np.zeros(n, dtype=bool)
    is_beat[drivers.beat_frames] = True
    flips = rng.random((n, 6)) < 0.35
    d = np.where(rng.random(6) < 0.5, -1.0, 1.0)
    centre = style.mean_pose
    poses = np.empty((n, 6), dtype=np.float32)
    p = (centre + np.array([0.02, 0.02, 0.02, 2.0, 2.0, 2.0]) * rng.standard_normal(6)).astype(np.float32).astype(np.float64)
    poses[0] = p
    for t in range(1, n):
        if is_beat[t]:
            d = np.where(flips[t], -d, d)
        off = p - centre
        d = np.where(off > POSE_LIMIT, -1.0, np.where(off < -POSE_LIMIT, 1.0, d))
        p = (p + speed[t] * d).astype(np.float32).astype(np.float64)
        poses[t] = p
    return poses


def eye_rule(drivers: SynthDrivers, duration_s: float, rng) -> np.ndarray:
    """Raw AU45r-like signal: low noisy baseline, random blinks, long closures during climaxes."""
    n = len(drivers.climax)
    raw = 0.1 + 0.05 * _smooth_noise(rng, n, VIDEO_FPS, 0.5, 2.0)
    blinks = sample_blinks(duration_s, VIDEO_FPS, BlinkParams(), seed=rng.integers(2**31))
    amp = rng.uniform(1.8, 2.6, size=len(blinks.starts))
    times = _frame_times(n)
    for s, dur, a in zip(blinks.starts, blinks.durations, amp):
        inside = (times >= s) & (times < s + dur)
        raw[inside] = np.maximum(raw[inside], a)
    level = rng.uniform(2.4, 2.8)
    raw = np.where(drivers.climax > 0, np.maximum(raw, level + 0.05 * _smooth_noise(rng, n, VIDEO_FPS, 1.0, 3.0)), raw)
    return raw.astype(np.float32)


def synth_dataset(config: SynthConfig = SynthConfig(), seed: int = 0) -> list[SequenceRecord]:
    """Deterministic toy dataset whose tracks are closed-form functions of the stems.

    Expression is driven by the voice envelope and pitch only, pose speed by
    the music's percussive envelope, long eye closures by a bright tone in the
    music. Subjects differ in expression gain, speed gain, bias and mean pose.
    """
    styles = subject_styles(config.n_subjects, seed)
    basis_rng = np.random.default_rng([seed, 104729])
    basis = 0.5 * basis_rng.standard_normal((2, 64))
    records = []
    children = np.random.SeedSequence(seed).spawn(config.n_sequences)
    n_frames = int(np.floor(config.duration_s * VIDEO_FPS + 1e-9))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        subject = i % config.n_subjects
        style = styles[subject]
        voice, notes = _synth_voice(rng, config.duration_s)
        music, beats, hits, climax = _synth_music(rng, config.duration_s)
        drivers = synth_drivers(notes, beats, hits, climax, n_frames)
        ref_rng = np.random.default_rng([seed, 31, subject])
        reference = ReferenceFaceParams(0.1 * ref_rng.standard_normal(80), 0.1 * ref_rng.standard_normal(80),
                                        0.1 * ref_rng.standard_normal(27))
        rec = SequenceRecord(
            id=f"seq{i:03d}",
            subject=subject,
            expr_gt=expression_rule(drivers, style, basis),
            pose_gt=pose_rule(drivers, style, rng),
            eye_raw=eye_rule(drivers, config.duration_s, rng),
            reference=reference,
            voice=SampledAudio(np.clip(voice, -1, 1)),
            music=SampledAudio(np.clip(music, -1, 1)),
            drivers=drivers,
        )
        records.append(rec)
    return records


# ----------------------------------------------------------------------------
# files


def write_tracks_csv(path, expr, pose, eye_raw) -> None:
    rows = ([str(k)] + [float(x) for x in expr[k]] + [float(x) for x in pose[k]] + [float(eye_raw[k])]
            for k in range(len(expr)))
    write_csv(path, TRACK_HEADER, rows)


def read_tracks_csv(path):
    """Returns (expr, pose, eye_raw); trailing rows with empty cells shorten that modality."""
    header, rows = read_csv(path)
    missing = [c for c in TRACK_HEADER if c not in header]
    if missing:
        raise SchemaViolation(f"{path}: missing columns {missing}")
    col = {c: i for i, c in enumerate(header)}

    def block(cols):
        vals = []
        for r in rows:
            cells = [r[col[c]] if col[c] < len(r) else "" for c in cols]
            if any(c.strip() == "" for c in cells):
                break
            vals.append([float(c) for c in cells])
        return np.array(vals, dtype=np.float32).reshape(len(vals), len(cols))

    return block(EXPR_COLS), block(POSE_COLS), block(["au45r"])[:, 0]


def write_dataset(records: list[SequenceRecord], out_dir, write_mix: bool = True) -> Path:
    """Write stems, tracks, sidecars and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    n_subjects = max(r.subject for r in records) + 1
    for rec in records:
        d = out / rec.id
        d.mkdir(parents=True, exist_ok=True)
        write_wav(d / "voice.wav", rec.voice_audio())
        write_wav(d / "music.wav", rec.music_audio())
        entry = {"id": rec.id, "subject": rec.subject, "voice_wav": f"{rec.id}/voice.wav",
                 "music_wav": f"{rec.id}/music.wav", "tracks_csv": f"{rec.id}/tracks.csv",
                 "sidecar": f"{rec.id}/sidecar.json"}
        if write_mix:
            write_wav(d / "mix.wav", rec.mix_audio())
            entry["mix_wav"] = f"{rec.id}/mix.wav"
        write_tracks_csv(d / "tracks.csv", rec.expr_gt, rec.pose_gt, rec.eye_raw)
        sidecar = {"subject": rec.subject, "fps": rec.fps, **rec.reference.to_json()}
        atomic_write_text(d / "sidecar.json", json.dumps(sidecar))
        entries.append(entry)
    manifest = {"version": 1, "fps": VIDEO_FPS, "n_subjects": n_subjects, "sequences": entries}
    path = out / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=2))
    return path


_REQUIRED_ENTRY = ("id", "subject", "voice_wav", "music_wav", "tracks_csv", "sidecar")


def _wav_frames(path) -> int:
    from scipy.io import wavfile

    rate, data = wavfile.read(path, mmap=True)
    return (VIDEO_FPS * len(data)) // rate


def load_dataset(manifest) -> list[SequenceRecord]:
    """Parse and validate a manifest; tracks within 2 frames of each other are trimmed."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise MissingFile(f"manifest not found: {manifest}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{manifest}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("sequences"), list):
        raise SchemaViolation(f"{manifest}: expected an object with a 'sequences' list")
    if doc.get("fps", VIDEO_FPS) != VIDEO_FPS:
        raise SchemaViolation(f"{manifest}: fps must be {VIDEO_FPS}")
    root = manifest.parent
    records = []
    for i, entry in enumerate(doc["sequences"]):
        for key in _REQUIRED_ENTRY:
            if key not in entry:
                raise SchemaViolation(f"{manifest}: sequence {i} missing key {key!r}")
        paths = {}
        for key in ("voice_wav", "music_wav", "tracks_csv", "sidecar", "mix_wav"):
            if key in entry:
                p = root / entry[key]
                if not p.is_file():
                    raise MissingFile(f"missing file: {p}")
                paths[key] = p
        expr, pose, eye = read_tracks_csv(paths["tracks_csv"])
        sidecar = json.loads(paths["sidecar"].read_text())
        lengths = {"expr": len(expr), "pose": len(pose), "eye": len(eye),
                   "voice": _wav_frames(paths["voice_wav"]), "music": _wav_frames(paths["music_wav"])}
        n = min(lengths.values())
        if max(lengths.values()) - n > TRIM_TOLERANCE:
            raise LengthMismatch(f"{entry['id']}: lengths differ beyond {TRIM_TOLERANCE} frames: {lengths}")
        if max(lengths.values()) != n:
            log.warning("%s: trimming to %d frames (lengths %s)", entry["id"], n, lengths)
        records.append(SequenceRecord(
            id=str(entry["id"]), subject=int(entry["subject"]),
            expr_gt=expr[:n], pose_gt=pose[:n], eye_raw=eye[:n],
            reference=ReferenceFaceParams.from_json(sidecar),
            voice_wav=paths["voice_wav"], music_wav=paths["music_wav"], mix_wav=paths.get("mix_wav"),
        ))
    return records
