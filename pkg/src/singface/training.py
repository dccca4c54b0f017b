"""Clip sampling, the alternating discriminator/generator loop, and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .audio import features_from_audio
from .containers import atomic_write_bytes
from .dataset import SequenceRecord, long_closure_target
from .errors import (
    CheckpointIncompatible,
    InvalidConfig,
    NonFiniteLoss,
    SequenceTooShort,
    UnreadableFile,
)
from .losses import Discriminator, LossReport, LossWeights, discriminator_input, lsgan_losses, regression_loss
from .decoders import EXPR_DIM
from .model import ModelConfig, SingingFaceGenerator
from .nn import adam_update, clip_grad_norm, lr_at, make_adam

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "singface-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-4
    batch_size: int = 64
    window: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    teacher_forcing: bool = True
    subject_at_atm: bool = False
    width: float = 1.0
    d_steps: int = 1
    grad_clip: float = 5.0
    max_steps: int | None = None  # stop early after this many generator updates
    input_mode: str = "two_stream"  # or "single_stream": both encoders see the mixed stem
    pose_unit_frames: float = 4.0  # pose-net unit: typical per-channel travel over this many frames

    def __post_init__(self):
        for name in ("epochs", "batch_size", "window", "d_steps"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be a positive integer")
        if self.pose_unit_frames <= 0:
            raise InvalidConfig("pose_unit_frames must be > 0")
        if self.base_lr < 0:
            raise InvalidConfig("base_lr must be >= 0")
        if self.input_mode not in ("two_stream", "single_stream"):
            raise InvalidConfig(f"input_mode must be two_stream or single_stream, got {self.input_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise InvalidConfig(f"unknown config key {key!r}")
        d = dict(d)
        if "weights" in d:
            wd = d["weights"]
            wknown = {f.name for f in fields(LossWeights)}
            for key in wd:
                if key not in wknown:
                    raise InvalidConfig(f"unknown weight key {key!r}")
            try:
                d["weights"] = LossWeights(**wd)
            except (TypeError, ValueError) as exc:
                raise InvalidConfig(f"bad loss weights: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class PreparedSequence:
    """Features and targets of one sequence, frame-aligned."""

    id: str
    subject: int
    voice: np.ndarray  # (N, 39, 26) float32
    music: np.ndarray
    expr: np.ndarray  # (N, 64)
    pose: np.ndarray  # (N, 6)
    eye_long: np.ndarray  # (N,)

    def __len__(self):
        return len(self.expr)


def prepare_sequence(record: SequenceRecord, input_mode: str = "two_stream") -> PreparedSequence:
    if input_mode == "single_stream":
        mix = features_from_audio(record.mix_audio())
        voice = music = mix
    else:
        voice = features_from_audio(record.voice_audio())
        music = features_from_audio(record.music_audio())
    n = min(len(record), len(voice), len(music))
    return PreparedSequence(
        record.id, record.subject, voice.windows[:n], music.windows[:n],
        record.expr_gt[:n].astype(np.float32), record.pose_gt[:n].astype(np.float32),
        long_closure_target(record.eye_raw)[:n].astype(np.float32),
    )


@dataclass
class TrainingClip:
    seq_index: int
    start: int
    voice: np.ndarray
    music: np.ndarray
    expr: np.ndarray
    pose: np.ndarray
    eye_long: np.ndarray
    subject: int

    def __post_init__(self):
        n = len(self.expr)
        if not (len(self.voice) == len(self.music) == len(self.pose) == len(self.eye_long) == n):
            raise ValueError("clip tracks are not aligned")

    @property
    def p0(self) -> np.ndarray:
        return self.pose[0]


def make_clips(seqs: list[PreparedSequence], window: int = 128, rng=None, n_clips: int | None = None,
               stride: int = 1) -> list[TrainingClip]:
    """Uniformly random windows; starts are multiples of ``stride``.

    Sequences are drawn with probability proportional to their number of valid
    starts. ``n_clips`` defaults to total frames // window.
    """
    rng = np.random.default_rng(rng)
    for s in seqs:
        if len(s) < window:
            raise SequenceTooShort(f"{s.id}: {len(s)} frames < window {window}")
    n_starts = np.array([(len(s) - window) // stride + 1 for s in seqs])
    if n_clips is None:
        n_clips = max(1, sum(len(s) for s in seqs) // window)
    probs = n_starts / n_starts.sum()
    clips = []
    for _ in range(n_clips):
        i = int(rng.choice(len(seqs), p=probs))
        start = int(rng.integers(n_starts[i])) * stride
        s = seqs[i]
        sl = slice(start, start + window)
        clips.append(TrainingClip(i, start, s.voice[sl], s.music[sl], s.expr[sl], s.pose[sl], s.eye_long[sl], s.subject))
    return clips


def collate(clips: list[TrainingClip]) -> dict:
    stack = lambda name: torch.from_numpy(np.stack([getattr(c, name) for c in clips]).astype(np.float32))
    return {
        "voice": stack("voice"),
        "music": stack("music"),
        "expr": stack("expr"),
        "pose": stack("pose"),
        "eye_long": stack("eye_long"),
        "subject": torch.tensor([c.subject for c in clips]),
        "p0": torch.from_numpy(np.stack([c.p0 for c in clips]).astype(np.float32)),
    }


def feature_stats(seqs: list[PreparedSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of the 100 Hz MFCC frames (centre rows)."""
    rows = np.concatenate([np.concatenate([s.voice[:, 19], s.music[:, 19]]) for s in seqs])
    return rows.mean(0), rows.std(0)


def subject_mean_poses(seqs: list[PreparedSequence], n_subjects: int) -> np.ndarray:
    out = np.zeros((n_subjects, 6), dtype=np.float32)
    for s in range(n_subjects):
        poses = [q.pose for q in seqs if q.subject == s]
        if poses:
            out[s] = np.concatenate(poses).mean(0)
    return out


def subject_mean_exprs(seqs: list[PreparedSequence], n_subjects: int) -> np.ndarray:
    out = np.zeros((n_subjects, EXPR_DIM), dtype=np.float32)
    for s in range(n_subjects):
        exprs = [q.expr for q in seqs if q.subject == s]
        if exprs:
            out[s] = np.concatenate(exprs).mean(0)
    return out


def fit_data_stats(generator, seqs: list[PreparedSequence], pose_unit_frames: float = 4.0) -> None:
    """Fill the generator's normalisation buffers from training sequences."""
    n_subjects = generator.config.n_subjects
    generator.set_feature_stats(*feature_stats(seqs))
    mean_poses = subject_mean_poses(seqs, n_subjects)
    generator.mean_pose.copy_(torch.from_numpy(mean_poses))
    generator.mean_expr.copy_(torch.from_numpy(subject_mean_exprs(seqs, n_subjects)))
    step, spread = pose_frame_stats(seqs, mean_poses)
    generator.set_pose_frame(step * pose_unit_frames, spread)


def pose_frame_stats(seqs: list[PreparedSequence], mean_poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean |dp| per frame, and std of the pose about each subject's mean."""
    steps = np.concatenate([np.abs(np.diff(s.pose.astype(np.float64), axis=0)) for s in seqs])
    dev = np.concatenate([s.pose.astype(np.float64) - mean_poses[s.subject] for s in seqs])
    return steps.mean(0).astype(np.float32), np.sqrt((dev ** 2).mean(0)).astype(np.float32)


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    def __init__(self, config: TrainConfig, n_subjects: int):
        self.config = config
        torch.manual_seed(config.seed)
        self.model_config = ModelConfig(n_subjects, config.width, config.subject_at_atm)
        self.generator = SingingFaceGenerator(self.model_config)
        self.disc = Discriminator()
        self.opt_g = make_adam(self.generator.parameters(), config.base_lr)
        self.opt_d = make_adam(self.disc.parameters(), config.base_lr)
        self.epoch = 0
        self.step = 0

    def forward(self, batch: dict) -> dict:
        pose_gt = batch["pose"] if self.config.teacher_forcing else None
        return self.generator(batch["voice"], batch["music"], batch["subject"], batch["p0"], pose_gt=pose_gt)

    def disc_inputs(self, batch, pred):
        v = self.generator.center_rows(batch["voice"])
        m = self.generator.center_rows(batch["music"])
        # the discriminator sees poses in units of their spread
        gain = self.generator.pgn.pos_gain
        real = discriminator_input(batch["pose_q"] * gain, batch["eye_long"], v, m)
        fake = discriminator_input(pred["pose_q"] * gain, pred["eye_long_raw"], v, m)
        return real, fake

    def train_step(self, batch: dict, lr: float) -> LossReport:
        """One discriminator update on detached fakes, then one generator update."""
        w = self.config.weights
        self.generator.train()
        self.disc.train()
        pred = self.forward(batch)
        batch = {**batch, "pose_q": self.generator.to_pose_frame(batch["pose"], batch["subject"])}
        real, fake = self.disc_inputs(batch, pred)

        for _ in range(self.config.d_steps):
            l_d, _ = lsgan_losses(self.disc(real), self.disc(fake.detach()))
            self._check("l_adv_d", l_d)
            self.opt_d.zero_grad(set_to_none=True)
            l_d.backward()
            clip_grad_norm(self.disc.parameters(), self.config.grad_clip)
            adam_update(self.opt_d, lr)

        # pose terms are taken in the normalised pose frame so every channel counts alike
        gt = {"expr": batch["expr"], "pose": batch["pose_q"], "eye_long": batch["eye_long"]}
        fit = {"expr": pred["expr"], "pose": pred["pose_q"], "vel": pred["vel_q"], "eye_long": pred["eye_long_raw"]}
        l_reg, parts = regression_loss(gt, fit,
                                       [pred["att"][t] for t in ("exp", "pose", "eye")], w)
        _, l_g = lsgan_losses(torch.zeros(()), self.disc(fake))
        total = w.lambda1 * l_reg + w.lambda2 * l_g
        self._check("total", total)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.disc.zero_grad(set_to_none=True)
        clip_grad_norm(self.generator.parameters(), self.config.grad_clip)
        adam_update(self.opt_g, lr)
        self.step += 1

        val = lambda t: float(t.detach())
        report = LossReport(
            l_exp=val(parts["l_exp"]), l_pose=val(parts["l_pose"]), l_eye=val(parts["l_eye"]),
            l_att=val(parts["l_att"]), l_reg=val(l_reg), l_adv_g=val(l_g), l_adv_d=val(l_d),
        )
        report.total = w.lambda1 * report.l_reg + w.lambda2 * report.l_adv_g
        return report

    def batch_losses(self, batch: dict) -> dict:
        """Regression terms of the current generator on ``batch``, as in a training step but without updating.

        Runs a copy in train mode so batch-norm statistics of the real model are untouched.
        """
        gen = copy.deepcopy(self.generator).train()
        with torch.no_grad():
            pose_gt = batch["pose"] if self.config.teacher_forcing else None
            pred = gen(batch["voice"], batch["music"], batch["subject"], batch["p0"], pose_gt=pose_gt)
            gt = {"expr": batch["expr"], "pose": gen.to_pose_frame(batch["pose"], batch["subject"]),
                  "eye_long": batch["eye_long"]}
            fit = {"expr": pred["expr"], "pose": pred["pose_q"], "vel": pred["vel_q"], "eye_long": pred["eye_long_raw"]}
            l_reg, parts = regression_loss(gt, fit, [pred["att"][t] for t in ("exp", "pose", "eye")],
                                           self.config.weights)
        return {"l_reg": float(l_reg), **{k: float(v) for k, v in parts.items()}}

    @staticmethod
    def _check(name, value):
        if not torch.isfinite(value):
            raise NonFiniteLoss(f"{name} is {float(value.detach())}; aborting")

    # -- checkpoints --------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "config_hash": self.model_config.hash(),
            "train_config": _config_json(self.config),
            "generator": self.generator.state_dict(),
            "discriminator": self.disc.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
        }

    def save(self, path) -> Path:
        buf = io.BytesIO()
        torch.save(self.state(), buf)
        atomic_write_bytes(path, buf.getvalue())
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig | None = None) -> "Trainer":
        state = read_checkpoint(path)
        cfg = config or TrainConfig.from_dict(state["train_config"])
        trainer = cls(cfg, state["model_config"]["n_subjects"])
        if trainer.model_config.hash() != state["config_hash"]:
            raise CheckpointIncompatible("training config does not match the checkpoint's model config")
        trainer.generator.load_state_dict(state["generator"])
        trainer.disc.load_state_dict(state["discriminator"])
        trainer.opt_g.load_state_dict(state["opt_g"])
        trainer.opt_d.load_state_dict(state["opt_d"])
        trainer.epoch = state["epoch"]
        trainer.step = state["step"]
        return trainer


def _config_json(config: TrainConfig) -> dict:
    return json.loads(json.dumps(config.to_dict()))


def read_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise UnreadableFile(f"no such checkpoint: {path}") from exc
    except Exception as exc:
        raise CheckpointIncompatible(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointIncompatible(f"{path}: not a checkpoint file")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointIncompatible(f"{path}: checkpoint version {state.get('version')} unsupported")
    return state


def load_generator(path) -> SingingFaceGenerator:
    """Generator in eval mode, after verifying the stored config hash."""
    state = read_checkpoint(path)
    mc = ModelConfig(**state["model_config"])
    if mc.hash() != state["config_hash"]:
        raise CheckpointIncompatible(f"{path}: config hash mismatch")
    gen = SingingFaceGenerator(mc)
    try:
        gen.load_state_dict(state["generator"])
    except RuntimeError as exc:
        raise CheckpointIncompatible(f"{path}: {exc}") from exc
    gen.eval()
    return gen


def epoch_batches(config: TrainConfig, seqs: list[PreparedSequence], epoch: int):
    """The batches of one epoch, in order; fixed by the seed and the epoch index."""
    clips = make_clips(seqs, config.window, np.random.default_rng([config.seed, epoch]))
    for b in range(0, len(clips), config.batch_size):
        yield collate(clips[b:b + config.batch_size])


def train(config: TrainConfig, records: list[SequenceRecord] | list[PreparedSequence], out_dir=None,
          resume_from=None, n_subjects: int | None = None) -> Trainer:
    """Run the schedule; a checkpoint is written per epoch plus ``final.pt``.

    The clip order of epoch k depends only on (seed, k), so resuming from an
    epoch checkpoint reproduces the uninterrupted run.
    """
    if not records:
        raise InvalidConfig("dataset is empty")
    seqs = [r if isinstance(r, PreparedSequence) else prepare_sequence(r, config.input_mode) for r in records]
    n_subjects = n_subjects or max(s.subject for s in seqs) + 1
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, config)
    else:
        trainer = Trainer(config, n_subjects)
        fit_data_stats(trainer.generator, seqs, config.pose_unit_frames)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume_from is None and log_path.exists():
            log_path.unlink()
    trainer.checkpoints = []
    trainer.history = []
    while trainer.epoch < config.epochs:
        if config.max_steps is not None and trainer.step >= config.max_steps:
            break
        epoch = trainer.epoch
        lr = lr_at(epoch, config.epochs, config.base_lr)
        lines = []
        for batch in epoch_batches(config, seqs, epoch):
            if config.max_steps is not None and trainer.step >= config.max_steps:
                break
            report = trainer.train_step(batch, lr)
            row = {"epoch": epoch, "step": trainer.step, "lr": lr, **report.as_dict()}
            trainer.history.append(row)
            lines.append(json.dumps(row))
            trainer.last_report = report
        trainer.epoch += 1
        if out is not None:
            with open(log_path, "a") as fh:
                fh.write("".join(l + "\n" for l in lines))
            trainer.checkpoints.append(trainer.save(out / f"epoch_{epoch:03d}.pt"))
    if out is not None:
        trainer.checkpoints.append(trainer.save(out / "final.pt"))
    return trainer
