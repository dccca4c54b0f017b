"""Desk-scale experiment on the synthetic oracle dataset.

One call trains a small generator for a fixed number of steps and scores it on
held-out sequences with the same metrics used for real data. Used by the
acceptance tests and handy for quick sanity runs.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import SequenceRecord, SynthConfig, normalize_eye, split_dataset, synth_dataset
from .evaluation import MetricReport, aggregate, evaluate
from .pipeline import SILENCE_RMS, GenerationResult, frame_rms, generate_from_features
from .training import TrainConfig, Trainer, epoch_batches, prepare_sequence, state_hash, train

TOY_DATA = SynthConfig(n_sequences=6, duration_s=60.0, n_subjects=2)
TOY_DATA_SEED = 0
TOY_SPLIT_SEED = 0


def toy_config(seed: int = 0, input_mode: str = "two_stream", max_steps: int = 200) -> TrainConfig:
    """Quarter-width model, batch 4, lr 2e-3; 200 steps span a bit over 11 of the 12 scheduled epochs."""
    return TrainConfig(epochs=12, base_lr=2e-3, batch_size=4, width=0.25, seed=seed,
                       max_steps=max_steps, input_mode=input_mode)


@dataclass
class ToyRun:
    config: TrainConfig
    trainer: Trainer
    log: list[dict]
    reports: dict[str, MetricReport]
    results: dict[str, GenerationResult]
    silent_masks: dict[str, np.ndarray]
    seconds: float
    checkpoint_hash: str = ""
    final_first_batch: dict = field(default_factory=dict)
    mean: MetricReport = field(init=False)

    def __post_init__(self):
        self.mean = aggregate(list(self.reports.values()))

    @property
    def l_exp_ratio(self) -> float:
        """Final over initial expression loss, both on the first training batch."""
        return self.final_first_batch["l_exp"] / self.log[0]["l_exp"]

    def pose_attention_when_silent(self) -> tuple[float, float]:
        """Mean pose-task gate on voice channels and on music channels over voice-silent frames."""
        voice, music = [], []
        for sid, res in self.results.items():
            a = res.attention["pose"][self.silent_masks[sid]]
            half = a.shape[1] // 2
            voice.append(a[:, :half].ravel())
            music.append(a[:, half:].ravel())
        return float(np.concatenate(voice).mean()), float(np.concatenate(music).mean())


def toy_records(data: SynthConfig = TOY_DATA, seed: int = TOY_DATA_SEED):
    records = synth_dataset(data, seed)
    return split_dataset(records, TOY_SPLIT_SEED)


def held_out_results(trainer: Trainer, records: list[SequenceRecord], input_mode: str, seed: int = 0):
    """Free-running generation from each record's first ground-truth pose, scored against its tracks."""
    reports, results, silent = {}, {}, {}
    for rec in records:
        seq = prepare_sequence(rec, input_mode)
        rms = frame_rms(rec.voice_audio(), len(seq))
        res = generate_from_features(trainer.generator, seq.voice, seq.music, rec.subject,
                                     p0=seq.pose[0], seed=seed, voice_rms=rms)
        gt = {"pose": rec.pose_gt[:len(seq)], "eye": normalize_eye(rec.eye_raw)[:len(seq)]}
        reports[rec.id] = evaluate({"pose": res.pose, "eye": res.eye}, gt)
        results[rec.id] = res
        silent[rec.id] = rms < SILENCE_RMS
    return reports, results, silent


def run_toy(seed: int = 0, input_mode: str = "two_stream", out_dir=None, split=None,
            max_steps: int = 200) -> ToyRun:
    t0 = time.perf_counter()
    train_recs, test_recs = split if split is not None else toy_records()
    config = toy_config(seed, input_mode, max_steps)
    seqs = [prepare_sequence(r, input_mode) for r in train_recs]
    n_subjects = max(r.subject for r in train_recs + test_recs) + 1
    trainer = train(config, seqs, out_dir, n_subjects=n_subjects)
    if out_dir is not None:
        log = [json.loads(l) for l in (Path(out_dir) / "train_log.jsonl").read_text().splitlines() if l]
    else:
        log = trainer.history
    reports, results, silent = held_out_results(trainer, test_recs, input_mode)
    run = ToyRun(config, trainer, log, reports, results, silent, time.perf_counter() - t0)
    run.checkpoint_hash = state_hash(trainer.generator)
    run.final_first_batch = trainer.batch_losses(next(epoch_batches(config, seqs, 0)))
    return run
