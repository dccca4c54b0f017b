"""``singface`` command line: train, generate, eval, inspect-attention, synth-data.

Exit status is 0 on success, 1 for user errors (bad input, config or files)
and 2 for internal errors; failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .containers import atomic_write_text
from .errors import InternalError, InvalidConfig, MissingTrack, SingFaceError, UserError

log = logging.getLogger("singface")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class _ArgError(UserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    return vals


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    from .dataset import load_dataset, split_dataset
    from .plotting import training_curves
    from .training import TrainConfig, train

    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise InvalidConfig(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(cfg, dict):
            raise InvalidConfig(f"{args.config}: expected a JSON object")
    overrides = {"epochs": args.epochs, "seed": args.seed, "base_lr": args.lr, "batch_size": args.batch_size,
                 "width": args.width, "max_steps": args.max_steps, "input_mode": args.input_mode}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    config = TrainConfig.from_dict(cfg)

    records = load_dataset(args.data)
    n_subjects = max(r.subject for r in records) + 1
    out = Path(args.out)
    if args.no_split:
        train_recs, test_recs = records, []
    else:
        train_recs, test_recs = split_dataset(records, args.split_seed)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "split.json", json.dumps(
        {"train": [r.id for r in train_recs], "test": [r.id for r in test_recs]}, indent=2) + "\n")
    atomic_write_text(out / "config.json", json.dumps(config.to_dict(), indent=2) + "\n")
    trainer = train(config, train_recs, out, resume_from=args.resume, n_subjects=n_subjects)
    log_lines = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines() if l.strip()]
    if log_lines and not args.no_plots:
        training_curves(log_lines, out / "training_curves.png")
    print(json.dumps({"status": "ok", "epochs": trainer.epoch, "steps": trainer.step,
                      "checkpoints": [str(p) for p in trainer.checkpoints]}))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .dataset import load_dataset
    from .pipeline import generate, generate_record, inspect_attention, save_result
    from .training import load_generator

    out = Path(args.out)
    p0 = None if args.p0 is None else np.asarray(args.p0, dtype=np.float32)
    if p0 is not None and p0.shape != (6,):
        raise InvalidConfig("--p0 needs 6 comma-separated values")
    if args.manifest:
        generator = load_generator(args.checkpoint)
        records = load_dataset(args.manifest)
        if args.ids:
            wanted = set(args.ids.split(","))
            records = [r for r in records if r.id in wanted]
        done = []
        for rec in records:
            res = generate_record(generator, rec, seed=args.seed)
            save_result(res, out / rec.id)
            done.append(rec.id)
        print(json.dumps({"status": "ok", "sequences": done, "out": str(out)}))
        return EXIT_OK
    if not (args.voice and args.music):
        raise _ArgError("generate needs --voice and --music, or --manifest")
    result = generate(args.voice, args.music, args.checkpoint, args.subject, p0, args.seed)
    save_result(result, out)
    if not args.no_plots:
        inspect_attention(out, plots=True)
    print(json.dumps({"status": "ok", "n_frames": len(result), "out": str(out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_dataset, normalize_eye
    from .evaluation import evaluate, write_reports
    from .pipeline import load_tracks
    from .plotting import metrics_figure

    records = load_dataset(args.manifest)
    pred_dir = Path(args.pred)
    if args.ids:
        wanted = set(args.ids.split(","))
        records = [r for r in records if r.id in wanted]
    elif not args.all:
        records = [r for r in records if (pred_dir / r.id).is_dir()]
    if not records:
        raise MissingTrack(f"no predicted sequences under {pred_dir}")
    per_seq = {}
    for rec in records:
        pred = load_tracks(pred_dir / rec.id / "tracks.csv")
        n = len(rec)
        if len(pred["pose"]) != n:
            raise MissingTrack(f"{rec.id}: predicted {len(pred['pose'])} frames, ground truth {n}")
        gt = {"pose": rec.pose_gt, "eye": normalize_eye(rec.eye_raw)}
        per_seq[rec.id] = evaluate(pred, gt)
    out = Path(args.out) if args.out else pred_dir
    doc = write_reports(per_seq, out)
    if not args.no_plots:
        metrics_figure(per_seq, out / "metrics.png")
    print(json.dumps({"status": "ok", "mean": doc["mean"], "out": str(out)}))
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    from .pipeline import inspect_attention

    doc = inspect_attention(args.result, args.out, plots=not args.no_plots)
    print(json.dumps({"status": "ok", **doc}))
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .dataset import SynthConfig, synth_dataset, write_dataset

    cfg = SynthConfig(args.n_sequences, args.duration, args.n_subjects)
    records = synth_dataset(cfg, args.seed)
    manifest = write_dataset(records, args.out, write_mix=True)
    print(json.dumps({"status": "ok", "manifest": str(manifest), "sequences": [r.id for r in records]}))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="singface", description="Music-driven singing-face parameter generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a generator on a dataset manifest")
    t.add_argument("--data", required=True, help="dataset manifest.json")
    t.add_argument("--out", required=True, help="directory for checkpoints and logs")
    t.add_argument("--config", help="JSON file with training config keys")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float, help="base learning rate")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--width", type=float, help="encoder width multiplier (1.0 = full size)")
    t.add_argument("--max-steps", type=int, help="stop after this many generator updates")
    t.add_argument("--input-mode", choices=["two_stream", "single_stream"])
    t.add_argument("--resume", help="continue from an epoch checkpoint")
    t.add_argument("--split-seed", type=int, default=0, help="seed of the 90/10 sequence split")
    t.add_argument("--no-split", action="store_true", help="train on every sequence")
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="generate tracks from voice and music stems")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--voice", help="voice stem WAV")
    g.add_argument("--music", help="music stem WAV")
    g.add_argument("--manifest", help="generate every sequence of a dataset manifest instead")
    g.add_argument("--ids", help="comma-separated sequence ids (with --manifest)")
    g.add_argument("--subject", type=int, default=0)
    g.add_argument("--p0", type=_float_list, help="starting pose rx,ry,rz,tx,ty,tz")
    g.add_argument("--seed", type=int, default=0, help="seed of the blink sampler")
    g.add_argument("--out", required=True)
    g.add_argument("--no-plots", action="store_true")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score generated tracks against ground truth")
    e.add_argument("--pred", required=True, help="directory with one result folder per sequence id")
    e.add_argument("--manifest", required=True, help="ground-truth dataset manifest")
    e.add_argument("--ids", help="comma-separated sequence ids to score")
    e.add_argument("--all", action="store_true", help="require a prediction for every manifest sequence")
    e.add_argument("--out", help="report directory (default: --pred)")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("inspect-attention", help="attention grids and per-stream summaries of a result")
    a.add_argument("--result", required=True, help="result directory written by generate")
    a.add_argument("--out", help="output directory (default: <result>/attention)")
    a.add_argument("--no-plots", action="store_true")
    a.set_defaults(func=cmd_inspect_attention)

    s = sub.add_parser("synth-data", help="write a synthetic dataset with known generating rules")
    s.add_argument("--out", required=True)
    s.add_argument("--n-sequences", type=int, default=6)
    s.add_argument("--duration", type=float, default=60.0, help="seconds per sequence")
    s.add_argument("--n-subjects", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)
    return p


def _fail(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        return _fail(exc, EXIT_USER)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        return _fail(exc, EXIT_USER)
    except (InternalError, SingFaceError) as exc:
        return _fail(exc, EXIT_INTERNAL)
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail(exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
