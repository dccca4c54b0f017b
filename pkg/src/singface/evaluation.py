"""Rhythm metrics: canonical correlation of speeds, roughness, blink statistics."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .containers import atomic_write_text, fmt_f32, write_csv
from .dataset import CLOSE_THRESHOLD, TAU_S, closure_runs
from .errors import DegenerateInput, EmptySet, LengthMismatch, ShapeMismatch, TooShort

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    cca_pose_speed: float
    cca_eye: float
    rough: float
    blinks_per_s: float
    mean_blink_dur_s: float

    def __post_init__(self):
        for name in ("cca_pose_speed", "cca_eye"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("rough", "blinks_per_s", "mean_blink_dur_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = tuple(f.name for f in fields(MetricReport))


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _column_basis(x: np.ndarray, name: str) -> np.ndarray:
    """Orthonormal basis of the centred column space (the whitened view)."""
    xc = x - x.mean(0)
    scale = np.abs(x).max(0) + 1e-300
    if np.any(np.ptp(x, axis=0) <= 1e-12 * scale):
        raise DegenerateInput(f"{name} has a constant column")
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    keep = s > s[0] * 1e-10
    return u[:, keep]


def cca_metric(pred, gt) -> float:
    """First canonical correlation between two (T, d) series, frames as samples."""
    x, y = _as_2d(pred), _as_2d(gt)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    T, d = x.shape
    if T <= d:
        raise DegenerateInput(f"need more frames than dimensions (T={T}, d={d})")
    qx, qy = _column_basis(x, "pred"), _column_basis(y, "gt")
    rho = np.linalg.svd(qx.T @ qy, compute_uv=False)[0]
    return float(np.clip(rho, 0.0, 1.0))


def speed_cca(pred_pose, gt_pose) -> float:
    """CCA between the absolute frame-to-frame differences of two pose tracks."""
    p, g = _as_2d(pred_pose), _as_2d(gt_pose)
    if len(p) < 3 or len(g) < 3:
        raise TooShort("speed CCA needs at least 3 frames")
    return cca_metric(np.abs(np.diff(p, axis=0)), np.abs(np.diff(g, axis=0)))


def roughness(angles) -> float:
    """(1/T) sum over interior t and channels of the squared central second difference."""
    r = _as_2d(angles)
    T = len(r)
    if T < 3:
        raise TooShort("roughness needs at least 3 frames")
    d2 = r[2:] - 2.0 * r[1:-1] + r[:-2]
    return float((d2 ** 2).sum() / T)


def blink_stats(eye, close_threshold: float = CLOSE_THRESHOLD, fps: int = 30,
                tau_s: float = TAU_S) -> tuple[float, float]:
    """(blinks per second, mean blink duration in s); closures of tau_s or longer are not blinks."""
    eye = np.asarray(eye, dtype=np.float64).reshape(-1)
    if eye.size == 0:
        raise EmptySet("empty eye track")
    lengths = [n for _, n in closure_runs(eye, close_threshold) if n < tau_s * fps]
    if not lengths:
        return 0.0, 0.0
    return len(lengths) / (eye.size / fps), float(np.mean(lengths)) / fps


def evaluate(pred: dict, gt: dict, fps: int = 30, close_threshold: float = CLOSE_THRESHOLD) -> MetricReport:
    """Metrics of one predicted sequence against its ground truth.

    ``pred``/``gt`` map ``pose`` (T, 6) and ``eye`` (T,). The eye CCA falls
    back to 0 when either eye track is constant (no closures at all).
    """
    for k in ("pose", "eye"):
        if len(pred[k]) != len(gt[k]):
            raise LengthMismatch(f"{k}: predicted {len(pred[k])} frames vs ground truth {len(gt[k])}")
    try:
        cca_eye = cca_metric(pred["eye"], gt["eye"])
    except DegenerateInput as exc:
        log.warning("eye CCA undefined (%s); reporting 0", exc)
        cca_eye = 0.0
    rate, dur = blink_stats(pred["eye"], close_threshold, fps)
    return MetricReport(
        cca_pose_speed=speed_cca(pred["pose"], gt["pose"]),
        cca_eye=cca_eye,
        rough=roughness(np.asarray(pred["pose"])[:, :3]),
        blinks_per_s=rate,
        mean_blink_dur_s=dur,
    )


def aggregate(reports) -> MetricReport:
    """Mean of each metric over sequences."""
    reports = list(reports)
    if not reports:
        raise EmptySet("no reports to aggregate")
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS})


def write_reports(per_seq: dict[str, MetricReport], out_dir) -> dict:
    """metrics.json (per sequence + mean) and metrics.csv, one row per sequence plus a ``mean`` row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean = aggregate(per_seq.values())
    doc = {"sequences": {k: r.as_dict() for k, r in per_seq.items()}, "mean": mean.as_dict()}
    atomic_write_text(out / "metrics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = [[k, *(fmt_f32(getattr(r, f)) for f in METRIC_FIELDS)] for k, r in per_seq.items()]
    rows.append(["mean", *(fmt_f32(getattr(mean, f)) for f in METRIC_FIELDS)])
    write_csv(out / "metrics.csv", ["sequence", *METRIC_FIELDS], rows)
    return doc
