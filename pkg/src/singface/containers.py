"""Binary and CSV containers for per-frame arrays.

Binary layout (all little-endian)::

    magic      4 bytes   b"SFTK"
    version    u16       currently 1
    kind_len   u16       length of the UTF-8 kind string
    kind       bytes     e.g. "features", "tracks", "attention_pose"
    fps        f32
    subj_width u32       one-hot subject channels appended to the last axis
    ndim       u32
    shape      ndim x u32
    data       prod(shape) x f32, C order

The file is written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import csv
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UnreadableFile, UnsupportedFormat

MAGIC = b"SFTK"
VERSION = 1


@dataclass
class Container:
    data: np.ndarray
    kind: str
    fps: float
    subject_channels: int = 0


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_container(path, data, kind: str, fps: float, subject_channels: int = 0) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    kind_b = kind.encode("utf-8")
    header = MAGIC + struct.pack("<HH", VERSION, len(kind_b)) + kind_b
    header += struct.pack("<fII", fps, subject_channels, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + arr.tobytes())


def load_container(path) -> Container:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise UnsupportedFormat(f"{path}: not a track container")
    try:
        version, klen = struct.unpack_from("<HH", raw, 4)
        if version != VERSION:
            raise UnsupportedFormat(f"{path}: container version {version} unsupported")
        off = 8
        kind = raw[off:off + klen].decode("utf-8")
        off += klen
        fps, subj, ndim = struct.unpack_from("<fII", raw, off)
        off += 12
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
    except (struct.error, ValueError) as exc:
        raise UnreadableFile(f"{path}: truncated container ({exc})") from exc
    return Container(data.astype(np.float32), kind, float(fps), int(subj))


def fmt_f32(x) -> str:
    # 9 significant digits round-trip any float32 exactly
    return format(float(x), ".9g")


def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(c if isinstance(c, str) else fmt_f32(c) if isinstance(c, (float, np.floating)) else str(c) for c in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except FileNotFoundError as exc:
        raise UnreadableFile(f"missing file {path}") from exc
    except StopIteration as exc:
        raise UnreadableFile(f"{path}: empty CSV") from exc
    return header, rows
