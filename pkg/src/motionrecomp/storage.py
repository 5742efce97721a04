"""Packed binary sequence files and dataset directories.

Sequence file layout (all little-endian)::

    b"MSEQ0001"
    u32 num_frames, u32 height, u32 width, u32 flags
    f32[num_frames, height, width]        frames, row-major
    f64[num_frames, 3]                    poses (tx, ty, theta), if flags & 1

A dataset directory holds ``manifest.json`` and one ``seq_XXXXXX.mseq`` file
per sequence.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptFileError, InvalidInputError, SchemaVersionError
from .imaging import ImageSequence, Pose2

SEQ_MAGIC = b"MSEQ0001"
FLAG_POSES = 1
_HEADER = struct.Struct("<8s4I")
MANIFEST_SCHEMA = 1


def write_sequence(path: str | Path, seq: ImageSequence, poses: Sequence[Pose2] | None = None) -> None:
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    n, h, w = frames.shape
    flags = 0
    if poses is not None:
        if len(poses) != n:
            raise InvalidInputError("need exactly one pose per frame")
        flags |= FLAG_POSES
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SEQ_MAGIC, n, h, w, flags))
        f.write(frames.tobytes())
        if poses is not None:
            f.write(np.array([p.as_array() for p in poses], dtype="<f8").tobytes())


def read_sequence(
    path: str | Path, source_id: str | None = None, mmap: bool = True
) -> tuple[ImageSequence, list[Pose2] | None]:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, n, h, w, flags = _HEADER.unpack(head)
    if magic != SEQ_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    frame_bytes = n * h * w * 4
    pose_bytes = n * 3 * 8 if flags & FLAG_POSES else 0
    if size != _HEADER.size + frame_bytes + pose_bytes:
        raise CorruptFileError(
            f"{path}: expected {_HEADER.size + frame_bytes + pose_bytes} bytes, found {size}"
        )
    if mmap:
        frames = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(n, h, w))
    else:
        frames = np.fromfile(path, dtype="<f4", count=n * h * w, offset=_HEADER.size).reshape(n, h, w)
    poses = None
    if pose_bytes:
        raw = np.fromfile(path, dtype="<f8", count=n * 3, offset=_HEADER.size + frame_bytes)
        poses = [Pose2(*row) for row in raw.reshape(n, 3)]
    return ImageSequence(frames, source_id or path.stem), poses


def write_dataset(
    directory: str | Path,
    items: Iterable[tuple[ImageSequence, Sequence[Pose2] | None]],
    seed: int | None = None,
    extra: dict | None = None,
) -> dict:
    """Write sequences plus ``manifest.json``; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    frame_size = None
    for i, (seq, poses) in enumerate(items):
        name = f"seq_{i:06d}.mseq"
        write_sequence(directory / name, seq, poses)
        if frame_size is None:
            frame_size = list(seq.shape)
        entries.append({"file": name, "source_id": seq.source_id, "num_frames": len(seq),
                        "has_poses": poses is not None})
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "sequence_count": len(entries),
        "frame_size": frame_size,
        "seed": seed,
        "sequences": entries,
    }
    if extra:
        manifest.update(extra)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")
    return manifest


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise InvalidInputError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise SchemaVersionError(
            f"{path}: schema version {manifest.get('schema_version')} unsupported (want {MANIFEST_SCHEMA})"
        )
    return manifest


def load_dataset(directory: str | Path, mmap: bool = True) -> list[tuple[ImageSequence, list[Pose2] | None]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    return [
        read_sequence(directory / e["file"], source_id=e.get("source_id"), mmap=mmap)
        for e in manifest["sequences"]
    ]
