"""Load pre-extracted video frames (PNG/JPEG directories) as ImageSequences."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .imaging import ImageSequence

LUMA = (0.299, 0.587, 0.114)
DEFAULT_RESIZE = (224, 224)
DEFAULT_CUT_THRESHOLD = 0.1


@dataclass(frozen=True)
class FrameSource:
    """Where and how to read one sequence.

    ``pattern`` is a regular expression matched against file names; its first
    group captures the frame number. ``crop`` is (x, y, w, h) and ``resize_to``
    is (w, h), both in pixels.
    """

    root_path: str | Path
    pattern: str = r"(\d+)\.(?:png|jpe?g)$"
    stride: int = 1
    crop: tuple[int, int, int, int] | None = None
    resize_to: tuple[int, int] | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise InvalidInputError("stride must be >= 1")


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Float grayscale in [0, 1] from an 8-bit gray or RGB(A) array."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ np.array(LUMA)
    elif arr.ndim != 2:
        raise InvalidInputError(f"unsupported image shape {arr.shape}")
    return (arr / 255.0).astype(np.float32)


def _decode(path: Path, src: FrameSource) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L") if im.mode in ("L", "I;16", "P", "1") else im.convert("RGB")
        if src.crop is not None:
            x, y, w, h = src.crop
            if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > im.width or y + h > im.height:
                raise InvalidInputError(f"crop {src.crop} outside {im.width}x{im.height} frame {path.name}")
            im = im.crop((x, y, x + w, y + h))
        if src.resize_to is not None:
            im = im.resize(tuple(src.resize_to), Image.BILINEAR)
        return to_gray(np.asarray(im))


def list_frames(src: FrameSource) -> list[tuple[int, Path]]:
    root = Path(src.root_path)
    if not root.is_dir():
        raise InvalidInputError(f"frame directory not found: {root}")
    rx = re.compile(src.pattern, re.IGNORECASE)
    numbered = []
    for path in root.iterdir():
        m = rx.search(path.name)
        if m:
            numbered.append((int(m.group(1)), path))
    numbered.sort()
    numbers = [n for n, _ in numbered]
    if len(set(numbers)) != len(numbers):
        dupes = sorted({n for n in numbers if numbers.count(n) > 1})
        raise InvalidInputError(f"{root}: duplicate frame numbers {dupes[:5]}")
    return numbered[:: src.stride]


def load_sequence(src: FrameSource) -> ImageSequence:
    frames = list_frames(src)
    if len(frames) < 2:
        raise InvalidInputError(
            f"{src.root_path}: need at least 2 frames after stride {src.stride}, found {len(frames)}"
        )
    images = [_decode(p, src) for _, p in frames]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InvalidInputError(f"{src.root_path}: frames differ in size {sorted(shapes)}")
    return ImageSequence(np.stack(images), Path(src.root_path).name, tuple(n for n, _ in frames))


def frame_differences(seq: ImageSequence) -> np.ndarray:
    f = np.asarray(seq.frames, dtype=np.float64)
    return np.abs(np.diff(f, axis=0)).mean(axis=(1, 2))


def detect_cuts(seq: ImageSequence, threshold: float = DEFAULT_CUT_THRESHOLD) -> list[int]:
    """Positions i where frames i and i+1 differ by more than ``threshold`` (mean abs)."""
    if not threshold > 0:
        raise InvalidInputError("threshold must be > 0")
    return [int(i) for i in np.flatnonzero(frame_differences(seq) > threshold)]
