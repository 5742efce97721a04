"""Planar rigid motion (SE(2)) and synthetic moving-digit sequences.

Poses act on pixel coordinates ``(x, y)`` with ``x`` along columns and ``y``
along rows. A pose rotates about a center point and then translates::

    p(q) = R(theta) (q - c) + c + t

Positive ``theta`` rotates from the +x axis toward the +y axis, which on a
row-down image display is clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_CANVAS = 64
DEFAULT_NUM_FRAMES = 20
MAX_TRANSLATION = 10.0


@dataclass(frozen=True)
class Pose2:
    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0  # degrees, normalized to [0, 360)

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_degrees(self.theta))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    def rotation(self) -> np.ndarray:
        rad = math.radians(self.theta)
        c, s = math.cos(rad), math.sin(rad)
        return np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix of the center-relative transform."""
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[:2, 2] = (self.tx, self.ty)
        return m

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.theta], dtype=np.float64)

    def allclose(self, other: Pose2, atol: float = 1e-9) -> bool:
        dtheta = abs(_wrap_degrees(self.theta - other.theta + 180.0) - 180.0)
        return (
            abs(self.tx - other.tx) <= atol
            and abs(self.ty - other.ty) <= atol
            and dtheta <= atol
        )


def _wrap_degrees(theta: float) -> float:
    wrapped = math.fmod(float(theta), 360.0)
    if wrapped < 0.0:
        wrapped += 360.0
    # fmod of a value just below a multiple of 360 can round up to 360.0
    if wrapped >= 360.0:
        wrapped = 0.0
    return wrapped


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose that applies ``b`` first, then ``a``."""
    t = a.rotation() @ np.array([b.tx, b.ty]) + np.array([a.tx, a.ty])
    return Pose2(float(t[0]), float(t[1]), a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    rt = p.rotation().T
    t = -(rt @ np.array([p.tx, p.ty]))
    return Pose2(float(t[0]), float(t[1]), -p.theta)


def interpolate_pose(total: Pose2 | MotionParams, fraction: float) -> Pose2:
    """Pose at ``fraction`` of a motion, linear in (tx, ty, theta)."""
    if isinstance(total, MotionParams):
        tx, ty, theta = total.total_tx, total.total_ty, total.total_theta
    else:
        tx, ty, theta = total.tx, total.ty, total.theta
    return Pose2(fraction * tx, fraction * ty, fraction * theta)


@dataclass(frozen=True)
class MotionParams:
    total_tx: float
    total_ty: float
    total_theta: float
    num_frames: int = DEFAULT_NUM_FRAMES

    def __post_init__(self):
        if self.num_frames < 2:
            raise InvalidInputError(f"num_frames must be >= 2, got {self.num_frames}")


@dataclass(frozen=True)
class ImageSequence:
    """Ordered grayscale frames from a single source.

    ``frames`` has shape (T, H, W) with float32 values in [0, 1]. It may be a
    read-only memory map when loaded from disk.
    """

    frames: np.ndarray
    source_id: str = ""
    frame_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        frames = self.frames
        if frames.ndim != 3:
            raise InvalidInputError(f"frames must be (T, H, W), got shape {frames.shape}")
        if not self.frame_indices:
            object.__setattr__(self, "frame_indices", tuple(range(frames.shape[0])))
        elif len(self.frame_indices) != frames.shape[0]:
            raise InvalidInputError("frame_indices length does not match frame count")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def check_gray_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise InvalidInputError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite values")
    return img


def image_center(shape: tuple[int, int]) -> tuple[float, float]:
    h, w = shape
    return (w - 1) / 2.0, (h - 1) / 2.0


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at real coordinates; samples outside the image read 0."""
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape, dtype=np.float64)
            vals[valid] = img[yi[valid], xi[valid]]
            out += wy * wx * vals
    return out


def warp_image(
    src: np.ndarray, pose: Pose2, center: tuple[float, float] | None = None
) -> np.ndarray:
    """Rotate ``src`` about ``center`` (x, y) and translate it by the pose.

    Uses inverse mapping with bilinear interpolation and zero fill. ``center``
    defaults to the image center.
    """
    src = check_gray_image(src)
    h, w = src.shape
    if center is None:
        center = image_center((h, w))
    cx, cy = center
    if not (0.0 <= cx <= w - 1 and 0.0 <= cy <= h - 1):
        raise InvalidInputError(f"center {center} outside image of size {w}x{h}")

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    rt = pose.rotation().T
    dx = xs - cx - pose.tx
    dy = ys - cy - pose.ty
    sx = rt[0, 0] * dx + rt[0, 1] * dy + cx
    sy = rt[1, 0] * dx + rt[1, 1] * dy + cy
    return bilinear_sample(src.astype(np.float64), sx, sy).astype(src.dtype, copy=False)


def sample_motion_params(
    rng: np.random.Generator,
    num_frames: int = DEFAULT_NUM_FRAMES,
    max_translation: float = MAX_TRANSLATION,
    rotate: bool = True,
) -> MotionParams:
    tx, ty = rng.uniform(-max_translation, max_translation, size=2)
    theta = rng.uniform(0.0, 360.0) if rotate else 0.0
    return MotionParams(float(tx), float(ty), float(theta), num_frames)


def generate_se2_sequence(
    base: np.ndarray, params: MotionParams, source_id: str = ""
) -> tuple[ImageSequence, list[Pose2]]:
    """Warp ``base`` along a smooth motion; frame k realizes fraction k/(T-1).

    The returned poses are ground truth for evaluation only.
    """
    base = check_gray_image(base).astype(np.float32, copy=False)
    n = params.num_frames
    poses = [interpolate_pose(params, k / (n - 1)) for k in range(n)]
    frames = np.empty((n,) + base.shape, dtype=np.float32)
    frames[0] = base
    for k in range(1, n):
        frames[k] = warp_image(base, poses[k])
    return ImageSequence(frames, source_id), poses


def build_se2_dataset(
    base_images: Sequence[np.ndarray],
    n_sequences: int,
    rng: np.random.Generator,
    num_frames: int = DEFAULT_NUM_FRAMES,
    max_translation: float = MAX_TRANSLATION,
    rotate: bool = True,
) -> list[tuple[ImageSequence, list[Pose2]]]:
    if len(base_images) == 0:
        raise InvalidInputError("base image set is empty")
    if n_sequences < 0:
        raise InvalidInputError("n_sequences must be non-negative")
    out = []
    for i in range(n_sequences):
        b = int(rng.integers(len(base_images)))
        params = sample_motion_params(rng, num_frames, max_translation, rotate)
        seq, poses = generate_se2_sequence(base_images[b], params, source_id=f"se2-{i:06d}-base{b}")
        out.append((seq, poses))
    return out


def pad_to_canvas(img: np.ndarray, size: int = DEFAULT_CANVAS) -> np.ndarray:
    """Center ``img`` on a zero canvas of ``size`` x ``size``."""
    img = check_gray_image(img)
    h, w = img.shape
    if h > size or w > size:
        raise InvalidInputError(f"image {w}x{h} larger than canvas {size}")
    canvas = np.zeros((size, size), dtype=np.float32)
    top = (size - h) // 2
    left = (size - w) // 2
    canvas[top : top + h, left : left + w] = img
    return canvas


def load_base_images(directory: str | Path, canvas: int | None = DEFAULT_CANVAS) -> list[np.ndarray]:
    """Read every 8-bit grayscale PNG in ``directory`` (sorted by name)."""
    from PIL import Image

    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"base image directory not found: {directory}")
    images = []
    for path in sorted(directory.glob("*.png")):
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        images.append(pad_to_canvas(arr, canvas) if canvas else arr)
    if not images:
        raise InvalidInputError(f"no PNG files in {directory}")
    return images


def mnist_digits(
    count: int | None = None, canvas: int | None = DEFAULT_CANVAS, offset: int = 0
) -> list[np.ndarray]:
    """MNIST digits from the 5,000-image subset bundled with mlxtend."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError(
            "bundled MNIST digits need the optional 'mlxtend' package "
            "(pip install 'artifact[mnist]'), or pass a PNG directory instead"
        ) from exc
    x, _ = mnist_data()
    stop = None if count is None else offset + count
    digits = (x[offset:stop] / 255.0).astype(np.float32).reshape(-1, 28, 28)
    return [pad_to_canvas(d, canvas) if canvas else d for d in digits]


def digit_mask(base: np.ndarray, pose: Pose2, threshold: float = 0.1, dilation: int = 3) -> np.ndarray:
    """Boolean support of a warped digit, grown by ``dilation`` pixels."""
    from scipy.ndimage import binary_dilation

    warped = warp_image((base > threshold).astype(np.float64), pose)
    mask = warped > 0.5
    if dilation > 0:
        mask = binary_dilation(mask, iterations=dilation)
    return mask
