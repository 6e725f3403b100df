"""Per-pixel feature channels for structured-forest tokens.

A channel stack has three Luv color planes followed by, for each scale, one
gradient magnitude plane and ``orientation_bins`` oriented magnitude planes.
With the default configuration this is 3 + 2 + 8 = 13 planes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage
from skimage.color import rgb2luv

from .errors import FormatError

RAW_IMAGE = "raw_image"
WEAK_DETECTOR = "weak_detector"

CHANNEL_MAGIC = b"SSCH"


@dataclass(frozen=True)
class FeatureConfig:
    patch_size: int = 12
    scales: tuple[float, ...] = (1.0, 0.5)
    orientation_bins: int = 4
    gradient_source: str = RAW_IMAGE
    smoothing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        m = self.patch_size
        if m < 4 or m % 2:
            raise ValueError(f"patch_size must be even and >= 4, got {m}")
        if not self.scales or self.scales[0] != 1.0:
            raise ValueError("scales must start at 1.0")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly decreasing")
        if self.scales[-1] <= 0:
            raise ValueError("scales must be positive")
        if self.orientation_bins < 1:
            raise ValueError("orientation_bins must be >= 1")
        if self.gradient_source not in (RAW_IMAGE, WEAK_DETECTOR):
            raise ValueError(f"unknown gradient_source {self.gradient_source!r}")

    @property
    def n_planes(self) -> int:
        return 3 + len(self.scales) * (1 + self.orientation_bins)

    @property
    def feature_dim(self) -> int:
        return self.patch_size * self.patch_size * self.n_planes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "FeatureConfig":
        return cls(**json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:8]


@dataclass
class ImageChannels:
    planes: np.ndarray  # (n_planes, height, width) float32
    tags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.planes.ndim != 3:
            raise ValueError("planes must be (n_planes, height, width)")
        if self.tags and len(self.tags) != self.planes.shape[0]:
            raise ValueError("one tag per plane required")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def n_planes(self) -> int:
        return self.planes.shape[0]


def as_float_rgb(image) -> np.ndarray:
    """Return an (H, W, 3) float64 image clamped to [0, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an RGB raster, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty image")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def resize_plane(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area averaging when shrinking, bilinear when enlarging."""
    h, w = plane.shape
    if (h, w) == (height, width):
        return plane
    interp = cv2.INTER_AREA if height * width < h * w else cv2.INTER_LINEAR
    return cv2.resize(plane, (width, height), interpolation=interp)


def resize_image(image: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return image
    h, w = image.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    interp = cv2.INTER_AREA if scale < 1.0 else cv2.INTER_LINEAR
    return cv2.resize(image, (nw, nh), interpolation=interp)


def luv_planes(image) -> np.ndarray:
    """CIE Luv (D65 white) as a (3, H, W) float32 array."""
    luv = rgb2luv(as_float_rgb(image))
    return np.ascontiguousarray(luv.transpose(2, 0, 1), dtype=np.float32)


def oriented_gradients(plane: np.ndarray, bins: int, smoothing: float = 1.0):
    """Gradient magnitude and its soft split over ``bins`` orientations in [0, pi).

    Each pixel's magnitude is shared linearly between the two nearest bin
    centres (bin ``b`` is centred at ``b * pi / bins``, wrapping at pi), so the
    oriented planes sum exactly to the magnitude.
    """
    src = plane.astype(np.float32)
    if smoothing > 0:
        src = ndimage.gaussian_filter(src, smoothing, mode="reflect")
    gy, gx = np.gradient(src)
    mag = np.hypot(gx, gy).astype(np.float32)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta * (bins / np.pi)
    lo = np.floor(pos)
    frac = (pos - lo).astype(np.float32)
    lo = lo.astype(np.int64) % bins
    hi = (lo + 1) % bins
    w_lo = mag * (1.0 - frac)
    w_hi = mag * frac
    orient = np.empty((bins,) + mag.shape, dtype=np.float32)
    for b in range(bins):
        orient[b] = np.where(lo == b, w_lo, 0.0) + np.where(hi == b, w_hi, 0.0)
    return mag, orient


def compute_channels(image, config: FeatureConfig = FeatureConfig(), weak_map=None) -> ImageChannels:
    """Build the feature stack for one image.

    With ``gradient_source="raw_image"`` gradients come from the Luv lightness;
    with ``"weak_detector"`` they come from ``weak_map``, a soft contour map
    of the same height and width as ``image``.
    """
    rgb = as_float_rgb(image)
    h, w = rgb.shape[:2]
    if config.gradient_source == WEAK_DETECTOR:
        if weak_map is None:
            raise ValueError("weak_map required when gradient_source is weak_detector")
        source = np.asarray(weak_map, dtype=np.float32)
        if source.shape != (h, w):
            raise ValueError(f"weak_map shape {source.shape} does not match image {(h, w)}")
    else:
        if weak_map is not None:
            raise ValueError("weak_map given but gradient_source is raw_image")
        source = None

    luv = luv_planes(rgb)
    if source is None:
        source = luv[0] / np.float32(100.0)

    planes = [luv[0], luv[1], luv[2]]
    tags = ["luv_L", "luv_u", "luv_v"]
    orient_planes, orient_tags = [], []
    for s in config.scales:
        sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        small = resize_plane(source, sh, sw)
        mag, orient = oriented_gradients(small, config.orientation_bins, config.smoothing)
        planes.append(resize_plane(mag, h, w))
        tags.append(f"grad_mag_scale_{s:g}")
        for b in range(config.orientation_bins):
            orient_planes.append(resize_plane(orient[b], h, w))
            orient_tags.append(f"grad_orient_bin_{b}_scale_{s:g}")
    planes.extend(orient_planes)
    tags.extend(orient_tags)
    stack = np.stack(planes).astype(np.float32, copy=False)
    return ImageChannels(np.ascontiguousarray(stack), tuple(tags))


def pad_planes(planes: np.ndarray, m: int) -> np.ndarray:
    """Reflect-pad a (C, H, W) stack by m/2 on every side."""
    half = m // 2
    return np.pad(planes, ((0, 0), (half, half), (half, half)), mode="reflect")


def extract_patch_vector(channels: ImageChannels, center, m: int) -> np.ndarray:
    """Concatenate the m x m window around ``center`` = (row, col) of every plane.

    The window spans rows ``row - m/2 .. row + m/2 - 1``; pixels outside the
    image are taken from the reflected border.
    """
    y, x = int(center[0]), int(center[1])
    if not (0 <= y < channels.height and 0 <= x < channels.width):
        raise ValueError(f"center {center} outside image")
    padded = pad_planes(channels.planes, m)
    return padded[:, y:y + m, x:x + m].reshape(-1).copy()


def save_channels(path, channels: ImageChannels) -> None:
    """Dump a stack as a 16-byte header then little-endian float32 planes."""
    header = struct.pack("<III4s", channels.width, channels.height, channels.n_planes, CHANNEL_MAGIC)
    Path(path).write_bytes(header + channels.planes.astype("<f4").tobytes())


def load_channels(path) -> ImageChannels:
    data = Path(path).read_bytes()
    width, height, n_planes, magic = struct.unpack("<III4s", data[:16])
    if magic != CHANNEL_MAGIC:
        raise FormatError(f"{path}: not a channel dump")
    planes = np.frombuffer(data, dtype="<f4", offset=16).reshape(n_planes, height, width)
    return ImageChannels(planes.astype(np.float32))
