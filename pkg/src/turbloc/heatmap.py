"""Multichannel Gaussian heatmaps of the projected skeleton.

A frame holds 3 line channels (tower, hub, blade) and 4 point channels
(tower base, tower top, blade centre, blade tips), all float32 in [0, 1].
Rendering evaluates the Gaussian analytically from the distance to the
projected feature (truncated at 3 sigma) instead of drawing then blurring,
so peaks and ridges sit exactly at the sub-pixel projection.  Overlapping
features in one channel combine by per-pixel maximum, and every channel is
renormalized to peak 1 afterwards.

The same renderer produces training-label-style output (sigma=5), the
simulated network measurements (sigma=5) and the pose priors (sigma=20).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import EPS_DEPTH, CameraIntrinsics, Pose, clip_segment_to_front, pinhole, world_to_camera
from .turbine import POINT_CLASSES, TurbineSkeleton

N_LINE_CHANNELS = 3
N_POINT_CHANNELS = 4
N_CHANNELS = N_LINE_CHANNELS + N_POINT_CHANNELS

MEASUREMENT_SIGMA = 5.0
PRIOR_SIGMA = 20.0

TRUNCATION_SIGMAS = 3.0

MAGIC = b"TMBT"
FORMAT_VERSION = 1

LINE_CHANNEL_NAMES = ("line_tower", "line_hub", "line_blade")
POINT_CHANNEL_NAMES = ("point_tower_base", "point_tower_top", "point_blade_centre", "point_blade_tips")


class FrameFormatError(ValueError):
    """A frame file that cannot be decoded."""


class FrameHeaderError(FrameFormatError):
    """Missing or malformed file header."""


class FrameChannelCountError(FrameFormatError):
    """Header declares a channel count other than the expected 7."""


class FramePayloadError(FrameFormatError):
    """Pixel payload shorter than the header promises."""


@dataclass(frozen=True, eq=False)
class HeatmapFrame:
    """One keyframe's image measurements: line and point channel stacks."""

    line_channels: np.ndarray  # (3, H, W) float32
    point_channels: np.ndarray  # (4, H, W) float32

    def __post_init__(self):
        lines = np.asarray(self.line_channels, dtype=np.float32)
        points = np.asarray(self.point_channels, dtype=np.float32)
        if lines.ndim != 3 or lines.shape[0] != N_LINE_CHANNELS:
            raise ValueError("expected 3 line channels")
        if points.ndim != 3 or points.shape[0] != N_POINT_CHANNELS:
            raise ValueError("expected 4 point channels")
        if lines.shape[1:] != points.shape[1:]:
            raise ValueError("line and point channels must share the image size")
        object.__setattr__(self, "line_channels", lines)
        object.__setattr__(self, "point_channels", points)

    @property
    def height(self) -> int:
        return self.line_channels.shape[1]

    @property
    def width(self) -> int:
        return self.line_channels.shape[2]

    @staticmethod
    def zeros(width: int, height: int) -> "HeatmapFrame":
        return HeatmapFrame(
            np.zeros((N_LINE_CHANNELS, height, width), dtype=np.float32),
            np.zeros((N_POINT_CHANNELS, height, width), dtype=np.float32),
        )

    def is_blank(self) -> bool:
        return not (self.line_channels.any() or self.point_channels.any())


def _paint_gaussian_point(channel: np.ndarray, u: float, v: float, sigma: float) -> None:
    """Max-compose an isotropic Gaussian centred at the sub-pixel (u, v).

    The profile is anchored so the pixel nearest the centre reads exactly
    1.0: same-class peaks then tie exactly inside overlapping search
    windows, which the matcher resolves by distance to the prediction.
    """
    h, w = channel.shape
    r = TRUNCATION_SIGMAS * sigma
    x0, x1 = max(int(np.ceil(u - r)), 0), min(int(np.floor(u + r)), w - 1)
    y0, y1 = max(int(np.ceil(v - r)), 0), min(int(np.floor(v + r)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=float) - u
    ys = np.arange(y0, y1 + 1, dtype=float) - v
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    d2_min = (np.rint(v) - v) ** 2 + (np.rint(u) - u) ** 2
    vals = np.exp(-(d2 - d2_min) / (2.0 * sigma * sigma))
    vals[d2 > r * r] = 0.0
    np.maximum(channel[y0 : y1 + 1, x0 : x1 + 1], vals, out=channel[y0 : y1 + 1, x0 : x1 + 1])


def _paint_gaussian_segment(channel: np.ndarray, a: np.ndarray, b: np.ndarray, sigma: float) -> None:
    """Max-compose a Gaussian ridge along the 2D segment a-b."""
    h, w = channel.shape
    r = TRUNCATION_SIGMAS * sigma
    x0 = max(int(np.ceil(min(a[0], b[0]) - r)), 0)
    x1 = min(int(np.floor(max(a[0], b[0]) + r)), w - 1)
    y0 = max(int(np.ceil(min(a[1], b[1]) - r)), 0)
    y1 = min(int(np.floor(max(a[1], b[1]) + r)), h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs = np.arange(x0, x1 + 1, dtype=float)
    ys = np.arange(y0, y1 + 1, dtype=float)
    px = np.broadcast_to(xs[None, :], (ys.size, xs.size))
    py = np.broadcast_to(ys[:, None], (ys.size, xs.size))
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        _paint_gaussian_point(channel, a[0], a[1], sigma)
        return
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom
    np.clip(t, 0.0, 1.0, out=t)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    d2 = dx * dx + dy * dy
    vals = np.exp(-d2 / (2.0 * sigma * sigma))
    vals[d2 > r * r] = 0.0
    np.maximum(channel[y0 : y1 + 1, x0 : x1 + 1], vals, out=channel[y0 : y1 + 1, x0 : x1 + 1])


def render(
    skeleton: TurbineSkeleton,
    pose: Pose,
    k: CameraIntrinsics,
    sigma: float = MEASUREMENT_SIGMA,
) -> HeatmapFrame:
    """Render the skeleton seen from `pose` into a heatmap frame."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    lines = np.zeros((N_LINE_CHANNELS, k.height, k.width), dtype=float)
    points = np.zeros((N_POINT_CHANNELS, k.height, k.width), dtype=float)

    cam_points = world_to_camera(pose, skeleton.points)

    for idx, cls in enumerate(POINT_CLASSES):
        pc = cam_points[idx]
        if pc[2] <= EPS_DEPTH:
            continue
        uv = pinhole(k, pc)
        if not (-0.5 <= uv[0] < k.width - 0.5 and -0.5 <= uv[1] < k.height - 0.5):
            continue
        _paint_gaussian_point(points[int(cls)], uv[0], uv[1], sigma)

    for line in skeleton.lines:
        clipped = clip_segment_to_front(cam_points[line.start], cam_points[line.end])
        if clipped is None:
            continue
        a2, b2 = pinhole(k, clipped[0]), pinhole(k, clipped[1])
        _paint_gaussian_segment(lines[int(line.line_class)], a2, b2, sigma)

    for stack in (lines, points):
        for c in range(stack.shape[0]):
            m = stack[c].max()
            if m > 0.0:
                stack[c] /= m
    return HeatmapFrame(lines.astype(np.float32), points.astype(np.float32))


def render_priors(skeleton: TurbineSkeleton, noisy_pose: Pose, k: CameraIntrinsics) -> HeatmapFrame:
    """Heavily smoothed rendering from the GPS/IMU pose estimate."""
    return render(skeleton, noisy_pose, k, sigma=PRIOR_SIGMA)


# ---------------------------------------------------------------------------
# frame file format: "TMBT", little endian
#   magic (4s) | version u32 | width u32 | height u32 | channels u32 = 7
#   then 7 planes of float32, row major, line channels first
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")


def write_frame(frame: HeatmapFrame, path) -> None:
    data = _HEADER.pack(MAGIC, FORMAT_VERSION, frame.width, frame.height, N_CHANNELS)
    payload = np.concatenate([frame.line_channels, frame.point_channels], axis=0)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(payload.astype("<f4").tobytes())


def read_frame(path) -> HeatmapFrame:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FrameHeaderError(f"{path}: file too short for a frame header")
    magic, version, width, height, channels = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FrameHeaderError(f"{path}: bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise FrameHeaderError(f"{path}: unsupported format version {version}")
    if channels != N_CHANNELS:
        raise FrameChannelCountError(f"{path}: expected {N_CHANNELS} channels, header says {channels}")
    expected = N_CHANNELS * width * height * 4
    payload = blob[_HEADER.size :]
    if len(payload) < expected:
        raise FramePayloadError(f"{path}: payload truncated ({len(payload)} of {expected} bytes)")
    planes = np.frombuffer(payload[:expected], dtype="<f4").reshape(N_CHANNELS, height, width)
    return HeatmapFrame(planes[:N_LINE_CHANNELS].copy(), planes[N_LINE_CHANNELS:].copy())


def write_debug_images(frame: HeatmapFrame, directory, stem: str = "frame") -> list:
    """Lossy 8-bit grayscale export (PGM), one file per channel; never read back."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    stacks = [(LINE_CHANNEL_NAMES, frame.line_channels), (POINT_CHANNEL_NAMES, frame.point_channels)]
    for names, stack in stacks:
        for name, channel in zip(names, stack):
            gray = np.clip(channel * 255.0, 0.0, 255.0).astype(np.uint8)
            path = directory / f"{stem}_{name}.pgm"
            with open(path, "wb") as fh:
                fh.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
                fh.write(gray.tobytes())
            written.append(path)
    return written
