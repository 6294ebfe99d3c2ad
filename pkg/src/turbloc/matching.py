"""Active-search correspondences between projected skeleton and heatmaps.

Point features search a circular window around the prediction for the pixel
with the largest value; line features are subdivided and searched along the
direction perpendicular to the projected line, sampling the channel by
bilinear interpolation.  Both searches reject matches whose best value does
not exceed the class threshold.

Tie-breaking is deterministic: point ties resolve to the pixel closest to
the prediction, then row-major order; line-sample ties resolve to the
smallest perpendicular offset, negative side first.

Point matches land on pixel centres; when sub-pixel refinement is enabled
(the default), a log-quadratic fit around the winning pixel recovers the
continuous peak, which is exact for the analytically rendered Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import (
    EPS_DEPTH,
    CameraIntrinsics,
    Pose,
    clip_segment_to_front,
    pinhole,
    world_to_camera,
)
from .heatmap import HeatmapFrame
from .turbine import POINT_CLASSES, SubdividedModel, TurbineSkeleton


class CorrespondenceKind(IntEnum):
    POINT = 0
    LINE = 1


@dataclass(frozen=True)
class MatchConfig:
    """Search-window geometry, thresholds and subdivision counts."""

    r_point: float = 30.0  # circular window radius, px
    lambda_point: float = 0.3
    a_line: float = 40.0  # perpendicular search length, px
    k_line: int = 41  # sample locations along the search segment
    lambda_line: float = 0.3
    s_tower: int = 10
    s_hub: int = 3
    s_blade: int = 8
    refine_points: bool = True  # sub-pixel refinement of point matches
    # skip line samples when another same-class model line projects nearly
    # parallel within search range: the perpendicular search cannot tell the
    # ridges apart there (foreshortened views of the rotor)
    parallel_guard_deg: float = 50.0

    def __post_init__(self):
        if self.r_point <= 0.0 or self.a_line <= 0.0:
            raise ValueError("search window sizes must be positive")
        if self.k_line < 3 or self.k_line % 2 == 0:
            raise ValueError("k_line must be odd and at least 3")
        for thr in (self.lambda_point, self.lambda_line):
            if not (0.0 < thr < 1.0):
                raise ValueError("thresholds must lie in (0, 1)")
        if min(self.s_tower, self.s_hub, self.s_blade) < 2:
            raise ValueError("subdivision counts must be at least 2")
        if not (0.0 <= self.parallel_guard_deg < 90.0):
            raise ValueError("parallel_guard_deg must lie in [0, 90)")

    def line_offsets(self) -> np.ndarray:
        """Signed sample offsets spanning [-a_line/2, +a_line/2], centre at 0."""
        half = (self.k_line - 1) / 2.0
        spacing = self.a_line / (self.k_line - 1)
        return spacing * (np.arange(self.k_line) - half)


@dataclass(frozen=True)
class Correspondence:
    predicted: np.ndarray  # (2,) px, projection under the estimate
    matched: np.ndarray  # (2,) px, image location found by search
    kind: CorrespondenceKind
    class_id: int  # channel index within the kind's stack
    point3d: np.ndarray  # (3,) world point that was projected
    line_id: int = -1  # parent skeleton line, -1 for point features

    def __post_init__(self):
        object.__setattr__(self, "predicted", np.asarray(self.predicted, dtype=float).reshape(2))
        object.__setattr__(self, "matched", np.asarray(self.matched, dtype=float).reshape(2))
        object.__setattr__(self, "point3d", np.asarray(self.point3d, dtype=float).reshape(3))


def match_point(channel: np.ndarray, predicted: np.ndarray, cfg: MatchConfig) -> np.ndarray | None:
    """Pixel with the largest value within r_point of the prediction.

    Returns the winning pixel centre as a float 2-vector, or None when no
    value in the window exceeds lambda_point.
    """
    h, w = channel.shape
    u, v = float(predicted[0]), float(predicted[1])
    if not (np.isfinite(u) and np.isfinite(v)):
        raise ValueError("predicted location must be finite")
    r = cfg.r_point
    x0, x1 = max(int(np.ceil(u - r)), 0), min(int(np.floor(u + r)), w - 1)
    y0, y1 = max(int(np.ceil(v - r)), 0), min(int(np.floor(v + r)), h - 1)
    if x0 > x1 or y0 > y1:
        return None
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    d2 = (ys[:, None] - v) ** 2 + (xs[None, :] - u) ** 2
    window = channel[y0 : y1 + 1, x0 : x1 + 1]
    inside = d2 <= r * r
    if not inside.any():
        return None
    values = np.where(inside, window, -np.inf)
    best = values.max()
    if not best > cfg.lambda_point:
        return None
    iy, ix = np.nonzero(values == best)
    order = np.lexsort((ix, iy, d2[iy, ix]))
    j = order[0]
    return np.array([float(xs[ix[j]]), float(ys[iy[j]])])


def perpendicular_direction(endpoint_a: np.ndarray, endpoint_b: np.ndarray) -> np.ndarray:
    """Unit 2-vector orthogonal to the segment.

    The sign is canonicalized so the first nonzero component is positive;
    the search spans both sides symmetrically, so only determinism matters.
    """
    a = np.asarray(endpoint_a, dtype=float).reshape(2)
    b = np.asarray(endpoint_b, dtype=float).reshape(2)
    d = b - a
    n = np.linalg.norm(d)
    if n < 1e-9:
        raise ValueError("projected line endpoints coincide")
    d = d / n
    p = np.array([-d[1], d[0]])
    if p[0] < 0.0 or (p[0] == 0.0 and p[1] < 0.0):
        p = -p
    return p


def _bilinear_batch(channel: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated values and validity for sample positions of shape (..., 2)."""
    h, w = channel.shape
    x, y = xy[..., 0], xy[..., 1]
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)
    xs = np.clip(x, 0.0, w - 1.0)
    ys = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(xs.astype(np.int64), w - 2) if w > 1 else np.zeros_like(xs, np.int64)
    y0 = np.minimum(ys.astype(np.int64), h - 2) if h > 1 else np.zeros_like(ys, np.int64)
    fx = xs - x0
    fy = ys - y0
    c = channel
    vals = (
        c[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + c[y0, x0 + 1] * fx * (1.0 - fy)
        + c[y0 + 1, x0] * (1.0 - fx) * fy
        + c[y0 + 1, x0 + 1] * fx * fy
    )
    return vals.astype(float), valid


def _match_line_rows(
    channel: np.ndarray,
    predicted: np.ndarray,
    perp: np.ndarray,
    cfg: MatchConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Perpendicular search for several samples of one line at once.

    predicted: (m, 2); perp: unit (2,).  Returns (matched (m, 2), found (m,)).
    """
    offsets = cfg.line_offsets()
    positions = predicted[:, None, :] + offsets[None, :, None] * perp[None, None, :]
    values, valid = _bilinear_batch(channel, positions)
    values = np.where(valid, values, -np.inf)
    best = values.max(axis=1)
    found = best > cfg.lambda_line
    spacing = cfg.a_line / (cfg.k_line - 1)
    # deterministic tie-break: smallest |offset|, negative side first
    penalty = np.abs(offsets) + 0.25 * spacing * (offsets > 0)
    cand = np.where(values == best[:, None], penalty[None, :], np.inf)
    j = np.argmin(cand, axis=1)
    matched = predicted + offsets[j][:, None] * perp[None, :]
    return matched, found


def match_line_sample(
    channel: np.ndarray,
    predicted: np.ndarray,
    perp: np.ndarray,
    cfg: MatchConfig,
) -> np.ndarray | None:
    """Best sample along the perpendicular; None when all are below threshold."""
    perp = np.asarray(perp, dtype=float).reshape(2)
    if abs(np.linalg.norm(perp) - 1.0) > 1e-6:
        raise ValueError("perpendicular direction must be unit length")
    matched, found = _match_line_rows(
        channel, np.asarray(predicted, dtype=float).reshape(1, 2), perp, cfg
    )
    return matched[0] if found[0] else None


def refine_peak_subpixel(channel: np.ndarray, pixel: np.ndarray) -> np.ndarray:
    """Continuous peak from a separable log-quadratic fit around a pixel.

    Exact for an isolated Gaussian; falls back to the pixel centre at image
    borders, near zero values, or when the fit is not concave.  The offset
    never exceeds half a pixel.
    """
    h, w = channel.shape
    ix, iy = int(round(float(pixel[0]))), int(round(float(pixel[1])))
    if ix < 1 or iy < 1 or ix > w - 2 or iy > h - 2:
        return np.array([float(ix), float(iy)])
    patch = channel[iy - 1 : iy + 2, ix - 1 : ix + 2].astype(float)
    if patch.min() <= 0.0:
        return np.array([float(ix), float(iy)])
    lp = np.log(patch)
    out = np.array([float(ix), float(iy)])
    den_x = lp[1, 0] - 2.0 * lp[1, 1] + lp[1, 2]
    if den_x < 0.0:
        out[0] += float(np.clip(0.5 * (lp[1, 0] - lp[1, 2]) / den_x, -0.5, 0.5))
    den_y = lp[0, 1] - 2.0 * lp[1, 1] + lp[2, 1]
    if den_y < 0.0:
        out[1] += float(np.clip(0.5 * (lp[0, 1] - lp[2, 1]) / den_y, -0.5, 0.5))
    return out


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab[None, :]), axis=-1)


def _ambiguous_samples(
    uv: np.ndarray,
    line_id: int,
    line_class,
    skeleton: TurbineSkeleton,
    projected_lines: dict,
    sin_guard: float,
    reach: float,
) -> np.ndarray:
    """Samples whose search would run along a near-parallel same-class line."""
    flagged = np.zeros(uv.shape[0], dtype=bool)
    a_own, b_own = projected_lines[line_id]
    d_own = b_own - a_own
    n_own = np.linalg.norm(d_own)
    if n_own < 1e-9:
        return flagged
    d_own = d_own / n_own
    for other_id, other in enumerate(skeleton.lines):
        if other_id == line_id or other.line_class != line_class:
            continue
        if other_id not in projected_lines:
            continue
        a_o, b_o = projected_lines[other_id]
        d_o = b_o - a_o
        n_o = np.linalg.norm(d_o)
        if n_o < 1e-9:
            continue
        d_o = d_o / n_o
        if abs(d_own[0] * d_o[1] - d_own[1] * d_o[0]) >= sin_guard:
            continue  # transversal: the perpendicular search separates them
        flagged |= _point_segment_distance(uv, a_o, b_o) <= reach
    return flagged


@dataclass
class FrameMatches:
    """Array view of one frame's correspondences, ready for stacking."""

    points3d: np.ndarray  # (m, 3)
    predicted: np.ndarray  # (m, 2)
    matched: np.ndarray  # (m, 2)
    kinds: np.ndarray  # (m,) CorrespondenceKind values
    class_ids: np.ndarray  # (m,)
    line_ids: np.ndarray  # (m,)

    @staticmethod
    def empty() -> "FrameMatches":
        return FrameMatches(
            np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)),
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
        )

    def __len__(self):
        return self.points3d.shape[0]

    @property
    def n_points(self) -> int:
        return int(np.sum(self.kinds == int(CorrespondenceKind.POINT)))

    @property
    def n_lines(self) -> int:
        return int(np.sum(self.kinds == int(CorrespondenceKind.LINE)))


def match_frame_arrays(
    skeleton: TurbineSkeleton,
    subdivided: SubdividedModel,
    pose_estimate: Pose,
    k: CameraIntrinsics,
    frame: HeatmapFrame,
    cfg: MatchConfig,
) -> FrameMatches:
    """Establish all point and line correspondences for one frame."""
    rows_p3d, rows_pred, rows_match, rows_kind, rows_cls, rows_line = [], [], [], [], [], []

    cam_points = world_to_camera(pose_estimate, skeleton.points)
    for idx, cls in enumerate(POINT_CLASSES):
        pc = cam_points[idx]
        if pc[2] <= EPS_DEPTH:
            continue
        uv = pinhole(k, pc)
        if not (-0.5 <= uv[0] < k.width - 0.5 and -0.5 <= uv[1] < k.height - 0.5):
            continue
        channel = frame.point_channels[int(cls)]
        matched = match_point(channel, uv, cfg)
        if matched is None:
            continue
        if cfg.refine_points:
            refined = refine_peak_subpixel(channel, matched)
            if np.linalg.norm(refined - uv) <= cfg.r_point:
                matched = refined
        rows_p3d.append(skeleton.points[idx])
        rows_pred.append(uv)
        rows_match.append(matched)
        rows_kind.append(int(CorrespondenceKind.POINT))
        rows_cls.append(int(cls))
        rows_line.append(-1)

    cam_sub = world_to_camera(pose_estimate, subdivided.points)
    projected_lines = {}
    for line_id, line in enumerate(skeleton.lines):
        clipped = clip_segment_to_front(cam_points[line.start], cam_points[line.end])
        if clipped is None:
            continue
        projected_lines[line_id] = (pinhole(k, clipped[0]), pinhole(k, clipped[1]))

    sin_guard = np.sin(np.radians(cfg.parallel_guard_deg))
    for line_id, line in enumerate(skeleton.lines):
        if line_id not in projected_lines:
            continue
        a2, b2 = projected_lines[line_id]
        try:
            perp = perpendicular_direction(a2, b2)
        except ValueError:
            continue  # degenerate projection: skip this line's samples
        sel = np.nonzero(subdivided.line_ids == line_id)[0]
        pc = cam_sub[sel]
        front = pc[:, 2] > EPS_DEPTH
        uv = np.full((sel.size, 2), np.nan)
        uv[front] = pinhole(k, pc[front])
        visible = front & (
            (uv[:, 0] >= -0.5) & (uv[:, 0] < k.width - 0.5)
            & (uv[:, 1] >= -0.5) & (uv[:, 1] < k.height - 0.5)
        )
        visible &= ~_ambiguous_samples(
            uv, line_id, line.line_class, skeleton, projected_lines, sin_guard, cfg.a_line
        )
        if not visible.any():
            continue
        channel = frame.line_channels[int(line.line_class)]
        matched, found = _match_line_rows(channel, uv[visible], perp, cfg)
        vis_idx = sel[visible]
        for local, global_idx in enumerate(vis_idx):
            if not found[local]:
                continue
            rows_p3d.append(subdivided.points[global_idx])
            rows_pred.append(uv[visible][local])
            rows_match.append(matched[local])
            rows_kind.append(int(CorrespondenceKind.LINE))
            rows_cls.append(int(line.line_class))
            rows_line.append(line_id)

    if not rows_p3d:
        return FrameMatches.empty()
    return FrameMatches(
        np.asarray(rows_p3d, dtype=float),
        np.asarray(rows_pred, dtype=float),
        np.asarray(rows_match, dtype=float),
        np.asarray(rows_kind, dtype=np.int64),
        np.asarray(rows_cls, dtype=np.int64),
        np.asarray(rows_line, dtype=np.int64),
    )


def match_frame(
    skeleton: TurbineSkeleton,
    subdivided: SubdividedModel,
    pose_estimate: Pose,
    k: CameraIntrinsics,
    frame: HeatmapFrame,
    cfg: MatchConfig,
) -> list[Correspondence]:
    """Correspondence list form of match_frame_arrays."""
    arrays = match_frame_arrays(skeleton, subdivided, pose_estimate, k, frame, cfg)
    return [
        Correspondence(
            predicted=arrays.predicted[i],
            matched=arrays.matched[i],
            kind=CorrespondenceKind(int(arrays.kinds[i])),
            class_id=int(arrays.class_ids[i]),
            point3d=arrays.points3d[i],
            line_id=int(arrays.line_ids[i]),
        )
        for i in range(len(arrays))
    ]
