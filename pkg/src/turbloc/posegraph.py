"""Keyframe pose graph and its damped Gauss-Newton optimizer.

The graph couples consecutive keyframes through relative-pose measurements
derived from the GPS/IMU absolute estimates, and anchors the trajectory to
the world through image correspondences against the turbine heatmaps.  The
total objective is a sum of squared residuals:

- per consecutive pair, a 6-vector comparing the estimated relative pose
  with the measured one (translation difference and twice the vector part
  of the error quaternion), row-weighted by sqrt(beta_t) / sqrt(beta_rot);
- per correspondence, the 2-vector reprojection residual weighted by
  sqrt(beta_p) or sqrt(beta_line).

Each outer iteration re-establishes correspondences at the current
estimates (ICP-style), builds the normal equations from analytic Jacobians
with respect to each keyframe's local 6-DoF parameterization (translation
plus quaternion boxplus), solves the block-tridiagonal system in banded
form, and accepts the step only if the cost on the fixed correspondences
does not increase (Levenberg-style diagonal damping, never below
`damping_floor`).

Keyframes whose estimate moved less than the re-match tolerances since
their correspondences were last established reuse them; at that scale the
search results cannot change meaningfully, and skipping the search keeps
incremental full-graph optimization cheap.

The graph is single-writer: callers must serialize add_keyframe/optimize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .geometry import (
    EPS_DEPTH,
    CameraIntrinsics,
    Pose,
    RelativePose,
    compose,
    geodesic_angle,
    quat_conjugate,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    relative_pose,
    skew,
)
from .heatmap import HeatmapFrame
from .matching import CorrespondenceKind, FrameMatches, MatchConfig, match_frame_arrays
from .turbine import SubdividedModel, TurbineSkeleton


@dataclass(frozen=True)
class GraphWeights:
    beta_t: float = 100.0  # relative translation weight (~1/sigma^2, sigma 0.1 m)
    beta_rot: float = 400.0  # relative rotation weight (~1/sigma^2, sigma 0.05 rad)
    beta_p: float = 1.0  # point correspondence weight
    beta_line: float = 0.25  # line correspondence weight (many, individually weak)

    def __post_init__(self):
        vals = (self.beta_t, self.beta_rot, self.beta_p, self.beta_line)
        if any(v < 0.0 for v in vals):
            raise ValueError("weights must be non-negative")
        if self.beta_p == 0.0 and self.beta_line == 0.0:
            raise ValueError("at least one image weight must be positive")
        if self.beta_t == 0.0 and self.beta_rot == 0.0:
            raise ValueError("at least one relative-pose weight must be positive")


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 30
    cost_tolerance: float = 1e-6  # relative cost-change threshold
    step_tolerance: float = 1e-8  # update-norm threshold
    damping_floor: float = 1e-6  # minimal diagonal damping
    # correspondence reuse: skip re-matching a keyframe whose estimate moved
    # less than this since its matches were last established (0 = always)
    rematch_tol_t: float = 1e-4
    rematch_tol_r: float = 1e-5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.cost_tolerance <= 0.0 or self.step_tolerance <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.damping_floor < 0.0 or self.rematch_tol_t < 0.0 or self.rematch_tol_r < 0.0:
            raise ValueError("damping and re-match tolerances must be non-negative")


@dataclass
class Keyframe:
    id: int
    measured_pose: Pose  # GPS/IMU absolute estimate, only used via the relative offset
    relative_measurement: RelativePose | None  # None iff id == 0
    frame: HeatmapFrame
    estimate: Pose


@dataclass
class CostBreakdown:
    total: float
    relative_cost: float
    point_cost: float
    line_cost: float
    n_point_correspondences: int
    n_line_correspondences: int


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    costs: list = field(default_factory=list)  # initial cost, then per accepted iteration
    n_correspondences: int = 0

    def converged(self) -> bool:
        return self.termination in ("step_tolerance", "cost_tolerance", "max_iterations")

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "costs": list(self.costs),
            "n_correspondences": self.n_correspondences,
        }


# ---------------------------------------------------------------------------
# residual blocks (batched; single-state wrappers below are used for
# finite-difference validation)
# ---------------------------------------------------------------------------

def _image_forward(
    t: np.ndarray,
    q: np.ndarray,
    kf_idx: np.ndarray,
    points3d: np.ndarray,
    matched: np.ndarray,
    w: np.ndarray,
    k: CameraIntrinsics,
    with_jacobian: bool,
):
    """Weighted reprojection residuals (m, 2) and optional Jacobians (m, 2, 6)."""
    rot = quat_to_matrix(q)  # (n, 3, 3), camera-to-world
    rt = np.swapaxes(rot, -1, -2)[kf_idx]  # world-to-camera per correspondence
    d = points3d - t[kf_idx]
    pc = np.einsum("mij,mj->mi", rt, d)
    z = pc[:, 2]
    ok = z > EPS_DEPTH
    safe_z = np.where(ok, z, 1.0)
    u = k.fx * pc[:, 0] / safe_z + k.cx
    v = k.fy * pc[:, 1] / safe_z + k.cy
    r = w[:, None] * (np.stack([u, v], axis=1) - matched)
    if not with_jacobian:
        return r, ok, None
    dpi = np.zeros((len(z), 2, 3))
    dpi[:, 0, 0] = k.fx / safe_z
    dpi[:, 0, 2] = -k.fx * pc[:, 0] / safe_z**2
    dpi[:, 1, 1] = k.fy / safe_z
    dpi[:, 1, 2] = -k.fy * pc[:, 1] / safe_z**2
    jac = np.empty((len(z), 2, 6))
    jac[:, :, :3] = np.einsum("mij,mjk->mik", dpi, -rt)
    jac[:, :, 3:] = np.einsum("mij,mjk->mik", dpi, skew(pc))
    jac *= w[:, None, None]
    return r, ok, jac


def _relative_forward(
    t: np.ndarray,
    q: np.ndarray,
    meas_t: np.ndarray,
    meas_q: np.ndarray,
    sqrt_bt: float,
    sqrt_br: float,
    with_jacobian: bool,
):
    """Relative-pose residuals (n-1, 6) and optional Jacobian blocks.

    Row i couples keyframes (i, i+1); J_cur differentiates with respect to
    the later (current) keyframe, J_prev with respect to the earlier one.
    """
    t_cur, q_cur = t[1:], q[1:]
    t_prev, q_prev = t[:-1], q[:-1]
    q_cur_inv = quat_conjugate(q_cur)
    t_hat = quat_rotate(q_cur_inv, t_prev - t_cur)
    q_hat = quat_multiply(q_cur_inv, q_prev)
    q_err = quat_multiply(q_hat, quat_conjugate(meas_q))
    flip = np.where(q_err[:, :1] < 0.0, -1.0, 1.0)
    q_err = q_err * flip
    w_e, v_e = q_err[:, 0], q_err[:, 1:]
    r = np.concatenate([sqrt_bt * (t_hat - meas_t), sqrt_br * 2.0 * v_e], axis=1)
    if not with_jacobian:
        return r, None, None
    n1 = t_cur.shape[0]
    rot_cur_t = np.swapaxes(quat_to_matrix(q_cur), -1, -2)
    eye = np.broadcast_to(np.eye(3), (n1, 3, 3))
    j_cur = np.zeros((n1, 6, 6))
    j_prev = np.zeros((n1, 6, 6))
    j_cur[:, :3, :3] = -sqrt_bt * rot_cur_t
    j_cur[:, :3, 3:] = sqrt_bt * skew(t_hat)
    j_cur[:, 3:, 3:] = sqrt_br * (-w_e[:, None, None] * eye + skew(v_e))
    j_prev[:, :3, :3] = sqrt_bt * rot_cur_t
    j_prev[:, 3:, 3:] = sqrt_br * np.einsum(
        "nij,njk->nik", w_e[:, None, None] * eye - skew(v_e), quat_to_matrix(q_hat)
    )
    return r, j_cur, j_prev


def image_residual(
    pose: Pose, point3d: np.ndarray, matched: np.ndarray, weight: float, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Single-correspondence residual and 2x6 Jacobian (for validation)."""
    r, ok, jac = _image_forward(
        pose.t[None, :],
        pose.q[None, :],
        np.zeros(1, np.int64),
        np.asarray(point3d, float)[None, :],
        np.asarray(matched, float)[None, :],
        np.array([weight], float),
        k,
        True,
    )
    if not ok[0]:
        raise ValueError("point is behind the camera")
    return r[0], jac[0]


def relative_residual(
    current: Pose,
    previous: Pose,
    measurement: RelativePose,
    sqrt_bt: float,
    sqrt_br: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-pair residual and 6x6 Jacobians w.r.t. current and previous."""
    t = np.stack([previous.t, current.t])
    q = np.stack([previous.q, current.q])
    r, j_cur, j_prev = _relative_forward(
        t, q, measurement.t_rel[None, :], measurement.q_rel[None, :], sqrt_bt, sqrt_br, True
    )
    return r[0], j_cur[0], j_prev[0]


def _segment_sum(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of `values` (m, d) into n bins given by idx."""
    flat = values.reshape(values.shape[0], -1)
    out = np.empty((n, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(idx, weights=flat[:, j], minlength=n)
    return out.reshape((n,) + values.shape[1:])


@dataclass
class _Stacked:
    kf_idx: np.ndarray
    points3d: np.ndarray
    matched: np.ndarray
    weights: np.ndarray
    is_point: np.ndarray

    @property
    def count(self) -> int:
        return self.kf_idx.shape[0]


class PoseGraph:
    """Single-writer pose graph over keyframes of one flight."""

    def __init__(
        self,
        skeleton: TurbineSkeleton,
        subdivided: SubdividedModel,
        camera: CameraIntrinsics,
        weights: GraphWeights | None = None,
        match_cfg: MatchConfig | None = None,
    ):
        self.skeleton = skeleton
        self.subdivided = subdivided
        self.camera = camera
        self.weights = weights or GraphWeights()
        self.match_cfg = match_cfg or MatchConfig()
        self.keyframes: list[Keyframe] = []
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, FrameMatches]] = {}

    def __len__(self):
        return len(self.keyframes)

    def add_keyframe(self, measured_pose: Pose, frame: HeatmapFrame) -> int:
        """Append a keyframe; derive the relative measurement and seed the estimate."""
        kf_id = len(self.keyframes)
        if kf_id == 0:
            kf = Keyframe(0, measured_pose, None, frame, measured_pose)
        else:
            prev = self.keyframes[-1]
            rel = relative_pose(measured_pose, prev.measured_pose)
            estimate = compose(prev.estimate, rel.as_pose().inverse())
            kf = Keyframe(kf_id, measured_pose, rel, frame, estimate)
        self.keyframes.append(kf)
        return kf_id

    def estimates(self) -> list[Pose]:
        return [kf.estimate for kf in self.keyframes]

    # -- correspondence management -------------------------------------------

    def _matches_for(self, i: int, t: np.ndarray, q: np.ndarray, tol_t: float, tol_r: float) -> FrameMatches:
        kf = self.keyframes[i]
        cached = self._cache.get(kf.id)
        if cached is not None:
            t0, q0, m = cached
            if (
                np.linalg.norm(t - t0) <= tol_t
                and geodesic_angle(q, q0) <= tol_r
            ):
                return m
        m = match_frame_arrays(
            self.skeleton, self.subdivided, Pose(t, q), self.camera, kf.frame, self.match_cfg
        )
        self._cache[kf.id] = (t.copy(), q.copy(), m)
        return m

    def _stack(self, matches: list[FrameMatches]) -> _Stacked:
        idx, pts, mat, wts, isp = [], [], [], [], []
        sp = np.sqrt(self.weights.beta_p)
        sl = np.sqrt(self.weights.beta_line)
        for i, m in enumerate(matches):
            if len(m) == 0:
                continue
            idx.append(np.full(len(m), i, np.int64))
            pts.append(m.points3d)
            mat.append(m.matched)
            point_mask = m.kinds == int(CorrespondenceKind.POINT)
            wts.append(np.where(point_mask, sp, sl))
            isp.append(point_mask)
        if not idx:
            return _Stacked(
                np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, bool)
            )
        return _Stacked(
            np.concatenate(idx),
            np.vstack(pts),
            np.vstack(mat),
            np.concatenate(wts),
            np.concatenate(isp),
        )

    def _measurement_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        rels = [kf.relative_measurement for kf in self.keyframes[1:]]
        if not rels:
            return np.zeros((0, 3)), np.zeros((0, 4))
        return np.stack([r.t_rel for r in rels]), np.stack([r.q_rel for r in rels])

    # -- cost -----------------------------------------------------------------

    def _cost_of(self, t, q, stacked: _Stacked, meas_t, meas_q) -> float:
        sqrt_bt = np.sqrt(self.weights.beta_t)
        sqrt_br = np.sqrt(self.weights.beta_rot)
        cost = 0.0
        if stacked.count:
            r, ok, _ = _image_forward(
                t, q, stacked.kf_idx, stacked.points3d, stacked.matched, stacked.weights, self.camera, False
            )
            if not ok.all():
                return np.inf
            cost += float(np.sum(r * r))
        if meas_t.shape[0]:
            r, _, _ = _relative_forward(t, q, meas_t, meas_q, sqrt_bt, sqrt_br, False)
            cost += float(np.sum(r * r))
        return cost

    def total_cost(self) -> CostBreakdown:
        """Re-match all frames at the current estimates and evaluate the objective."""
        if not self.keyframes:
            raise ValueError("empty graph")
        t = np.array([kf.estimate.t for kf in self.keyframes])
        q = np.array([kf.estimate.q for kf in self.keyframes])
        matches = [
            match_frame_arrays(
                self.skeleton, self.subdivided, kf.estimate, self.camera, kf.frame, self.match_cfg
            )
            for kf in self.keyframes
        ]
        stacked = self._stack(matches)
        point_cost = line_cost = 0.0
        if stacked.count:
            r, ok, _ = _image_forward(
                t, q, stacked.kf_idx, stacked.points3d, stacked.matched, stacked.weights, self.camera, False
            )
            sq = np.sum(r * r, axis=1)
            sq = np.where(ok, sq, np.inf)
            point_cost = float(np.sum(sq[stacked.is_point]))
            line_cost = float(np.sum(sq[~stacked.is_point]))
        relative_cost = 0.0
        meas_t, meas_q = self._measurement_arrays()
        if meas_t.shape[0]:
            r, _, _ = _relative_forward(
                t, q, meas_t, meas_q, np.sqrt(self.weights.beta_t), np.sqrt(self.weights.beta_rot), False
            )
            relative_cost = float(np.sum(r * r))
        return CostBreakdown(
            total=relative_cost + point_cost + line_cost,
            relative_cost=relative_cost,
            point_cost=point_cost,
            line_cost=line_cost,
            n_point_correspondences=int(np.sum(stacked.is_point)),
            n_line_correspondences=int(np.sum(~stacked.is_point)) if stacked.count else 0,
        )

    # -- Gauss-Newton ----------------------------------------------------------

    def _normal_equations(self, t, q, stacked: _Stacked, meas_t, meas_q):
        n = len(self.keyframes)
        h_diag = np.zeros((n, 6, 6))
        h_off = np.zeros((max(n - 1, 0), 6, 6))
        g = np.zeros((n, 6))
        cost = 0.0
        if stacked.count:
            r, ok, jac = _image_forward(
                t, q, stacked.kf_idx, stacked.points3d, stacked.matched, stacked.weights, self.camera, True
            )
            if not ok.all():
                return None  # caller re-matches: a cached point fell behind the camera
            cost += float(np.sum(r * r))
            jj = np.einsum("mka,mkb->mab", jac, jac)
            jr = np.einsum("mka,mk->ma", jac, r)
            h_diag += _segment_sum(jj, stacked.kf_idx, n)
            g += _segment_sum(jr, stacked.kf_idx, n)
        if n > 1:
            sqrt_bt = np.sqrt(self.weights.beta_t)
            sqrt_br = np.sqrt(self.weights.beta_rot)
            r, j_cur, j_prev = _relative_forward(t, q, meas_t, meas_q, sqrt_bt, sqrt_br, True)
            cost += float(np.sum(r * r))
            h_diag[1:] += np.einsum("ikp,ikq->ipq", j_cur, j_cur)
            h_diag[:-1] += np.einsum("ikp,ikq->ipq", j_prev, j_prev)
            h_off += np.einsum("ikp,ikq->ipq", j_prev, j_cur)
            g[1:] += np.einsum("ikp,ik->ip", j_cur, r)
            g[:-1] += np.einsum("ikp,ik->ip", j_prev, r)
        return h_diag, h_off, g, cost

    @staticmethod
    def _solve_banded(h_diag, h_off, g, damping):
        n = h_diag.shape[0]
        bandwidth = min(11, 6 * n - 1)
        ab = np.zeros((bandwidth + 1, 6 * n))
        for a in range(6):
            for b in range(a + 1):
                ab[a - b, b::6] = h_diag[:, a, b]
        if n > 1:
            for p in range(6):
                for qq in range(6):
                    ab[6 + p - qq, qq::6][: n - 1] = h_off[:, qq, p]
        ab[0, :] += damping
        delta = solveh_banded(ab, -g.ravel(), lower=True)
        return delta.reshape(n, 6)

    def optimize(self, solver_cfg: SolverConfig | None = None) -> OptimizeReport:
        """Damped Gauss-Newton over all keyframe estimates."""
        cfg = solver_cfg or SolverConfig()
        if not self.keyframes:
            raise ValueError("empty graph")
        n = len(self.keyframes)
        t = np.array([kf.estimate.t for kf in self.keyframes])
        q = np.array([kf.estimate.q for kf in self.keyframes])
        meas_t, meas_q = self._measurement_arrays()
        lam = max(cfg.damping_floor, 0.0)
        costs: list[float] = []
        initial_cost = None
        termination = "max_iterations"
        iterations = 0
        n_corr = 0

        for _ in range(cfg.max_iterations):
            matches = [
                self._matches_for(i, t[i], q[i], cfg.rematch_tol_t, cfg.rematch_tol_r)
                for i in range(n)
            ]
            stacked = self._stack(matches)
            n_corr = stacked.count
            if n_corr == 0:
                # only relative constraints remain: the global gauge is free
                cost = self._cost_of(t, q, stacked, meas_t, meas_q)
                if initial_cost is None:
                    initial_cost = cost
                    costs.append(cost)
                termination = "rank_deficient"
                break
            built = self._normal_equations(t, q, stacked, meas_t, meas_q)
            if built is None:
                for i in range(n):  # stale cache: force a clean re-match
                    self._cache.pop(self.keyframes[i].id, None)
                continue
            h_diag, h_off, g, cost0 = built
            if initial_cost is None:
                initial_cost = cost0
                costs.append(cost0)

            accepted = False
            solved = False
            delta = None
            cost1 = cost0
            for _trial in range(14):
                try:
                    delta = self._solve_banded(h_diag, h_off, g, lam)
                except LinAlgError:
                    lam = max(lam * 10.0, 1e-10)
                    continue
                if not np.all(np.isfinite(delta)):
                    lam = max(lam * 10.0, 1e-10)
                    continue
                solved = True
                t_new = t + delta[:, :3]
                q_new = quat_normalize(quat_multiply(q, quat_from_rotvec(delta[:, 3:])))
                cost1 = self._cost_of(t_new, q_new, stacked, meas_t, meas_q)
                if np.isfinite(cost1) and cost1 <= cost0:
                    accepted = True
                    break
                lam = max(lam * 10.0, 1e-10)
            if not accepted:
                termination = "no_descent" if solved else "solve_failure"
                break

            t, q = t_new, q_new
            iterations += 1
            costs.append(cost1)
            lam = max(lam / 3.0, cfg.damping_floor)
            if float(np.linalg.norm(delta)) < cfg.step_tolerance:
                termination = "step_tolerance"
                break
            if abs(cost0 - cost1) <= cfg.cost_tolerance * max(cost0, 1e-300):
                termination = "cost_tolerance"
                break

        if initial_cost is None:
            initial_cost = float("nan")
        if iterations > 0:  # zero accepted steps leaves the estimates untouched
            for i, kf in enumerate(self.keyframes):
                kf.estimate = Pose(t[i], q[i])
        final_cost = costs[-1] if costs else float("nan")
        return OptimizeReport(
            iterations=iterations,
            initial_cost=float(initial_cost),
            final_cost=float(final_cost),
            termination=termination,
            costs=[float(c) for c in costs],
            n_correspondences=int(n_corr),
        )
