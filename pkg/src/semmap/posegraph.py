"""Pose graph with landmark reprojection factors, solved by
Levenberg-Marquardt on sparse normal equations.

State: one 6-dof node per camera frame (retracted on the right,
pose * exp([rho, phi])) and one 3-dof node per landmark. Factors:

* prior on the first pose (gauge fixing), residual log(P^-1 X)
* odometry between consecutive or loop frames, residual
  log(Z^-1 X_i^-1 X_j) split as [translation, rotation vector]
* pixel observations of landmarks, residual proj(X^-1 l) - z with a
  Huber kernel; observations whose landmark sits behind the camera at
  the linearization point are deactivated for that iteration

The normal equations are assembled sparsely; at the few-hundred-pose
scale of a desk scan a sparse LU factorization solves them in
milliseconds where a dense factorization would dominate the runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import SingularSystemError, UnknownNodeError
from .geometry import CameraIntrinsics, Pose, rotvec_from_quat

_Z_EPS = 1e-9


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _inv_right_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the SO(3) log map.

    d/d eps log(R exp(eps)) = Jr_inv(log R). Series expansion below
    1e-6 rad keeps it smooth through zero.
    """
    theta2 = float(phi @ phi)
    w = _skew(phi)
    if theta2 < 1e-12:
        return np.eye(3) + 0.5 * w + (1.0 / 12.0) * (w @ w)
    theta = math.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * w + coef * (w @ w)


def _pose_error(meas: Pose, delta: Pose) -> tuple[np.ndarray, Pose]:
    """Residual [t, rotvec] of meas^-1 * delta and the error pose."""
    err = meas.inverse().compose(delta)
    return np.concatenate([err.translation, rotvec_from_quat(err.rotation)]), err


# ----------------------------------------------------------------------
# batched counterparts of the per-factor math above; the solver
# evaluates hundreds of factors per iteration, so the inner loop works
# on stacked arrays and only materializes Pose objects on exit
# ----------------------------------------------------------------------

def _bskew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _bquat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _bquat_conj(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _bquat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def _bquat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def _brotvec_from_quat(q: np.ndarray) -> np.ndarray:
    q = np.where(q[..., :1] < 0.0, -q, q)  # keep the angle in [0, pi]
    v = q[..., 1:]
    sin_half = np.linalg.norm(v, axis=-1)
    small = sin_half < 1e-12
    safe = np.where(small, 1.0, sin_half)
    scale = np.where(small, 2.0, 2.0 * np.arctan2(sin_half, q[..., 0]) / safe)
    return scale[..., None] * v


def _bquat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rv, axis=-1)
    small = angle < 1e-12
    safe = np.where(small, 1.0, angle)
    # second order series of sin(a/2)/a keeps this smooth through zero
    half = np.where(small, 0.5 - angle * angle / 48.0, np.sin(safe / 2.0) / safe)
    out = np.concatenate([np.cos(angle / 2.0)[..., None], half[..., None] * rv], axis=-1)
    return _bquat_normalize(out)


def _binv_right_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ni,ni->n", phi, phi)
    w = _bskew(phi)
    ww = np.einsum("nab,nbc->nac", w, w)
    small = theta2 < 1e-12
    theta = np.sqrt(np.where(small, 1.0, theta2))
    sin_t = np.sin(theta)
    denom = np.where(small, 1.0, 2.0 * theta * sin_t)
    coef = np.where(
        small, 1.0 / 12.0, 1.0 / np.where(small, 1.0, theta2) - (1.0 + np.cos(theta)) / denom
    )
    return np.eye(3) + 0.5 * w + coef[:, None, None] * ww


def odometry_residual_jacobians(
    pose_i: Pose, pose_j: Pose, meas: Pose
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual (6,) and Jacobians (6, 6) wrt right perturbations of i, j.

    With Delta = X_i^-1 X_j and E = Z^-1 Delta:
      dr_t/drho_j = E.R, dr_phi/dphi_j = Jr_inv(r_phi)
      dr_t/drho_i = -R_z^T, dr_t/dphi_i = R_z^T [Delta.t]x
      dr_phi/dphi_i = -Jr_inv(r_phi) Delta.R^T, remaining blocks zero.
    """
    delta = pose_i.inverse().compose(pose_j)
    r, err = _pose_error(meas, delta)
    rz_t = meas.rotation_matrix().T
    delta_r = delta.rotation_matrix()
    jr_inv = _inv_right_jacobian_so3(r[3:])

    j_i = np.zeros((6, 6))
    j_i[:3, :3] = -rz_t
    j_i[:3, 3:] = rz_t @ _skew(delta.translation)
    j_i[3:, 3:] = -jr_inv @ delta_r.T

    j_j = np.zeros((6, 6))
    j_j[:3, :3] = err.rotation_matrix()
    j_j[3:, 3:] = jr_inv
    return r, j_i, j_j


def prior_residual_jacobian(pose: Pose, prior: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Residual (6,) and Jacobian (6, 6) of log(P^-1 X) wrt X."""
    r, err = _pose_error(prior, pose)
    j = np.zeros((6, 6))
    j[:3, :3] = err.rotation_matrix()
    j[3:, 3:] = _inv_right_jacobian_so3(r[3:])
    return r, j


def observation_residual_jacobians(
    pose: Pose, landmark: np.ndarray, pixel: np.ndarray, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
    """Residual (2,) plus Jacobians wrt pose (2, 6) and landmark (2, 3).

    Returns None when the landmark is behind the camera (factor
    deactivated). With p = R^T (l - t):
      dp/drho = -I, dp/dphi = [p]x, dp/dl = R^T
      dr/dp = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]].
    """
    rot = pose.rotation_matrix()
    p = rot.T @ (np.asarray(landmark, dtype=float) - pose.translation)
    if p[2] <= _Z_EPS:
        return None
    x, y, z = p
    r = np.array([k.fx * x / z + k.cx - pixel[0], k.fy * y / z + k.cy - pixel[1]])
    j_pi = np.array(
        [[k.fx / z, 0.0, -k.fx * x / (z * z)], [0.0, k.fy / z, -k.fy * y / (z * z)]]
    )
    j_pose = j_pi @ np.hstack([-np.eye(3), _skew(p)])
    j_lm = j_pi @ rot.T
    return r, j_pose, j_lm


@dataclass(frozen=True)
class OdometryFactor:
    from_id: int
    to_id: int
    rel: Pose
    information: np.ndarray  # (6, 6)


@dataclass(frozen=True)
class ObservationFactor:
    pose_id: int
    landmark_id: int
    pixel: np.ndarray  # (2,)
    information: np.ndarray  # (2, 2)


@dataclass(frozen=True)
class PriorFactor:
    pose_id: int
    pose: Pose
    information: np.ndarray  # (6, 6)


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    min_rel_decrease: float = 1e-9
    gradient_tol: float = 1e-10
    lambda_init: float = 1e-6
    lambda_up: float = 10.0
    lambda_down: float = 0.3
    lambda_max: float = 1e12
    huber_scale_px: float = 5.0


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    lambda_trace: list[float] = field(default_factory=list)
    cost_trace: list[float] = field(default_factory=list)
    deactivated_observations: int = 0


DEFAULT_PRIOR_INFORMATION = np.eye(6) * 1e8
DEFAULT_ODOMETRY_INFORMATION = np.eye(6) * 1e4


class PoseGraph:
    """Mutable graph; estimates live in public dicts keyed by id."""

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.poses: dict[int, Pose] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        self.prior: PriorFactor | None = None
        self.odometry: list[OdometryFactor] = []
        self.observations: list[ObservationFactor] = []

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def add_prior(self, pose_id: int, pose: Pose, information: np.ndarray | None = None) -> None:
        if self.prior is not None:
            raise ValueError("graph already has its gauge prior")
        info = DEFAULT_PRIOR_INFORMATION if information is None else np.asarray(information, float)
        self.prior = PriorFactor(pose_id, pose, info)
        self.poses.setdefault(pose_id, pose)

    def add_odometry(
        self, from_id: int, to_id: int, rel: Pose, information: np.ndarray | None = None
    ) -> None:
        """Relative-motion factor; initializes a missing `to` node by
        composing the `from` estimate with the measurement."""
        if from_id not in self.poses:
            raise UnknownNodeError(f"odometry from unknown pose {from_id}")
        info = DEFAULT_ODOMETRY_INFORMATION if information is None else np.asarray(information, float)
        self.odometry.append(OdometryFactor(from_id, to_id, rel, info))
        if to_id not in self.poses:
            self.poses[to_id] = self.poses[from_id].compose(rel)

    def add_observation(
        self,
        pose_id: int,
        landmark_id: int,
        pixel: np.ndarray,
        information: np.ndarray,
        landmark_position: np.ndarray | None = None,
    ) -> None:
        """Pixel observation; first reference must supply a landmark
        position to initialize the node."""
        if pose_id not in self.poses:
            raise UnknownNodeError(f"observation from unknown pose {pose_id}")
        if landmark_id not in self.landmarks:
            if landmark_position is None:
                raise UnknownNodeError(
                    f"landmark {landmark_id} has no node and no initial position"
                )
            self.landmarks[landmark_id] = np.asarray(landmark_position, float).copy()
        self.observations.append(
            ObservationFactor(
                pose_id, landmark_id, np.asarray(pixel, float).copy(),
                np.asarray(information, float).copy(),
            )
        )

    def merge_landmarks(self, old_id: int, kept_id: int) -> None:
        """Re-point factors of a merged-away landmark at the survivor."""
        if old_id not in self.landmarks:
            return
        if kept_id not in self.landmarks:
            self.landmarks[kept_id] = self.landmarks.pop(old_id)
        else:
            del self.landmarks[old_id]
        self.observations = [
            ObservationFactor(f.pose_id, kept_id, f.pixel, f.information)
            if f.landmark_id == old_id else f
            for f in self.observations
        ]

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def _huber(self, chi2: float, info: np.ndarray, scale_px: float) -> tuple[float, float]:
        """(cost, reweight) for one observation residual.

        chi is compared against the scale converted to whitened units
        via the leading information entry (isotropic in practice).
        """
        k = scale_px * math.sqrt(info[0, 0])
        chi = math.sqrt(max(chi2, 0.0))
        if chi <= k:
            return chi2, 1.0
        return 2.0 * k * chi - k * k, k / chi

    def cost(self, cfg: OptimizerConfig | None = None) -> float:
        """Total (robustified) cost at the current estimates."""
        cfg = cfg or OptimizerConfig()
        total = 0.0
        if self.prior is not None and self.prior.pose_id in self.poses:
            r, _ = _pose_error(self.prior.pose, self.poses[self.prior.pose_id])
            total += float(r @ self.prior.information @ r)
        for f in self.odometry:
            delta = self.poses[f.from_id].inverse().compose(self.poses[f.to_id])
            r, _ = _pose_error(f.rel, delta)
            total += float(r @ f.information @ r)
        for f in self.observations:
            out = observation_residual_jacobians(
                self.poses[f.pose_id], self.landmarks[f.landmark_id], f.pixel,
                self.intrinsics,
            )
            if out is None:
                continue
            r = out[0]
            chi2 = float(r @ f.information @ r)
            c, _ = self._huber(chi2, f.information, cfg.huber_scale_px)
            total += c
        return total

    def _prepare_factors(self, pose_pos: dict[int, int], lm_pos: dict[int, int]):
        """Stack factor constants into arrays indexed by node position."""
        static: dict[str, np.ndarray] = {}
        odo = self.odometry
        static["odo_i"] = np.array([pose_pos[f.from_id] for f in odo], dtype=int)
        static["odo_j"] = np.array([pose_pos[f.to_id] for f in odo], dtype=int)
        if odo:
            qz = np.stack([f.rel.rotation for f in odo])
            static["odo_qz_conj"] = _bquat_conj(qz)
            static["odo_rz_t"] = np.transpose(_bquat_to_matrix(qz), (0, 2, 1))
            static["odo_tz"] = np.stack([f.rel.translation for f in odo])
            static["odo_info"] = np.stack([f.information for f in odo])
        obs = self.observations
        static["obs_p"] = np.array([pose_pos[f.pose_id] for f in obs], dtype=int)
        static["obs_l"] = np.array([lm_pos[f.landmark_id] for f in obs], dtype=int)
        if obs:
            static["obs_px"] = np.stack([f.pixel for f in obs])
            static["obs_info"] = np.stack([f.information for f in obs])
            static["obs_k"] = np.sqrt(static["obs_info"][:, 0, 0])
        return static

    def _linearize_arrays(self, q, t, lm, static, cfg: OptimizerConfig, dim: int):
        """Normal equations H, gradient g, robust cost and the count of
        behind-camera observations, all at the array-valued state."""
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        g = np.zeros(dim)
        total_cost = 0.0
        deactivated = 0
        n_pose = q.shape[0]
        rot_all = _bquat_to_matrix(q)

        def scatter(offs_a, offs_b, blocks):
            n, da, db = blocks.shape
            r_idx = offs_a[:, None, None] + np.arange(da)[None, :, None]
            c_idx = offs_b[:, None, None] + np.arange(db)[None, None, :]
            rows.append(np.broadcast_to(r_idx, blocks.shape).ravel())
            cols.append(np.broadcast_to(c_idx, blocks.shape).ravel())
            vals.append(blocks.ravel())

        def accumulate(offs_and_jacs, r, w_info):
            """offs_and_jacs: [(dof offsets (n,), jacobian (n, res, dof))]."""
            info_r = np.einsum("nij,nj->ni", w_info, r)
            for offs_a, j_a in offs_and_jacs:
                ga = np.einsum("nra,nr->na", j_a, info_r)
                np.add.at(g, offs_a[:, None] + np.arange(j_a.shape[2])[None, :], ga)
                half = np.einsum("nra,nrs->nas", j_a, w_info)
                for offs_b, j_b in offs_and_jacs:
                    scatter(offs_a, offs_b, np.einsum("nas,nsb->nab", half, j_b))

        if self.prior is not None:
            pos = static["prior_pos"]
            pose = Pose(q[pos], t[pos])
            r, j = prior_residual_jacobian(pose, self.prior.pose)
            off = np.array([6 * pos])
            accumulate([(off, j[None])], r[None], self.prior.information[None])
            total_cost += float(r @ self.prior.information @ r)

        if static["odo_i"].size:
            idx_i, idx_j = static["odo_i"], static["odo_j"]
            qi, qj = q[idx_i], q[idx_j]
            ri = rot_all[idx_i]
            td = np.einsum("nba,nb->na", ri, t[idx_j] - t[idx_i])
            qd = _bquat_normalize(_bquat_mul(_bquat_conj(qi), qj))
            qe = _bquat_normalize(_bquat_mul(static["odo_qz_conj"], qd))
            rz_t = static["odo_rz_t"]
            te = np.einsum("nab,nb->na", rz_t, td - static["odo_tz"])
            phi = _brotvec_from_quat(qe)
            r = np.concatenate([te, phi], axis=1)
            jr_inv = _binv_right_jacobian_so3(phi)
            n = r.shape[0]
            j_i = np.zeros((n, 6, 6))
            j_i[:, :3, :3] = -rz_t
            j_i[:, :3, 3:] = np.einsum("nab,nbc->nac", rz_t, _bskew(td))
            j_i[:, 3:, 3:] = -np.einsum("nab,ncb->nac", jr_inv, _bquat_to_matrix(qd))
            j_j = np.zeros((n, 6, 6))
            j_j[:, :3, :3] = _bquat_to_matrix(qe)
            j_j[:, 3:, 3:] = jr_inv
            info = static["odo_info"]
            accumulate([(6 * idx_i, j_i), (6 * idx_j, j_j)], r, info)
            total_cost += float(np.einsum("ni,nij,nj->", r, info, r))

        if static["obs_p"].size:
            idx_p, idx_l = static["obs_p"], static["obs_l"]
            rot = rot_all[idx_p]
            p = np.einsum("nba,nb->na", rot, lm[idx_l] - t[idx_p])
            active = p[:, 2] > _Z_EPS
            deactivated = int(np.count_nonzero(~active))
            if np.any(active):
                p = p[active]
                rot = rot[active]
                px = static["obs_px"][active]
                info = static["obs_info"][active]
                k = self.intrinsics
                x, y, z = p[:, 0], p[:, 1], p[:, 2]
                r = np.stack(
                    [k.fx * x / z + k.cx - px[:, 0], k.fy * y / z + k.cy - px[:, 1]],
                    axis=1,
                )
                m = r.shape[0]
                j_pi = np.zeros((m, 2, 3))
                j_pi[:, 0, 0] = k.fx / z
                j_pi[:, 0, 2] = -k.fx * x / (z * z)
                j_pi[:, 1, 1] = k.fy / z
                j_pi[:, 1, 2] = -k.fy * y / (z * z)
                lift = np.concatenate(
                    [np.broadcast_to(-np.eye(3), (m, 3, 3)), _bskew(p)], axis=2
                )
                j_pose = np.einsum("nab,nbc->nac", j_pi, lift)
                j_lm = np.einsum("nab,ncb->nac", j_pi, rot)
                chi2 = np.maximum(np.einsum("ni,nij,nj->n", r, info, r), 0.0)
                chi = np.sqrt(chi2)
                hk = cfg.huber_scale_px * static["obs_k"][active]
                inlier = chi <= hk
                w = np.where(inlier, 1.0, hk / np.maximum(chi, 1e-300))
                total_cost += float(
                    np.sum(np.where(inlier, chi2, 2.0 * hk * chi - hk * hk))
                )
                accumulate(
                    [(6 * idx_p[active], j_pose), (6 * n_pose + 3 * idx_l[active], j_lm)],
                    r, info * w[:, None, None],
                )

        h = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(dim, dim),
        ).tocsc()
        return h, g, total_cost, deactivated

    # ------------------------------------------------------------------
    # solve
    # ------------------------------------------------------------------

    def optimize(
        self, cfg: OptimizerConfig | None = None, fix_poses: bool = False
    ) -> SolveReport:
        """Levenberg-Marquardt until convergence or max_iterations.

        Accepted steps strictly decrease the cost; the report carries
        the accepted damping values and the cost after each accepted
        step.

        fix_poses treats every pose as a hard constraint and solves
        only for landmark positions. This is the exact limit of
        infinite odometry information: a floor on the information
        matrix would still let pixel residuals bend the soft long-chain
        modes of a perfectly consistent trajectory.
        """
        cfg = cfg or OptimizerConfig()
        if self.prior is None:
            raise SingularSystemError("graph has no gauge prior")
        pose_ids = sorted(self.poses)
        lm_ids = sorted(self.landmarks)
        pose_pos = {pid: i for i, pid in enumerate(pose_ids)}
        lm_pos = {lid: i for i, lid in enumerate(lm_ids)}
        base = 6 * len(pose_ids)
        dim = base + 3 * len(lm_ids)
        static = self._prepare_factors(pose_pos, lm_pos)
        static["prior_pos"] = pose_pos[self.prior.pose_id]

        q = np.stack([self.poses[pid].rotation for pid in pose_ids])
        t = np.stack([self.poses[pid].translation for pid in pose_ids])
        lm = (
            np.stack([self.landmarks[lid] for lid in lm_ids])
            if lm_ids else np.zeros((0, 3))
        )

        lam = cfg.lambda_init
        report = SolveReport(0, 0.0, 0.0, False)
        h, g, cost_now, deact = self._linearize_arrays(q, t, lm, static, cfg, dim)
        report.initial_cost = cost_now
        report.cost_trace.append(cost_now)
        report.deactivated_observations = deact

        lo = base if fix_poses else 0

        def active(h_full, g_full):
            if fix_poses:
                return h_full[base:, base:].tocsc(), g_full[base:]
            return h_full, g_full

        # structural rank check: every node must be referenced by some
        # factor. A zero diagonal from behind-camera deactivation is
        # repairable (damping freezes the block for that iteration) and
        # must not raise.
        cov_pose = np.zeros(len(pose_ids), dtype=bool)
        cov_pose[static["prior_pos"]] = True
        cov_pose[static["odo_i"]] = True
        cov_pose[static["odo_j"]] = True
        cov_pose[static["obs_p"]] = True
        cov_lm = np.zeros(len(lm_ids), dtype=bool)
        cov_lm[static["obs_l"]] = True
        if not fix_poses and not np.all(cov_pose):
            pid = pose_ids[int(np.argmin(cov_pose))]
            raise SingularSystemError(f"pose {pid} has no factor")
        if not np.all(cov_lm):
            lid = lm_ids[int(np.argmin(cov_lm))]
            raise SingularSystemError(f"landmark {lid} has no factor")

        h_a, g_a = active(h, g)
        diag = h_a.diagonal()

        for _ in range(cfg.max_iterations):
            gmax = float(np.max(np.abs(g_a))) if g_a.size else 0.0
            if gmax < cfg.gradient_tol:
                report.converged = True
                break
            accepted = False
            while lam <= cfg.lambda_max:
                damped = h_a + scipy.sparse.diags(np.maximum(diag, 1e-12) * lam)
                try:
                    solved = scipy.sparse.linalg.splu(damped.tocsc()).solve(-g_a)
                except RuntimeError:
                    lam *= cfg.lambda_up
                    continue
                if not np.all(np.isfinite(solved)):
                    lam *= cfg.lambda_up
                    continue
                delta = np.zeros(dim)
                delta[lo:] = solved
                dp = delta[:base].reshape(-1, 6)
                # right retraction, pose * exp(delta): the translation
                # step is expressed in the pose frame
                q_new = _bquat_normalize(_bquat_mul(q, _bquat_from_rotvec(dp[:, 3:])))
                t_new = t + np.einsum("nab,nb->na", _bquat_to_matrix(q), dp[:, :3])
                lm_new = lm + delta[base:].reshape(-1, 3)
                h2, g2, cost_new, deact = self._linearize_arrays(
                    q_new, t_new, lm_new, static, cfg, dim
                )
                if cost_new < cost_now:
                    q, t, lm = q_new, t_new, lm_new
                    h_a, g_a = active(h2, g2)
                    diag = h_a.diagonal()
                    report.iterations += 1
                    report.lambda_trace.append(lam)
                    report.cost_trace.append(cost_new)
                    report.deactivated_observations = deact
                    lam = max(lam * cfg.lambda_down, 1e-15)
                    accepted = True
                    prev_cost, cost_now = cost_now, cost_new
                    break
                lam *= cfg.lambda_up
            if not accepted:
                # damping exhausted without an acceptable step: stalled
                gmax = float(np.max(np.abs(g_a))) if g_a.size else 0.0
                report.converged = gmax < math.sqrt(cfg.gradient_tol)
                break
            if abs(prev_cost - cost_now) <= cfg.min_rel_decrease * max(prev_cost, 1e-300):
                report.converged = True
                break
        else:
            report.converged = False
        self.poses = {pid: Pose(q[i], t[i]) for i, pid in enumerate(pose_ids)}
        self.landmarks = {lid: lm[i].copy() for i, lid in enumerate(lm_ids)}
        report.final_cost = cost_now
        return report

    # ------------------------------------------------------------------
    # exports
    # ------------------------------------------------------------------

    def trajectory(self) -> list[tuple[int, Pose]]:
        return [(pid, self.poses[pid]) for pid in sorted(self.poses)]

    def landmark_positions(self) -> dict[int, np.ndarray]:
        return {lid: pos.copy() for lid, pos in self.landmarks.items()}


def apply_correction(graph: PoseGraph, landmark_map) -> None:
    """Write optimized landmark positions back into the registry."""
    landmark_map.apply_centroids(graph.landmark_positions())
