"""Independent reference implementations used by several test modules.

Everything here is written deliberately differently from the package
internals (explicit loops, different algorithms) so the two routes can
cross-check each other.
"""

import math

import numpy as np


def pinhole_uv(point_world, pose, k):
    """Scalar pinhole projection via explicit matrix algebra."""
    r = pose.rotation_matrix()
    p_cam = r.T @ (np.asarray(point_world, dtype=float) - pose.translation)
    if p_cam[2] <= 0:
        return None
    return np.array(
        [k.fx * p_cam[0] / p_cam[2] + k.cx, k.fy * p_cam[1] / p_cam[2] + k.cy]
    )


def loop_log_likelihood(x, centers, poses, k, cov):
    """Plain double-loop likelihood with per-view scalar math."""
    info = np.linalg.inv(cov)
    log_norm = -math.log(2.0 * math.pi) - 0.5 * math.log(np.linalg.det(cov))
    total = 0.0
    for center, pose in zip(centers, poses):
        uv = pinhole_uv(x, pose, k)
        if uv is None:
            return -math.inf
        r = uv - np.asarray(center, dtype=float)
        total += -0.5 * float(r @ info @ r) + log_norm
    return total


def grid_search_max(centers, poses, k, cov, around, half=0.5, step=0.01):
    """Dense grid argmax of the likelihood over a cube around `around`.

    Vectorized per grid axis chunk but algorithmically independent of
    the package evaluator (explicit per-view rotation application).
    """
    around = np.asarray(around, dtype=float)
    axis = np.arange(-half, half + step / 2, step)
    info = np.linalg.inv(cov)
    best_val = -math.inf
    best_pt = None
    yy, zz = np.meshgrid(axis, axis, indexing="ij")
    flat_yz = np.column_stack([yy.ravel(), zz.ravel()])
    for dx in axis:
        pts = np.column_stack(
            [np.full(len(flat_yz), dx), flat_yz[:, 0], flat_yz[:, 1]]
        ) + around
        ll = np.zeros(len(pts))
        valid = np.ones(len(pts), dtype=bool)
        for center, pose in zip(centers, poses):
            rot = pose.rotation_matrix()
            p_cam = (pts - pose.translation) @ rot
            z = p_cam[:, 2]
            valid &= z > 0
            z = np.where(z > 0, z, 1.0)
            ru = k.fx * p_cam[:, 0] / z + k.cx - center[0]
            rv = k.fy * p_cam[:, 1] / z + k.cy - center[1]
            ll += -0.5 * (
                info[0, 0] * ru * ru + 2 * info[0, 1] * ru * rv + info[1, 1] * rv * rv
            )
        ll[~valid] = -math.inf
        i = int(np.argmax(ll))
        if ll[i] > best_val:
            best_val = float(ll[i])
            best_pt = pts[i]
    return best_pt, best_val


def brute_force_nn_mean(query_pts, target_pts):
    """Mean over query points of the distance to the closest target."""
    total = 0.0
    for p in query_pts:
        best = math.inf
        for q in target_pts:
            d = math.dist(p, q)
            if d < best:
                best = d
        total += best
    return total / len(query_pts)


def horn_quaternion_align(src, dst):
    """Closed-form rigid alignment via the quaternion eigen method.

    Independent of the SVD route: builds the 4x4 symmetric matrix whose
    top eigenvector is the rotation quaternion mapping src onto dst.
    Returns (R, t) with dst ~ R @ src + t.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    sxx = a[:, 0] @ b[:, 0]; sxy = a[:, 0] @ b[:, 1]; sxz = a[:, 0] @ b[:, 2]
    syx = a[:, 1] @ b[:, 0]; syy = a[:, 1] @ b[:, 1]; syz = a[:, 1] @ b[:, 2]
    szx = a[:, 2] @ b[:, 0]; szy = a[:, 2] @ b[:, 1]; szz = a[:, 2] @ b[:, 2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    w, v = np.linalg.eigh(n)
    q = v[:, -1]  # eigenvector of the largest eigenvalue
    qw, qx, qy, qz = q
    rot = np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
            [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
            [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )
    t = mu_d - rot @ mu_s
    return rot, t
