"""Landmark candidate generation: cloud extraction, motion gating, MAP
localization.

A promoted tracklet becomes a candidate in three steps. Each measurement
is lifted to a small world-frame cloud (bounded by the box frustum and a
depth window around the range hint). The per-measurement cloud centroids
feed a mean-absolute-deviation gate that rejects moving objects: a
static object re-observed from a moving camera yields nearly coincident
centroids, a walking person does not. Surviving tracklets get a single
3D position by maximizing the measurement likelihood

    ll(X) = sum_t [ -0.5 * (proj(X, pose_t) - z_t)^T S^-1 (proj(..) - z_t) ]
            + T * log norm const,   z_t = box center of measurement t,

seeded by midpoint triangulation of the box-center rays and refined by a
random-walk search that keeps the best sample seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    EmptyCloudError,
    TooFewMeasurementsError,
)
from .geometry import (
    CameraIntrinsics,
    Frame,
    PointCloud,
    Pose,
    Trajectory,
    backproject,
    backproject_pixels,
    centroid,
    merge_clouds,
)
from .tracker import Measurement, Tracklet

# kept clouds must span at least this much so downstream gate radii and
# merge volumes stay positive even for single-point clouds
MIN_SIZE = 1e-3

Sampler = Callable[[Measurement], np.ndarray]


@dataclass(frozen=True)
class PixelNoiseModel:
    """Gaussian pixel noise on box centers, covariance in px^2."""

    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "covariance", cov)

    @staticmethod
    def isotropic(sigma_px: float = 4.0) -> "PixelNoiseModel":
        return PixelNoiseModel(np.eye(2) * sigma_px * sigma_px)


@dataclass(frozen=True)
class RandomWalkConfig:
    """Random-walk refinement of the likelihood maximum.

    The walk proposes Gaussian steps of scale step_sigma from the
    current point and moves only on improvement, so the reported
    maximum never falls below the triangulation seed. burn_in delays
    sample recording; with the keep-best rule the recorded argmax is
    unaffected by it, the field exists for interface stability.
    """

    n_samples: int = 2000
    burn_in: int = 200
    step_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError("need 0 <= burn_in < n_samples")
        if self.step_sigma <= 0:
            raise ValueError("step_sigma must be positive")


@dataclass(frozen=True)
class CentroidEstimate:
    point: np.ndarray
    log_likelihood: float
    seed_point: np.ndarray
    low_confidence: bool


@dataclass(frozen=True)
class Candidate:
    """Validated tracklet with clouds and a localized centroid."""

    tracklet: Tracklet
    clouds: tuple[PointCloud, ...]
    per_measurement_centroids: np.ndarray  # (T, 3)
    map_centroid: np.ndarray  # (3,)
    size_estimate: float
    class_id: str

    def __post_init__(self):
        assert len(self.clouds) > 0
        assert self.size_estimate > 0
        assert np.all(np.isfinite(self.map_centroid))


@dataclass(frozen=True)
class Proposal:
    """Outcome of candidate validation for one promoted tracklet."""

    tracklet: Tracklet
    accepted: bool
    mad: float
    candidate: Candidate | None
    low_confidence: bool = False


# ----------------------------------------------------------------------
# cloud extraction
# ----------------------------------------------------------------------

def cuboid_half_depth(m: Measurement, k: CameraIntrinsics) -> float:
    """Half the metric width the box subtends at its range hint."""
    return 0.5 * m.box.width * m.depth_hint / k.fx


def cuboid_box_sampler(k: CameraIntrinsics, grid: tuple[int, int, int] = (5, 5, 3)) -> Sampler:
    """Deterministic (u, v, depth) grid filling the box frustum slab.

    Cell centers keep every sample strictly inside the box and inside
    the depth window, so extraction never filters them away.
    """
    nu, nv, nd = grid

    def sample(m: Measurement) -> np.ndarray:
        us = m.box.x_min + (np.arange(nu) + 0.5) * m.box.width / nu
        vs = m.box.y_min + (np.arange(nv) + 0.5) * m.box.height / nv
        h = cuboid_half_depth(m, k)
        ds = m.depth_hint - h + (np.arange(nd) + 0.5) * (2.0 * h) / nd
        uu, vv, dd = np.meshgrid(us, vs, ds, indexing="ij")
        return np.column_stack([uu.ravel(), vv.ravel(), dd.ravel()])

    return sample


def extract_clouds(
    tracklet: Tracklet,
    poses: Sequence[Pose],
    k: CameraIntrinsics,
    sampler: Sampler,
) -> list[PointCloud]:
    """World-frame cloud per measurement from sampled (u, v, depth) triples.

    Samples outside the bounding box or beyond the depth window around
    the range hint are dropped; an exhausted measurement raises
    EmptyCloudError.
    """
    if len(poses) != len(tracklet.measurements):
        raise ValueError("one pose per measurement required")
    clouds = []
    for m, pose in zip(tracklet.measurements, poses):
        raw = np.asarray(sampler(m), dtype=float).reshape(-1, 3)
        h = cuboid_half_depth(m, k)
        keep = (
            (raw[:, 0] >= m.box.x_min)
            & (raw[:, 0] <= m.box.x_max)
            & (raw[:, 1] >= m.box.y_min)
            & (raw[:, 1] <= m.box.y_max)
            & (np.abs(raw[:, 2] - m.depth_hint) <= h)
            & (raw[:, 2] > 0)
        )
        raw = raw[keep]
        if raw.shape[0] == 0:
            raise EmptyCloudError(
                f"no samples survive the frustum of frame {m.frame_id}"
            )
        pts = backproject_pixels(raw[:, :2], raw[:, 2], pose, k)
        clouds.append(PointCloud(pts, Frame.WORLD))
    return clouds


def resolve_poses(tracklet: Tracklet, trajectory: Trajectory) -> list[Pose]:
    """Interpolated camera pose at each measurement timestamp."""
    return [trajectory.pose_at(m.timestamp) for m in tracklet.measurements]


# ----------------------------------------------------------------------
# dynamic object gate
# ----------------------------------------------------------------------

def mad_deviation(centroids: np.ndarray) -> float:
    """Norm of the per-axis mean absolute deviation of the centroids."""
    c = np.asarray(centroids, dtype=float).reshape(-1, 3)
    if c.shape[0] < 2:
        raise TooFewMeasurementsError("deviation needs at least 2 centroids")
    mad = np.abs(c - c.mean(axis=0)).mean(axis=0)
    return float(np.linalg.norm(mad))


def validate_mad(centroids: np.ndarray, threshold: float) -> bool:
    """True when the centroids look static (deviation within threshold)."""
    return mad_deviation(centroids) <= threshold


# ----------------------------------------------------------------------
# likelihood and MAP estimate
# ----------------------------------------------------------------------

class _LikelihoodEvaluator:
    """Vectorized ll over query points for a fixed measurement set."""

    def __init__(self, poses: Sequence[Pose], centers_px: np.ndarray,
                 k: CameraIntrinsics, noise: PixelNoiseModel):
        self.world_to_cam = np.stack([p.rotation_matrix().T for p in poses])
        self.cam_centers = np.stack([p.translation for p in poses])
        self.centers_px = np.asarray(centers_px, dtype=float).reshape(-1, 2)
        self.k = k
        self.info = np.linalg.inv(noise.covariance)
        _, logdet = np.linalg.slogdet(noise.covariance)
        # 2D Gaussian: log(1 / sqrt((2 pi)^2 det)) per measurement
        self.log_norm = -0.5 * (2.0 * math.log(2.0 * math.pi) + logdet)
        self.count = len(poses)

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        """xs (m, 3) -> ll (m,); -inf where behind any camera."""
        xs = np.asarray(xs, dtype=float).reshape(-1, 3)
        d = xs[:, None, :] - self.cam_centers[None, :, :]
        p = np.einsum("tij,mtj->mti", self.world_to_cam, d)
        z = p[..., 2]
        ok = np.all(z > 0.0, axis=1)
        out = np.full(xs.shape[0], -np.inf)
        if not np.any(ok):
            return out
        pz = z[ok]
        ru = self.k.fx * p[ok, :, 0] / pz + self.k.cx - self.centers_px[:, 0]
        rv = self.k.fy * p[ok, :, 1] / pz + self.k.cy - self.centers_px[:, 1]
        quad = (
            self.info[0, 0] * ru * ru
            + 2.0 * self.info[0, 1] * ru * rv
            + self.info[1, 1] * rv * rv
        )
        out[ok] = -0.5 * quad.sum(axis=1) + self.count * self.log_norm
        return out


def log_likelihood(
    x: np.ndarray,
    tracklet: Tracklet,
    poses: Sequence[Pose],
    k: CameraIntrinsics,
    noise: PixelNoiseModel,
) -> float:
    """Joint log-likelihood of a world point given the tracklet's boxes."""
    centers = np.array([m.box.center for m in tracklet.measurements])
    ll = _LikelihoodEvaluator(poses, centers, k, noise)(np.asarray(x).reshape(1, 3))[0]
    if not np.isfinite(ll):
        raise BehindCameraError("query point behind at least one camera")
    return float(ll)


def triangulate_midpoint(origins: np.ndarray, directions: np.ndarray) -> np.ndarray | None:
    """Least-squares intersection of rays; None when ill conditioned.

    Minimizes sum_t |(I - d_t d_t^T)(x - c_t)|^2 which reduces to the
    linear system (sum (I - d d^T)) x = sum (I - d d^T) c.
    """
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for c, d in zip(origins, directions):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    w = np.linalg.eigvalsh(a)
    if w[0] < 1e-9:
        return None
    return np.linalg.solve(a, b)


def _hill_climb(x0, ll0, steps, evaluate):
    """First-improvement random walk, block-scanned.

    Evaluating a block of pending proposals from the current point is
    exactly the sequential rule: the point only changes at the first
    improving index, so proposals before it see the same state.
    """
    x = np.asarray(x0, dtype=float)
    llx = float(ll0)
    i = 0
    n = steps.shape[0]
    block = 64
    while i < n:
        j = min(n, i + block)
        cand = x + steps[i:j]
        lls = evaluate(cand)
        better = np.nonzero(lls > llx)[0]
        if better.size == 0:
            i = j
            block = min(block * 2, 1024)
        else:
            first = int(better[0])
            x = cand[first]
            llx = float(lls[first])
            i += first + 1
            block = 64
    return x, llx


def estimate_centroid(
    tracklet: Tracklet,
    poses: Sequence[Pose],
    k: CameraIntrinsics,
    noise: PixelNoiseModel,
    walk: RandomWalkConfig,
) -> CentroidEstimate:
    """MAP position of the object from its box centers.

    Seeds with midpoint triangulation of the box-center rays, then runs
    the random walk. With no baseline (all camera centers coincident)
    the depth is unobservable; the estimate falls back to the last
    measurement's back-projected range hint, flagged low confidence.
    The RNG stream is derived from (walk.seed, tracklet.id) so results
    are reproducible per tracklet.
    """
    ms = tracklet.measurements
    if len(ms) < 2:
        raise TooFewMeasurementsError("localization needs >= 2 measurements")
    centers = np.array([m.box.center for m in ms])
    evaluate = _LikelihoodEvaluator(poses, centers, k, noise)

    def fallback() -> CentroidEstimate:
        point = backproject(centers[-1], ms[-1].depth_hint, poses[-1], k)
        ll = float(evaluate(point.reshape(1, 3))[0])
        return CentroidEstimate(point, ll, point.copy(), low_confidence=True)

    origins = np.stack([p.translation for p in poses])
    span = origins.max(axis=0) - origins.min(axis=0)
    if float(np.linalg.norm(span)) < 1e-9:
        return fallback()

    rays_cam = np.column_stack(
        [
            (centers[:, 0] - k.cx) / k.fx,
            (centers[:, 1] - k.cy) / k.fy,
            np.ones(len(ms)),
        ]
    )
    dirs = np.stack(
        [p.rotation_matrix() @ r for p, r in zip(poses, rays_cam)]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    seed = triangulate_midpoint(origins, dirs)
    if seed is None:
        return fallback()

    ll_seed = float(evaluate(seed.reshape(1, 3))[0])
    if not np.isfinite(ll_seed):
        est = fallback()
        if not np.isfinite(est.log_likelihood):
            raise BehindCameraError("no finite-likelihood starting point")
        return est

    rng = np.random.default_rng((walk.seed, tracklet.id))
    steps = rng.normal(0.0, walk.step_sigma, size=(walk.n_samples, 3))
    point, ll = _hill_climb(seed, ll_seed, steps, evaluate)
    assert ll >= ll_seed
    return CentroidEstimate(point, ll, seed, low_confidence=False)


# ----------------------------------------------------------------------
# full proposal
# ----------------------------------------------------------------------

def propose_candidate(
    tracklet: Tracklet,
    trajectory: Trajectory,
    k: CameraIntrinsics,
    sampler: Sampler,
    noise: PixelNoiseModel,
    walk: RandomWalkConfig,
    mad_threshold: float = 0.15,
) -> Proposal:
    """Validate and localize one promoted tracklet."""
    poses = resolve_poses(tracklet, trajectory)
    clouds = extract_clouds(tracklet, poses, k, sampler)
    cents = np.array([centroid(c) for c in clouds])
    mad = mad_deviation(cents)
    if mad > mad_threshold:
        return Proposal(tracklet, accepted=False, mad=mad, candidate=None)
    est = estimate_centroid(tracklet, poses, k, noise, walk)
    merged = merge_clouds(clouds)
    size = max(float(merged.extent().max()), MIN_SIZE)
    cand = Candidate(
        tracklet=tracklet,
        clouds=tuple(clouds),
        per_measurement_centroids=cents,
        map_centroid=est.point,
        size_estimate=size,
        class_id=tracklet.class_id,
    )
    return Proposal(tracklet, accepted=True, mad=mad, candidate=cand,
                    low_confidence=est.low_confidence)
