"""Landmark registry: gated association, fusion and overlap merging.

A candidate is matched against same-class landmarks inside a validation
gate whose radius grows with the time since the landmark was last
associated,

    r = sqrt((dt / ground_uncertainty) * size),

which absorbs odometry drift accumulated while the object was out of
view. When several landmarks pass the gate the tie is broken by the
mean nearest-neighbor distance from the candidate cloud to each
landmark cloud (smaller is better). Fusion averages centroids weighted
by how many candidates a landmark has absorbed and keeps clouds bounded
by voxel thinning. Landmarks whose bounding volumes overlap are merged
into the lower id until no overlapping pair remains; merges are
recorded as aliases so pose-graph factors can be re-pointed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .candidate import Candidate
from .errors import EmptyCloudError
from .geometry import Frame, PointCloud, merge_clouds

# floor for degenerate (flat) bounding volumes when computing overlap
_FLAT_EPS = 1e-6


@dataclass(frozen=True)
class AssociationConfig:
    """Gate, fusion and merge parameters.

    ground_uncertainty divides the elapsed time inside the gate radius;
    larger values mean slower gate growth. merge_overlap_ratio is
    intersection volume over the smaller bounding volume. Re-matches
    within min_reobservation_interval still update the map but emit no
    pose-graph observation.
    """

    ground_uncertainty: float = 10.0
    merge_overlap_ratio: float = 0.5
    min_reobservation_interval: float = 2.0
    cloud_cap: int = 2048

    def __post_init__(self):
        if self.ground_uncertainty <= 0:
            raise ValueError("ground_uncertainty must be positive")
        if not 0.0 < self.merge_overlap_ratio <= 1.0:
            raise ValueError("merge_overlap_ratio must lie in (0, 1]")
        if self.cloud_cap < 1:
            raise ValueError("cloud_cap must be >= 1")


@dataclass
class Landmark:
    id: int
    class_id: str
    centroid: np.ndarray  # (3,)
    cloud: PointCloud
    size: float
    last_association: float
    n_fused: int = 1
    # last time a pose-graph observation was emitted for this landmark;
    # creation time until the first emission. Kept separate from
    # last_association, which every match resets: under continuous
    # tracking the association clock never reaches the re-observation
    # interval, so spacing emissions by it would starve the graph.
    last_emission: float = 0.0


@dataclass(frozen=True)
class NewLandmark:
    landmark_id: int


@dataclass(frozen=True)
class Matched:
    landmark_id: int
    nn_distance: float | None  # None when the gate held a single landmark
    emit_observation: bool


AssocDecision = NewLandmark | Matched


def gate_radius(dt: float, ground_uncertainty: float, size: float) -> float:
    """Validation gate radius in meters; grows with unobserved time."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return math.sqrt((dt / ground_uncertainty) * size)


def nn_cloud_distance(candidate_cloud: PointCloud, landmark_cloud: PointCloud) -> float:
    """Mean distance from each candidate point to its closest landmark point.

    Asymmetric on purpose: the candidate usually covers one viewpoint
    while the landmark cloud accumulates all of them.
    """
    assert candidate_cloud.frame is landmark_cloud.frame
    if len(candidate_cloud) == 0 or len(landmark_cloud) == 0:
        raise EmptyCloudError("nn distance needs non-empty clouds")
    dists, _ = cKDTree(landmark_cloud.points).query(candidate_cloud.points, k=1)
    return float(np.mean(dists))


def voxel_thin(points: np.ndarray, cap: int, edge: float) -> np.ndarray:
    """Deterministic voxel downsample keeping the first point per cell.

    Doubles the voxel edge until at most `cap` points remain, so the
    result never exceeds the cap whatever the input density.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] <= cap:
        return pts
    edge = max(edge, 1e-9)
    while True:
        seen: dict[tuple[int, int, int], int] = {}
        for i in range(pts.shape[0]):
            key = (
                int(math.floor(pts[i, 0] / edge)),
                int(math.floor(pts[i, 1] / edge)),
                int(math.floor(pts[i, 2] / edge)),
            )
            if key not in seen:
                seen[key] = i
        if len(seen) <= cap:
            return pts[sorted(seen.values())]
        edge *= 2.0


def fuse(lm: Landmark, cand: Candidate, now: float, cfg: AssociationConfig) -> Landmark:
    """Absorb a candidate into a landmark.

    The centroid is the running mean weighted by n_fused, the cloud is
    the thinned union, and the size never shrinks: it tracks the max
    axis extent of the merged cloud but keeps earlier growth even after
    thinning trimmed outlying points.
    """
    cand_cloud = merge_clouds(list(cand.clouds))
    assert cand_cloud.frame is lm.cloud.frame
    new_centroid = (lm.n_fused * lm.centroid + cand.map_centroid) / (lm.n_fused + 1)
    union = np.vstack([lm.cloud.points, cand_cloud.points])
    extent = union.max(axis=0) - union.min(axis=0)
    size = max(lm.size, float(extent.max()))
    thinned = voxel_thin(union, cfg.cloud_cap, edge=size / 32.0)
    return replace(
        lm,
        centroid=new_centroid,
        cloud=PointCloud(thinned, lm.cloud.frame),
        size=size,
        last_association=now,
        n_fused=lm.n_fused + 1,
    )


def _bounds_overlap_ratio(a: PointCloud, b: PointCloud) -> float:
    """Intersection volume over the smaller bounding volume.

    Flat boxes are padded to a tiny thickness so coincident planar
    clouds still count as fully overlapping.
    """
    a_lo, a_hi = a.bounds()
    b_lo, b_hi = b.bounds()
    a_ext = np.maximum(a_hi - a_lo, _FLAT_EPS)
    b_ext = np.maximum(b_hi - b_lo, _FLAT_EPS)
    a_hi = a_lo + a_ext
    b_hi = b_lo + b_ext
    inter = np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo)
    if np.any(inter <= 0):
        return 0.0
    smaller = min(float(np.prod(a_ext)), float(np.prod(b_ext)))
    return float(np.prod(inter)) / smaller


class LandmarkMap:
    """Single-writer registry of landmarks; ids are never reused."""

    def __init__(self):
        self.landmarks: dict[int, Landmark] = {}
        self.aliases: dict[int, int] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.landmarks)

    def ordered(self) -> list[Landmark]:
        return [self.landmarks[i] for i in sorted(self.landmarks)]

    def resolve(self, landmark_id: int) -> int:
        """Follow merge aliases to the surviving id."""
        seen = landmark_id
        while seen in self.aliases:
            seen = self.aliases[seen]
        return seen

    def preselect(self, cand: Candidate, now: float, cfg: AssociationConfig) -> list[Landmark]:
        """Same-class landmarks whose gate contains the candidate centroid."""
        out = []
        for lid in sorted(self.landmarks):
            lm = self.landmarks[lid]
            if lm.class_id != cand.class_id:
                continue
            dt = now - lm.last_association
            if dt < 0:
                dt = 0.0
            r = gate_radius(dt, cfg.ground_uncertainty, cand.size_estimate)
            if np.linalg.norm(lm.centroid - cand.map_centroid) <= r:
                out.append(lm)
        return out

    def associate(
        self,
        cand: Candidate,
        now: float,
        cfg: AssociationConfig,
        timings: dict[str, float] | None = None,
    ) -> AssocDecision:
        """Match-or-create for one candidate; mutates the registry.

        When `timings` is given, seconds spent in the centroid gate and
        in the cloud nearest-neighbor disambiguation are accumulated
        under 'association_path1' / 'association_path2', and the map
        mutation under 'landmark_update_merge'.
        """
        t0 = time.perf_counter()
        gate = self.preselect(cand, now, cfg)
        nn_dist: float | None = None
        if len(gate) <= 1:
            target = gate[0] if gate else None
            t1 = time.perf_counter()
            if timings is not None:
                timings["association_path1"] = timings.get("association_path1", 0.0) + (t1 - t0)
        else:
            t1 = time.perf_counter()
            cand_cloud = merge_clouds(list(cand.clouds))
            best = None
            best_d = math.inf
            for lm in gate:  # gate is id-ordered, ties keep the lower id
                d = nn_cloud_distance(cand_cloud, lm.cloud)
                if d < best_d:
                    best_d = d
                    best = lm
            target = best
            nn_dist = best_d
            t2 = time.perf_counter()
            if timings is not None:
                timings["association_path1"] = timings.get("association_path1", 0.0) + (t1 - t0)
                timings["association_path2"] = timings.get("association_path2", 0.0) + (t2 - t1)

        t3 = time.perf_counter()
        if target is None:
            lid = self._next_id
            self._next_id += 1
            cloud = merge_clouds(list(cand.clouds))
            thinned = voxel_thin(
                cloud.points, cfg.cloud_cap, edge=cand.size_estimate / 32.0
            )
            self.landmarks[lid] = Landmark(
                id=lid,
                class_id=cand.class_id,
                centroid=np.asarray(cand.map_centroid, dtype=float).copy(),
                cloud=PointCloud(thinned, cloud.frame),
                size=cand.size_estimate,
                last_association=now,
                n_fused=1,
                last_emission=now,
            )
            decision: AssocDecision = NewLandmark(lid)
        else:
            emit = (now - target.last_emission) >= cfg.min_reobservation_interval
            fused = fuse(target, cand, now, cfg)
            if emit:
                fused = replace(fused, last_emission=now)
            self.landmarks[target.id] = fused
            decision = Matched(target.id, nn_dist, emit)
        if timings is not None:
            timings["landmark_update_merge"] = timings.get(
                "landmark_update_merge", 0.0
            ) + (time.perf_counter() - t3)
        return decision

    def merge_overlapping(self, cfg: AssociationConfig) -> list[tuple[int, int]]:
        """Fuse same-class landmarks with overlapping bounding volumes.

        Repeats until no pair overlaps by at least merge_overlap_ratio
        (fixpoint). The higher id is absorbed into the lower; each merge
        is returned and recorded as alias old -> kept.
        """
        records: list[tuple[int, int]] = []
        changed = True
        while changed:
            changed = False
            ids = sorted(self.landmarks)
            for i, low in enumerate(ids):
                if changed:
                    break
                for high in ids[i + 1:]:
                    a = self.landmarks[low]
                    b = self.landmarks[high]
                    if a.class_id != b.class_id:
                        continue
                    if _bounds_overlap_ratio(a.cloud, b.cloud) < cfg.merge_overlap_ratio:
                        continue
                    self.landmarks[low] = self._merge_pair(a, b, cfg)
                    del self.landmarks[high]
                    # re-point stale aliases at the survivor
                    for old, kept in list(self.aliases.items()):
                        if kept == high:
                            self.aliases[old] = low
                    self.aliases[high] = low
                    records.append((high, low))
                    changed = True
                    break
        return records

    @staticmethod
    def _merge_pair(a: Landmark, b: Landmark, cfg: AssociationConfig) -> Landmark:
        total = a.n_fused + b.n_fused
        centroid = (a.n_fused * a.centroid + b.n_fused * b.centroid) / total
        union = np.vstack([a.cloud.points, b.cloud.points])
        extent = union.max(axis=0) - union.min(axis=0)
        size = max(a.size, b.size, float(extent.max()))
        thinned = voxel_thin(union, cfg.cloud_cap, edge=size / 32.0)
        return replace(
            a,
            centroid=centroid,
            cloud=PointCloud(thinned, a.cloud.frame),
            size=size,
            last_association=max(a.last_association, b.last_association),
            n_fused=total,
            # the survivor keeps its emission clock: the absorbed
            # landmark is usually freshly created and has emitted
            # nothing, so inheriting its newer stamp would push the
            # next emission out by a full interval per merge
        )

    def apply_centroids(self, positions: dict[int, np.ndarray]) -> None:
        """Overwrite centroids (e.g. from optimized graph estimates).

        Clouds translate rigidly with their centroid so relative
        geometry is preserved and corrected duplicates can merge.
        """
        for lid, new_c in positions.items():
            lid = self.resolve(lid)
            if lid not in self.landmarks:
                continue
            lm = self.landmarks[lid]
            delta = np.asarray(new_c, dtype=float) - lm.centroid
            self.landmarks[lid] = replace(
                lm,
                centroid=lm.centroid + delta,
                cloud=PointCloud(lm.cloud.points + delta, lm.cloud.frame),
            )
