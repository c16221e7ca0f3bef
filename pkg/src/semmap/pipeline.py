"""Online mapping pipeline: detections + odometry in, landmark map and
corrected trajectory out.

The run is split into two stages with strict state ownership. Stage A
(ingest, track, localize) reads raw odometry only, so the candidate
stream never depends on when the optimizer last ran; stage B
(associate, optimize, correct, merge) owns the pose graph and the
landmark registry. Because stage B consumes one ordered event stream,
the two-worker mode produces bit-identical results to the sequential
one: corrections land at the same frame boundaries either way, the
worker just overlaps them with ingestion in wall time.

Duplicate landmarks are a designed-for consequence of this split: under
odometry drift a revisited object can fall outside its own validation
gate and spawn a second landmark. Both keep emitting observations, the
optimizer pulls them together, and the overlap merge collapses them.
"""

import json
import queue
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from time import perf_counter

import numpy as np

from .association import AssociationConfig, LandmarkMap, Matched
from .candidate import (
    PixelNoiseModel,
    Proposal,
    RandomWalkConfig,
    cuboid_box_sampler,
    propose_candidate,
)
from .errors import TimestampMismatchError
from .evaluation import (
    STAGE_NAMES,
    evaluate_ate,
    match_indices,
    score_landmarks,
    timing_report,
)
from .geometry import CameraIntrinsics, Trajectory
from .io_formats import (
    config_hash,
    parse_detection_log,
    parse_landmark_map,
    parse_registry,
    parse_scenario_config,
    parse_tum_trajectory,
    write_detection_log,
    write_g2o,
    write_landmark_map,
    write_registry,
    write_tum_trajectory,
)
from .posegraph import OptimizerConfig, PoseGraph, SolveReport, apply_correction
from .simulator import ground_truth_bundle
from .tracker import IouTracker, TrackerConfig, filter_detections

DEFAULT_CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                                  width=640, height=480)

# information matrices blow up as sigma -> 0; the floor keeps a
# zero-noise configuration solvable while still pinning poses hard
_SIGMA_FLOOR = 1e-4

SIMULATE_OUTPUTS = ("ground_truth.txt", "odometry.txt",
                    "detections.txt", "registry.json")
RUN_OUTPUTS = ("corrected_trajectory.txt", "landmark_map.json", "graph.g2o",
               "timings.json", "run_manifest.json")
# byte-stable across reruns; timings and the manifest (absolute paths)
# are excluded
DETERMINISTIC_RUN_OUTPUTS = ("corrected_trajectory.txt", "landmark_map.json",
                             "graph.g2o")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of one mapping run.

    seed replaces random_walk.seed at run time so a single knob drives
    the only stochastic stage; the nested field stays for standalone
    use of the walk. The odometry sigmas weight the relative-motion
    factors and should match the sensor; they are floored at 1e-4 so a
    zero value means "trust fully" rather than a singular information
    matrix.
    """

    camera: CameraIntrinsics = field(default_factory=lambda: DEFAULT_CAMERA)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    random_walk: RandomWalkConfig = field(default_factory=RandomWalkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pixel_noise_sigma: float = 4.0
    mad_threshold: float = 0.15
    optimize_every: int = 10
    odometry_translation_sigma: float = 0.005
    odometry_rotation_sigma: float = 0.0017453292519943295
    seed: int = 0
    instrumentation: bool = True
    parallel: bool = False

    def __post_init__(self):
        if self.pixel_noise_sigma <= 0:
            raise ValueError("pixel_noise_sigma must be positive")
        if self.mad_threshold <= 0:
            raise ValueError("mad_threshold must be positive")
        if self.optimize_every < 1:
            raise ValueError("optimize_every must be at least 1")
        if self.odometry_translation_sigma < 0 or self.odometry_rotation_sigma < 0:
            raise ValueError("odometry sigmas must be non-negative")

    def to_dict(self) -> dict:
        def section(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}

        return {
            "camera": section(self.camera),
            "tracker": section(self.tracker),
            "association": section(self.association),
            "random_walk": section(self.random_walk),
            "optimizer": section(self.optimizer),
            "pixel_noise_sigma": self.pixel_noise_sigma,
            "mad_threshold": self.mad_threshold,
            "optimize_every": self.optimize_every,
            "odometry_translation_sigma": self.odometry_translation_sigma,
            "odometry_rotation_sigma": self.odometry_rotation_sigma,
            "seed": self.seed,
            "instrumentation": self.instrumentation,
            "parallel": self.parallel,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        sections = {
            "camera": CameraIntrinsics,
            "tracker": TrackerConfig,
            "association": AssociationConfig,
            "random_walk": RandomWalkConfig,
            "optimizer": OptimizerConfig,
        }
        scalars = {
            f.name for f in fields(cls) if f.name not in sections
        }
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                klass = sections[key]
                known = {f.name for f in fields(klass)}
                bad = set(value) - known
                if bad:
                    raise ValueError(
                        f"unknown {key} config key {sorted(bad)[0]!r}")
                kwargs[key] = klass(**value)
            elif key in scalars:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))

    def hash(self) -> str:
        return config_hash(self.canonical_json())

    def to_json_file(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ProposalRecord:
    """Per-proposal diagnostic: what the gate and the map decided."""

    frame_id: int
    timestamp: float
    tracklet_id: int
    class_id: str
    accepted: bool
    mad: float
    low_confidence: bool
    decision: str | None  # "new" | "matched" | None when rejected
    landmark_id: int | None
    emitted_observation: bool


@dataclass
class RunResult:
    corrected: Trajectory
    landmark_map: LandmarkMap
    graph: PoseGraph
    timings: dict[str, list[float]]
    proposals: list[ProposalRecord]
    counts: dict
    last_solve: SolveReport | None


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    seed: int
    inputs: dict
    outputs: dict
    deterministic_outputs: tuple[str, ...]
    timing_trace: str
    counts: dict

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "deterministic_outputs": list(self.deterministic_outputs),
            "timing_trace": self.timing_trace,
            "counts": dict(self.counts),
        }


class _StageB:
    """Graph and map owner; consumes the ordered proposal stream."""

    def __init__(self, cfg: PipelineConfig, odometry: Trajectory,
                 timings: dict[str, list[float]]):
        self.cfg = cfg
        self.odometry = odometry
        self.timings = timings
        self.graph = PoseGraph(cfg.camera)
        self.map = LandmarkMap()
        self.records: list[ProposalRecord] = []
        self.counts = {
            "observations_emitted": 0,
            "optimize_calls": 0,
            "optimize_iterations": 0,
            "merges": 0,
        }
        self.last_solve: SolveReport | None = None
        self._solved_observations = 0
        # sigma 0 declares the odometry exact: poses become hard
        # constraints and only landmarks are optimized
        self.fix_poses = (
            cfg.odometry_translation_sigma == 0.0
            and cfg.odometry_rotation_sigma == 0.0
        )
        t = max(cfg.odometry_translation_sigma, _SIGMA_FLOOR)
        r = max(cfg.odometry_rotation_sigma, _SIGMA_FLOOR)
        self.odometry_information = np.diag([1.0 / t**2] * 3 + [1.0 / r**2] * 3)
        self.observation_information = np.linalg.inv(
            PixelNoiseModel.isotropic(cfg.pixel_noise_sigma).covariance)

    def on_frame(self, frame_id: int, stamp: float,
                 proposals: list[Proposal]) -> None:
        instrument = self.cfg.instrumentation
        if frame_id == 0:
            self.graph.add_prior(0, self.odometry.poses[0])
        else:
            rel = self.odometry.poses[frame_id - 1].inverse().compose(
                self.odometry.poses[frame_id])
            self.graph.add_odometry(frame_id - 1, frame_id, rel,
                                    self.odometry_information)

        emitted = 0
        for prop in proposals:
            emitted += self._handle_proposal(prop, frame_id, stamp)

        due = (frame_id + 1) % self.cfg.optimize_every == 0
        if self.graph.observations and (emitted or due):
            self._optimize_and_merge(instrument)

    def _handle_proposal(self, prop: Proposal, frame_id: int,
                         stamp: float) -> int:
        if not prop.accepted:
            self.records.append(ProposalRecord(
                frame_id, stamp, prop.tracklet.id, prop.tracklet.class_id,
                False, prop.mad, prop.low_confidence, None, None, False))
            return 0

        call_timings: dict[str, float] = {}
        decision = self.map.associate(
            prop.candidate, stamp, self.cfg.association,
            call_timings if self.cfg.instrumentation else None)
        for key, seconds in call_timings.items():
            self.timings[key].append(seconds)

        emitted = isinstance(decision, Matched) and decision.emit_observation
        if emitted:
            last = prop.candidate.tracklet.measurements[-1]
            landmark = self.map.landmarks[decision.landmark_id]
            self.graph.add_observation(
                last.frame_id, decision.landmark_id,
                np.asarray(last.box.center),
                self.observation_information,
                landmark_position=landmark.centroid)
            self.counts["observations_emitted"] += 1
        self.records.append(ProposalRecord(
            frame_id, stamp, prop.tracklet.id, prop.candidate.class_id,
            True, prop.mad, prop.low_confidence,
            "matched" if isinstance(decision, Matched) else "new",
            decision.landmark_id, bool(emitted)))
        return 1 if emitted else 0

    def _optimize_and_merge(self, instrument: bool) -> None:
        # a graph extended only by odometry since the last solve keeps
        # its previous optimum (new chain factors are exactly satisfied
        # by the composed initialization), so re-solving would only
        # churn; solve when observation factors arrived
        if len(self.graph.observations) > self._solved_observations:
            t0 = perf_counter()
            report = self.graph.optimize(self.cfg.optimizer, fix_poses=self.fix_poses)
            t1 = perf_counter()
            if instrument:
                self.timings["optimize"].append(t1 - t0)
            self.last_solve = report
            self.counts["optimize_calls"] += 1
            self.counts["optimize_iterations"] += report.iterations
            self._solved_observations = len(self.graph.observations)
            apply_correction(self.graph, self.map)
        t2 = perf_counter()
        merges = self.map.merge_overlapping(self.cfg.association)
        for old_id, kept_id in merges:
            self.graph.merge_landmarks(old_id, kept_id)
        t3 = perf_counter()
        if instrument:
            self.timings["landmark_update_merge"].append(t3 - t2)
        self.counts["merges"] += len(merges)

    def finish(self) -> None:
        if self.graph.observations:
            self._optimize_and_merge(self.cfg.instrumentation)


def _index_detections(frames, odometry: Trajectory,
                      window: float = 0.02) -> dict[int, list]:
    """Group detections by frame id, validated against the odometry grid."""
    n = len(odometry)
    by_frame: dict[int, list] = {}
    for fr in frames:
        if not 0 <= fr.frame_id < n:
            raise TimestampMismatchError(
                f"frame {fr.frame_id} has no odometry pose (have {n})")
        gap = abs(fr.timestamp - float(odometry.stamps[fr.frame_id]))
        if gap > window:
            raise TimestampMismatchError(
                f"frame {fr.frame_id} timestamp is {gap:.4f}s away from "
                "its odometry stamp")
        if fr.frame_id in by_frame:
            raise ValueError(f"duplicate frame id {fr.frame_id}")
        by_frame[fr.frame_id] = list(fr.detections)
    return by_frame


def run_pipeline(frames, odometry: Trajectory,
                 config: PipelineConfig | None = None) -> RunResult:
    """Execute the full mapping run over pre-loaded inputs.

    frames is any iterable of FrameDetections keyed to odometry rows by
    frame_id; rows without detections still advance the tracker and the
    graph. The returned trajectory covers every odometry stamp.
    """
    cfg = config if config is not None else PipelineConfig()
    if len(odometry) == 0:
        raise TimestampMismatchError("odometry is empty")
    by_frame = _index_detections(frames, odometry)

    sampler = cuboid_box_sampler(cfg.camera)
    noise = PixelNoiseModel.isotropic(cfg.pixel_noise_sigma)
    walk = replace(cfg.random_walk, seed=cfg.seed)
    tracker = IouTracker(cfg.tracker)
    timings: dict[str, list[float]] = {name: [] for name in STAGE_NAMES}
    stage_b = _StageB(cfg, odometry, timings)
    instrument = cfg.instrumentation

    counts = {
        "frames": len(odometry),
        "detections": 0,
        "detections_kept": 0,
        "tracklets_promoted": 0,
        "proposals_accepted": 0,
        "proposals_rejected": 0,
    }

    work: queue.Queue | None = None
    worker_error: list[BaseException] = []
    worker = None
    if cfg.parallel:
        work = queue.Queue()

        def drain():
            while True:
                item = work.get()
                if item is None:
                    return
                try:
                    stage_b.on_frame(*item)
                except BaseException as exc:  # re-raised on the caller
                    worker_error.append(exc)
                    return

        worker = threading.Thread(target=drain, name="stage-b")
        worker.start()

    try:
        for i in range(len(odometry)):
            stamp = float(odometry.stamps[i])
            raw = by_frame.get(i, [])
            t0 = perf_counter()
            kept = filter_detections(raw, cfg.tracker)
            promoted, _ = tracker.step(kept, stamp)
            t1 = perf_counter()
            if instrument:
                timings["detection_ingest"].append(t1 - t0)
            counts["detections"] += len(raw)
            counts["detections_kept"] += len(kept)
            counts["tracklets_promoted"] += len(promoted)

            proposals = []
            for tracklet in promoted:
                t2 = perf_counter()
                prop = propose_candidate(tracklet, odometry, cfg.camera,
                                         sampler, noise, walk,
                                         cfg.mad_threshold)
                t3 = perf_counter()
                if instrument:
                    timings["candidate_proposal"].append(t3 - t2)
                counts["proposals_accepted" if prop.accepted
                       else "proposals_rejected"] += 1
                proposals.append(prop)

            if work is not None:
                if worker_error:
                    break
                work.put((i, stamp, proposals))
            else:
                stage_b.on_frame(i, stamp, proposals)
    finally:
        if work is not None:
            work.put(None)
            worker.join()
    if worker_error:
        raise worker_error[0]

    stage_b.finish()
    counts.update(stage_b.counts)
    counts["landmarks"] = len(stage_b.map)
    last = stage_b.last_solve
    counts["deactivated_observations"] = (
        last.deactivated_observations if last else 0)

    corrected = Trajectory(
        odometry.stamps,
        [stage_b.graph.poses[i] for i in range(len(odometry))])
    return RunResult(
        corrected=corrected,
        landmark_map=stage_b.map,
        graph=stage_b.graph,
        timings=timings,
        proposals=stage_b.records,
        counts=counts,
        last_solve=last,
    )


# ----------------------------------------------------------------------
# file-level commands (the CLI is a thin argparse shell over these)
# ----------------------------------------------------------------------

def cmd_simulate(config_path, out_dir) -> dict:
    """Render a scenario into the four run inputs.

    Emits ground_truth.txt and odometry.txt (TUM), detections.txt and
    registry.json into out_dir; every file carries the hash of the
    scenario config text. Deterministic per config.
    """
    raw = Path(config_path).read_text(encoding="utf-8")
    world, noise = parse_scenario_config(config_path)
    bundle = ground_truth_bundle(world, noise)
    scenario_hash = config_hash(raw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"config {scenario_hash}"]
    write_tum_trajectory(out / "ground_truth.txt", bundle.ground_truth, header)
    write_tum_trajectory(out / "odometry.txt", bundle.odometry, header)
    write_detection_log(out / "detections.txt", bundle.frames, header)
    write_registry(out / "registry.json", bundle.registry,
                   extra={"config_hash": scenario_hash})
    return {
        "config_hash": scenario_hash,
        "outputs": {name: str(out / name) for name in SIMULATE_OUTPUTS},
        "frames": len(bundle.frames),
        "objects": len(bundle.registry),
    }


def cmd_run(detections_path, odometry_path, out_dir,
            config: PipelineConfig | None = None) -> RunManifest:
    """Run the pipeline over logged inputs and write all outputs.

    corrected_trajectory.txt, landmark_map.json and graph.g2o are
    byte-stable for fixed inputs and config; timings.json holds the
    wall-clock trace and run_manifest.json ties everything together.
    """
    cfg = config if config is not None else PipelineConfig()
    frames = parse_detection_log(detections_path)
    odometry = parse_tum_trajectory(odometry_path)
    result = run_pipeline(frames, odometry, cfg)
    run_hash = cfg.hash()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = [f"config {run_hash}"]

    write_tum_trajectory(out / "corrected_trajectory.txt", result.corrected,
                         header)
    write_landmark_map(out / "landmark_map.json", result.landmark_map,
                       extra={"config_hash": run_hash})
    write_g2o(out / "graph.g2o", result.graph, header)

    stats = timing_report(result.timings)
    timing_doc = {
        "config_hash": run_hash,
        "no_data": stats.no_data,
        "stages": {
            name: {"mean_ms": stat.mean_ms, "max_ms": stat.max_ms,
                   "count": stat.count}
            for name, stat in sorted(stats.stages.items())
        },
    }
    (out / "timings.json").write_text(
        json.dumps(timing_doc, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    manifest = RunManifest(
        config_hash=run_hash,
        seed=cfg.seed,
        inputs={"detections": str(detections_path),
                "odometry": str(odometry_path)},
        outputs={name: str(out / name) for name in RUN_OUTPUTS},
        deterministic_outputs=DETERMINISTIC_RUN_OUTPUTS,
        timing_trace=str(out / "timings.json"),
        counts=result.counts,
    )
    (out / "run_manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return manifest


def cmd_eval(est_path, gt_path, out_dir, map_path=None, registry_path=None,
             baseline_path=None, timings_path=None,
             window: float = 0.02) -> dict:
    """Score a run against ground truth.

    Reports ATE RMSE (plus improvement over a baseline trajectory when
    given), landmark precision/recall when both map and registry are
    available, and the timing summary when a trace is available. Writes
    report.json and aligned_trajectory.csv into out_dir.
    """
    est = parse_tum_trajectory(est_path)
    gt = parse_tum_trajectory(gt_path)
    ate = evaluate_ate(est, gt, window=window)
    report: dict = {
        "ate_rmse": ate.rmse,
        "matched_frames": len(ate.per_frame_errors),
        "dropped_frames": ate.dropped,
    }

    if baseline_path is not None:
        baseline = parse_tum_trajectory(baseline_path)
        base = evaluate_ate(baseline, gt, window=window)
        report["baseline_ate_rmse"] = base.rmse
        report["improvement_percent"] = (
            100.0 * (1.0 - ate.rmse / base.rmse) if base.rmse > 0 else None)

    if map_path is not None and registry_path is not None:
        lm_map = parse_landmark_map(map_path)
        registry = parse_registry(registry_path)
        duration = float(gt.stamps[-1] - gt.stamps[0]) if len(gt) else 0.0
        score = score_landmarks(lm_map.ordered(), registry, duration)
        report["landmarks"] = {
            "precision": score.precision,
            "recall": score.recall,
            "mean_centroid_error": (
                None if np.isnan(score.mean_centroid_error)
                else score.mean_centroid_error),
            "matches": len(score.matches),
            "dynamic_matches": len(score.dynamic_matches),
            "empty_map": score.empty_map,
        }
        doc = json.loads(Path(map_path).read_text(encoding="utf-8"))
        if "config_hash" in doc:
            report["config_hash"] = doc["config_hash"]
    else:
        report["landmarks"] = {
            "skipped": "need both --map and --registry to score landmarks"}

    if timings_path is not None and Path(timings_path).exists():
        report["timing"] = json.loads(
            Path(timings_path).read_text(encoding="utf-8"))
    else:
        report["timing"] = {"no_data": True}

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    picked, _ = match_indices(est, gt, window)
    rot = ate.transform.rotation_matrix()
    with open(out / "aligned_trajectory.csv", "w", encoding="utf-8") as fh:
        fh.write("timestamp,est_x,est_y,est_z,gt_x,gt_y,gt_z,error_m\n")
        for i, j in picked:
            p = ate.scale * (rot @ est.poses[i].translation) \
                + ate.transform.translation
            q = gt.poses[j].translation
            err = float(np.linalg.norm(p - q))
            fh.write(f"{float(est.stamps[i]):.10f},"
                     f"{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},"
                     f"{q[0]:.6f},{q[1]:.6f},{q[2]:.6f},{err:.6f}\n")
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
