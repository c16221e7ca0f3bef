"""End-to-end runner: config round trips, input validation, the
zero-noise exactness invariant, determinism across execution modes,
dynamic-object exclusion and drift reduction on small scenes."""

import json
from dataclasses import replace

import numpy as np
import pytest

from semmap.errors import TimestampMismatchError
from semmap.evaluation import ate_rmse
from semmap.geometry import Pose, Trajectory
from semmap.pipeline import PipelineConfig, run_pipeline
from semmap.simulator import (
    FrameDetections,
    desk_preset,
    ground_truth_bundle,
    walking_preset,
)


def _small_desk(seed=0, **noise_overrides):
    # 1.5 laps in 120 frames keeps every object re-observed at least
    # once while the whole run stays around a second
    world, noise = desk_preset(seed=seed, duration=12.0, frame_rate=10.0,
                               laps=1.5, **noise_overrides)
    return ground_truth_bundle(world, noise)


class TestConfigRoundTrip:
    def test_dict_round_trip_preserves_every_field(self):
        cfg = PipelineConfig(seed=7, optimize_every=3, mad_threshold=0.2,
                             odometry_translation_sigma=0.001)
        again = PipelineConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
        assert again.hash() == cfg.hash()

    def test_json_file_round_trip(self, tmp_path):
        cfg = PipelineConfig(seed=3, pixel_noise_sigma=2.5)
        path = tmp_path / "config.json"
        cfg.to_json_file(path)
        again = PipelineConfig.from_json_file(path)
        assert again.to_dict() == cfg.to_dict()

    def test_unknown_top_level_key_rejected(self):
        doc = PipelineConfig().to_dict()
        doc["optimizer_every"] = 5
        with pytest.raises(ValueError, match="optimizer_every"):
            PipelineConfig.from_dict(doc)

    def test_unknown_section_key_rejected(self):
        doc = PipelineConfig().to_dict()
        doc["tracker"]["iou_treshold"] = 0.3
        with pytest.raises(ValueError, match="iou_treshold"):
            PipelineConfig.from_dict(doc)

    def test_hash_tracks_content(self):
        assert PipelineConfig().hash() == PipelineConfig().hash()
        assert PipelineConfig(seed=1).hash() != PipelineConfig(seed=2).hash()

    @pytest.mark.parametrize("kwargs", [
        {"pixel_noise_sigma": 0.0},
        {"mad_threshold": -0.1},
        {"optimize_every": 0},
        {"odometry_translation_sigma": -1e-9},
    ])
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            PipelineConfig(**kwargs)


class TestInputValidation:
    def _odometry(self, n=3, dt=0.1):
        return Trajectory([i * dt for i in range(n)],
                          [Pose.identity() for _ in range(n)])

    def test_empty_odometry_rejected(self):
        empty = Trajectory([], [])
        with pytest.raises(TimestampMismatchError, match="empty"):
            run_pipeline([], empty)

    def test_frame_id_without_pose_rejected(self):
        frames = [FrameDetections(frame_id=5, timestamp=0.5, detections=())]
        with pytest.raises(TimestampMismatchError, match="frame 5"):
            run_pipeline(frames, self._odometry())

    def test_timestamp_far_from_odometry_stamp_rejected(self):
        # frame 1 claims t=0.5 but odometry row 1 is at t=0.1
        frames = [FrameDetections(frame_id=1, timestamp=0.5, detections=())]
        with pytest.raises(TimestampMismatchError, match="0.4"):
            run_pipeline(frames, self._odometry())

    def test_duplicate_frame_id_rejected(self):
        frames = [FrameDetections(0, 0.0, ()), FrameDetections(0, 0.0, ())]
        with pytest.raises(ValueError, match="duplicate"):
            run_pipeline(frames, self._odometry())

    def test_detection_free_run_still_covers_every_stamp(self):
        odo = self._odometry(n=4)
        result = run_pipeline([], odo)
        assert len(result.corrected) == 4
        assert len(result.landmark_map) == 0


class TestZeroNoiseExactness:
    def test_perfect_inputs_give_machine_precision_trajectory(self):
        bundle = _small_desk(
            box_center_sigma=0.0, box_size_sigma=0.0,
            false_positive_rate=0.0, missed_detection_rate=0.0,
            depth_sigma=0.0, odom_translation_sigma=0.0,
            odom_rotation_sigma=0.0,
        )
        cfg = PipelineConfig(seed=0, odometry_translation_sigma=0.0,
                             odometry_rotation_sigma=0.0)
        result = run_pipeline(bundle.frames, bundle.odometry, cfg)
        err = ate_rmse(result.corrected, bundle.ground_truth)
        # exact odometry declared exact must pass through untouched
        assert err < 1e-6
        assert len(result.landmark_map) == len(bundle.registry)


class TestDeterminism:
    def test_reruns_and_parallel_mode_agree_exactly(self):
        bundle = _small_desk(seed=4)
        cfg = PipelineConfig(seed=4)
        runs = [
            run_pipeline(bundle.frames, bundle.odometry, cfg),
            run_pipeline(bundle.frames, bundle.odometry, cfg),
            run_pipeline(bundle.frames, bundle.odometry,
                         replace(cfg, parallel=True)),
        ]
        first = runs[0]
        for other in runs[1:]:
            for a, b in zip(first.corrected.poses, other.corrected.poses):
                np.testing.assert_array_equal(a.translation, b.translation)
                np.testing.assert_array_equal(a.rotation, b.rotation)
            assert sorted(first.landmark_map.landmarks) == \
                sorted(other.landmark_map.landmarks)
            for lid, lm in first.landmark_map.landmarks.items():
                np.testing.assert_array_equal(
                    lm.centroid, other.landmark_map.landmarks[lid].centroid)
            assert first.counts == other.counts


class TestDynamicExclusion:
    def test_walker_never_becomes_a_landmark(self):
        world, noise = walking_preset(seed=0)
        bundle = ground_truth_bundle(world, noise)
        cfg = PipelineConfig(
            seed=0,
            odometry_translation_sigma=noise.odom_translation_sigma,
            odometry_rotation_sigma=noise.odom_rotation_sigma,
        )
        result = run_pipeline(bundle.frames, bundle.odometry, cfg)
        classes = {lm.class_id for lm in result.landmark_map.ordered()}
        assert "person" not in classes
        # the static furniture still maps
        assert len(classes & {"chair", "table", "shelf", "bin"}) >= 3


class TestDriftReduction:
    def test_corrected_beats_raw_and_run_is_instrumented(self):
        bundle = _small_desk(seed=1)
        cfg = PipelineConfig(seed=1)
        result = run_pipeline(bundle.frames, bundle.odometry, cfg)
        raw = ate_rmse(bundle.odometry, bundle.ground_truth)
        corrected = ate_rmse(result.corrected, bundle.ground_truth)
        assert corrected < raw
        assert len(result.timings["detection_ingest"]) == len(bundle.odometry)
        assert len(result.timings["association_path1"]) > 0
        assert result.counts["landmarks"] == len(result.landmark_map)
