"""Deterministic synthetic rail world and sensor-stream generator."""

from railfuse.simulator.track import ArcSegment, StraightSegment, TrackLayout, TrackMap, build_track
from railfuse.simulator.rig import LidarSpec, SensorRig, default_rig
from railfuse.simulator.world import SceneConfig, World
from railfuse.simulator.generate import (
    GroundTruth,
    NoiseConfig,
    SimDataset,
    SpeedProfile,
    inject_extrinsic_drift,
    simulate_run,
)

__all__ = [
    "ArcSegment",
    "GroundTruth",
    "LidarSpec",
    "NoiseConfig",
    "SceneConfig",
    "SensorRig",
    "SimDataset",
    "SpeedProfile",
    "StraightSegment",
    "TrackLayout",
    "TrackMap",
    "World",
    "build_track",
    "default_rig",
    "inject_extrinsic_drift",
    "simulate_run",
]
