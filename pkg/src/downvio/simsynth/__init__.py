"""Synthetic planar-scene datasets with exact ground truth."""

from downvio.simsynth.dataset import Dataset, load_dataset, save_dataset, synthesize_dataset, write_dataset
from downvio.simsynth.scenario import PRESETS, ScenarioSpec, SensorNoise, SpecError, preset, spec_from_dict
from downvio.simsynth.synth import (
    CameraPose,
    GroundTruth,
    Renderer,
    camera_pose,
    fraction_on_texture,
    ground_truth,
    render_frame,
    sample_times,
    synthesize_imu,
    synthesize_range,
)
from downvio.simsynth.texture import TextureSpec, make_texture
from downvio.simsynth.trajectory import Trajectory, build_trajectory

__all__ = [
    "CameraPose",
    "Dataset",
    "GroundTruth",
    "PRESETS",
    "Renderer",
    "ScenarioSpec",
    "SensorNoise",
    "SpecError",
    "TextureSpec",
    "Trajectory",
    "build_trajectory",
    "camera_pose",
    "fraction_on_texture",
    "ground_truth",
    "load_dataset",
    "make_texture",
    "preset",
    "render_frame",
    "sample_times",
    "save_dataset",
    "spec_from_dict",
    "synthesize_dataset",
    "synthesize_imu",
    "synthesize_range",
    "write_dataset",
]
