"""Pipeline configuration: thresholds, window sizes, and noise floors.

Every tunable that the estimator needs beyond the scenario's physical
noise model lives here, with defaults chosen for an indoor differential
drive platform.  Values load from the optional ``[pipeline]`` table of a
scenario TOML file and can be overridden per run with dotted
``key=value`` strings.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Sequence

import numpy as np

from .sensors import NoiseParams


class BadConfig(Exception):
    """A configuration value is unknown, malformed, or out of range."""


@dataclass
class PipelineConfig:
    """Front-end / back-end knobs, all overridable from a scenario file."""

    # visual tracking
    min_inliers: int = 15  # matches needed to call visual tracking valid
    outlier_chi2: float = 5.991  # 95% quantile of chi2 with 2 dof
    huber_delta: float = 2.447  # sqrt of outlier_chi2
    tracking_max_iterations: int = 8
    # triangulated landmarks carry position error of their own; tracking
    # residuals see it on top of the pixel noise, so gates and weights in
    # the tracking solves budget for it (bundle adjustment does not: there
    # the landmarks are free variables)
    map_pixel_std: float = 1.0
    # a detected slippage is only confirmed when the vision-only pose
    # lands at least this far from the odometer prediction; otherwise the
    # inlier drop is blamed on the map, not the wheels
    slip_confirm_distance_m: float = 0.05

    # keyframe policy
    keyframe_tracked_ratio: float = 0.5
    lost_distance_m: float = 0.3
    lost_rotation_rad: float = math.radians(10.0)
    min_keyframe_gap: int = 5  # frames; throttles the after-optimization rule

    # map initialization
    init_min_matches: int = 50
    init_min_parallax_rad: float = math.radians(1.0)
    init_min_triangulated: int = 30
    init_max_iterations: int = 15

    # local bundle adjustment
    window_size: int = 10
    min_covisibility: int = 15
    ba_max_iterations: int = 5
    triangulation_min_parallax_rad: float = math.radians(1.0)

    # estimator noise model
    plane_std: float = 1e-3  # soft planar-motion constraint strength
    gyro_std_floor: float = 1e-6
    encoder_std_floor: float = 1e-6
    bias_walk_std_floor: float = 1e-8
    pixel_std_floor: float = 1e-3

    # feature switches (ablations)
    use_plane_factor: bool = True
    use_slippage_detector: bool = True

    def validate(self) -> None:
        positive = (
            "outlier_chi2",
            "huber_delta",
            "keyframe_tracked_ratio",
            "lost_distance_m",
            "lost_rotation_rad",
            "init_min_parallax_rad",
            "triangulation_min_parallax_rad",
            "plane_std",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive")
        at_least_one = (
            "min_inliers",
            "tracking_max_iterations",
            "init_min_matches",
            "init_min_triangulated",
            "init_max_iterations",
            "window_size",
            "min_covisibility",
            "ba_max_iterations",
        )
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be at least 1")
        if self.min_keyframe_gap < 0:
            raise BadConfig("min_keyframe_gap must be nonnegative")
        for name in ("gyro_std_floor", "encoder_std_floor", "bias_walk_std_floor", "pixel_std_floor"):
            if getattr(self, name) <= 0:
                raise BadConfig(f"{name} must be positive (it keeps whitening finite)")
        if self.map_pixel_std < 0:
            raise BadConfig("map_pixel_std must be nonnegative")
        if self.slip_confirm_distance_m < 0:
            raise BadConfig("slip_confirm_distance_m must be nonnegative")

    @staticmethod
    def from_dict(table: Dict[str, Any]) -> "PipelineConfig":
        """Build from a ``[pipeline]`` TOML table; unknown keys are errors."""
        known = {f.name: f for f in fields(PipelineConfig)}
        kwargs: Dict[str, Any] = {}
        for key, value in table.items():
            if key not in known:
                raise BadConfig(f"unknown pipeline option {key!r}")
            kwargs[key] = _coerce(key, value, known[key].type)
        cfg = PipelineConfig(**kwargs)
        cfg.validate()
        return cfg

    def replace(self, **kwargs) -> "PipelineConfig":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg


def _coerce(key: str, value: Any, declared: str) -> Any:
    if declared == "bool":
        if isinstance(value, bool):
            return value
        raise BadConfig(f"{key} expects a boolean, got {value!r}")
    if declared == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadConfig(f"{key} expects an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise BadConfig(f"{key} expects an integer, got {value!r}")
        return int(value)
    if declared == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadConfig(f"{key} expects a number, got {value!r}")
        return float(value)
    return value


def parse_scalar(text: str) -> Any:
    """Interpret an override value string as bool, int, float, or string."""
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip()


def apply_overrides(tree: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` strings onto a nested config dict.

    Returns a deep-enough copy; the input dict is not modified.  Paths
    may create new nested tables but cannot descend into non-tables.
    """
    out = _copy_tree(tree)
    for item in assignments:
        if "=" not in item:
            raise BadConfig(f"override {item!r} is not of the form key=value")
        path, _, raw = item.partition("=")
        parts = [p for p in path.strip().split(".") if p]
        if not parts:
            raise BadConfig(f"override {item!r} has an empty key")
        node = out
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise BadConfig(f"override {item!r} descends into non-table {part!r}")
            node = nxt
        node[parts[-1]] = parse_scalar(raw)
    return out


def _copy_tree(tree: Dict[str, Any]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            out[key] = _copy_tree(value)
        elif isinstance(value, list):
            out[key] = [_copy_tree(v) if isinstance(v, dict) else v for v in value]
        else:
            out[key] = value
    return out


def estimator_noise(scenario_noise: NoiseParams, cfg: PipelineConfig) -> NoiseParams:
    """Noise model the estimator whitens with.

    The scenario's physical covariances get a small variance floor so
    that noise-free runs still produce finite information matrices, and
    the planar-motion constraint strength is owned by the pipeline (the
    simulator's motion is exactly planar, so the scenario has no say).
    """
    return NoiseParams(
        sigma_gyro=scenario_noise.sigma_gyro + np.eye(3) * cfg.gyro_std_floor**2,
        sigma_encoder=scenario_noise.sigma_encoder + cfg.encoder_std_floor**2,
        sigma_bias_walk=scenario_noise.sigma_bias_walk + np.eye(3) * cfg.bias_walk_std_floor**2,
        sigma_plane=np.eye(3) * cfg.plane_std**2,
        sigma_pixel=scenario_noise.sigma_pixel + np.eye(2) * cfg.pixel_std_floor**2,
    )


def pipeline_config_from_tree(tree: Dict[str, Any]) -> PipelineConfig:
    """Extract and parse the optional [pipeline] table of a scenario dict."""
    table = tree.get("pipeline", {})
    if not isinstance(table, dict):
        raise BadConfig("[pipeline] must be a table")
    return PipelineConfig.from_dict(table)
