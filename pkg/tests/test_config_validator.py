import copy
import json
from pathlib import Path

import pytest

from sparse_view_recon.config_validator import (
    ConfigValidationError, validate_denoise_config, validate_metric_names, validate_pipeline_config,
    validate_scene_config,
)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
VALIDATORS = {
    "scene": validate_scene_config,
    "reconstruct": validate_pipeline_config,
    "denoise": validate_denoise_config,
}

BASE_PIPELINE = {
    "scene": {"seed": 1},
    "desk_factor": 0.2,
    "base_iterations": 15000,
    "base_first_cycle": 7000,
    "base_cycle_period": 4000,
    "cycle_count": 2,
}


def pipeline(**overrides):
    config = copy.deepcopy(BASE_PIPELINE)
    config.update(overrides)
    return config


def shipped_configs():
    return sorted(CONFIG_DIR.glob("*.json")) + sorted((CONFIG_DIR / "additional_config").glob("*.json"))


class TestShippedConfigs:

    @pytest.mark.parametrize("path", shipped_configs(), ids=lambda p: p.name)
    def test_config_is_valid(self, path):
        kind = path.stem.split("_")[0]
        VALIDATORS[kind](json.loads(path.read_text()))


class TestSceneConfig:

    def test_minimal(self):
        validate_scene_config({"seed": 0})

    @pytest.mark.parametrize("config, message", [
        ({}, "cannot be empty"),
        ({"room_extent": [1, 1, 1]}, "'seed'"),
        ({"seed": -1}, ">= 0"),
        ({"seed": 1.5}, "integer"),
        ({"seed": 1, "colour": "red"}, "Unknown scene keys"),
        ({"seed": 1, "room_extent": [6, 6]}, "list of 3"),
        ({"seed": 1, "room_extent": [6, 0, 3]}, "positive"),
        ({"seed": 1, "light_direction": [0, 0, 0]}, "non-zero"),
        ({"seed": 1, "wall_texture": {"type": "marble"}}, "Unsupported texture"),
    ])
    def test_invalid(self, config, message):
        with pytest.raises(ConfigValidationError, match=message):
            validate_scene_config(config)

    @pytest.mark.parametrize("obj, message", [
        ({"size": [1, 1, 1]}, "'shape'"),
        ({"shape": "torus", "size": [1]}, "Unsupported shape"),
        ({"shape": "box", "size": [1, 1]}, "needs 3 size entries"),
        ({"shape": "sphere", "size": -0.5}, "positive"),
        ({"shape": "plane", "size": [1, 1], "texture": {"type": "noise"}}, "Unsupported texture"),
        ({"shape": "box", "size": [1, 1, 1], "position": [0.0]}, "list of 2"),
        ({"shape": "box", "size": [1, 1, 1], "weight": 3}, "Unknown object 0 keys"),
    ])
    def test_invalid_object(self, obj, message):
        with pytest.raises(ConfigValidationError, match=message):
            validate_scene_config({"seed": 1, "objects": [obj]})

    def test_scalar_sphere_size(self):
        validate_scene_config({"seed": 1, "objects": [{"shape": "sphere", "size": 0.3}]})


class TestPipelineConfig:

    def test_minimal(self):
        validate_pipeline_config(pipeline())

    def test_run_keys_allowed(self):
        validate_pipeline_config(pipeline(name="run", input_views="runs/views"))

    def test_missing_scene(self):
        config = pipeline()
        del config["scene"]
        with pytest.raises(ConfigValidationError, match="'scene'"):
            validate_pipeline_config(config)

    def test_unknown_generator(self):
        with pytest.raises(ConfigValidationError, match="Unsupported generator"):
            validate_pipeline_config(pipeline(generator="diffusion"))

    def test_last_cycle_must_precede_total(self):
        with pytest.raises(ConfigValidationError, match="does not precede"):
            validate_pipeline_config(pipeline(cycle_count=3))

    def test_no_cycles_skips_schedule_check(self):
        validate_pipeline_config(pipeline(cycle_count=0, base_first_cycle=20000))

    @pytest.mark.parametrize("overrides, message", [
        ({"n_views": 0}, "'n_views'"),
        ({"resolution": 4}, "'resolution'"),
        ({"fov_deg": 180}, "'fov_deg'"),
        ({"init_completion": "yes"}, "true or false"),
        ({"confidence_floor": 1.5}, "'confidence_floor'"),
        ({"input_views": 3}, "directory path"),
        ({"iterations": 10}, "Unknown reconstruction keys"),
    ])
    def test_invalid_fields(self, overrides, message):
        with pytest.raises(ConfigValidationError, match=message):
            validate_pipeline_config(pipeline(**overrides))

    @pytest.mark.parametrize("block, message", [
        ({"loss": {"lambda1": -1}}, "'lambda1'"),
        ({"loss": {"gamma": 1}}, "Unknown loss keys"),
        ({"sampler": {"s_low": 0.5, "s_high": 0.4}}, "s_low < s_high"),
        ({"sampler": {"frames": 4, "keyframes": 6}}, "cannot exceed"),
        ({"sampler": {"elevation_offsets_deg": [0, 90]}}, "Elevation"),
        ({"sampler": {"azimuth_spans_deg": []}}, "non-empty list"),
        ({"schedule": {"T0": 0.5, "T1": 0.6}}, "T0 > T1 > T2"),
        ({"schedule": {"rho": 0}}, "'rho'"),
        ({"schedule": {"ramp_mode": "cosine"}}, "Unsupported ramp mode"),
    ])
    def test_invalid_nested_blocks(self, block, message):
        with pytest.raises(ConfigValidationError, match=message):
            validate_pipeline_config(pipeline(**block))

    def test_pinned_schedule_allowed(self):
        validate_pipeline_config(pipeline(schedule={"T0": 0.98, "pinned": True}))

    @pytest.mark.parametrize("schedule", [{"T1": 0.0, "T2": 0.0}, {"T1": 0.4, "T2": 0.4}])
    def test_collapsed_ramp_needs_pinned_flag(self, schedule):
        with pytest.raises(ConfigValidationError, match="pinned"):
            validate_pipeline_config(pipeline(schedule=schedule))

    def test_pinned_flag_must_be_boolean(self):
        with pytest.raises(ConfigValidationError, match="true or false"):
            validate_pipeline_config(pipeline(schedule={"pinned": "yes"}))


class TestDenoiseConfig:

    def test_empty_is_valid(self):
        validate_denoise_config({})

    @pytest.mark.parametrize("config, message", [
        ({"mode": "sharpen"}, "Unsupported denoise mode"),
        ({"noise_mode": "fresh"}, "Unsupported noise mode"),
        ({"mask": "checker"}, "Unsupported mask"),
        ({"field": "learned"}, "Unsupported field"),
        ({"modes": 3}, "'modes'"),
        ({"dim": 0}, "'dim'"),
        ({"data_variance": 0}, "'data_variance'"),
        ({"schedule": {"T0": 0.3, "T1": 0.6}}, "T0 > T1"),
    ])
    def test_invalid(self, config, message):
        with pytest.raises(ConfigValidationError, match=message):
            validate_denoise_config(config)


class TestMetricNames:

    def test_known(self):
        validate_metric_names(["cd", "psnr"])

    def test_empty(self):
        with pytest.raises(ConfigValidationError):
            validate_metric_names([])

    def test_unknown(self):
        with pytest.raises(ConfigValidationError, match="Unsupported metric 'iou'"):
            validate_metric_names(["cd", "iou"])
