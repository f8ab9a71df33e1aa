"""
Module to validate JSON configuration dictionaries for scenes, reconstruction runs
and denoising demos. Validates configs before execution to catch errors early with
clear messages.
"""

from numbers import Number
from typing import Any, Dict, Iterable, List

# Import registries to validate against supported options
from sparse_view_recon.exceptions import ConfigValidationError
from sparse_view_recon.generators import GENERATORS
from sparse_view_recon.guided_denoise import DENOISE_MODES, NOISE_MODES, RAMP_MODES
from sparse_view_recon.metrics_eval import METRICS
from sparse_view_recon.scene_oracle import SHAPE_BUILDERS, TEXTURES

__all__ = [
    "ConfigValidationError",
    "validate_scene_config",
    "validate_pipeline_config",
    "validate_denoise_config",
    "validate_metric_names",
]

SCENE_KEYS = {"seed", "room_extent", "objects", "light_direction", "wall_texture", "keepout_fraction"}
OBJECT_KEYS = {"shape", "size", "texture", "position", "yaw"}
LOSS_KEYS = {"lambda1", "lambda2", "pyramid_levels", "ssim_weight"}
SCHEDULE_KEYS = {"T0", "T1", "T2", "rho", "ramp_mode", "pinned"}
SAMPLER_KEYS = {
    "s_low", "s_high", "d0", "d0_fraction", "azimuth_spans_deg", "elevation_offsets_deg",
    "frames", "keyframes", "extension", "max_trajectories", "point_hit_tolerance", "up",
}
PIPELINE_KEYS = {
    "scene", "n_views", "resolution", "fov_deg", "desk_factor", "base_iterations", "base_first_cycle",
    "base_cycle_period", "cycle_count", "generator", "init_completion", "train_completion", "seed",
    "point_stride", "dedup_voxel_fraction", "densify_stride", "normal_noise", "grid_resolution",
    "truncation_voxels", "held_out_views", "eval_samples", "fscore_fraction", "confidence_tau",
    "confidence_floor", "denoise_steps", "workers", "loss", "sampler", "schedule",
}
# keys only the command line reads; stripped before building a PipelineConfig
RUN_KEYS = {"name", "input_views"}
DENOISE_KEYS = {
    "name", "mode", "dim", "data_mean", "data_variance", "modes", "mask", "runs", "num_steps", "seed",
    "noise_mode", "field", "train_steps", "schedule",
}
SIZE_ARITY = {"box": 3, "sphere": 1, "plane": 2}
MASK_KINDS = ("half_space", "full", "none")
FIELD_KINDS = ("analytic", "trained")


def _check_unknown(config: Dict[str, Any], valid: Iterable[str], where: str) -> None:
    unknown = set(config) - set(valid)
    if unknown:
        raise ConfigValidationError(f"Unknown {where} keys: {sorted(unknown)}")


def _is_number(value) -> bool:
    return isinstance(value, Number) and not isinstance(value, bool)


def _require_int(config: Dict[str, Any], key: str, minimum: int) -> None:
    if key not in config:
        return
    value = config[key]
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigValidationError(f"'{key}' must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigValidationError(f"'{key}' must be >= {minimum}, got {value}")


def _require_number(config: Dict[str, Any], key: str, low=None, high=None, strict_low: bool = False) -> None:
    if key not in config:
        return
    value = config[key]
    if not _is_number(value):
        raise ConfigValidationError(f"'{key}' must be a number, got {value!r}")
    if low is not None and (value <= low if strict_low else value < low):
        raise ConfigValidationError(f"'{key}' must be {'>' if strict_low else '>='} {low}, got {value}")
    if high is not None and value > high:
        raise ConfigValidationError(f"'{key}' must be <= {high}, got {value}")


def _require_vector(config: Dict[str, Any], key: str, length: int) -> None:
    if key not in config:
        return
    value = config[key]
    if not isinstance(value, list) or len(value) != length or not all(_is_number(v) for v in value):
        raise ConfigValidationError(f"'{key}' must be a list of {length} numbers")


def _require_bool(config: Dict[str, Any], key: str) -> None:
    if key in config and not isinstance(config[key], bool):
        raise ConfigValidationError(f"'{key}' must be true or false")


def _validate_texture(texture: Any, where: str) -> None:
    if not isinstance(texture, dict):
        raise ConfigValidationError(f"{where} texture must be an object")
    kind = texture.get("type")
    if kind not in TEXTURES:
        raise ConfigValidationError(
            f"Unsupported texture '{kind}' in {where}. Supported textures: {sorted(TEXTURES)}"
        )


def validate_scene_config(config: Dict[str, Any]) -> None:
    """
    Validate a scene document.
    Checks: required seed, room extent, object shapes and textures against the registries.
    """
    if not isinstance(config, dict) or not config:
        raise ConfigValidationError("Scene config cannot be empty")
    if "seed" not in config:
        raise ConfigValidationError("Scene config must contain 'seed' key")
    _check_unknown(config, SCENE_KEYS, "scene")
    _require_int(config, "seed", 0)
    _require_vector(config, "room_extent", 3)
    if "room_extent" in config and min(config["room_extent"]) <= 0:
        raise ConfigValidationError("'room_extent' entries must be positive")
    _require_vector(config, "light_direction", 3)
    if "light_direction" in config and not any(config["light_direction"]):
        raise ConfigValidationError("'light_direction' must be non-zero")
    _require_number(config, "keepout_fraction", 0.0, 1.0)
    if "wall_texture" in config:
        _validate_texture(config["wall_texture"], "wall")

    objects = config.get("objects", [])
    if not isinstance(objects, list):
        raise ConfigValidationError("'objects' must be a list")
    for index, obj in enumerate(objects):
        _validate_object(obj, index)


def _validate_object(obj: Any, index: int) -> None:
    where = f"object {index}"
    if not isinstance(obj, dict):
        raise ConfigValidationError(f"{where} must be an object")
    for key in ("shape", "size"):
        if key not in obj:
            raise ConfigValidationError(f"{where} must contain '{key}' key")
    _check_unknown(obj, OBJECT_KEYS, where)
    if obj["shape"] not in SHAPE_BUILDERS:
        raise ConfigValidationError(
            f"Unsupported shape '{obj['shape']}' in {where}. Supported shapes: {sorted(SHAPE_BUILDERS)}"
        )
    size = obj["size"] if isinstance(obj["size"], list) else [obj["size"]]
    if not size or not all(_is_number(s) and s > 0 for s in size):
        raise ConfigValidationError(f"{where} size entries must be positive numbers")
    if len(size) != SIZE_ARITY.get(obj["shape"], len(size)):
        raise ConfigValidationError(f"{where} '{obj['shape']}' needs {SIZE_ARITY[obj['shape']]} size entries")
    if "texture" in obj:
        _validate_texture(obj["texture"], where)
    if obj.get("position") is not None:
        _require_vector(obj, "position", 2)
    if obj.get("yaw") is not None:
        _require_number(obj, "yaw")


def _validate_loss(config: Any) -> None:
    if not isinstance(config, dict):
        raise ConfigValidationError("'loss' must be an object")
    _check_unknown(config, LOSS_KEYS, "loss")
    _require_number(config, "lambda1", 0.0)
    _require_number(config, "lambda2", 0.0)
    _require_int(config, "pyramid_levels", 1)
    _require_number(config, "ssim_weight", 0.0, 1.0)


def _validate_schedule(config: Any) -> None:
    if not isinstance(config, dict):
        raise ConfigValidationError("'schedule' must be an object")
    _check_unknown(config, SCHEDULE_KEYS, "schedule")
    for key in ("T0", "T1", "T2"):
        _require_number(config, key, 0.0, 1.0)
    _require_number(config, "rho", 0.0, strict_low=True)
    _require_bool(config, "pinned")
    t0, t1, t2 = config.get("T0", 0.98), config.get("T1", 0.6), config.get("T2", 0.3)
    if config.get("pinned", False):
        if t0 <= 0:
            raise ConfigValidationError(f"Pinned schedule needs T0 > 0, got {t0}")
    elif not t0 > t1 > t2:
        raise ConfigValidationError(
            f"Schedule needs T0 > T1 > T2 (use \"pinned\": true for T1 = T2 = 0), got {t0}, {t1}, {t2}"
        )
    if "ramp_mode" in config and config["ramp_mode"] not in RAMP_MODES:
        raise ConfigValidationError(
            f"Unsupported ramp mode '{config['ramp_mode']}'. Supported modes: {sorted(RAMP_MODES)}"
        )


def _validate_sampler(config: Any) -> None:
    if not isinstance(config, dict):
        raise ConfigValidationError("'sampler' must be an object")
    _check_unknown(config, SAMPLER_KEYS, "sampler")
    _require_number(config, "s_low", 0.0, 1.0)
    _require_number(config, "s_high", 0.0, 1.0)
    if config.get("s_low", 0.05) >= config.get("s_high", 0.45):
        raise ConfigValidationError("Sampler needs s_low < s_high")
    if config.get("d0") is not None:
        _require_number(config, "d0", 0.0, strict_low=True)
    _require_number(config, "d0_fraction", 0.0, strict_low=True)
    _require_int(config, "frames", 2)
    _require_int(config, "keyframes", 1)
    if config.get("keyframes", 4) > config.get("frames", 16):
        raise ConfigValidationError("Sampler keyframes cannot exceed frames")
    _require_number(config, "extension", 0.0)
    _require_int(config, "max_trajectories", 1)
    _require_number(config, "point_hit_tolerance", 0.0, strict_low=True)
    _require_vector(config, "up", 3)
    for key in ("azimuth_spans_deg", "elevation_offsets_deg"):
        if key in config:
            value = config[key]
            if not isinstance(value, list) or not value or not all(_is_number(v) for v in value):
                raise ConfigValidationError(f"'{key}' must be a non-empty list of numbers")
    if any(abs(e) >= 90 for e in config.get("elevation_offsets_deg", [])):
        raise ConfigValidationError("Elevation offsets must lie strictly inside (-90, 90) degrees")


def validate_pipeline_config(config: Dict[str, Any]) -> None:
    """
    Validate a reconstruction config.
    Checks: scene block, iteration schedule, generator registry, nested loss/sampler/schedule blocks.
    """
    if not isinstance(config, dict) or not config:
        raise ConfigValidationError("Reconstruction config cannot be empty")
    if "scene" not in config:
        raise ConfigValidationError("Reconstruction config must contain 'scene' key")
    _check_unknown(config, PIPELINE_KEYS | RUN_KEYS, "reconstruction")
    validate_scene_config(config["scene"])

    for key, minimum in (("n_views", 1), ("resolution", 8), ("base_iterations", 1), ("base_first_cycle", 0),
                         ("base_cycle_period", 1), ("cycle_count", 0), ("seed", 0), ("point_stride", 1),
                         ("densify_stride", 1), ("grid_resolution", 8), ("held_out_views", 0),
                         ("eval_samples", 1), ("denoise_steps", 1), ("workers", 1)):
        _require_int(config, key, minimum)
    _require_number(config, "fov_deg", 0.0, 179.0, strict_low=True)
    _require_number(config, "desk_factor", 0.0, strict_low=True)
    _require_number(config, "dedup_voxel_fraction", 0.0, strict_low=True)
    _require_number(config, "normal_noise", 0.0)
    _require_number(config, "truncation_voxels", 0.0, strict_low=True)
    _require_number(config, "fscore_fraction", 0.0, strict_low=True)
    _require_number(config, "confidence_tau", 0.0, strict_low=True)
    _require_number(config, "confidence_floor", 0.0, 1.0)
    _require_bool(config, "init_completion")
    _require_bool(config, "train_completion")

    generator = config.get("generator", "oracle")
    if generator not in GENERATORS:
        raise ConfigValidationError(
            f"Unsupported generator '{generator}'. Supported generators: {sorted(GENERATORS)}"
        )

    # Cycle schedule must fit inside the (scaled) iteration budget
    factor = config.get("desk_factor", 0.2)
    total = round(config.get("base_iterations", 15000) * factor)
    first = round(config.get("base_first_cycle", 7000) * factor)
    period = round(config.get("base_cycle_period", 4000) * factor)
    count = config.get("cycle_count", 2)
    if count > 0 and first + (count - 1) * period >= total:
        raise ConfigValidationError(
            f"Last cycle at iteration {first + (count - 1) * period} does not precede the total of {total}"
        )

    if "loss" in config:
        _validate_loss(config["loss"])
    if "sampler" in config:
        _validate_sampler(config["sampler"])
    if "schedule" in config:
        _validate_schedule(config["schedule"])
    if "input_views" in config and not isinstance(config["input_views"], str):
        raise ConfigValidationError("'input_views' must be a directory path")


def validate_denoise_config(config: Dict[str, Any]) -> None:
    """Validate a guided-denoising demo config against the denoise-mode and noise-mode registries."""
    if not isinstance(config, dict):
        raise ConfigValidationError("Denoise config must be an object")
    _check_unknown(config, DENOISE_KEYS, "denoise")
    if "mode" in config and config["mode"] not in DENOISE_MODES:
        raise ConfigValidationError(
            f"Unsupported denoise mode '{config['mode']}'. Supported modes: {sorted(DENOISE_MODES)}"
        )
    if "noise_mode" in config and config["noise_mode"] not in NOISE_MODES:
        raise ConfigValidationError(
            f"Unsupported noise mode '{config['noise_mode']}'. Supported modes: {list(NOISE_MODES)}"
        )
    if "mask" in config and config["mask"] not in MASK_KINDS:
        raise ConfigValidationError(f"Unsupported mask '{config['mask']}'. Supported masks: {list(MASK_KINDS)}")
    if "field" in config and config["field"] not in FIELD_KINDS:
        raise ConfigValidationError(f"Unsupported field '{config['field']}'. Supported fields: {list(FIELD_KINDS)}")
    if "modes" in config and config["modes"] not in (1, 2):
        raise ConfigValidationError("'modes' must be 1 or 2")
    for key, minimum in (("dim", 1), ("runs", 1), ("num_steps", 1), ("seed", 0), ("train_steps", 1)):
        _require_int(config, key, minimum)
    _require_number(config, "data_mean")
    _require_number(config, "data_variance", 0.0, strict_low=True)
    if "schedule" in config:
        _validate_schedule(config["schedule"])


def validate_metric_names(metrics: List[str]) -> None:
    if not metrics:
        raise ConfigValidationError("At least one metric must be requested")
    for name in metrics:
        if name not in METRICS:
            raise ConfigValidationError(f"Unsupported metric '{name}'. Supported metrics: {sorted(METRICS)}")
