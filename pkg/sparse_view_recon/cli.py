"""
Command-line entry points.

    svr synth SPEC.json OUT [--views N] [--seed S]
    svr reconstruct CONFIG.json [--out DIR] [--generator G] [--init-completion BOOL] ...
    svr denoise-demo [--config CONFIG.json] [--mode MODE] [--out DIR]
    svr eval PRED GT [--metrics cd f_score ...] [--out FILE]

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sparse_view_recon import __version__
from sparse_view_recon.config_validator import (
    validate_denoise_config, validate_metric_names, validate_pipeline_config, validate_scene_config,
)
from sparse_view_recon.exceptions import (
    ConfigValidationError, DomainError, ReconError, UnsupportedOptionError,
)
from sparse_view_recon.flow_match import GaussianMixture, MixtureSampler, MLPField, train_field
from sparse_view_recon.generators import GENERATORS
from sparse_view_recon.geometry import CameraIntrinsics
from sparse_view_recon.guided_denoise import (
    DENOISE_MODES, DenoiseConfig, GuidanceSchedule, ReferencePair, guided_denoise,
)
from sparse_view_recon.metrics_eval import MetricReport, evaluate_meshes, psnr, report_frame, ssim
from sparse_view_recon.recon_pipeline import PipelineConfig, ViewRecord, run_reconstruction
from sparse_view_recon.scene_oracle import (
    SceneSpec, build_scene, default_view_poses, perturb_normals, render_ground_truth,
)
from sparse_view_recon.serialization import (
    load_float_map, load_mesh, load_png, load_poses, save_float_map, save_mesh, save_png, save_poses,
    save_surfels, save_table, write_json_atomic,
)

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SVR_OUTPUT_ROOT"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
USAGE_ERRORS = (ConfigValidationError, DomainError, UnsupportedOptionError, FileNotFoundError,
                json.JSONDecodeError)
MESH_SUFFIXES = (".ply", ".obj")
IMAGE_SUFFIXES = (".png",)
SURFACE_METRICS = ("cd", "f_score", "nc")
IMAGE_METRICS = ("psnr", "ssim")


# ---------------------------------------------------------------------------
# Run plumbing
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: int
    output_dir: str
    version: str = __version__
    timings: Dict[str, float] = field(default_factory=dict)
    # resolved config; feeding the manifest back to the same command reruns it
    config: Dict[str, Any] = field(default_factory=dict)

    def write(self, path) -> None:
        write_json_atomic(path, asdict(self))


def resolve_output_dir(path) -> Path:
    """Relative output paths are placed under $SVR_OUTPUT_ROOT when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def configure_logging(level: str = "INFO", log_file: Optional[Path] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode="w"))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _attach_run_log(out_dir: Path) -> None:
    handler = logging.FileHandler(out_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)


def load_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path) as handle:
        return json.load(handle)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"Expected true or false, got '{text}'")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _view_dir(out_dir: Path, index: int) -> Path:
    return out_dir / "views" / f"view_{index:03d}"


def cmd_synth(spec_path, out_dir, views: int = 5, seed: Optional[int] = None, resolution: int = 64,
              fov_deg: float = 60.0) -> RunManifest:
    """Build the scene, write its mesh and N ground-truth views on the default inward arc."""
    if views < 0:
        raise ConfigValidationError("--views must be >= 0")
    started = time.perf_counter()
    document = load_json(spec_path)
    if seed is not None:
        document = {**document, "seed": seed}
    validate_scene_config(document)
    spec = SceneSpec.from_dict(document)
    scene = build_scene(spec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _attach_run_log(out_dir)

    write_json_atomic(out_dir / "scene.json", spec.to_dict())
    save_mesh(out_dir / "scene_mesh.ply", scene.mesh)
    intrinsics = CameraIntrinsics.from_fov(resolution, resolution, fov_deg)
    poses = default_view_poses(scene, views)
    if poses:
        write_json_atomic(out_dir / "intrinsics.json", intrinsics.to_dict())
        save_poses(out_dir / "poses.json", poses)
    for index, pose in enumerate(poses):
        gt = render_ground_truth(scene, intrinsics, pose)
        folder = _view_dir(out_dir, index)
        save_png(folder / "rgb.png", gt.rgb)
        save_float_map(folder / "depth.bin", gt.depth, units="world")
        save_float_map(folder / "normal.bin", gt.normal, units="unit")
    logger.info("Synthesised scene seed=%d with %d views into %s", spec.seed, len(poses), out_dir)

    manifest = RunManifest("synth", str(spec_path), spec.seed, str(out_dir),
                           timings={"synth": time.perf_counter() - started},
                           config={"scene": spec.to_dict(), "views": views, "resolution": resolution,
                                   "fov_deg": fov_deg})
    manifest.write(out_dir / "manifest.json")
    return manifest


def load_synth_views(views_dir, normal_noise: float = 0.0, seed: int = 0) -> Tuple[SceneSpec, List[ViewRecord]]:
    """Read a `synth` output directory back as ground-truth input views."""
    views_dir = Path(views_dir)
    if not views_dir.is_dir():
        raise FileNotFoundError(f"Input views directory not found: {views_dir}")
    spec = SceneSpec.from_dict(load_json(views_dir / "scene.json"))
    intrinsics = CameraIntrinsics.from_dict(load_json(views_dir / "intrinsics.json"))
    records = []
    for index, pose in enumerate(load_poses(views_dir / "poses.json")):
        folder = _view_dir(views_dir, index)
        rgb = load_png(folder / "rgb.png")[..., :3]
        depth = load_float_map(folder / "depth.bin")
        normal = perturb_normals(load_float_map(folder / "normal.bin"), normal_noise, seed * 1000 + index)
        records.append(ViewRecord(pose, intrinsics, rgb, depth, normal))
    return spec, records


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _reconstruct_document(config_path, overrides: Dict[str, Any]) -> Dict[str, Any]:
    document = load_json(config_path)
    # a previous run's manifest carries its resolved config
    if "command" in document and "config" in document:
        document = document["config"]
    document = {**document, **{k: v for k, v in overrides.items() if v is not None}}
    validate_pipeline_config(document)
    return document


def cmd_reconstruct(config_path, out_dir=None, overrides: Optional[Dict[str, Any]] = None,
                    progress: bool = False) -> RunManifest:
    started = time.perf_counter()
    document = _reconstruct_document(config_path, overrides or {})
    run_name = document.get("name", Path(config_path).stem)
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(Path("runs") / run_name)
    out_dir.mkdir(parents=True, exist_ok=True)
    _attach_run_log(out_dir)

    input_views = None
    pipeline_doc = {k: v for k, v in document.items() if k not in ("name", "input_views")}
    if "input_views" in document:
        spec, input_views = load_synth_views(document["input_views"], document.get("normal_noise", 0.05),
                                             document.get("seed", 0))
        pipeline_doc["scene"] = spec.to_dict()
    config = PipelineConfig.from_dict(pipeline_doc)
    logger.info("Reconstruction '%s': generator=%s, %d iterations, cycles at %s", run_name, config.generator,
                config.total_iterations, config.cycle_iterations)

    result = run_reconstruction(config, input_views=input_views, output_dir=out_dir, progress=progress)

    save_surfels(out_dir / "primitives.ply", result.cloud)
    if not result.mesh.is_empty:
        save_mesh(out_dir / "mesh.ply", result.mesh)
    save_table(out_dir / "metrics.csv", report_frame([result.report]))
    save_table(out_dir / "loss_trace.csv", result.loss_trace)
    save_table(out_dir / "rejections.csv", result.rejection_log)
    write_json_atomic(out_dir / "view_set.json", result.view_set.summary())

    timings = dict(result.timings)
    timings["total"] = time.perf_counter() - started
    manifest = RunManifest("reconstruct", str(config_path), config.seed, str(out_dir), timings=timings,
                           config=document)
    manifest.write(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# denoise-demo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiseDemoConfig:
    mode: str = "full"
    dim: int = 64
    data_mean: float = 1.0
    data_variance: float = 0.01
    modes: int = 2
    mask: str = "half_space"
    runs: int = 20
    num_steps: int = 50
    seed: int = 0
    noise_mode: str = "shared"
    field: str = "analytic"
    train_steps: int = 2000
    schedule: GuidanceSchedule = GuidanceSchedule()

    def __post_init__(self):
        if self.mode not in DENOISE_MODES:
            raise UnsupportedOptionError("denoise mode", self.mode, DENOISE_MODES)
        if self.modes not in (1, 2):
            raise DomainError("modes must be 1 or 2")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DenoiseDemoConfig":
        kwargs = {k: v for k, v in data.items() if k != "name"}
        if "schedule" in kwargs:
            kwargs["schedule"] = GuidanceSchedule.from_dict(kwargs["schedule"])
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["schedule"] = self.schedule.to_dict()
        return out

    def mixture(self) -> GaussianMixture:
        mu = np.full(self.dim, self.data_mean)
        means = [mu] if self.modes == 1 else [mu, -mu]
        return GaussianMixture.isotropic(means, self.data_variance)

    def reference(self) -> ReferencePair:
        mask = np.zeros(self.dim)
        if self.mask == "half_space":
            mask[: self.dim // 2] = 1.0
        elif self.mask == "full":
            mask[:] = 1.0
        return ReferencePair(np.full(self.dim, self.data_mean), mask)


SUMMARY_COLUMNS = ["run", "mode", "masked_mse", "unmasked_mean"]


def run_denoise_demo(config: DenoiseDemoConfig, progress: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame, np.ndarray]:
    """Per-step traces, per-run summary and terminal latents (runs x dim)."""
    mixture = config.mixture()
    velocity_field = mixture
    if config.field == "trained":
        velocity_field, _ = train_field(MLPField.create(config.dim, seed=config.seed), MixtureSampler(mixture),
                                        config.train_steps, seed=config.seed, progress=progress)
    reference = config.reference()
    traces, rows, latents = [], [], []
    known = reference.mask > 0.5
    for run in range(config.runs):
        result = guided_denoise(velocity_field, reference, config.schedule,
                                DenoiseConfig(config.num_steps, config.seed + run, noise_mode=config.noise_mode),
                                mode=config.mode)
        traces.append(result.trace.assign(run=run, mode=config.mode))
        err = (result.latent - reference.x0_ref) ** 2
        rows.append({
            "run": run, "mode": config.mode,
            "masked_mse": float(err[known].mean()) if known.any() else float("nan"),
            "unmasked_mean": float(result.latent[~known].mean()) if (~known).any() else float("nan"),
        })
        latents.append(result.latent)
    return pd.concat(traces, ignore_index=True), pd.DataFrame(rows, columns=SUMMARY_COLUMNS), np.stack(latents)


def cmd_denoise_demo(config_path=None, mode: Optional[str] = None, out_dir=None, runs: Optional[int] = None,
                     seed: Optional[int] = None, progress: bool = False) -> RunManifest:
    started = time.perf_counter()
    document = load_json(config_path) if config_path is not None else {}
    overrides = {"mode": mode, "runs": runs, "seed": seed}
    document = {**document, **{k: v for k, v in overrides.items() if v is not None}}
    validate_denoise_config(document)
    config = DenoiseDemoConfig.from_dict(document)
    out_dir = Path(out_dir) if out_dir is not None else resolve_output_dir(Path("denoise") / config.mode)
    out_dir.mkdir(parents=True, exist_ok=True)
    _attach_run_log(out_dir)

    trace, summary, latents = run_denoise_demo(config, progress)
    save_table(out_dir / "trace.csv", trace)
    save_table(out_dir / "summary.csv", summary)
    lo, hi = float(latents.min()), float(latents.max())
    save_png(out_dir / "terminal.png", (latents - lo) / (hi - lo) if hi > lo else np.zeros_like(latents))
    logger.info("Denoise demo mode=%s: mean masked MSE %.5f over %d runs", config.mode,
                summary["masked_mse"].mean(), config.runs)

    manifest = RunManifest("denoise-demo", None if config_path is None else str(config_path), config.seed,
                           str(out_dir), timings={"denoise": time.perf_counter() - started},
                           config=config.to_dict())
    manifest.write(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _kind(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in MESH_SUFFIXES:
        return "mesh"
    if suffix in IMAGE_SUFFIXES:
        return "image"
    raise ConfigValidationError(f"Unsupported file type '{suffix}' for evaluation")


def cmd_eval(pred_path, gt_path, metrics: Optional[Sequence[str]] = None, out_path=None,
             samples: int = 100_000, seed: int = 0, scene: str = "scene") -> pd.DataFrame:
    """Mesh pairs get surface metrics, PNG pairs image metrics; the CSV keeps the fixed column order."""
    pred_path, gt_path = Path(pred_path), Path(gt_path)
    for path in (pred_path, gt_path):
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
    kind = _kind(pred_path)
    if _kind(gt_path) != kind:
        raise ConfigValidationError("Prediction and ground truth must both be meshes or both be images")
    available = SURFACE_METRICS if kind == "mesh" else IMAGE_METRICS
    metrics = list(available) if metrics is None else list(metrics)
    validate_metric_names(metrics)
    wrong = [m for m in metrics if m not in available]
    if wrong:
        raise ConfigValidationError(f"Metrics {wrong} do not apply to {kind} inputs")

    if kind == "mesh":
        report = evaluate_meshes(load_mesh(pred_path), load_mesh(gt_path), scene, samples, seed=seed)
    else:
        x, y = load_png(pred_path), load_png(gt_path)
        report = MetricReport(scene, psnr=psnr(x, y), ssim=ssim(x, y))
    frame = report_frame([report], metrics)
    if out_path is not None:
        save_table(out_path, frame)
    return frame


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def create_argument_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svr",
        description="Sparse-view surfel reconstruction with generative view completion",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Render a scene and five input views
  svr synth config/scene.json out/scene --views 5

  # Full reconstruction, then the no-completion ablation
  svr reconstruct config/reconstruct.json --out out/full
  svr reconstruct config/reconstruct.json --generator passthrough --out out/none

  # Guidance ablation
  svr denoise-demo --config config/denoise_demo.json --mode no_mask
        """,
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Build a scene and render ground-truth views")
    synth.add_argument("spec", help="Scene spec JSON")
    synth.add_argument("out", help="Output directory")
    synth.add_argument("--views", type=int, default=5)
    synth.add_argument("--seed", type=int, default=None, help="Overrides the scene seed")
    synth.add_argument("--resolution", type=int, default=64)
    synth.add_argument("--fov", type=float, default=60.0)

    recon = sub.add_parser("reconstruct", help="Run the reconstruction pipeline")
    recon.add_argument("config", help="Pipeline config JSON (or a previous run manifest)")
    recon.add_argument("--out", default=None)
    recon.add_argument("--generator", choices=sorted(GENERATORS), default=None)
    recon.add_argument("--init-completion", type=_parse_bool, default=None)
    recon.add_argument("--train-completion", type=_parse_bool, default=None)
    recon.add_argument("--seed", type=int, default=None)
    recon.add_argument("--workers", type=int, default=None)
    recon.add_argument("--input-views", default=None, help="Directory written by `synth`")
    recon.add_argument("--progress", action="store_true")

    demo = sub.add_parser("denoise-demo", help="Guided-denoising ablation on an analytic field")
    demo.add_argument("--config", default=None)
    demo.add_argument("--mode", choices=sorted(DENOISE_MODES), default=None)
    demo.add_argument("--out", default=None)
    demo.add_argument("--runs", type=int, default=None)
    demo.add_argument("--seed", type=int, default=None)

    ev = sub.add_parser("eval", help="Compare a prediction against ground truth")
    ev.add_argument("pred")
    ev.add_argument("gt")
    ev.add_argument("--metrics", nargs="+", default=None)
    ev.add_argument("--out", default=None, help="Metrics CSV path")
    ev.add_argument("--samples", type=int, default=100_000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--scene", default="scene")
    return parser


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "synth":
        cmd_synth(args.spec, resolve_output_dir(args.out), args.views, args.seed, args.resolution, args.fov)
    elif args.command == "reconstruct":
        overrides = {
            "generator": args.generator, "init_completion": args.init_completion,
            "train_completion": args.train_completion, "seed": args.seed, "workers": args.workers,
            "input_views": args.input_views,
        }
        out_dir = None if args.out is None else resolve_output_dir(args.out)
        cmd_reconstruct(args.config, out_dir, overrides, progress=args.progress)
    elif args.command == "denoise-demo":
        out_dir = None if args.out is None else resolve_output_dir(args.out)
        cmd_denoise_demo(args.config, args.mode, out_dir, args.runs, args.seed)
    elif args.command == "eval":
        frame = cmd_eval(args.pred, args.gt, args.metrics, args.out, args.samples, args.seed, args.scene)
        print(frame.to_string(index=False))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = create_argument_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    configure_logging(args.log_level)
    try:
        _dispatch(args)
    except USAGE_ERRORS as exc:
        logger.error("%s", exc)
        return 2
    except ReconError as exc:
        logger.error("Run failed: %s", exc)
        return 1
    except Exception:
        logger.exception("Unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
