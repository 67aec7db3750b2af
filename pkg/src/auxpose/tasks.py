"""End-to-end operations: generate data, train, evaluate, colorize, ablate.

These are the verbs behind the service endpoints; each takes resolved
configuration values (see runconfig), plain paths, and returns a JSON-safe
summary dict.  Path or value problems raise ValueError / FileNotFoundError
(caller maps them to usage errors); mid-run failures raise RuntimeError
subclasses.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .colorspace import AB_SCALE, L_SCALE, LabImage, lab_to_rgb, rgb_to_lab
from .evalmetrics import (
    ablate,
    evaluate,
    export_attention_masks,
    export_trajectory,
    median_low,
    write_metrics_report,
)
from .model import (
    Model,
    ModelConfig,
    apply_checkpoint,
    colorizer_forward,
    init_model,
    load_checkpoint,
)
from .runconfig import model_config_from, train_config_from
from .synthscene import (
    TrajectorySpec,
    generate_dataset,
    generate_scene,
    load_manifest,
    load_split,
    read_pgm,
    read_ppm,
    write_ppm,
)
from .trainer import (
    latest_checkpoint,
    load_adam_state,
    load_norm_stats,
    prepare_samples,
    run_training,
    train,
)

MODEL_CONFIG_NAME = "model_config.json"
METRICS_NAME = "metrics.json"
TRAJECTORY_NAME = "trajectory.csv"
ABLATION_NAME = "ablation.csv"


def _require_dataset(dataset_dir) -> Path:
    path = Path(dataset_dir)
    if not (path / "scene.json").is_file():
        raise FileNotFoundError(f"no dataset at {path} (scene.json missing)")
    return path


def _refuse_non_empty(out_dir, force: bool) -> Path:
    path = Path(out_dir)
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ValueError(
            f"output directory {path} is not empty; pass force to reuse it")
    os.makedirs(path, exist_ok=True)
    return path


def save_model_config(path, config: ModelConfig) -> None:
    payload = dataclasses.asdict(config)
    payload["backbone_widths"] = list(config.backbone_widths)
    with open(path, "w", encoding="ascii") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def load_model_config(path) -> ModelConfig:
    with open(path, "r", encoding="ascii") as f:
        payload = json.load(f)
    payload["backbone_widths"] = tuple(payload["backbone_widths"])
    return ModelConfig(**payload)


def load_run(run_dir, checkpoint: Optional[str] = None):
    """Model (with installed weights) and normalization stats of a run."""
    run_dir = Path(run_dir)
    config_path = run_dir / MODEL_CONFIG_NAME
    if not config_path.is_file():
        raise FileNotFoundError(f"no trained run at {run_dir} "
                                f"({MODEL_CONFIG_NAME} missing)")
    config = load_model_config(config_path)
    if checkpoint is None:
        found = latest_checkpoint(run_dir)
        if found is None:
            raise FileNotFoundError(f"no checkpoints under {run_dir}")
        ckpt_path = found[0]
    else:
        ckpt_path = Path(checkpoint)
        if not ckpt_path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    model = init_model(config, seed=0)
    apply_checkpoint(model, load_checkpoint(ckpt_path))
    stats = load_norm_stats(run_dir / "norm_stats.json")
    return model, stats, ckpt_path


# ---------------------------------------------------------------------------
# verbs


def task_gen_data(values: Dict, seed: int, out_dir, force: bool = False) -> Dict:
    """Scene from `seed`, two camera rings, rendered splits on disk."""
    out = _refuse_non_empty(out_dir, force)
    scene = generate_scene(seed, num_objects=values["data.num_objects"],
                           extent=values["data.extent"])
    center = (0.0, 0.0, 0.0)
    gaze = (0.0, 0.0, 1.0)
    train_spec = TrajectorySpec(center=center, radius=values["data.train_radius"],
                                height=values["data.ring_height"], look_at=gaze)
    test_spec = TrajectorySpec(center=center, radius=values["data.test_radius"],
                               height=values["data.ring_height"], look_at=gaze,
                               phase=values["data.test_phase"])
    generate_dataset(scene, train_spec, test_spec,
                     n_train=values["data.n_train"],
                     n_test=values["data.n_test"],
                     width=values["data.width"],
                     height=values["data.height"], out_dir=out)
    manifest = load_manifest(out)
    return {"out_dir": str(out), "manifest": manifest,
            "n_train": values["data.n_train"], "n_test": values["data.n_test"]}


def _check_dims(config: ModelConfig, images: np.ndarray) -> None:
    h, w = images.shape[1:3]
    if (h, w) != (config.input_height, config.input_width):
        raise ValueError(
            f"dataset images are {h}x{w} but the model expects "
            f"{config.input_height}x{config.input_width}")


def task_train(values: Dict, seed: int, dataset_dir, out_dir,
               resume: bool = False, force: bool = False) -> Dict:
    dataset = _require_dataset(dataset_dir)
    images, poses = load_split(dataset, "train")
    train_config = train_config_from(values, seed)
    out = Path(out_dir)
    if resume:
        model, stats, ckpt_path = load_run(out)
        _check_dims(model.config, images)
        epoch = int(ckpt_path.name.split("_")[1].split(".")[0])
        if epoch + 1 > train_config.epochs:
            raise ValueError(
                f"checkpoint is at epoch {epoch} but the run is configured "
                f"for {train_config.epochs} epochs")
        state = load_adam_state(out / f"ckpt_{epoch:04}.optim.axps",
                                model.params)
        data = prepare_samples(images, poses, stats)
        rows = train(model, data, train_config, out_dir=out,
                     start_epoch=epoch + 1, state=state)
    else:
        out = _refuse_non_empty(out, force)
        model_config = model_config_from(values)
        _check_dims(model_config, images)
        model = init_model(model_config, seed=seed)
        save_model_config(out / MODEL_CONFIG_NAME, model_config)
        rows = run_training(model, images, poses, train_config, out)
    found = latest_checkpoint(out)
    return {
        "out_dir": str(out),
        "epochs_run": len(rows),
        "final": rows[-1] if rows else None,
        "checkpoint": str(found[0]) if found else None,
        "log_path": str(out / "train_log.csv"),
    }


def task_eval(values: Dict, dataset_dir, run_dir,
              checkpoint: Optional[str] = None, out_dir=None,
              export_masks: bool = False, split: str = "test") -> Dict:
    dataset = _require_dataset(dataset_dir)
    model, stats, ckpt_path = load_run(run_dir, checkpoint)
    if export_masks and not model.config.use_attention:
        raise ValueError("mask export needs an attention-enabled run")
    images, poses = load_split(dataset, split)
    _check_dims(model.config, images)
    report = evaluate(model, images, poses, stats)
    out = Path(out_dir) if out_dir is not None else Path(run_dir)
    os.makedirs(out, exist_ok=True)
    report_path = out / METRICS_NAME
    write_metrics_report(report_path, report)
    trajectory_path = out / TRAJECTORY_NAME
    export_trajectory(model, images, poses, stats, trajectory_path)
    mask_dir = None
    if export_masks:
        mask_dir = out / "masks"
        export_attention_masks(model, images, stats, mask_dir)
    return {
        "checkpoint": str(ckpt_path),
        "report": dataclasses.asdict(report),
        "report_path": str(report_path),
        "trajectory_path": str(trajectory_path),
        "mask_dir": str(mask_dir) if mask_dir is not None else None,
    }


def _lightness_plane(image_path) -> np.ndarray:
    """L plane in [0,1] from a P6 (via Lab) or P5 (already lightness) file."""
    with open(image_path, "rb") as f:
        magic = f.read(2)
    if magic == b"P6":
        return rgb_to_lab(read_ppm(image_path)).L / L_SCALE
    if magic == b"P5":
        return read_pgm(image_path)
    raise ValueError(f"unsupported image format {magic!r} (want P6 or P5)")


def task_colorize(run_dir, image_path, out_path,
                  checkpoint: Optional[str] = None) -> Dict:
    model, _, ckpt_path = load_run(run_dir, checkpoint)
    if not model.config.use_auxiliary:
        raise ValueError("colorization needs an auxiliary-enabled run")
    if not Path(image_path).is_file():
        raise FileNotFoundError(f"input image not found: {image_path}")
    plane = _lightness_plane(image_path)
    h, w = plane.shape
    if h % 16 or w % 16:
        raise ValueError(f"image dims must be multiples of 16, got {h}x{w}")
    pred_ab, _ = colorizer_forward(model, plane[None, None, :, :])
    lab = LabImage(L=plane * L_SCALE,
                   a=pred_ab.data[0, 0] * AB_SCALE,
                   b=pred_ab.data[0, 1] * AB_SCALE)
    write_ppm(out_path, lab_to_rgb(lab))
    return {"out_path": str(out_path), "checkpoint": str(ckpt_path),
            "width": w, "height": h}


def task_ablate(values: Dict, dataset_dir, out_dir, force: bool = False) -> Dict:
    dataset = _require_dataset(dataset_dir)
    out = _refuse_non_empty(out_dir, force)
    train_images, train_poses = load_split(dataset, "train")
    test_images, test_poses = load_split(dataset, "test")
    model_config = model_config_from(values)
    _check_dims(model_config, train_images)
    train_config = train_config_from(values, seed=0)
    threshold = values["ablate.threshold"]
    if threshold <= 0.0:
        threshold = 0.05 * load_manifest(dataset)["extent"]
    csv_path = out / ABLATION_NAME
    rows = ablate(train_images, train_poses, test_images, test_poses,
                  model_config, train_config, values["ablate.seeds"],
                  csv_path, threshold)
    summary = {}
    for name in ("baseline", "+aux", "+aux+attn"):
        group = [r for r in rows if r["config"] == name
                 and np.isfinite(r["median_t"])]
        if group:
            summary[name] = {
                "median_t": median_low([r["median_t"] for r in group]),
                "median_r_deg": median_low([r["median_r_deg"] for r in group]),
            }
    # diverged runs carry NaN medians in the CSV; None travels better in JSON
    json_rows = []
    for row in rows:
        out_row = dict(row)
        for key in ("median_t", "median_r_deg"):
            if not np.isfinite(out_row[key]):
                out_row[key] = None
        json_rows.append(out_row)
    return {"csv_path": str(csv_path), "rows": json_rows, "summary": summary,
            "threshold": threshold}
