"""Evaluation: pose error statistics, colorization accuracy, attention and
trajectory exports, and the three-configuration ablation protocol.

Medians everywhere are the lower-middle order statistic, so even-length
splits never average two samples and repeated runs stay bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .colorspace import AB_SCALE, rgb_to_lab
from .model import Model, ModelConfig, init_model, model_forward
from .posemath import Pose, quat_exp, quat_log, rotation_error_deg
from .trainer import (
    NormStats,
    TrainConfig,
    TrainingDivergedError,
    compute_normalization,
    prepare_samples,
    train,
)

TRAJECTORY_CSV_HEADER = ("index,gt_tx,gt_ty,gt_tz,gt_qw,gt_qx,gt_qy,gt_qz,"
                         "pred_tx,pred_ty,pred_tz,pred_qw,pred_qx,pred_qy,pred_qz")
ABLATION_CSV_HEADER = ("config,seed,median_t,median_r_deg,"
                       "acc_at_5,acc_at_10,epochs_to_threshold")

# Table rows: plain localization, plus the auxiliary branch, plus attention.
ABLATION_VARIANTS: Tuple[Tuple[str, bool, bool], ...] = (
    ("baseline", False, False),
    ("+aux", True, False),
    ("+aux+attn", True, True),
)


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def median_low(values: Sequence[float]) -> float:
    """Lower-middle order statistic; deterministic for even lengths."""
    if len(values) == 0:
        raise ValueError("median of an empty sequence")
    return sorted(values)[(len(values) - 1) // 2]


# ---------------------------------------------------------------------------
# forward helpers


def _network_inputs(images: np.ndarray, stats: NormStats, need_l: bool):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected an [N,H,W,3] stack, got {images.shape}")
    rgb = np.ascontiguousarray(
        ((images - stats.mean) / stats.std).transpose(0, 3, 1, 2))
    if not need_l:
        return rgb, None
    from .colorspace import normalize_lab_for_net

    x_l = np.stack([normalize_lab_for_net(rgb_to_lab(img))[0] for img in images])
    return rgb, x_l


def _forward_split(model: Model, images: np.ndarray, stats: NormStats):
    rgb, x_l = _network_inputs(images, stats, model.config.use_auxiliary)
    return model_forward(model, rgb, x_l=x_l)


# ---------------------------------------------------------------------------
# pose metrics


@dataclass(frozen=True)
class PoseEvaluation:
    per_sample_t_err: List[float]
    per_sample_r_err_deg: List[float]
    median_t_err: float
    median_r_err_deg: float


def pose_errors(pred_t: np.ndarray, pred_w: np.ndarray,
                poses: Sequence[Pose]) -> PoseEvaluation:
    """Per-sample translation / rotation errors plus their medians.

    The ground-truth rotation is decoded through the same exp map as the
    prediction, so a network that regresses the exact log-rotation target
    scores exactly zero.
    """
    pred_t = np.asarray(pred_t, dtype=np.float64)
    pred_w = np.asarray(pred_w, dtype=np.float64)
    if len(poses) == 0:
        raise ValueError("empty pose list")
    if pred_t.shape != (len(poses), 3) or pred_w.shape != (len(poses), 3):
        raise ValueError(
            f"predictions {pred_t.shape}/{pred_w.shape} do not match "
            f"{len(poses)} poses")
    t_errs, r_errs = [], []
    for i, pose in enumerate(poses):
        t_errs.append(float(np.linalg.norm(pred_t[i] - pose.x)))
        q_gt = quat_exp(quat_log(pose.q).w)
        r_errs.append(rotation_error_deg(quat_exp(pred_w[i]), q_gt))
    return PoseEvaluation(
        per_sample_t_err=t_errs,
        per_sample_r_err_deg=r_errs,
        median_t_err=median_low(t_errs),
        median_r_err_deg=median_low(r_errs),
    )


def evaluate_pose(model: Model, images: np.ndarray, poses: Sequence[Pose],
                  stats: NormStats) -> PoseEvaluation:
    if len(poses) == 0:
        raise ValueError("empty evaluation split")
    out = _forward_split(model, images, stats)
    return pose_errors(out.pred_translation.data, out.pred_logrot.data, poses)


# ---------------------------------------------------------------------------
# colorization metrics


def colorization_accuracy(pred_ab: np.ndarray, gt_ab: np.ndarray,
                          thresholds: Sequence[float]) -> Dict[float, float]:
    """Fraction of pixels whose chroma error (Euclidean over a,b) is
    strictly below each threshold; pooled over every pixel of the split."""
    pred_ab = np.asarray(pred_ab, dtype=np.float64)
    gt_ab = np.asarray(gt_ab, dtype=np.float64)
    if pred_ab.shape != gt_ab.shape or pred_ab.ndim != 4 or pred_ab.shape[1] != 2:
        raise ValueError(
            f"chroma stacks must share an [N,2,H,W] shape, got "
            f"{pred_ab.shape} and {gt_ab.shape}")
    dist = np.sqrt(np.sum((pred_ab - gt_ab) ** 2, axis=1))
    return {float(tau): float(np.mean(dist < tau)) for tau in thresholds}


def evaluate_colorization(model: Model, images: np.ndarray, stats: NormStats,
                          thresholds: Sequence[float] = (5.0, 10.0),
                          ) -> Dict[float, float]:
    if not model.config.use_auxiliary:
        raise ValueError("colorization accuracy needs the auxiliary branch")
    out = _forward_split(model, images, stats)
    pred_ab = out.pred_ab.data * AB_SCALE
    gt = []
    for img in np.asarray(images, dtype=np.float64):
        lab = rgb_to_lab(img)
        gt.append(np.stack([lab.a, lab.b]))
    return colorization_accuracy(pred_ab, np.stack(gt), thresholds)


# ---------------------------------------------------------------------------
# exports


def export_attention_masks(model: Model, images: np.ndarray,
                           stats: NormStats, out_dir) -> List[Path]:
    """Per sample: the input image and its min-max normalized attention
    mask (degenerate range renders mid-gray), both as 8-bit PPM."""
    if not model.config.use_attention:
        raise ValueError("mask export needs attention enabled")
    from .synthscene import write_ppm

    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    out = _forward_split(model, images, stats)
    masks = out.attention_mask.data
    written: List[Path] = []
    for i, img in enumerate(np.asarray(images, dtype=np.float64)):
        input_path = out_dir / f"{i:06}_input.ppm"
        write_ppm(input_path, img)
        mask = masks[i, 0]
        lo, hi = float(mask.min()), float(mask.max())
        if hi - lo > 1e-12:
            norm = (mask - lo) / (hi - lo)
        else:
            norm = np.full_like(mask, 0.5)
        mask_path = out_dir / f"{i:06}_mask.ppm"
        write_ppm(mask_path, np.stack([norm] * 3, axis=-1))
        written.extend([input_path, mask_path])
    return written


def _canonical(q: np.ndarray) -> np.ndarray:
    return -q if q[0] < 0.0 else q


def trajectory_rows(poses: Sequence[Pose], pred_t: np.ndarray,
                    pred_w: np.ndarray) -> List[str]:
    rows = []
    for i, pose in enumerate(poses):
        pred_q = _canonical(quat_exp(pred_w[i]))
        cells = [str(i)]
        cells += [_fmt(v) for v in pose.x]
        cells += [_fmt(v) for v in pose.q]
        cells += [_fmt(v) for v in pred_t[i]]
        cells += [_fmt(v) for v in pred_q]
        rows.append(",".join(cells))
    return rows


def export_trajectory(model: Model, images: np.ndarray,
                      poses: Sequence[Pose], stats: NormStats,
                      out_path) -> None:
    out = _forward_split(model, images, stats)
    rows = trajectory_rows(poses, out.pred_translation.data,
                           out.pred_logrot.data)
    with open(out_path, "w", encoding="ascii") as f:
        f.write(TRAJECTORY_CSV_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricsReport:
    median_t_err: float
    median_r_err_deg: float
    per_sample_t_err: List[float]
    per_sample_r_err_deg: List[float]
    colorization_acc: Dict[str, float]
    epochs_to_threshold: Optional[int] = None


def write_metrics_report(path, report: MetricsReport) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(dataclasses.asdict(report), f, sort_keys=True, indent=2)
        f.write("\n")


def read_metrics_report(path) -> MetricsReport:
    with open(path, "r", encoding="ascii") as f:
        payload = json.load(f)
    return MetricsReport(**payload)


def evaluate(model: Model, images: np.ndarray, poses: Sequence[Pose],
             stats: NormStats,
             thresholds: Sequence[float] = (5.0, 10.0)) -> MetricsReport:
    """Full test-split evaluation; colorization accuracy only when the
    auxiliary branch exists."""
    pose_eval = evaluate_pose(model, images, poses, stats)
    acc: Dict[str, float] = {}
    if model.config.use_auxiliary:
        raw = evaluate_colorization(model, images, stats, thresholds)
        acc = {f"{tau:g}": frac for tau, frac in raw.items()}
    return MetricsReport(
        median_t_err=pose_eval.median_t_err,
        median_r_err_deg=pose_eval.median_r_err_deg,
        per_sample_t_err=pose_eval.per_sample_t_err,
        per_sample_r_err_deg=pose_eval.per_sample_r_err_deg,
        colorization_acc=acc,
    )


# ---------------------------------------------------------------------------
# ablation protocol


def epochs_to_threshold(log_rows: Sequence[Dict], threshold: float,
                        ) -> Optional[int]:
    """Number of training epochs until the probe median translation error
    first drops strictly below `threshold`; None when it never does."""
    for epoch, row in enumerate(log_rows):
        if row["median_t_err"] < threshold:
            return epoch + 1
    return None


def _ablation_cells(row: Dict) -> str:
    acc5 = "" if row["acc_at_5"] is None else _fmt(row["acc_at_5"])
    acc10 = "" if row["acc_at_10"] is None else _fmt(row["acc_at_10"])
    ett = "" if row["epochs_to_threshold"] is None else str(
        row["epochs_to_threshold"])
    return ",".join([
        row["config"], str(row["seed"]), _fmt(row["median_t"]),
        _fmt(row["median_r_deg"]), acc5, acc10, ett,
    ])


def ablate(train_images: np.ndarray, train_poses: Sequence[Pose],
           test_images: np.ndarray, test_poses: Sequence[Pose],
           model_config: ModelConfig, train_config: TrainConfig,
           seeds: Sequence[int], out_csv, threshold: float) -> List[Dict]:
    """Train baseline / +aux / +aux+attn per seed and tabulate test metrics.

    Every run with the same seed shares its initial shared-layer weights
    and its shuffle order, so configuration differences are paired.  Rows
    are appended (and flushed) as each run finishes; a diverged run keeps
    its row with NaN medians and the table continues.
    """
    stats = compute_normalization(train_images)
    data = prepare_samples(train_images, train_poses, stats)
    with open(out_csv, "w", encoding="ascii") as f:
        f.write(ABLATION_CSV_HEADER + "\n")
    rows: List[Dict] = []
    for name, aux, attn in ABLATION_VARIANTS:
        cfg_m = dataclasses.replace(model_config, use_auxiliary=aux,
                                    use_attention=attn)
        for seed in seeds:
            model = init_model(cfg_m, seed=seed)
            cfg_t = dataclasses.replace(train_config, seed=seed)
            row: Dict = {"config": name, "seed": seed, "acc_at_5": None,
                         "acc_at_10": None, "epochs_to_threshold": None}
            try:
                log = train(model, data, cfg_t)
            except TrainingDivergedError:
                row["median_t"] = float("nan")
                row["median_r_deg"] = float("nan")
            else:
                pose_eval = evaluate_pose(model, test_images, test_poses,
                                          stats)
                row["median_t"] = pose_eval.median_t_err
                row["median_r_deg"] = pose_eval.median_r_err_deg
                if aux:
                    acc = evaluate_colorization(model, test_images, stats)
                    row["acc_at_5"] = acc[5.0]
                    row["acc_at_10"] = acc[10.0]
                row["epochs_to_threshold"] = epochs_to_threshold(log, threshold)
            rows.append(row)
            with open(out_csv, "a", encoding="ascii") as f:
                f.write(_ablation_cells(row) + "\n")
    return rows
