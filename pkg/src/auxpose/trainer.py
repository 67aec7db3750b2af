"""Joint optimization of the pose regressor and the colorization branch.

The loop is plain mini-batch Adam with two learning-rate groups: the
localization backbone and the whole colorizer train at a lower rate than
the fusion, attention, and regressor layers.  All shuffling is derived
from the run seed so repeated runs produce bit-identical trajectories.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .colorspace import normalize_lab_for_net, rgb_to_lab
from .model import (
    Model,
    load_checkpoint,
    loss_colorization,
    loss_joint,
    loss_pose,
    model_forward,
    save_checkpoint,
)
from .posemath import Pose, quat_exp, quat_log, rotation_error_deg
from .seeding import SplitMix64, derive_seed
from .tensor import Tape

_STD_FLOOR = 1e-6

TRAIN_LOG_HEADER = ("epoch,loss_joint,loss_pose,loss_color,"
                    "lr_backbone,lr_other,median_t_err,median_r_err_deg")


class TrainingDivergedError(RuntimeError):
    """Raised when a batch produces a non-finite loss."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int
    batch_size: int = 10
    lr_backbone: float = 0.0003
    lr_other: float = 0.001
    decay_factor: float = 0.9
    decay_every: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-10
    checkpoint_every: int = 10
    probe_size: int = 16

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr_backbone <= 0.0 or self.lr_other <= 0.0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay interval must be at least 1 epoch")
        for beta in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= beta < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ValueError("Adam epsilon must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint interval must be at least 1 epoch")
        if self.probe_size < 1:
            raise ValueError("probe size must be at least 1")


# ---------------------------------------------------------------------------
# input normalization


@dataclass(frozen=True)
class NormStats:
    """Per-channel statistics of the training split's RGB values."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        for name in ("mean", "std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (3,):
                raise ValueError(f"{name} must have shape (3,), got {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.std <= 0.0):
            raise ValueError("std entries must be positive")


def compute_normalization(images: np.ndarray) -> NormStats:
    """Channel-wise mean and std over every training pixel, std floored."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3 or images.shape[0] == 0:
        raise ValueError(f"expected a non-empty [N,H,W,3] stack, got {images.shape}")
    mean = images.mean(axis=(0, 1, 2))
    std = np.maximum(images.std(axis=(0, 1, 2)), _STD_FLOOR)
    return NormStats(mean=mean, std=std)


def save_norm_stats(path, stats: NormStats) -> None:
    payload = {"mean": list(stats.mean), "std": list(stats.std)}
    with open(path, "w", encoding="ascii") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_norm_stats(path) -> NormStats:
    with open(path, "r", encoding="ascii") as f:
        payload = json.load(f)
    return NormStats(mean=np.array(payload["mean"]), std=np.array(payload["std"]))


# ---------------------------------------------------------------------------
# sample preparation


@dataclass(frozen=True)
class TrainData:
    """Network-ready views of one split.

    rgb is z-scored channels-first input for the backbone; x_l / y_ab are
    the unit-scaled lightness plane and chroma targets; trans / logrot are
    the pose regression targets.
    """

    rgb: np.ndarray
    x_l: np.ndarray
    y_ab: np.ndarray
    trans: np.ndarray
    logrot: np.ndarray

    @property
    def n(self) -> int:
        return self.rgb.shape[0]


def prepare_samples(images: np.ndarray, poses: Sequence[Pose],
                    stats: NormStats) -> TrainData:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected an [N,H,W,3] stack, got {images.shape}")
    if images.shape[0] != len(poses):
        raise ValueError(
            f"{images.shape[0]} images but {len(poses)} poses"
        )
    rgb = ((images - stats.mean) / stats.std).transpose(0, 3, 1, 2)
    x_l, y_ab = [], []
    for image in images:
        l_plane, ab_planes = normalize_lab_for_net(rgb_to_lab(image))
        x_l.append(l_plane)
        y_ab.append(ab_planes)
    trans = np.stack([pose.x for pose in poses])
    logrot = np.stack([quat_log(pose.q).w for pose in poses])
    return TrainData(rgb=np.ascontiguousarray(rgb), x_l=np.stack(x_l),
                     y_ab=np.stack(y_ab), trans=trans, logrot=logrot)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: Dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
    )


def _check_aligned(params: Dict[str, np.ndarray],
                   other: Dict[str, np.ndarray], what: str) -> None:
    if set(params) != set(other):
        missing = sorted(set(params) - set(other))
        extra = sorted(set(other) - set(params))
        raise ValueError(f"{what} keys do not match parameters: "
                         f"missing {missing}, unexpected {extra}")
    for name, arr in params.items():
        if other[name].shape != arr.shape:
            raise ValueError(f"{what} shape mismatch for {name}: "
                             f"{other[name].shape} vs {arr.shape}")


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState, lr_by_name: Dict[str, float], *,
              beta1: float = 0.9, beta2: float = 0.99,
              eps: float = 1e-10) -> None:
    """One bias-corrected Adam update, in place on `params`."""
    _check_aligned(params, grads, "gradient")
    _check_aligned(params, state.m, "first-moment")
    _check_aligned(params, state.v, "second-moment")
    missing_lr = sorted(set(params) - set(lr_by_name))
    if missing_lr:
        raise ValueError(f"no learning rate for {missing_lr}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name in sorted(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr_by_name[name] * (m / c1) / (np.sqrt(v / c2) + eps)


def save_adam_state(path, state: AdamState) -> None:
    records = {"step": np.array([float(state.step)])}
    for name, arr in state.m.items():
        records[f"m.{name}"] = arr
    for name, arr in state.v.items():
        records[f"v.{name}"] = arr
    save_checkpoint(path, records)


def load_adam_state(path, params: Dict[str, np.ndarray]) -> AdamState:
    records = load_checkpoint(path)
    if "step" not in records:
        raise ValueError("optimizer state file has no step record")
    step = int(records.pop("step").reshape(-1)[0])
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for name, arr in records.items():
        if name.startswith("m."):
            m[name[2:]] = arr
        elif name.startswith("v."):
            v[name[2:]] = arr
        else:
            raise ValueError(f"unexpected optimizer record {name!r}")
    state = AdamState(m=m, v=v, step=step)
    _check_aligned(params, state.m, "first-moment")
    _check_aligned(params, state.v, "second-moment")
    return state


# ---------------------------------------------------------------------------
# schedule and grouping


def param_group(name: str) -> str:
    """Learning-rate group: the backbone and the whole colorizer train at
    the lower rate; fusion, attention, and regressor layers at the higher."""
    head = name.split(".", 1)[0]
    if head in ("backbone", "colorizer"):
        return "backbone"
    if head in ("fuse", "attnfuse", "regressor"):
        return "other"
    raise ValueError(f"parameter {name!r} belongs to no learning-rate group")


def lr_at_epoch(config: TrainConfig, epoch: int) -> Dict[str, float]:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    factor = config.decay_factor ** (epoch // config.decay_every)
    return {"backbone": config.lr_backbone * factor,
            "other": config.lr_other * factor}


def epoch_order(seed: int, epoch: int, n: int) -> List[int]:
    """Seeded Fisher-Yates shuffle of range(n), stable across platforms."""
    rng = SplitMix64(derive_seed(seed, f"shuffle:{epoch}"))
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randint(i + 1)
        order[i], order[j] = order[j], order[i]
    return order


# ---------------------------------------------------------------------------
# the loop


def _median_low(values: Sequence[float]) -> float:
    if not values:
        raise ValueError("median of an empty sequence")
    return sorted(values)[(len(values) - 1) // 2]


def _probe_medians(model: Model, data: TrainData, probe: Sequence[int]):
    x_l = data.x_l[probe] if model.config.use_auxiliary else None
    out = model_forward(model, data.rgb[probe], x_l=x_l)
    pred_t = out.pred_translation.data
    pred_w = out.pred_logrot.data
    t_errs, r_errs = [], []
    for row, i in enumerate(probe):
        t_errs.append(float(np.linalg.norm(pred_t[row] - data.trans[i])))
        r_errs.append(rotation_error_deg(quat_exp(pred_w[row]),
                                         quat_exp(data.logrot[i])))
    return _median_low(t_errs), _median_low(r_errs)


def _format_row(row: Dict) -> str:
    cells = [str(row["epoch"])]
    for key in ("loss_joint", "loss_pose", "loss_color", "lr_backbone",
                "lr_other", "median_t_err", "median_r_err_deg"):
        cells.append(f"{row[key]:.17g}")
    return ",".join(cells)


def train(model: Model, data: TrainData, config: TrainConfig,
          out_dir=None, start_epoch: int = 0,
          state: Optional[AdamState] = None) -> List[Dict]:
    """Run epochs [start_epoch, config.epochs); returns one log row each.

    With `out_dir` set, appends rows to train_log.csv and writes model and
    optimizer checkpoints every `checkpoint_every` epochs plus at the end.
    Restarting from a saved checkpoint with the matching `state` and
    `start_epoch` continues the exact same trajectory.
    """
    if data.n < 1:
        raise ValueError("training split is empty")
    if not 0 <= start_epoch <= config.epochs:
        raise ValueError(f"start epoch {start_epoch} outside [0, {config.epochs}]")
    if start_epoch > 0 and state is None:
        raise ValueError("resuming mid-run requires the saved optimizer state")
    if state is None:
        state = init_adam_state(model.params)
    else:
        _check_aligned(model.params, state.m, "first-moment")
        _check_aligned(model.params, state.v, "second-moment")

    aux = model.config.use_auxiliary
    probe = list(range(min(config.probe_size, data.n)))
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        if start_epoch == 0:
            with open(log_path, "w", encoding="ascii") as f:
                f.write(TRAIN_LOG_HEADER + "\n")

    rows: List[Dict] = []
    for epoch in range(start_epoch, config.epochs):
        lrs = lr_at_epoch(config, epoch)
        lr_by_name = {name: lrs[param_group(name)] for name in model.params}
        order = epoch_order(config.seed, epoch, data.n)
        sums = {"loss_joint": 0.0, "loss_pose": 0.0, "loss_color": 0.0}
        for batch, lo in enumerate(range(0, data.n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            tape = Tape()
            params = model.bound_params(tape)
            out = model_forward(model, data.rgb[idx],
                                x_l=data.x_l[idx] if aux else None,
                                params=params)
            l_l = loss_pose(out.pred_translation, out.pred_logrot,
                            data.trans[idx], data.logrot[idx],
                            model.config.beta_intra)
            l_c = loss_colorization(out.pred_ab, data.y_ab[idx]) if aux else None
            loss = loss_joint(l_c, l_l, model.config.beta_inter)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, batch)
            tape.backward(loss)
            grads = {name: tape.grad(t) for name, t in params.items()}
            adam_step(model.params, grads, state, lr_by_name,
                      beta1=config.adam_beta1, beta2=config.adam_beta2,
                      eps=config.adam_eps)
            weight = len(idx)
            sums["loss_joint"] += float(loss.data) * weight
            sums["loss_pose"] += float(l_l.data) * weight
            sums["loss_color"] += (float(l_c.data) if l_c is not None else 0.0) * weight

        median_t, median_r = _probe_medians(model, data, probe)
        row = {
            "epoch": epoch,
            "loss_joint": sums["loss_joint"] / data.n,
            "loss_pose": sums["loss_pose"] / data.n,
            "loss_color": sums["loss_color"] / data.n,
            "lr_backbone": lrs["backbone"],
            "lr_other": lrs["other"],
            "median_t_err": median_t,
            "median_r_err_deg": median_r,
        }
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a", encoding="ascii") as f:
                f.write(_format_row(row) + "\n")
        if out_dir is not None and (
            (epoch + 1) % config.checkpoint_every == 0
            or epoch == config.epochs - 1
        ):
            tag = f"ckpt_{epoch:04}"
            save_checkpoint(os.path.join(out_dir, f"{tag}.axps"), model.params)
            save_adam_state(os.path.join(out_dir, f"{tag}.optim.axps"), state)
    return rows


_CKPT_RE = re.compile(r"^ckpt_(\d+)\.axps$")


def latest_checkpoint(out_dir):
    """(path, epoch) of the newest model checkpoint, or None when absent."""
    best = None
    for entry in os.listdir(out_dir):
        match = _CKPT_RE.match(entry)
        if match:
            epoch = int(match.group(1))
            if best is None or epoch > best[1]:
                best = (Path(out_dir) / entry, epoch)
    return best


def run_training(model: Model, images: np.ndarray, poses: Sequence[Pose],
                 config: TrainConfig, out_dir) -> List[Dict]:
    """Fresh run: compute and persist normalization stats, then train."""
    os.makedirs(out_dir, exist_ok=True)
    stats = compute_normalization(images)
    save_norm_stats(os.path.join(out_dir, "norm_stats.json"), stats)
    data = prepare_samples(images, poses, stats)
    return train(model, data, config, out_dir=out_dir)
