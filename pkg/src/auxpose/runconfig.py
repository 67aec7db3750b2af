"""Flat key-value run configuration.

Files are plain text, one `key = value` per line, `#` starts a comment,
and nesting is expressed with dotted keys (`model.use_attention=true`).
Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

from .model import ModelConfig
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_int_tuple(text: str) -> Tuple[int, ...]:
    return tuple(int(part.strip(), 10) for part in text.split(","))


def _parse_float(text: str) -> float:
    return float(text)


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], object]
    default: object
    help: str


SCHEMA: Dict[str, _Key] = {
    # model shape
    "model.input_height": _Key(_parse_int, 32, "input image height"),
    "model.input_width": _Key(_parse_int, 32, "input image width"),
    "model.backbone_widths": _Key(_parse_int_tuple, (8, 16, 32, 32, 32),
                                  "channel width per backbone stage"),
    "model.colorizer_depth": _Key(_parse_int, 4,
                                  "down/up levels in the colorizer"),
    "model.embed_width": _Key(_parse_int, 64, "regressor embedding width"),
    "model.use_auxiliary": _Key(_parse_bool, True,
                                "train the colorization branch"),
    "model.use_attention": _Key(_parse_bool, True,
                                "apply the attention re-weighting"),
    "model.beta_intra": _Key(_parse_float, 3.0,
                             "rotation weight inside the pose loss"),
    "model.beta_inter": _Key(_parse_float, 0.2,
                             "colorization weight in the joint loss"),
    # optimization
    "train.epochs": _Key(_parse_int, 300, "training epochs"),
    "train.batch_size": _Key(_parse_int, 10, "mini-batch size"),
    "train.lr_backbone": _Key(_parse_float, 0.0003,
                              "rate for backbone and colorizer layers"),
    "train.lr_other": _Key(_parse_float, 0.001,
                           "rate for fusion, attention, regressor layers"),
    "train.decay_factor": _Key(_parse_float, 0.9, "stepped decay factor"),
    "train.decay_every": _Key(_parse_int, 10, "epochs between decays"),
    "train.adam_beta1": _Key(_parse_float, 0.9, "Adam first-moment decay"),
    "train.adam_beta2": _Key(_parse_float, 0.99, "Adam second-moment decay"),
    "train.adam_eps": _Key(_parse_float, 1e-10, "Adam denominator epsilon"),
    "train.checkpoint_every": _Key(_parse_int, 10,
                                   "epochs between checkpoints"),
    "train.probe_size": _Key(_parse_int, 16,
                             "training samples probed for log medians"),
    # synthetic dataset
    "data.extent": _Key(_parse_float, 10.0, "scene half-size in scene units"),
    "data.num_objects": _Key(_parse_int, 10, "objects placed per scene"),
    "data.n_train": _Key(_parse_int, 100, "training images"),
    "data.n_test": _Key(_parse_int, 40, "test images"),
    "data.width": _Key(_parse_int, 32, "rendered image width"),
    "data.height": _Key(_parse_int, 32, "rendered image height"),
    "data.train_radius": _Key(_parse_float, 6.0, "training ring radius"),
    "data.test_radius": _Key(_parse_float, 5.9, "test ring radius"),
    "data.test_phase": _Key(_parse_float, 0.5,
                            "angular offset of the test ring, in stations"),
    "data.ring_height": _Key(_parse_float, 2.0, "camera height above ground"),
    # ablation protocol
    "ablate.seeds": _Key(_parse_int_tuple, (1, 2, 3, 4, 5),
                         "seeds, one full run set each"),
    "ablate.threshold": _Key(_parse_float, 0.0,
                             "epochs-to-threshold translation target; "
                             "0 means 5% of the scene extent"),
}


def parse_kv_text(text: str) -> Dict[str, str]:
    """Raw `key = value` pairs from config text; comments stripped."""
    pairs: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _resolve(pairs: Dict[str, str]) -> Dict[str, object]:
    unknown = sorted(set(pairs) - set(SCHEMA))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values: Dict[str, object] = {k: spec.default for k, spec in SCHEMA.items()}
    for key, text in pairs.items():
        try:
            values[key] = SCHEMA[key].parse(text)
        except ValueError as err:
            raise ValueError(f"bad value for {key}: {err}") from err
    return values


def load_run_config(path=None,
                    overrides: Optional[Dict[str, str]] = None,
                    ) -> Dict[str, object]:
    """Defaults, then the file (if any), then overrides; all validated."""
    pairs: Dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            pairs = parse_kv_text(f.read())
    for key, value in (overrides or {}).items():
        pairs[key] = value
    return _resolve(pairs)


def model_config_from(values: Dict[str, object]) -> ModelConfig:
    return ModelConfig(
        input_height=values["model.input_height"],
        input_width=values["model.input_width"],
        backbone_widths=values["model.backbone_widths"],
        colorizer_depth=values["model.colorizer_depth"],
        embed_width=values["model.embed_width"],
        use_auxiliary=values["model.use_auxiliary"],
        use_attention=values["model.use_attention"],
        beta_intra=values["model.beta_intra"],
        beta_inter=values["model.beta_inter"],
    )


def train_config_from(values: Dict[str, object], seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=values["train.epochs"],
        seed=seed,
        batch_size=values["train.batch_size"],
        lr_backbone=values["train.lr_backbone"],
        lr_other=values["train.lr_other"],
        decay_factor=values["train.decay_factor"],
        decay_every=values["train.decay_every"],
        adam_beta1=values["train.adam_beta1"],
        adam_beta2=values["train.adam_beta2"],
        adam_eps=values["train.adam_eps"],
        checkpoint_every=values["train.checkpoint_every"],
        probe_size=values["train.probe_size"],
    )


def describe_defaults() -> str:
    """One line per key: name, default, meaning.  Shown by --help."""
    lines = ["configuration keys (file or --set key=value):"]
    for key in sorted(SCHEMA):
        spec = SCHEMA[key]
        default = spec.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {key} = {default}  ({spec.help})")
    return "\n".join(lines)
