"""Pose-regression network with a colorization auxiliary branch.

Layout (all feature maps [B,C,H,W]):

  * backbone: five stages on the RGB input, strides 2,2,2,2,1, so the
    localization features M_l sit at 1/16 resolution.  Each stage is a
    strided conv + ReLU followed by a two-conv identity residual block.
  * colorizer: U-Net on the lightness plane, four stride-2 encoder
    levels and mirrored nearest-neighbor upsampling with skip concats.
    Its bottleneck M_c (also 1/16) is the feature tap; its head
    predicts the two chroma planes.
  * fuse: channel concat -> 1x1 conv -> ReLU, so the fused map is
    non-negative.  With the auxiliary branch off the same conv + ReLU
    is applied to M_l alone, keeping ablations depth-matched.
  * attention: excite channels by their spatial max, average over
    channels into a single-channel mask, weight the fused map by the
    mask, then re-fuse original and weighted maps (separate 1x1 conv).
  * regressor: flatten -> hidden ReLU layer -> two 3-wide heads for
    translation and log-rotation.

Losses: colorization is a per-image L1 sum over chroma pixels; pose is
|x_hat - x| + beta_intra * |w_hat - w| on log-rotation vectors; the
joint loss is beta_inter * L_c + L_l.  All are batch means.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .seeding import rng_for
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    absolute,
    concat_channels,
    conv2d,
    flatten_batch,
    global_avg_pool_channels,
    global_max_pool_spatial,
    linear,
    mean_over,
    relu,
    sqrt,
    square,
    sum_over,
    upsample_nearest,
)

CHECKPOINT_MAGIC = b"AXPS"
CHECKPOINT_VERSION = 1


# output heads feed no activation, so they get the gentler init below
_LINEAR_OUTPUT_PARAMS = ("regressor.trans.weight", "regressor.logrot.weight",
                         "colorizer.head.weight")


@dataclass
class ModelConfig:
    """Architecture and loss weights; defaults are the desk-scale setup."""

    input_height: int = 32
    input_width: int = 32
    backbone_widths: Sequence[int] = (8, 16, 32, 32, 32)
    colorizer_depth: int = 4
    embed_width: int = 64
    use_auxiliary: bool = True
    use_attention: bool = True
    beta_intra: float = 3.0
    beta_inter: float = 0.2

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if len(self.backbone_widths) < 4:
            raise ValueError("backbone needs at least the four stride-2 stages")
        if any(w < 1 for w in self.backbone_widths):
            raise ValueError("backbone widths must be positive")
        if self.embed_width < 1:
            raise ValueError("embed width must be positive")
        if self.beta_intra <= 0.0:
            raise ValueError("beta_intra must be > 0")
        if self.beta_inter < 0.0:
            raise ValueError("beta_inter must be >= 0")
        if self.use_auxiliary:
            if self.colorizer_depth != 4:
                # both feature taps must land at 1/16 resolution
                raise ValueError(
                    "colorizer depth must be 4 to align its bottleneck with "
                    "the backbone's 16x downsampling"
                )
            down = 2 ** self.colorizer_depth
            if self.input_height % down or self.input_width % down:
                raise ValueError(
                    f"input extents must be divisible by {down} when the "
                    f"auxiliary branch is enabled, got "
                    f"{self.input_height}x{self.input_width}"
                )

    @property
    def backbone_strides(self):
        return (2, 2, 2, 2) + (1,) * (len(self.backbone_widths) - 4)

    @property
    def fused_width(self) -> int:
        return self.backbone_widths[-1]

    def colorizer_level_widths(self):
        """Widths per resolution level 0 (full) .. depth (bottleneck).

        Every level keeps the bottleneck width, which equals the
        backbone output width for balanced fusion.  Assigning per-pixel
        chroma is the hardest at full resolution, so tapering widths
        toward the input starves exactly the layers that decide color;
        pixel count already falls fourfold per level, keeping the
        coarse levels cheap without narrowing them.
        """
        bottleneck = self.backbone_widths[-1]
        return (bottleneck,) * (self.colorizer_depth + 1)

    def backbone_output_extents(self):
        h, w = self.input_height, self.input_width
        for s in self.backbone_strides:
            # 3x3 conv, padding 1: extent -> ceil(extent / stride)
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
        return h, w


@dataclass
class Model:
    """Named parameter arrays plus the config that shaped them."""

    config: ModelConfig
    params: Dict[str, np.ndarray]

    def bound_params(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Tensors for every parameter; watched on `tape` when given."""
        if tape is None:
            return {name: Tensor(arr) for name, arr in self.params.items()}
        return {name: tape.watch(Tensor(arr)) for name, arr in self.params.items()}


@dataclass
class ForwardOutput:
    pred_translation: Tensor
    pred_logrot: Tensor
    pred_ab: Optional[Tensor] = None
    attention_mask: Optional[Tensor] = None
    m_fuse: Optional[Tensor] = None
    m_atten: Optional[Tensor] = None


# ---------------------------------------------------------------------------
# initialization


def _parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    prev = 3
    for i, width in enumerate(config.backbone_widths, start=1):
        conv(f"backbone.stage{i}.down", width, prev, 3)
        conv(f"backbone.stage{i}.res1", width, width, 3)
        conv(f"backbone.stage{i}.res2", width, width, 3)
        prev = width

    fuse_in = config.backbone_widths[-1]
    if config.use_auxiliary:
        levels = config.colorizer_level_widths()
        conv("colorizer.stem", levels[0], 1, 3)
        for k in range(1, config.colorizer_depth + 1):
            conv(f"colorizer.enc{k}.down", levels[k], levels[k - 1], 3)
        for k in range(config.colorizer_depth - 1, -1, -1):
            conv(f"colorizer.dec{k}.mix", levels[k], levels[k + 1] + levels[k], 3)
        conv("colorizer.head", 2, levels[0], 1)
        fuse_in += levels[-1]

    conv("fuse", config.fused_width, fuse_in, 1)
    if config.use_attention:
        conv("attnfuse", config.fused_width, 2 * config.fused_width, 1)

    h, w = config.backbone_output_extents()
    flat = config.fused_width * h * w
    shapes["regressor.embed.weight"] = (config.embed_width, flat)
    shapes["regressor.embed.bias"] = (config.embed_width,)
    for head in ("trans", "logrot"):
        shapes[f"regressor.{head}.weight"] = (3, config.embed_width)
        shapes[f"regressor.{head}.bias"] = (3,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> Model:
    """He-initialized weights, zero biases.

    Each parameter gets its own generator derived from (seed, name), so
    layers shared between ablation configurations initialize
    identically regardless of which branches exist.
    """
    params: Dict[str, np.ndarray] = {}
    for name, shape in _parameter_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 1.0 if name in _LINEAR_OUTPUT_PARAMS else 2.0
        std = (gain / fan_in) ** 0.5
        params[name] = rng_for(seed, f"init:{name}").normal(0.0, std, size=shape)
    return Model(config=config, params=params)


# ---------------------------------------------------------------------------
# forward pieces


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _stage(params, prefix: str, x: Tensor, stride: int) -> Tensor:
    y = relu(conv2d(x, params[f"{prefix}.down.weight"],
                    params[f"{prefix}.down.bias"], stride=stride, padding=1))
    r = relu(conv2d(y, params[f"{prefix}.res1.weight"],
                    params[f"{prefix}.res1.bias"], padding=1))
    r = conv2d(r, params[f"{prefix}.res2.weight"],
               params[f"{prefix}.res2.bias"], padding=1)
    return relu(y + r)


def backbone_forward(model: Model, image, params=None) -> Tensor:
    """RGB [B,3,H,W] -> localization features M_l at 1/16 resolution."""
    image = _as_input(image)
    if image.data.ndim != 4 or image.data.shape[1] != 3:
        raise ShapeError(f"backbone expects [B,3,H,W], got {image.data.shape}")
    if image.data.shape[2] < 16 or image.data.shape[3] < 16:
        raise ShapeError(
            f"backbone input must be at least 16x16, got "
            f"{image.data.shape[2]}x{image.data.shape[3]}"
        )
    if params is None:
        params = model.bound_params()
    x = image
    for i, stride in enumerate(model.config.backbone_strides, start=1):
        x = _stage(params, f"backbone.stage{i}", x, stride)
    return x


def colorizer_forward(model: Model, x_l, params=None, skip_gains=None):
    """Lightness [B,1,H,W] -> (pred_ab [B,2,H,W], bottleneck M_c).

    `skip_gains` is a diagnostic hook: one multiplier per skip
    connection, outermost first; None leaves the skips untouched.
    """
    if not model.config.use_auxiliary:
        raise ValueError("colorizer_forward called with the auxiliary branch disabled")
    x_l = _as_input(x_l)
    if x_l.data.ndim != 4 or x_l.data.shape[1] != 1:
        raise ShapeError(f"colorizer expects [B,1,H,W], got {x_l.data.shape}")
    if params is None:
        params = model.bound_params()
    depth = model.config.colorizer_depth

    x = relu(conv2d(x_l, params["colorizer.stem.weight"],
                    params["colorizer.stem.bias"], padding=1))
    skips = [x]
    for k in range(1, depth + 1):
        x = relu(conv2d(x, params[f"colorizer.enc{k}.down.weight"],
                        params[f"colorizer.enc{k}.down.bias"], stride=2, padding=1))
        if k < depth:
            skips.append(x)
    m_c = x

    for k in range(depth - 1, -1, -1):
        skip = skips[k]
        if skip_gains is not None:
            skip = skip * float(skip_gains[k])
        x = concat_channels(upsample_nearest(x, 2), skip)
        x = relu(conv2d(x, params[f"colorizer.dec{k}.mix.weight"],
                        params[f"colorizer.dec{k}.mix.bias"], padding=1))
    pred_ab = conv2d(x, params["colorizer.head.weight"], params["colorizer.head.bias"])
    return pred_ab, m_c


def _fuse_with(params, prefix: str, a: Tensor, b: Optional[Tensor]) -> Tensor:
    if b is not None:
        if a.data.shape[2:] != b.data.shape[2:]:
            raise ShapeError(
                f"fuse: spatial extents {a.data.shape[2:]} != {b.data.shape[2:]}"
            )
        a = concat_channels(a, b)
    return relu(conv2d(a, params[f"{prefix}.weight"], params[f"{prefix}.bias"]))


def fuse(model: Model, a, b=None, params=None) -> Tensor:
    """Concat -> 1x1 conv -> ReLU; with b=None, project a alone."""
    if params is None:
        params = model.bound_params()
    return _fuse_with(params, "fuse", _as_input(a), None if b is None else _as_input(b))


def attention(model: Model, m_fuse, params=None):
    """Localization attention over a non-negative fused map.

    Returns (output, mask, m_atten): the re-fused features, the
    single-channel spatial mask, and the mask-weighted map.
    """
    m_fuse = _as_input(m_fuse)
    if params is None:
        params = model.bound_params()
    excitation = global_max_pool_spatial(m_fuse)
    m_sae = m_fuse * excitation
    mask = global_avg_pool_channels(m_sae)
    m_atten = m_fuse * mask
    out = _fuse_with(params, "attnfuse", m_fuse, m_atten)
    return out, mask, m_atten


def regressor_forward(model: Model, features, params=None):
    """Features [B,C,h,w] -> (x_hat [B,3], w_hat [B,3])."""
    features = _as_input(features)
    if params is None:
        params = model.bound_params()
    x = flatten_batch(features)
    hidden = relu(linear(x, params["regressor.embed.weight"],
                         params["regressor.embed.bias"]))
    x_hat = linear(hidden, params["regressor.trans.weight"],
                   params["regressor.trans.bias"])
    w_hat = linear(hidden, params["regressor.logrot.weight"],
                   params["regressor.logrot.bias"])
    return x_hat, w_hat


def model_forward(model: Model, rgb, x_l=None, params=None) -> ForwardOutput:
    """Full forward pass; `x_l` is the normalized lightness plane.

    `params` is the tape-bound parameter dict during training; when
    None the model's arrays are used as constants (inference).
    """
    if params is None:
        params = model.bound_params()
    m_l = backbone_forward(model, rgb, params=params)
    pred_ab = None
    if model.config.use_auxiliary:
        if x_l is None:
            raise ValueError("auxiliary branch needs the lightness plane x_l")
        pred_ab, m_c = colorizer_forward(model, x_l, params=params)
        fused = _fuse_with(params, "fuse", m_l, m_c)
    else:
        fused = _fuse_with(params, "fuse", m_l, None)
    mask = None
    m_atten = None
    features = fused
    if model.config.use_attention:
        features, mask, m_atten = attention(model, fused, params=params)
    x_hat, w_hat = regressor_forward(model, features, params=params)
    return ForwardOutput(
        pred_translation=x_hat,
        pred_logrot=w_hat,
        pred_ab=pred_ab,
        attention_mask=mask,
        m_fuse=fused,
        m_atten=m_atten,
    )


# ---------------------------------------------------------------------------
# losses


def loss_colorization(pred_ab: Tensor, gt_ab) -> Tensor:
    """Per-image L1 sum over both chroma planes, mean over the batch."""
    gt_ab = _as_input(gt_ab)
    if pred_ab.data.shape != gt_ab.data.shape:
        raise ShapeError(
            f"colorization loss: prediction {pred_ab.data.shape} vs "
            f"target {gt_ab.data.shape}"
        )
    per_image = sum_over(absolute(pred_ab - gt_ab), axes=(1, 2, 3))
    return mean_over(per_image)


def _row_norms(diff: Tensor) -> Tensor:
    return sqrt(sum_over(square(diff), axes=(1,)))


def loss_pose(x_hat: Tensor, w_hat: Tensor, x_gt, w_gt, beta_intra: float) -> Tensor:
    """|x_hat - x| + beta_intra * |w_hat - w| per sample, mean over batch."""
    x_gt = _as_input(x_gt)
    w_gt = _as_input(w_gt)
    per_sample = _row_norms(x_hat - x_gt) + beta_intra * _row_norms(w_hat - w_gt)
    return mean_over(per_sample)


def loss_joint(l_c: Optional[Tensor], l_l: Tensor, beta_inter: float) -> Tensor:
    """beta_inter * L_c + L_l; with no colorization term, exactly L_l."""
    if l_c is None:
        return l_l
    return beta_inter * l_c + l_l


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Dict[str, np.ndarray]) -> None:
    """Write parameters sorted by name: AXPS magic, version, records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read an AXPS file back into a name -> array dict."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        params: Dict[str, np.ndarray] = {}

        def read_exact(n):
            buf = f.read(n)
            if len(buf) != n:
                raise ValueError("truncated checkpoint file")
            return buf

        while True:
            head = f.read(4)
            if head == b"":
                return params
            if len(head) != 4:
                raise ValueError("truncated checkpoint file")
            (name_len,) = struct.unpack("<I", head)
            name = read_exact(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", read_exact(4))
            shape = struct.unpack(f"<{rank}I", read_exact(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(read_exact(8 * count), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)


def apply_checkpoint(model: Model, loaded: Dict[str, np.ndarray]) -> None:
    """Install loaded parameters; any name or shape drift is an error."""
    problems = []
    for name in sorted(set(model.params) - set(loaded)):
        problems.append(f"missing parameter {name}")
    for name in sorted(set(loaded) - set(model.params)):
        problems.append(f"unexpected parameter {name}")
    for name in sorted(set(loaded) & set(model.params)):
        want = model.params[name].shape
        got = loaded[name].shape
        if want != got:
            problems.append(f"shape mismatch for {name}: model {want}, file {got}")
    if problems:
        raise ValueError("checkpoint does not fit the model: " + "; ".join(problems))
    for name, arr in loaded.items():
        model.params[name] = np.array(arr, dtype=np.float64)
