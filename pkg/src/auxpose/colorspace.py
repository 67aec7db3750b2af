"""sRGB <-> CIE Lab conversion (D65 reference white, 2 degree observer).

Pipeline: sRGB [0,1] -> linear RGB (IEC 61966-2-1 transfer function)
-> XYZ -> Lab.  The white point is taken as the matrix image of
(1,1,1) so that pure grays land on a = b = 0 exactly, not merely to
rounding of a separately quoted white point.

Network-facing scaling: L/100 into [0,1], a and b by 1/110 into
roughly [-1,1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# sRGB -> XYZ (D65), IEC 61966-2-1 primaries
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE = _RGB_TO_XYZ @ np.ones(3)

_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA ** 3

L_SCALE = 100.0
AB_SCALE = 110.0


@dataclass
class LabImage:
    """Per-pixel lightness and opponent-chroma planes.

    L in [0,100]; a, b nominally within [-110,110] for sRGB sources.
    """

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (self.L.shape == self.a.shape == self.b.shape):
            raise ValueError(
                f"Lab planes must share extents, got L{self.L.shape} "
                f"a{self.a.shape} b{self.b.shape}"
            )

    @property
    def shape(self):
        return self.L.shape


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _DELTA3, np.cbrt(t), t / (3.0 * _DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(f):
    return np.where(f > _DELTA, f ** 3, 3.0 * _DELTA ** 2 * (f - 4.0 / 29.0))


def rgb_to_lab(image: np.ndarray) -> LabImage:
    """Convert an H x W x 3 sRGB image with channels in [0,1] to Lab."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if np.any(image < 0.0) or np.any(image > 1.0):
        raise ValueError("sRGB channel values must lie in [0, 1]")
    lin = _srgb_to_linear(image)
    xyz = lin @ _RGB_TO_XYZ.T
    f = _lab_f(xyz / _WHITE)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return LabImage(
        L=116.0 * fy - 16.0,
        a=500.0 * (fx - fy),
        b=200.0 * (fy - fz),
    )


def lab_to_rgb(lab: LabImage) -> np.ndarray:
    """Convert Lab back to sRGB; out-of-gamut results are clamped to [0,1]."""
    fy = (lab.L + 16.0) / 116.0
    fx = fy + lab.a / 500.0
    fz = fy - lab.b / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1)
    xyz = xyz * _WHITE
    lin = xyz @ _XYZ_TO_RGB.T
    return np.clip(_linear_to_srgb(lin), 0.0, 1.0)


def normalize_lab_for_net(lab: LabImage):
    """Scale Lab planes to network ranges.

    Returns (x_l, y_ab): x_l is [1,H,W] with L/100 in [0,1]; y_ab is
    [2,H,W] with a,b scaled by 1/110 to roughly [-1,1].
    """
    x_l = (lab.L / L_SCALE)[None, :, :]
    y_ab = np.stack([lab.a / AB_SCALE, lab.b / AB_SCALE])
    return x_l, y_ab


def denormalize_lab_for_net(x_l: np.ndarray, y_ab: np.ndarray) -> LabImage:
    """Inverse of normalize_lab_for_net."""
    return LabImage(
        L=x_l[0] * L_SCALE,
        a=y_ab[0] * AB_SCALE,
        b=y_ab[1] * AB_SCALE,
    )
