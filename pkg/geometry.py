"""
Axis-aligned 3D box algebra: exact IoU, a differentiable IoU built from
autodiff primitives, and threshold accuracy.

iou3d and iou3d_grad evaluate the same expressions in the same order, so
their values agree bit for bit:
    lo = c - 0.5*s, hi = c + 0.5*s
    w  = max(0, min(hiA, hiB) - max(loA, loB))         per axis
    I  = (w_x * w_y) * w_z
    V  = ((hi-lo)_x * (hi-lo)_y) * (hi-lo)_z
    IoU = I / ((V_A + V_B) - I)
"""
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

import autodiff as ad
from errors import GeometryError

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Box3:
    center: Vec3
    size: Vec3

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise GeometryError("Box3 needs 3 center and 3 size components")
        if not all(np.isfinite(v) for v in (*self.center, *self.size)):
            raise GeometryError(f"non-finite box {self}")
        if any(s <= 0 for s in self.size):
            raise GeometryError(f"box sizes must be > 0, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) - 0.5 * np.asarray(self.size, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + 0.5 * np.asarray(self.size, dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    def as_array(self) -> np.ndarray:
        return np.asarray((*self.center, *self.size), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3":
        v = [float(x) for x in values]
        if len(v) != 6:
            raise GeometryError(f"box arrays have 6 entries, got {len(v)}")
        return cls((v[0], v[1], v[2]), (v[3], v[4], v[5]))

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "size": [float(s) for s in self.size]}


def _volume_from_bounds(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    e = hi - lo
    return e[..., 0] * e[..., 1] * e[..., 2]


def iou3d_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of box rows [..., 6] (center, size) against box rows of the same shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 6:
        raise GeometryError(f"box arrays must match and end in 6, got {a.shape} and {b.shape}")
    if np.any(a[..., 3:] <= 0) or np.any(b[..., 3:] <= 0):
        raise GeometryError("box sizes must be > 0")
    lo_a, hi_a = a[..., :3] - 0.5 * a[..., 3:], a[..., :3] + 0.5 * a[..., 3:]
    lo_b, hi_b = b[..., :3] - 0.5 * b[..., 3:], b[..., :3] + 0.5 * b[..., 3:]
    w = np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0)
    inter = w[..., 0] * w[..., 1] * w[..., 2]
    union = (_volume_from_bounds(lo_a, hi_a) + _volume_from_bounds(lo_b, hi_b)) - inter
    return inter / union


def iou3d(a: Box3, b: Box3) -> float:
    return float(iou3d_batch(a.as_array(), b.as_array()))


def _columns(t: ad.Tensor) -> Tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    return ad.slice_lastaxis(t, 0, 1), ad.slice_lastaxis(t, 1, 2), ad.slice_lastaxis(t, 2, 3)


def iou3d_grad(pred: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """
    Differentiable IoU of predicted boxes [B, 6] against constant ground
    truth [B, 6]; returns [B, 1]. Overlap clamps use relu, so the gradient is
    0 exactly at touching boundaries and everywhere in the disjoint region.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim == 1:
        gt = gt.reshape(1, 6)
    if pred.value.ndim != 2 or pred.shape[1] != 6 or gt.shape != pred.shape:
        raise GeometryError(f"iou3d_grad needs [B, 6] boxes, got {pred.shape} and {gt.shape}")
    if np.any(pred.value[:, 3:] <= 0) or np.any(gt[:, 3:] <= 0):
        raise GeometryError("box sizes must be > 0")

    center = ad.slice_lastaxis(pred, 0, 3)
    half = ad.scale(ad.slice_lastaxis(pred, 3, 6), 0.5)
    lo = ad.sub(center, half)
    hi = ad.add(center, half)
    gt_lo = ad.constant(gt[:, :3] - 0.5 * gt[:, 3:])
    gt_hi = ad.constant(gt[:, :3] + 0.5 * gt[:, 3:])

    overlap = ad.relu(ad.sub(ad.minimum(hi, gt_hi), ad.maximum(lo, gt_lo)))
    wx, wy, wz = _columns(overlap)
    inter = ad.mul(ad.mul(wx, wy), wz)

    ex, ey, ez = _columns(ad.sub(hi, lo))
    vol_pred = ad.mul(ad.mul(ex, ey), ez)
    vol_gt = ad.constant(_volume_from_bounds(gt_lo.value, gt_hi.value).reshape(-1, 1))
    union = ad.sub(ad.add(vol_pred, vol_gt), inter)
    return ad.div(inter, union)


def acc_at(ious: Iterable[float], tau: float) -> float:
    """Fraction of IoUs strictly above tau."""
    values = np.asarray(list(ious), dtype=np.float64)
    if values.size == 0:
        raise GeometryError("acc_at needs at least one IoU")
    if not 0.0 < tau < 1.0:
        raise GeometryError(f"tau must be in (0, 1), got {tau}")
    if np.any(values < 0) or np.any(values > 1):
        raise GeometryError("IoUs must lie in [0, 1]")
    return float(np.count_nonzero(values > tau)) / values.size
