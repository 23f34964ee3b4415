"""Anomaly-map composition and the attention-bias proxy.

The local map is the channel mean of the squared teacher/student-head
difference; the global map the same between autoencoder output and the
student's AE head.  Their average, bilinearly resized to input size, is
the combined heatmap; the image score is its maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .networks import Network
from .tensor import Tensor, bilinear_resize_array


@dataclass
class DiffCube:
    """Elementwise squared difference of two aligned feature cubes."""

    values: np.ndarray  # [C,H,W], nonnegative


@dataclass
class AnomalyMap:
    local: np.ndarray      # [H',W'] at feature resolution
    global_: np.ndarray    # [H',W']
    combined: np.ndarray   # [H',W']
    resized: np.ndarray    # [H,W] at input resolution
    image_score: float


def diff_cube(a: np.ndarray | Tensor, b: np.ndarray | Tensor) -> DiffCube:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"diff_cube: shape {a.shape} vs {b.shape}")
    d = a - b
    return DiffCube(values=d * d)


def channel_mean(d: DiffCube) -> np.ndarray:
    """Collapse the channel axis: M[h,w] = mean_c D[c,h,w]."""
    v = d.values
    if v.ndim != 3:
        raise DimensionError(f"difference cube must be [C,H,W], got {v.shape}")
    return v.mean(axis=0)


def compose_maps(teacher_out, student_teacher_head, ae_out, student_ae_head,
                 out_h: int, out_w: int) -> AnomalyMap:
    """Average the local and global maps and resize to input resolution."""
    local = channel_mean(diff_cube(teacher_out, student_teacher_head))
    glob = channel_mean(diff_cube(ae_out, student_ae_head))
    if local.shape != glob.shape:
        raise DimensionError(f"map grids differ: {local.shape} vs {glob.shape}")
    combined = 0.5 * (local + glob)
    resized = bilinear_resize_array(combined, out_h, out_w)
    return AnomalyMap(local=local, global_=glob, combined=combined,
                      resized=resized, image_score=float(resized.max()))


def _single(arr: np.ndarray | Tensor) -> np.ndarray:
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
    return a[0] if a.ndim == 4 else a


def model_maps(teacher: Network, student: Network, autoencoder: Network,
               image: np.ndarray | Tensor) -> AnomalyMap:
    """Run the trio on one image (no gradients) and compose its map."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise DimensionError(f"model_maps expects one [C,H,W] image, got {arr.shape}")
    x = Tensor(arr)
    t_out = _single(teacher.forward(x))
    s_out = _single(student.forward(x))
    a_out = _single(autoencoder.forward(x))
    c = t_out.shape[0]
    if s_out.shape[0] != 2 * c:
        raise DimensionError(f"student channels {s_out.shape[0]} != 2x teacher {c}")
    return compose_maps(t_out, s_out[:c], a_out, s_out[c:],
                        out_h=arr.shape[2], out_w=arr.shape[3])


def bias_mass(maps: list[AnomalyMap], region_mask: np.ndarray) -> float:
    """Share of mean heatmap mass falling inside the masked region.

    ``region_mask`` marks the high-variance (background) region at input
    resolution.  Computed over normal images only; a detector that attends
    to nominal variation instead of the stable foreground scores high.
    """
    if not maps:
        raise ContractError("bias_mass needs at least one map")
    mask = np.asarray(region_mask, dtype=bool)
    if not mask.any():
        raise ParameterError("region mask is empty")
    mean_map = np.zeros_like(maps[0].resized)
    for m in maps:
        if m.resized.shape != mask.shape:
            raise DimensionError(
                f"map shape {m.resized.shape} does not match mask {mask.shape}")
        mean_map += m.resized
    mean_map /= len(maps)
    total = float(mean_map.sum())
    if total <= 0.0:
        return 0.0
    return float(mean_map[mask].sum()) / total
