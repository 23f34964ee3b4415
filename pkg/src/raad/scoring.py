"""Hierarchical bit allocation from teacher-student tap discrepancies.

Each conv layer gets a raw score: the mean over calibration images of the
per-element squared Frobenius gap between aligned teacher and student
taps, (c*w*h)^-1 * sum_c ||T_c - S_c||_F^2.  Raw scores are min-max
normalized across layers and thresholded into bit widths; layers whose
taps disagree most keep the most precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .networks import Network
from .tensor import Tensor


@dataclass
class LayerScore:
    layer: int  # 1-based
    raw: float
    normalized: float | None = None
    bits: int | None = None
    forced: bool = False


@dataclass(frozen=True)
class BitPolicy:
    """Normalized score -> bit width mapping with forced endpoints."""

    thresholds: tuple[float, float, float] = (0.25, 0.5, 0.75)
    bits: tuple[int, int, int, int] = (2, 3, 4, 8)
    forced_layers: frozenset[int] = field(default_factory=frozenset)  # 1-based
    forced_bits: int = 8

    def __post_init__(self):
        if list(self.thresholds) != sorted(self.thresholds):
            raise ParameterError("thresholds must be nondecreasing")
        if len(self.bits) != len(self.thresholds) + 1:
            raise ParameterError("need one more bit level than thresholds")

    def lookup(self, s: float) -> int:
        for t, b in zip(self.thresholds, self.bits):
            if s < t:
                return b
        return self.bits[-1]


def _tap_array(tap) -> np.ndarray:
    arr = tap.data if isinstance(tap, Tensor) else np.asarray(tap, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise DimensionError(f"expected a single-image tap, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise DimensionError(f"tap must be [C,H,W], got shape {arr.shape}")
    return arr


def layer_scores(teacher_taps: list[list], student_taps: list[list]) -> list[LayerScore]:
    """Raw per-layer scores from aligned taps.

    Outer lists run over calibration images, inner over layers.  When a
    student tap has exactly twice the teacher's channels (the widened
    final layer) only its first half is compared.
    """
    if len(teacher_taps) != len(student_taps) or not teacher_taps:
        raise ContractError("need the same nonzero number of tap sets for both networks")
    n_layers = len(teacher_taps[0])
    sums = np.zeros(n_layers)
    for t_im, s_im in zip(teacher_taps, student_taps):
        if len(t_im) != n_layers or len(s_im) != n_layers:
            raise ContractError("inconsistent tap counts across images")
        for j in range(n_layers):
            t = _tap_array(t_im[j])
            s = _tap_array(s_im[j])
            if s.shape[0] == 2 * t.shape[0]:
                s = s[:t.shape[0]]
            if t.shape != s.shape:
                raise DimensionError(
                    f"layer {j + 1} tap shapes differ: {t.shape} vs {s.shape}")
            d = t - s
            sums[j] += float(np.sum(d * d)) / t.size
    sums /= len(teacher_taps)
    return [LayerScore(layer=j + 1, raw=float(sums[j])) for j in range(n_layers)]


def normalize_scores(scores: list[LayerScore]) -> list[LayerScore]:
    """Min-max normalize raw scores into [0,1]; all-equal maps to 0.5."""
    if not scores:
        raise ContractError("no layer scores to normalize")
    raws = np.array([s.raw for s in scores])
    lo, hi = float(raws.min()), float(raws.max())
    if hi - lo == 0.0:
        normed = np.full_like(raws, 0.5)
    else:
        normed = (raws - lo) / (hi - lo)
    return [LayerScore(layer=s.layer, raw=s.raw, normalized=float(v))
            for s, v in zip(scores, normed)]


def assign_bits(scores: list[LayerScore], policy: BitPolicy) -> list[LayerScore]:
    """Threshold normalized scores into bit widths, applying forced layers."""
    out = []
    for s in scores:
        if s.normalized is None:
            raise ContractError(f"layer {s.layer} score not normalized")
        forced = s.layer in policy.forced_layers
        bits = policy.forced_bits if forced else policy.lookup(s.normalized)
        out.append(LayerScore(layer=s.layer, raw=s.raw, normalized=s.normalized,
                              bits=bits, forced=forced))
    return out


def score_network_pair(teacher: Network, student: Network, images: list,
                       policy: BitPolicy | None = None) -> list[LayerScore]:
    """Run both nets over calibration images and produce the bit assignment."""
    t_all, s_all = [], []
    for image in images:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        x = Tensor(arr[None] if arr.ndim == 3 else arr)
        _, t_taps = teacher.forward_with_taps(x)
        _, s_taps = student.forward_with_taps(x)
        t_all.append(t_taps)
        s_all.append(s_taps)
    scores = normalize_scores(layer_scores(t_all, s_all))
    if policy is None:
        policy = BitPolicy(forced_layers=frozenset({1, len(scores)}))
    return assign_bits(scores, policy)


def format_score_report(scores: list[LayerScore]) -> str:
    lines = ["layer,raw_score,normalized,bits,forced"]
    for s in scores:
        lines.append("%d,%.17g,%.17g,%d,%s"
                     % (s.layer, s.raw, s.normalized, s.bits,
                        "true" if s.forced else "false"))
    return "\n".join(lines) + "\n"
