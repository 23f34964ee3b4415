"""Detection metrics: AUROC, average precision, AU-PRO.

Tie conventions are pinned so the fast implementations agree exactly with
the brute-force oracles kept alongside them: AUROC counts tied
normal/anomalous pairs as 0.5 (Mann-Whitney), and average precision ranks
tied anomalous samples last (pessimistic).  AU-PRO integrates the mean
per-region overlap against the false-positive rate on normal pixels up to
``fpr_limit`` and normalizes by the limit; regions are 4-connected
components of the ground-truth masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError, UndefinedMetricError

LABELS = ("normal", "anomalous")


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ParameterError(f"label must be one of {LABELS}, got '{self.label}'")
        if not np.isfinite(self.score):
            raise ParameterError("score must be finite")


def _split(samples: list[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in samples], dtype=np.float64)
    flags = np.array([s.label == "anomalous" for s in samples])
    if not flags.any() or flags.all():
        raise UndefinedMetricError("need at least one sample of each class")
    return scores, flags


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; ties share the average of their positional ranks."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(samples: list[ScoredSample]) -> float:
    """Probability an anomalous sample outranks a normal one (ties 0.5)."""
    scores, flags = _split(samples)
    ranks = _average_ranks(scores)
    na = int(flags.sum())
    nn = len(flags) - na
    u = ranks[flags].sum() - na * (na + 1) / 2.0
    return float(u / (na * nn))


def oracle_auroc(samples: list[ScoredSample]) -> float:
    """Reference pairwise count; quadratic, for verification."""
    scores, flags = _split(samples)
    pos = scores[flags]
    neg = scores[~flags]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def average_precision(samples: list[ScoredSample]) -> float:
    """AP with the pessimistic tie order (tied anomalous ranked last)."""
    scores, flags = _split(samples)
    order = np.lexsort((flags, -scores))
    hits = flags[order]
    cum = np.cumsum(hits)
    positions = np.nonzero(hits)[0] + 1
    return float(np.mean(cum[hits] / positions))


def oracle_ap(samples: list[ScoredSample]) -> float:
    """Reference AP: explicit precision sweep under the same tie order."""
    scores, flags = _split(samples)
    ordered = sorted(range(len(scores)), key=lambda i: (-scores[i], flags[i]))
    seen = 0
    hits = 0
    precisions = []
    for i in ordered:
        seen += 1
        if flags[i]:
            hits += 1
            precisions.append(hits / seen)
    return float(np.mean(precisions))


_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def au_pro(maps: list[np.ndarray], masks: list[np.ndarray], fpr_limit: float = 0.3,
           max_thresholds: int = 512) -> float:
    """Area under the per-region-overlap curve, normalized by the limit.

    Thresholds sweep every unique map value when there are at most
    ``max_thresholds`` of them, else that many quantile-spaced values.
    Predictions are ``map >= t``; the curve point at threshold +inf is
    (0, 0) and the sweep always reaches FPR 1 at the minimum value.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ParameterError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    if len(maps) != len(masks) or not maps:
        raise DimensionError("need equally many (nonzero) maps and masks")
    region_scores: list[np.ndarray] = []
    normal_parts: list[np.ndarray] = []
    for m, gt in zip(maps, masks):
        m = np.asarray(m, dtype=np.float64)
        gt = np.asarray(gt).astype(bool)
        if m.shape != gt.shape:
            raise DimensionError(f"map {m.shape} vs mask {gt.shape}")
        if gt.any():
            labels, n = ndimage.label(gt, structure=_FOUR_CONN)
            for r in range(1, n + 1):
                region_scores.append(np.sort(m[labels == r], kind="mergesort"))
        normal_parts.append(m[~gt].ravel())
    if not region_scores:
        raise UndefinedMetricError("no anomalous regions in the ground truth")
    normal_sorted = np.sort(np.concatenate(normal_parts), kind="mergesort")
    if normal_sorted.size == 0:
        raise UndefinedMetricError("no normal pixels; FPR undefined")

    values = np.unique(np.concatenate([np.asarray(m).ravel() for m in maps]))
    if values.size > max_thresholds:
        values = np.unique(np.quantile(values, np.linspace(0.0, 1.0, max_thresholds)))

    nn = normal_sorted.size
    fprs = [0.0]
    pros = [0.0]
    for t in values[::-1]:
        fpr = (nn - np.searchsorted(normal_sorted, t, side="left")) / nn
        overlaps = [(r.size - np.searchsorted(r, t, side="left")) / r.size
                    for r in region_scores]
        fprs.append(float(fpr))
        pros.append(float(np.mean(overlaps)))

    area = 0.0
    for i in range(1, len(fprs)):
        x0, x1, y0, y1 = fprs[i - 1], fprs[i], pros[i - 1], pros[i]
        if x1 <= fpr_limit:
            area += 0.5 * (y0 + y1) * (x1 - x0)
        elif x0 < fpr_limit:
            frac = (fpr_limit - x0) / (x1 - x0)
            y_lim = y0 + frac * (y1 - y0)
            area += 0.5 * (y0 + y_lim) * (fpr_limit - x0)
            break
        else:
            break
    return float(area / fpr_limit)


@dataclass
class EvalReport:
    stage: str
    auroc: float
    ap: float
    aupro: float
    bias_mass: float
    n_normal: int
    n_anom: int
    seed: int


EVAL_HEADER = "stage,auroc,ap,aupro,bias_mass,n_normal,n_anom,seed"


def format_eval_rows(rows: list[EvalReport]) -> str:
    lines = [EVAL_HEADER]
    for r in rows:
        lines.append("%s,%.17g,%.17g,%.17g,%.17g,%d,%d,%d"
                     % (r.stage, r.auroc, r.ap, r.aupro, r.bias_mass,
                        r.n_normal, r.n_anom, r.seed))
    return "\n".join(lines) + "\n"


def parse_eval_rows(text: str) -> list[EvalReport]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != EVAL_HEADER:
        raise ParameterError("evaluation report header mismatch")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(EvalReport(stage=parts[0], auroc=float(parts[1]), ap=float(parts[2]),
                              aupro=float(parts[3]), bias_mass=float(parts[4]),
                              n_normal=int(parts[5]), n_anom=int(parts[6]),
                              seed=int(parts[7])))
    return out
