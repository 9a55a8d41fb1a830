"""Frame-level reliability metrics: error, rank correlation, risk-coverage, outlier AUCs.

All metrics are deterministic functions of their inputs. Metrics that are
undefined for the given data (constant vectors, one-class labels) return
:data:`DEGENERATE` instead of a number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import stream


class _Degenerate:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DEGENERATE"

    def __bool__(self):
        return False


DEGENERATE = _Degenerate()

DEFAULT_COVERAGE = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
NOISE_SIGMAS_MM = (0.0, 2.5, 5.0, 7.5, 10.0, 15.0, 20.0, 30.0)


def is_degenerate(value) -> bool:
    return value is DEGENERATE


@dataclass
class FrameScore:
    frame_id: int
    error_mm: float
    uncertainty: dict[str, float]


def frame_error(pred_mean, target, validity) -> np.ndarray:
    """Mean Euclidean distance over valid landmarks per frame, in mm."""
    pred_mean = np.asarray(pred_mean, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred_mean.shape != target.shape:
        raise ValueError(f"frame_error: shape {pred_mean.shape} vs {target.shape}")
    valid = np.asarray(validity, dtype=bool)
    if not valid.any():
        raise ValueError("frame_error: no valid landmarks")
    dist = np.linalg.norm(pred_mean[..., valid, :] - target[..., valid, :], axis=-1)
    return 1000.0 * dist.mean(axis=-1)


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    ranks = np.empty(n)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(e, u):
    """Pearson correlation of mid-ranks; DEGENERATE if either input is constant."""
    e = np.asarray(e, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    if e.shape != u.shape:
        raise ValueError("spearman: inputs differ in length")
    if len(e) < 3:
        raise ValueError("spearman needs at least 3 pairs")
    re, ru = midranks(e), midranks(u)
    re -= re.mean()
    ru -= ru.mean()
    denom = math.sqrt(float(re @ re) * float(ru @ ru))
    if denom == 0.0:
        return DEGENERATE
    return float(np.clip((re @ ru) / denom, -1.0, 1.0))


def spearman_pvalue(e, u, n_perm: int = 2000, seed: int = 0) -> float:
    """One-sided permutation p-value for a positive rank correlation."""
    rho = spearman(e, u)
    if rho is DEGENERATE:
        return 1.0
    re = midranks(e)
    re = re - re.mean()
    ru = midranks(u)
    ru = ru - ru.mean()
    scale = math.sqrt(float(re @ re) * float(ru @ ru))
    rng = stream(seed, "spearman-perm")
    hits = 0
    for _ in range(n_perm):
        if float(re @ ru[rng.permutation(len(ru))]) / scale >= rho:
            hits += 1
    return (hits + 1) / (n_perm + 1)


@dataclass
class RiskCoverageCurve:
    coverage: np.ndarray
    risk_mm: np.ndarray
    retained: np.ndarray
    kind: str = "epi"

    def at(self, c: float) -> float:
        hit = np.flatnonzero(np.isclose(self.coverage, c, rtol=0, atol=1e-12))
        if not len(hit):
            raise KeyError(f"coverage {c} not on the grid")
        return float(self.risk_mm[hit[0]])


def retained_count(c: float, n: int) -> int:
    # tolerance keeps e.g. 0.1 * 50 from rounding up to 6
    return max(1, min(n, math.ceil(c * n - 1e-9)))


def risk_coverage(errors, uncertainty, coverage_grid=DEFAULT_COVERAGE, kind: str = "epi",
                  frame_ids=None) -> RiskCoverageCurve:
    """Mean error of the ceil(c*n) least-uncertain frames for each coverage c.

    Ties in uncertainty are broken by ascending frame id. Retained errors
    are averaged in frame order, so c = 1 reproduces ``errors.mean()``
    bit-for-bit.
    """
    e = np.asarray(errors, dtype=np.float64).ravel()
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    if len(e) == 0:
        raise ValueError("risk_coverage: no frames")
    if e.shape != u.shape:
        raise ValueError("risk_coverage: errors and uncertainty differ in length")
    grid = np.asarray(coverage_grid, dtype=np.float64)
    if np.any(grid <= 0) or np.any(grid > 1) or np.any(np.diff(grid) <= 0):
        raise ConfigError("coverage grid must be strictly increasing within (0, 1]")
    ids = np.arange(len(e)) if frame_ids is None else np.asarray(frame_ids)
    order = np.lexsort((ids, u))
    risks, counts = [], []
    for c in grid:
        k = retained_count(float(c), len(e))
        keep = np.sort(order[:k])
        risks.append(float(e[keep].mean()))
        counts.append(k)
    return RiskCoverageCurve(grid, np.array(risks), np.array(counts), kind)


@dataclass
class OutlierResult:
    roc_auc: float
    pr_auc: float
    prevalence: float
    threshold_mm: float
    n: int


def roc_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return DEGENERATE
    r = midranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels):
    """Non-interpolated average precision: sum over thresholds of dRecall * precision.

    Every distinct score is one threshold (tied scores enter together).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return DEGENERATE
    order = np.argsort(-s, kind="mergesort")
    ss, yy = s[order], y[order]
    tp = np.cumsum(yy)
    last = np.r_[ss[1:] != ss[:-1], True]  # final index of each tie group
    tp_at = tp[last]
    n_at = (np.flatnonzero(last) + 1)
    precision = tp_at / n_at
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def outlier_detection(errors, uncertainty, threshold_mm: float = 50.0):
    """Outliers are frames with error strictly above ``threshold_mm``."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    labels = e > threshold_mm
    roc = roc_auc(uncertainty, labels)
    if roc is DEGENERATE:
        return DEGENERATE
    return OutlierResult(roc, pr_auc(uncertainty, labels), float(labels.mean()),
                         float(threshold_mm), len(e))


def degrade_inputs(keypoints, sigma_mm: float, seed: int, valid=None) -> np.ndarray:
    """Add i.i.d. N(0, (sigma_mm/1000)^2) to each coordinate of valid keypoints.

    ``keypoints`` is ``(..., K, 3)`` in meters; ``valid`` is an optional
    ``(K,)`` mask. The noise draw for a given seed is shared across sigmas
    (noise = sigma * z), so sweeps use common random numbers.
    """
    if sigma_mm < 0:
        raise ConfigError(f"sigma_mm must be non-negative, got {sigma_mm}")
    kp = np.asarray(keypoints, dtype=np.float64)
    if sigma_mm == 0:
        return kp.copy()
    z = stream(seed, "degrade").standard_normal(kp.shape)
    noise = (sigma_mm / 1000.0) * z
    if valid is not None:
        noise = noise * np.asarray(valid, dtype=bool)[:, None]
    return kp + noise


def drop_keypoints(keypoints, fraction: float, seed: int):
    """Optional missing-joint degradation: zero a random subset of keypoints per frame.

    Returns ``(degraded, valid_mask)`` where ``valid_mask`` is ``(..., K)``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("fraction must be in [0, 1]")
    kp = np.asarray(keypoints, dtype=np.float64)
    keep = stream(seed, "drop").random(kp.shape[:-1]) >= fraction
    return kp * keep[..., None], keep


@dataclass
class KindReport:
    kind: str
    spearman_rho: object
    curve: RiskCoverageCurve
    outliers: object  # OutlierResult or DEGENERATE


@dataclass
class ReliabilityReport:
    split: str
    n_frames: int
    mean_error_mm: float
    threshold_mm: float
    kinds: dict[str, KindReport] = field(default_factory=dict)
    error_reference: str = "mc_mean"


def reliability_report(errors, summary, kinds=("epi", "ale", "total"), threshold_mm: float = 50.0,
                       coverage_grid=DEFAULT_COVERAGE, split: str = "test") -> ReliabilityReport:
    e = np.asarray(errors, dtype=np.float64).ravel()
    rep = ReliabilityReport(split, len(e), float(e.mean()), float(threshold_mm))
    for kind in kinds:
        u = np.asarray(summary.get(kind)).ravel()
        rep.kinds[kind] = KindReport(kind, spearman(e, u),
                                     risk_coverage(e, u, coverage_grid, kind),
                                     outlier_detection(e, u, threshold_mm))
    return rep


def fmt(v) -> str:
    """6 significant digits, '.' decimal point; DEGENERATE prints as 'degenerate'."""
    if v is DEGENERATE:
        return "degenerate"
    return f"{float(v):.6g}"
