"""Split-level evaluation, the noise-robustness sweep, and report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import reliability as rl
from .data_io import ClipSet
from .model import ModelParameters
from .uncertainty import SamplerConfig, predict, summarize


@dataclass
class Evaluation:
    errors: np.ndarray  # (N*T,) mm, clip-major frame order
    summary: object  # UncertaintySummary, flattened to (N*T,)
    report: rl.ReliabilityReport
    prediction: object


def evaluate_clips(params: ModelParameters, clips: ClipSet, sampler: SamplerConfig,
                   threshold_mm: float = 50.0, kinds=("epi", "ale", "total"),
                   coverage_grid=rl.DEFAULT_COVERAGE, split: str = "test",
                   inputs: np.ndarray | None = None,
                   outlier_percentile: float | None = None) -> Evaluation:
    """MC-dropout prediction followed by every reliability metric.

    Errors are measured against the MC sample mean. With
    ``outlier_percentile`` set, the outlier threshold is that percentile of
    the frame errors instead of ``threshold_mm``.
    """
    x = clips.inputs if inputs is None else inputs
    pred = predict(params, x, sampler)
    errors = rl.frame_error(pred.mean, clips.landmarks, clips.validity).ravel()
    if outlier_percentile is not None:
        threshold_mm = float(np.percentile(errors, outlier_percentile))
    s = summarize(pred, clips.validity)
    for kind in ("epi", "ale", "total"):
        setattr(s, kind, getattr(s, kind).ravel())
    report = rl.reliability_report(errors, s, kinds, threshold_mm, coverage_grid, split)
    return Evaluation(errors, s, report, pred)


@dataclass
class SweepRow:
    sigma_mm: float
    mean_error_mm: float
    spearman_rho: object
    roc_auc: object


def robustness_sweep(params: ModelParameters, clips: ClipSet, sigmas=rl.NOISE_SIGMAS_MM,
                     sampler: SamplerConfig | None = None, kind: str = "epi",
                     threshold_mm: float = 50.0, noise_seed: int = 0,
                     outlier_percentile: float | None = None) -> list[SweepRow]:
    """One row per sigma: degrade -> MC sample -> frame error -> rho / ROC-AUC.

    Every row reuses the sampler's dropout streams and the same standard
    normal draw scaled by sigma, so sigma = 0 reproduces a clean evaluation
    exactly.
    """
    sampler = sampler or SamplerConfig()
    rows = []
    for sigma in sigmas:
        noisy = rl.degrade_inputs(clips.keypoints, float(sigma), noise_seed)
        n, t = noisy.shape[:2]
        ev = evaluate_clips(params, clips, sampler, threshold_mm, kinds=(kind,),
                            inputs=noisy.reshape(n, t, -1),
                            outlier_percentile=outlier_percentile)
        kr = ev.report.kinds[kind]
        auc = kr.outliers.roc_auc if kr.outliers is not rl.DEGENERATE else rl.DEGENERATE
        rows.append(SweepRow(float(sigma), ev.report.mean_error_mm, kr.spearman_rho, auc))
    return rows


# ---------------------------------------------------------------- report files


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def report_csv(report: rl.ReliabilityReport) -> str:
    rows = [["split", "kind", "n_frames", "mean_error_mm", "spearman_rho", "risk_at_0.1_mm",
             "threshold_mm", "outlier_prevalence", "roc_auc", "pr_auc", "error_reference"]]
    for kind, kr in report.kinds.items():
        out = kr.outliers
        deg = out is rl.DEGENERATE
        try:
            r10 = kr.curve.at(0.1)
        except KeyError:
            r10 = float("nan")
        rows.append([report.split, kind, report.n_frames, rl.fmt(report.mean_error_mm),
                     rl.fmt(kr.spearman_rho), rl.fmt(r10), rl.fmt(report.threshold_mm),
                     rl.fmt(rl.DEGENERATE if deg else out.prevalence),
                     rl.fmt(rl.DEGENERATE if deg else out.roc_auc),
                     rl.fmt(rl.DEGENERATE if deg else out.pr_auc), report.error_reference])
    return _csv(rows)


def risk_coverage_csv(report: rl.ReliabilityReport) -> str:
    rows = [["kind", "coverage", "risk_mm"]]
    for kind, kr in report.kinds.items():
        for c, r in zip(kr.curve.coverage, kr.curve.risk_mm):
            rows.append([kind, rl.fmt(c), rl.fmt(r)])
    return _csv(rows)


def sweep_csv(rows: list[SweepRow]) -> str:
    out = [["sigma_mm", "mean_error_mm", "spearman_rho", "roc_auc"]]
    for r in rows:
        out.append([rl.fmt(r.sigma_mm), rl.fmt(r.mean_error_mm), rl.fmt(r.spearman_rho),
                    rl.fmt(r.roc_auc)])
    return _csv(out)


_COLORS = {"epi": "#1f77b4", "ale": "#d62728", "total": "#2ca02c"}


def risk_coverage_svg(report: rl.ReliabilityReport, width: int = 480, height: int = 320) -> str:
    """Self-contained SVG: one polyline per uncertainty kind, risk (mm) over coverage."""
    left, right, top, bottom = 60, 20, 20, 45
    pw, ph = width - left - right, height - top - bottom
    risks = np.concatenate([kr.curve.risk_mm for kr in report.kinds.values()])
    r_hi = float(risks.max()) * 1.05 if len(risks) else 1.0
    r_hi = r_hi if r_hi > 0 else 1.0

    def px(c, r):
        return left + c * pw, top + ph - (r / r_hi) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for c in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, y = px(c, 0)
        parts.append(f'<line x1="{x:.1f}" y1="{y:.1f}" x2="{x:.1f}" y2="{y + 4:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x:.1f}" y="{y + 16:.1f}" text-anchor="middle">{c:g}</text>')
    for k in range(5):
        r = r_hi * k / 4
        x, y = px(0, r)
        parts.append(f'<line x1="{x - 4:.1f}" y1="{y:.1f}" x2="{x:.1f}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{x - 6:.1f}" y="{y + 4:.1f}" text-anchor="end">{r:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">coverage</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.1f})">risk (mm)</text>')
    for i, (kind, kr) in enumerate(report.kinds.items()):
        pts = " ".join("%.2f,%.2f" % px(c, r) for c, r in zip(kr.curve.coverage, kr.curve.risk_mm))
        color = _COLORS.get(kind, "black")
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        lx, ly = left + 10, top + 12 + 14 * i
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 22}" y="{ly}">{kind}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(report: rl.ReliabilityReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "report.csv": report_csv(report),
        "risk_coverage.csv": risk_coverage_csv(report),
        "risk_coverage.svg": risk_coverage_svg(report),
    }
    paths = []
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
        paths.append(out / name)
    return paths
