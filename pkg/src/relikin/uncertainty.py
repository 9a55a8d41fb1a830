"""MC-dropout sampling and the epistemic / aleatoric / total variance fields.

Pass ``m`` over chunk ``c`` draws its dropout masks from the stream
``(base_seed, "mc", m, c)``; chunks are fixed-size slices of the input in
order, so results depend only on the sampler config and ``chunk_size``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelParameters, ProbabilisticPrediction, check_input, forward_graph, with_config
from .seeding import stream

KINDS = ("epi", "ale", "total")


@dataclass(frozen=True)
class SamplerConfig:
    num_samples: int = 50
    dropout_rate: float = 0.1
    base_seed: int = 0
    aleatoric: str = "mean"  # "mean" over MC passes, or "single" deterministic pass
    chunk_size: int = 16

    def __post_init__(self):
        if self.num_samples < 2:
            raise ConfigError(f"MC sampling needs num_samples >= 2, got {self.num_samples}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.aleatoric not in ("mean", "single"):
            raise ConfigError("aleatoric must be 'mean' or 'single'")
        if self.chunk_size <= 0:
            raise ConfigError("chunk_size must be positive")


def mc_sample(params: ModelParameters, batch: np.ndarray, sampler: SamplerConfig,
              chunk_index: int = 0):
    """``M`` dropout-active passes; returns ``(samples, log_vars_or_None)``, each ``(M, B, T, L, 3)``."""
    if params.config.num_layers < 1:
        raise ConfigError("model has no dropout sites")
    cfg = params.config
    if cfg.dropout_rate != sampler.dropout_rate:
        cfg = with_config(params, dropout_rate=sampler.dropout_rate).config
    x = check_input(cfg, batch)
    means, log_vars = [], []
    for m in range(sampler.num_samples):
        rng = stream(sampler.base_seed, "mc", m, chunk_index)
        mu, lv = forward_graph(params.tensors, cfg, x, rng)
        means.append(mu.value)
        if lv is not None:
            log_vars.append(lv.value)
    return np.stack(means), (np.stack(log_vars) if log_vars else None)


def sample_mean(samples: np.ndarray) -> np.ndarray:
    """Mean over axis 0, shifted by the first sample so identical samples return it exactly."""
    first = samples[0]
    return first + (samples - first).mean(axis=0)


def epistemic_variance(samples: np.ndarray) -> np.ndarray:
    """Population (1/M) variance over the sample axis."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise ConfigError("epistemic variance needs at least 2 samples")
    centered = samples - sample_mean(samples)
    return (centered * centered).mean(axis=0)


def aleatoric_variance(per_sample_log_var: np.ndarray) -> np.ndarray:
    return np.exp(np.asarray(per_sample_log_var, dtype=np.float64)).mean(axis=0)


def total_variance(epi: np.ndarray, ale: np.ndarray | None) -> np.ndarray:
    if ale is None:
        return np.array(epi, dtype=np.float64)
    return epi + ale


def frame_score(variance: np.ndarray, validity) -> np.ndarray:
    """Mean over valid landmarks and the three axes: ``(..., T, L, 3) -> (..., T)``."""
    valid = np.asarray(validity, dtype=bool)
    if not valid.any():
        raise ValueError("frame_score: no valid landmarks")
    return variance[..., valid, :].mean(axis=(-2, -1))


@dataclass
class UncertaintySummary:
    """Per-frame scalar scores (m^2) for each uncertainty kind."""

    epi: np.ndarray
    ale: np.ndarray
    total: np.ndarray
    aggregation: str = "mean over valid landmarks and axes"

    def get(self, kind: str) -> np.ndarray:
        if kind not in KINDS:
            raise ValueError(f"unknown uncertainty kind {kind!r}")
        return getattr(self, kind)


def predict(params: ModelParameters, inputs: np.ndarray, sampler: SamplerConfig,
            keep_samples: bool = False) -> ProbabilisticPrediction:
    """MC prediction for ``(N, T, 3K)`` inputs, processed in fixed chunks."""
    x = check_input(params.config, inputs)
    means, epis, ales, samples = [], [], [], []
    hetero = params.config.heteroscedastic
    for c, start in enumerate(range(0, len(x), sampler.chunk_size)):
        part = x[start:start + sampler.chunk_size]
        smp, lvs = mc_sample(params, part, sampler, chunk_index=c)
        means.append(sample_mean(smp))
        epis.append(epistemic_variance(smp))
        if hetero:
            if sampler.aleatoric == "mean":
                ales.append(aleatoric_variance(lvs))
            else:
                _, lv = forward_graph(params.tensors, params.config, part, None)
                ales.append(np.exp(lv.value))
        if keep_samples:
            samples.append(smp)
    return ProbabilisticPrediction(
        mean=np.concatenate(means),
        ale_var=np.concatenate(ales) if hetero else None,
        epi_var=np.concatenate(epis),
        samples=np.concatenate(samples, axis=1) if keep_samples else None,
        log_var_clamp=params.config.log_var_clamp if hetero else None,
    )


def summarize(pred: ProbabilisticPrediction, validity) -> UncertaintySummary:
    epi = pred.epi_var
    ale = pred.ale_var if pred.ale_var is not None else np.zeros_like(epi)
    total = total_variance(epi, pred.ale_var)
    return UncertaintySummary(frame_score(epi, validity), frame_score(ale, validity),
                              frame_score(total, validity))


def write_prediction_dump(pred: ProbabilisticPrediction, clip_ids, out_dir, corpus_dir=None) -> None:
    """One CSV per clip plus ``manifest.csv`` linking each to its ground truth.

    Per-clip columns: ``frame_index``, then ``l{i}_x,l{i}_y,l{i}_z`` (m) for
    every landmark, then ``l{i}_epi_{x,y,z}`` and ``l{i}_ale_{x,y,z}`` (m^2).
    Aleatoric columns are 0 for deterministic models.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N, T, L, _ = pred.mean.shape
    axes = "xyz"
    header = (["frame_index"] + [f"l{i}_{a}" for i in range(L) for a in axes]
              + [f"l{i}_epi_{a}" for i in range(L) for a in axes]
              + [f"l{i}_ale_{a}" for i in range(L) for a in axes])
    ale = pred.ale_var if pred.ale_var is not None else np.zeros_like(pred.mean)
    rows = ["clip_id,prediction_file,ground_truth_file"]
    gt_root = "" if corpus_dir is None else str(corpus_dir).rstrip("/") + "/"
    for n, cid in enumerate(clip_ids):
        lines = [",".join(header)]
        for t in range(T):
            vals = np.concatenate([pred.mean[n, t].ravel(), pred.epi_var[n, t].ravel(),
                                   ale[n, t].ravel()])
            lines.append(f"{t}," + ",".join(f"{v:.6g}" for v in vals))
        name = f"pred_{cid}.csv"
        (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        rows.append(f"{cid},{name},{gt_root}landmarks_{cid}.csv")
    (out / "manifest.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
