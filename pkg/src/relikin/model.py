"""Dropout-equipped LSTM mapping keypoint windows to landmark means and log-variances.

Input frames are flattened keypoint-major, coordinate-minor
(k0x, k0y, k0z, k1x, ...), the same order as the corpus CSV files.
Outputs are ``(B, T, L, 3)`` in meters; log-variances are in ln(m^2).

Inputs and mean outputs pass through fixed per-feature standardization
buffers (fitted once from the training split). They are not learned.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataFormatError, ShapeError
from .seeding import stream

CHECKPOINT_VERSION = 1
INIT_SIGMA_M = 0.05  # initial aleatoric std of a fresh log-variance head


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 60
    landmark_count: int = 43
    hidden_size: int = 128
    num_layers: int = 2
    dropout_rate: float = 0.1
    heteroscedastic: bool = False
    log_var_clamp: tuple[float, float] = (-10.0, 4.0)
    seq_len: int = 60
    input_skip: bool = True
    skip_dropout: bool = True  # MC dropout also masks the skip-path inputs
    whiten_floor: float = 1e-3  # eigenvalue floor, relative to the largest input variance

    def __post_init__(self):
        object.__setattr__(self, "log_var_clamp", tuple(float(v) for v in self.log_var_clamp))
        if self.hidden_size <= 0 or self.num_layers <= 0:
            raise ConfigError("hidden_size and num_layers must be positive")
        if self.input_dim <= 0 or self.input_dim % 3 or self.landmark_count <= 0:
            raise ConfigError("input_dim must be a positive multiple of 3 and landmark_count positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        lo, hi = self.log_var_clamp
        if not lo < hi:
            raise ConfigError(f"log_var_clamp low must be below high, got {self.log_var_clamp}")
        if self.seq_len <= 0:
            raise ConfigError("seq_len must be positive")
        if not self.whiten_floor > 0:
            raise ConfigError(f"whiten_floor must be positive, got {self.whiten_floor}")

    @property
    def keypoint_count(self) -> int:
        return self.input_dim // 3

    @property
    def output_dim(self) -> int:
        return 3 * self.landmark_count

    def nonstandard(self) -> list[str]:
        """Fields that differ from the K=20, L=43, T=60, p=0.1 defaults."""
        notes = []
        if self.input_dim != 60:
            notes.append(f"input_dim={self.input_dim} (K={self.keypoint_count}, default K=20)")
        if self.landmark_count != 43:
            notes.append(f"landmark_count={self.landmark_count} (default 43)")
        if self.seq_len != 60:
            notes.append(f"seq_len={self.seq_len} (default 60)")
        if self.dropout_rate != 0.1:
            notes.append(f"dropout_rate={self.dropout_rate} (default 0.1)")
        return notes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_var_clamp"] = list(self.log_var_clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    norm_fitted: bool = False

    BUFFERS = ("norm.in_shift", "norm.in_whiten", "norm.out_shift", "norm.out_scale")

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if not k.startswith("norm.")]

    def decayed(self, name: str) -> bool:
        return name.endswith(".w") or name.endswith(".w_x") or name.endswith(".w_h")

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()},
                               self.norm_fitted)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k], dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class ProbabilisticPrediction:
    """Per-frame landmark means (m) with optional variance fields (m^2)."""

    mean: np.ndarray
    ale_var: np.ndarray | None = None
    epi_var: np.ndarray | None = None
    samples: np.ndarray | None = None
    log_var_clamp: tuple[float, float] | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("ale_var", "epi_var"):
            v = getattr(self, name)
            if v is not None and np.any(v < 0):
                raise ValueError(f"{name} has negative entries")
        if self.ale_var is not None and self.log_var_clamp is not None:
            lo, hi = np.exp(self.log_var_clamp)
            if np.any(self.ale_var < lo * (1 - 1e-12)) or np.any(self.ale_var > hi * (1 + 1e-12)):
                raise ValueError("ale_var outside exp(log_var_clamp) bounds")

    @property
    def total_var(self) -> np.ndarray | None:
        if self.epi_var is None:
            return self.ale_var
        if self.ale_var is None:
            return self.epi_var
        return self.epi_var + self.ale_var


def init_model(config: ModelConfig, seed: int) -> ModelParameters:
    """Uniform(+-1/sqrt(H)) LSTM weights, zero biases, forget-gate bias +1.

    Both output heads and the skip path start at zero, so the initial
    prediction is the training-set mean pose. The log-variance head starts
    with zero weights and bias ln(0.05^2), so every initial aleatoric std
    is exactly 5 cm.
    """
    rng = stream(seed, "init")
    H = config.hidden_size
    bound = 1.0 / math.sqrt(H)
    t: dict[str, np.ndarray] = {}
    d_in = config.input_dim
    for layer in range(config.num_layers):
        t[f"lstm{layer}.w_x"] = rng.uniform(-bound, bound, (d_in, 4 * H))
        t[f"lstm{layer}.w_h"] = rng.uniform(-bound, bound, (H, 4 * H))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # gate order i, f, o, g
        t[f"lstm{layer}.b"] = b
        d_in = H
    t["head_mean.w"] = np.zeros((H, config.output_dim))
    t["head_mean.b"] = np.zeros(config.output_dim)
    if config.input_skip:
        t["skip.w"] = np.zeros((config.input_dim, config.output_dim))
    if config.heteroscedastic:
        t.update(fresh_log_var_head(config))
    t["norm.in_shift"] = np.zeros(config.input_dim)
    t["norm.in_whiten"] = np.eye(config.input_dim)
    t["norm.out_shift"] = np.zeros(config.output_dim)
    t["norm.out_scale"] = np.ones(config.output_dim)
    return ModelParameters(config, t)


def fresh_log_var_head(config: ModelConfig) -> dict[str, np.ndarray]:
    return {
        "head_logvar.w": np.zeros((config.hidden_size, config.output_dim)),
        "head_logvar.b": np.full(config.output_dim, math.log(INIT_SIGMA_M ** 2)),
    }


def fit_normalization(params: ModelParameters, keypoints: np.ndarray,
                      landmarks: np.ndarray) -> ModelParameters:
    """Set normalization buffers from training arrays ``(N, T, K, 3)``/``(N, T, L, 3)``.

    Inputs are centered and ZCA-whitened: eigen-directions of the input
    covariance are rescaled by ``1/sqrt(lambda + floor)`` with
    ``floor = whiten_floor * lambda_max``; directions with no variance in
    the training data are projected out. Outputs are standardized per
    coordinate.
    """
    cfg = params.config
    x = keypoints.reshape(-1, cfg.input_dim)
    y = landmarks.reshape(-1, cfg.output_dim)
    out = params.copy()

    def scale(a):
        s = a.std(axis=0)
        return np.where(s < 1e-8, 1.0, s)

    shift = x.mean(axis=0)
    xc = x - shift
    lam, vec = np.linalg.eigh(xc.T @ xc / len(xc))
    lam = np.maximum(lam, 0.0)
    top = lam.max()
    if top <= 0:
        whiten = np.eye(cfg.input_dim)
    else:
        inv = np.where(lam > 1e-12 * top, 1.0 / np.sqrt(lam + cfg.whiten_floor * top), 0.0)
        whiten = (vec * inv) @ vec.T
    out.tensors["norm.in_shift"] = shift
    out.tensors["norm.in_whiten"] = whiten
    out.tensors["norm.out_shift"] = y.mean(axis=0)
    out.tensors["norm.out_scale"] = scale(y)
    out.norm_fitted = True
    return out


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``rate``, else 1/(1-rate)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def check_input(config: ModelConfig, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 4:
        batch = batch.reshape(batch.shape[0], batch.shape[1], -1)
    if batch.ndim != 3 or batch.shape[1:] != (config.seq_len, config.input_dim):
        raise ShapeError("forward", batch.shape, (None, config.seq_len, config.input_dim))
    if not np.isfinite(batch).all():
        raise ValueError("forward: non-finite values in input batch")
    return batch


def forward_graph(tensors: dict, config: ModelConfig, x: np.ndarray,
                  rng: np.random.Generator | None):
    """Build the forward pass on the active tape (if any).

    ``tensors`` maps names to Tensors (watched leaves when training) or
    arrays. ``rng`` is None for a deterministic pass. Returns
    ``(mean, log_var_or_None)`` Tensors of shape ``(B, T, L, 3)``.
    """
    B, T, _ = x.shape
    H = config.hidden_size
    L = config.landmark_count
    p = config.dropout_rate
    use_dropout = rng is not None and p > 0.0
    tensors = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in tensors.items()}

    def buf(name):
        return tensors[name].value

    x_n = ad.Tensor((x - buf("norm.in_shift")) @ buf("norm.in_whiten"))
    inp = x_n
    for layer in range(config.num_layers):
        w_x = tensors[f"lstm{layer}.w_x"]
        w_h = tensors[f"lstm{layer}.w_h"]
        xw = ad.add(ad.matmul(inp, w_x), tensors[f"lstm{layer}.b"])
        h = c = None
        hs = []
        for t in range(T):
            z = xw[:, t, :]
            if h is not None:
                z = ad.add(z, ad.matmul(h, w_h))
            sig = ad.sigmoid(z[:, :3 * H])
            g = ad.tanh(z[:, 3 * H:])
            i, f, o = sig[:, :H], sig[:, H:2 * H], sig[:, 2 * H:]
            c = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            hs.append(h)
        inp = ad.reshape(ad.concat(hs, axis=1), (B, T, H))
        if use_dropout:
            inp = ad.mul(inp, dropout_mask(rng, (B, T, H), p))

    mean_n = ad.add(ad.matmul(inp, tensors["head_mean.w"]), tensors["head_mean.b"])
    if config.input_skip:
        skip_in = x_n
        if use_dropout and config.skip_dropout:
            skip_in = ad.mul(x_n, dropout_mask(rng, x_n.shape, p))
        mean_n = ad.add(mean_n, ad.matmul(skip_in, tensors["skip.w"]))
    mean = ad.add(ad.mul(mean_n, buf("norm.out_scale")), buf("norm.out_shift"))
    mean = ad.reshape(mean, (B, T, L, 3))
    log_var = None
    if config.heteroscedastic:
        raw = ad.add(ad.matmul(inp, tensors["head_logvar.w"]), tensors["head_logvar.b"])
        lo, hi = config.log_var_clamp
        log_var = ad.reshape(ad.clamp(raw, lo, hi), (B, T, L, 3))
    return mean, log_var


def forward(params: ModelParameters, batch: np.ndarray, dropout_active: bool = False,
            rng_seed: int = 0):
    """Untaped forward pass returning ``(mean, log_var_or_None)`` numpy arrays."""
    cfg = params.config
    x = check_input(cfg, batch)
    rng = stream(rng_seed, "dropout") if dropout_active else None
    mean, log_var = forward_graph(params.tensors, cfg, x, rng)
    return mean.value, (None if log_var is None else log_var.value)


# ---------------------------------------------------------------- checkpoint I/O


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(v) for v in values.ravel().tolist())


def save_checkpoint(params: ModelParameters, path) -> None:
    path = Path(path)
    lines = [
        f"relikin-checkpoint {CHECKPOINT_VERSION}",
        "config " + json.dumps(params.config.to_dict(), sort_keys=True),
        f"norm_fitted {int(params.norm_fitted)}",
        f"checksum {params.checksum()}",
        f"tensors {len(params.tensors)}",
    ]
    for name, arr in params.tensors.items():
        lines.append(f"tensor {name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        lines.append(_fmt(arr))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParameters:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except OSError as err:
        raise DataFormatError(f"cannot read checkpoint: {err}", path=path) from None

    def expect(lineno, prefix):
        if lineno >= len(lines) or not lines[lineno].startswith(prefix + " "):
            raise DataFormatError(f"expected {prefix!r} header", path=path, line=lineno + 1,
                                  field=prefix)
        return lines[lineno][len(prefix) + 1:]

    version = expect(0, "relikin-checkpoint")
    if version.strip() != str(CHECKPOINT_VERSION):
        raise DataFormatError(f"unsupported checkpoint version {version!r}", path=path, line=1,
                              field="relikin-checkpoint")
    try:
        config = ModelConfig.from_dict(json.loads(expect(1, "config")))
    except (json.JSONDecodeError, TypeError, ConfigError) as err:
        raise DataFormatError(f"bad config: {err}", path=path, line=2, field="config") from None
    norm_fitted = expect(2, "norm_fitted").strip() == "1"
    checksum = expect(3, "checksum").strip()
    count = int(expect(4, "tensors"))
    tensors = {}
    ln = 5
    for _ in range(count):
        head = expect(ln, "tensor").split()
        name, ndim = head[0], int(head[1])
        shape = tuple(int(v) for v in head[2:2 + ndim])
        try:
            values = np.array([float(v) for v in lines[ln + 1].split()], dtype=np.float64)
        except (ValueError, IndexError):
            raise DataFormatError("unparseable tensor values", path=path, line=ln + 2,
                                  field=name) from None
        if values.size != int(np.prod(shape)):
            raise DataFormatError(f"expected {int(np.prod(shape))} values, found {values.size}",
                                  path=path, line=ln + 2, field=name)
        tensors[name] = values.reshape(shape)
        ln += 2
    params = ModelParameters(config, tensors, norm_fitted)
    if params.checksum() != checksum:
        raise DataFormatError("checksum mismatch", path=path, line=4, field="checksum")
    _check_shapes(params, path)
    return params


def _check_shapes(params: ModelParameters, path) -> None:
    ref = init_model(params.config, 0)
    if set(ref.tensors) != set(params.tensors):
        raise DataFormatError(
            f"tensor names {sorted(params.tensors)} do not match config", path=path)
    for k, v in ref.tensors.items():
        if params.tensors[k].shape != v.shape:
            raise DataFormatError(f"shape {params.tensors[k].shape} != {v.shape}", path=path,
                                  field=k)


def with_config(params: ModelParameters, **changes) -> ModelParameters:
    out = params.copy()
    out.config = replace(params.config, **changes)
    return out
