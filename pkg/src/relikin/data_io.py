"""Synthetic multi-study motion corpus, on-disk format, subject splits, clipping.

Corpus directory layout (format version 1)::

    manifest.json           dimensions, generator config, names, triplets,
                            one entry per clip with provenance + sha256
    validity.csv            header ``index,name,valid``; L rows
    keypoints_<id>.csv      header k0x,k0y,k0z,k1x,...; T rows x 3K columns
    landmarks_<id>.csv      header l0x,l0y,l0z,...;     T rows x 3L columns
    splits.json             optional subject -> train/val/test manifest

Numbers are written with Python's shortest round-trip repr, so a
save -> load -> save cycle is byte-identical. All coordinates are meters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import skeleton as sk
from .errors import ConfigError, DataFormatError, LeakageError
from .seeding import stream

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class GeneratorConfig:
    num_studies: int = 16
    subjects_per_study: int = 5
    sequences_per_subject: int = 2
    frames_per_sequence: int = 240
    sample_rate: float = 60.0
    clip_len: int = 60
    landmark_count: int = 43
    padded_landmarks: int = 3
    landmark_map: str = "rigid"  # "rigid" (segment-frame markers) or "affine"
    obs_noise_mm: tuple[float, float] = (1.0, 4.0)  # per-study sigma range
    ambiguity_fraction: float = 0.15
    ambiguity_scale: float = 2.0
    ambiguity_twist_rad: float = 1.2
    chain_offsets: list | None = None
    chain_amplitudes: list | None = None
    seed: int = 0

    def __post_init__(self):
        self.obs_noise_mm = tuple(float(v) for v in self.obs_noise_mm)
        if self.landmark_map not in ("rigid", "affine"):
            raise ConfigError(f"landmark_map must be 'rigid' or 'affine', got {self.landmark_map!r}")
        if self.landmark_count - self.padded_landmarks != sk.REAL_LANDMARKS or self.padded_landmarks < 0:
            raise ConfigError(
                f"landmark_count - padded_landmarks must equal {sk.REAL_LANDMARKS}")
        for name in ("num_studies", "subjects_per_study", "sequences_per_subject",
                     "frames_per_sequence", "clip_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.ambiguity_fraction <= 1.0:
            raise ConfigError("ambiguity_fraction must be in [0, 1]")
        lo, hi = self.obs_noise_mm
        if lo < 0 or hi < lo:
            raise ConfigError("obs_noise_mm must be a (low, high) range with 0 <= low <= high")
        sk.validate_chain(sk.PARENTS, self.offsets(), self.amplitudes())

    def offsets(self) -> np.ndarray:
        return sk.REST_OFFSETS if self.chain_offsets is None else np.asarray(self.chain_offsets, float)

    def amplitudes(self) -> np.ndarray:
        return sk.ROT_AMPLITUDE if self.chain_amplitudes is None else np.asarray(self.chain_amplitudes, float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_noise_mm"] = list(self.obs_noise_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class MotionSample:
    keypoints: np.ndarray  # (T, K, 3) m
    landmarks: np.ndarray  # (T, L, 3) m, padded slots are 0
    landmark_validity: np.ndarray  # (L,) bool
    subject_id: str
    study_id: str
    sequence_id: str
    clip_id: str = ""
    ambiguous: bool = False


@dataclass
class Corpus:
    samples: list[MotionSample]
    validity: np.ndarray
    keypoint_names: list[str]
    landmark_names: list[str]
    triplets: list[tuple[int, int, int]]
    generator: dict = field(default_factory=dict)
    study_noise_mm: dict[str, float] = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        s = self.samples[0]
        return s.keypoints.shape[0], s.keypoints.shape[1], s.landmarks.shape[1]

    def subjects_by_study(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for s in self.samples:
            subs = out.setdefault(s.study_id, [])
            if s.subject_id not in subs:
                subs.append(s.subject_id)
        return out


@dataclass
class ClipSet:
    """Stacked clips ready for batching."""

    keypoints: np.ndarray  # (N, T, K, 3)
    landmarks: np.ndarray  # (N, T, L, 3)
    validity: np.ndarray  # (L,)
    subject_ids: list[str]
    clip_ids: list[str]
    triplets: list[tuple[int, int, int]]
    ambiguous: np.ndarray | None = None

    def __len__(self):
        return len(self.clip_ids)

    @property
    def inputs(self) -> np.ndarray:
        n, t = self.keypoints.shape[:2]
        return self.keypoints.reshape(n, t, -1)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx, dtype=int)
        return ClipSet(self.keypoints[idx], self.landmarks[idx], self.validity,
                       [self.subject_ids[i] for i in idx], [self.clip_ids[i] for i in idx],
                       self.triplets, None if self.ambiguous is None else self.ambiguous[idx])


# ---------------------------------------------------------------- kinematics


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _band_limited(rng, n_frames, rate, amplitude, freq_scale, n_waves=3):
    """Sum of ``n_waves`` sinusoids per channel; ``amplitude`` has one entry per channel."""
    amplitude = np.asarray(amplitude, dtype=float)
    t = np.arange(n_frames) / rate
    ch = amplitude.size
    freqs = rng.uniform(0.25, 1.5, (ch, n_waves)) * freq_scale
    phases = rng.uniform(0.0, 2.0 * np.pi, (ch, n_waves))
    weights = rng.uniform(0.2, 0.6, (ch, n_waves))
    bias = rng.uniform(-0.3, 0.3, ch)
    waves = np.sin(2.0 * np.pi * freqs[:, :, None] * t + phases[:, :, None])
    out = (weights[:, :, None] * waves).sum(axis=1) + bias[:, None]
    return (out * amplitude.reshape(-1, 1)).T  # (n_frames, ch)


def _perp_basis(direction):
    d = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    n1 = np.cross(d, ref)
    n1 /= np.linalg.norm(n1)
    return n1, np.cross(d, n1)


def forward_kinematics(angles, twist, root_pos, offsets):
    """Joint positions ``(F, K, 3)`` and global rotations ``(F, K, 3, 3)``.

    Local rotation is Rz(az) Rx(ax) Ry(ay + twist); the innermost y-rotation
    spins about the bone when the child offset lies on the local y axis.
    """
    F, K, _ = angles.shape
    pos = np.zeros((F, K, 3))
    rot = np.zeros((F, K, 3, 3))
    for j in range(K):
        local = _rot_z(angles[:, j, 2]) @ _rot_x(angles[:, j, 0]) @ _rot_y(angles[:, j, 1] + twist[:, j])
        p = sk.PARENTS[j]
        if p < 0:
            rot[:, j] = local
            pos[:, j] = root_pos
        else:
            rot[:, j] = rot[:, p] @ local
            pos[:, j] = pos[:, p] + rot[:, p] @ offsets[j]
    return pos, rot


def _landmark_geometry(offsets, scale, jitter):
    """Per-landmark offsets in the owning joint frame (rigid mode)."""
    local = np.zeros((sk.REAL_LANDMARKS, 3))
    for i, spec in enumerate(sk.LANDMARKS):
        bone = offsets[spec.child] * scale
        n1, n2 = _perp_basis(offsets[spec.child])
        perp = spec.radius * (math.cos(spec.phase) * n1 + math.sin(spec.phase) * n2)
        local[i] = spec.along * bone + perp + jitter[i]
    return local


def _affine_offsets(offsets):
    """Constant world-frame offsets (affine mode), independent of subject."""
    out = np.zeros((sk.REAL_LANDMARKS, 3))
    for i, spec in enumerate(sk.LANDMARKS):
        n1, n2 = _perp_basis(offsets[spec.child])
        out[i] = spec.radius * (math.cos(spec.phase) * n1 + math.sin(spec.phase) * n2)
    return out


def _synthesize_sequence(cfg: GeneratorConfig, rng, body_scale, jitter, amp_scale, freq_scale,
                         ambiguous: bool):
    F, K = cfg.frames_per_sequence, len(sk.PARENTS)
    offsets = cfg.offsets() * body_scale
    amp = cfg.amplitudes() * amp_scale
    if ambiguous:
        amp = amp * cfg.ambiguity_scale
    angles = _band_limited(rng, F, cfg.sample_rate, amp.ravel(), freq_scale).reshape(F, K, 3)
    twist = np.zeros((F, K))
    twist_idx = [sk.KEYPOINT_NAMES.index(n) for n in sk.TWIST_JOINTS]
    if ambiguous:
        twist[:, twist_idx] = _band_limited(rng, F, cfg.sample_rate,
                                            np.full(len(twist_idx), cfg.ambiguity_twist_rad),
                                            freq_scale)
    else:
        # Twist follows flexion, so it is recoverable from keypoints.
        twist[:, twist_idx] = 0.4 * angles[:, twist_idx, 0]
    sway = _band_limited(rng, F, cfg.sample_rate, np.array([0.05, 0.02, 0.05]), freq_scale)
    root = sway + np.array([0.0, 0.95 * body_scale, 0.0])
    pos, rot = forward_kinematics(angles, twist, root, offsets)

    L = cfg.landmark_count
    land = np.zeros((F, L, 3))
    joint = np.array([s.joint for s in sk.LANDMARKS])
    child = np.array([s.child for s in sk.LANDMARKS])
    if cfg.landmark_map == "rigid":
        local = _landmark_geometry(cfg.offsets(), body_scale, jitter)
        land[:, :sk.REAL_LANDMARKS] = pos[:, joint] + np.einsum("fkij,kj->fki", rot[:, joint], local)
    else:
        along = np.array([s.along for s in sk.LANDMARKS])[None, :, None]
        land[:, :sk.REAL_LANDMARKS] = (pos[:, joint] + along * (pos[:, child] - pos[:, joint])
                                       + _affine_offsets(cfg.offsets()))
    return pos, land


def segment(frames: np.ndarray, T: int = 60) -> list[np.ndarray]:
    """Non-overlapping windows of ``T`` frames; a trailing remainder is dropped."""
    n = len(frames) // T
    return [frames[i * T:(i + 1) * T] for i in range(n)]


def generate_corpus(config: GeneratorConfig) -> Corpus:
    cfg = config
    L = cfg.landmark_count
    validity = np.zeros(L, dtype=bool)
    validity[:sk.REAL_LANDMARKS] = True
    samples = []
    noise_by_study = {}
    master = stream(cfg.seed, "corpus")
    n_seq = cfg.num_studies * cfg.subjects_per_study * cfg.sequences_per_subject
    n_amb = int(round(cfg.ambiguity_fraction * n_seq))
    amb_flags = np.zeros(n_seq, dtype=bool)
    amb_flags[master.permutation(n_seq)[:n_amb]] = True
    seq_counter = 0
    for s in range(cfg.num_studies):
        study_id = f"S{s:02d}"
        srng = stream(cfg.seed, "study", s)
        amp_scale = srng.uniform(0.6, 1.2)
        freq_scale = srng.uniform(0.6, 1.6)
        lo, hi = cfg.obs_noise_mm
        sigma_mm = float(srng.uniform(lo, hi)) if hi > lo else lo
        noise_by_study[study_id] = sigma_mm
        for j in range(cfg.subjects_per_study):
            subject_id = f"{study_id}-P{j:02d}"
            prng = stream(cfg.seed, "subject", s, j)
            body_scale = prng.uniform(0.88, 1.12)
            jitter = prng.normal(0.0, 0.004, (sk.REAL_LANDMARKS, 3))
            for q in range(cfg.sequences_per_subject):
                qrng = stream(cfg.seed, "sequence", s, j, q)
                amb = bool(amb_flags[seq_counter])
                seq_counter += 1
                kp, land = _synthesize_sequence(cfg, qrng, body_scale, jitter, amp_scale,
                                                freq_scale, amb)
                if sigma_mm > 0:
                    nrng = stream(cfg.seed, "obs-noise", s, j, q)
                    land[:, validity] += nrng.normal(0.0, sigma_mm / 1000.0,
                                                     land[:, validity].shape)
                sequence_id = f"{subject_id}-Q{q:02d}"
                for c, (kc, lc) in enumerate(zip(segment(kp, cfg.clip_len),
                                                 segment(land, cfg.clip_len))):
                    samples.append(MotionSample(kc.copy(), lc.copy(), validity.copy(), subject_id,
                                                study_id, sequence_id, f"{sequence_id}-C{c:02d}",
                                                amb))
    return Corpus(samples, validity, list(sk.KEYPOINT_NAMES), sk.landmark_names(L),
                  sk.chain_triplets(), cfg.to_dict(), noise_by_study)


# ---------------------------------------------------------------- splits


@dataclass
class SplitManifest:
    assignment: dict[str, str]  # subject_id -> split
    per_study: dict[str, dict[str, int]]
    ratios: tuple[float, float, float]
    seed: int

    def subjects(self, split: str) -> set[str]:
        return {s for s, v in self.assignment.items() if v == split}

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for subject, split in self.assignment.items():
            if subject in seen and seen[subject] != split:
                raise LeakageError(f"subject {subject} in {seen[subject]} and {split}")
            seen[subject] = split
        a, b, c = (self.subjects(s) for s in SPLITS)
        if a & b or a & c or b & c:
            raise LeakageError("split subject sets intersect")

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "seed": self.seed, "per_study": self.per_study,
                "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d) -> "SplitManifest":
        out = cls(dict(d["assignment"]), d["per_study"], tuple(d["ratios"]), int(d["seed"]))
        out.check_disjoint()
        return out


def split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment with at least one subject per split.

    ``n < len(ratios)`` gives everything to the first split.
    """
    k = len(ratios)
    if n < k:
        return [n] + [0] * (k - 1)
    counts = [1] * k
    rest = n - k
    quotas = [max(r * n - 1.0, 0.0) for r in ratios]
    total = sum(quotas)
    if rest == 0 or total == 0:
        counts[0] += rest
        return counts
    quotas = [q * rest / total for q in quotas]
    floors = [int(math.floor(q + 1e-12)) for q in quotas]
    left = rest - sum(floors)
    order = sorted(range(k), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return [c + f for c, f in zip(counts, floors)]


def split_subjects(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    """Subject-level split performed independently inside each study."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    assignment = {}
    per_study = {}
    for study, subjects in sorted(corpus.subjects_by_study().items()):
        subjects = sorted(subjects)
        if len(subjects) < 3:
            log.warning("study %s has %d subjects; assigning all to train", study, len(subjects))
        order = stream(seed, "split", study).permutation(len(subjects))
        counts = split_counts(len(subjects), ratios)
        bounds = np.cumsum([0] + counts)
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            for i in order[lo:hi]:
                assignment[subjects[i]] = name
        per_study[study] = dict(zip(SPLITS, counts))
    manifest = SplitManifest(assignment, per_study, tuple(float(r) for r in ratios), seed)
    manifest.check_disjoint()
    return manifest


def clipset(corpus: Corpus, manifest: SplitManifest | None = None, split: str | None = None) -> ClipSet:
    chosen = corpus.samples
    if split is not None:
        if manifest is None:
            raise ValueError("a split name needs a SplitManifest")
        keep = manifest.subjects(split)
        chosen = [s for s in corpus.samples if s.subject_id in keep]
    if not chosen:
        raise ValueError(f"no clips in split {split!r}")
    return ClipSet(np.stack([s.keypoints for s in chosen]), np.stack([s.landmarks for s in chosen]),
                   corpus.validity.copy(), [s.subject_id for s in chosen],
                   [s.clip_id for s in chosen], list(corpus.triplets),
                   np.array([s.ambiguous for s in chosen]))


# ---------------------------------------------------------------- file format


def _fmt_row(values: Iterable[float]) -> str:
    return ",".join(repr(float(v)) for v in values)


def _table(header: list[str], rows: np.ndarray) -> str:
    return ",".join(header) + "\n" + "".join(_fmt_row(r) + "\n" for r in rows)


def _columns(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i}{c}" for i in range(n) for c in "xyz"]


def save_corpus(corpus: Corpus, path, splits: SplitManifest | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    T, K, L = corpus.dims
    clips = []
    for s in corpus.samples:
        kp = _table(_columns("k", K), s.keypoints.reshape(T, -1))
        lm = _table(_columns("l", L), s.landmarks.reshape(T, -1))
        (root / f"keypoints_{s.clip_id}.csv").write_text(kp, encoding="utf-8")
        (root / f"landmarks_{s.clip_id}.csv").write_text(lm, encoding="utf-8")
        digest = hashlib.sha256((kp + lm).encode("utf-8")).hexdigest()
        clips.append({"id": s.clip_id, "subject_id": s.subject_id, "study_id": s.study_id,
                      "sequence_id": s.sequence_id, "ambiguous": s.ambiguous, "sha256": digest})
    validity = "index,name,valid\n" + "".join(
        f"{i},{n},{int(v)}\n" for i, (n, v) in enumerate(zip(corpus.landmark_names, corpus.validity)))
    (root / "validity.csv").write_text(validity, encoding="utf-8")
    manifest = {
        "format_version": FORMAT_VERSION,
        "T": T, "K": K, "L": L,
        "units": "m",
        "keypoint_names": corpus.keypoint_names,
        "landmark_names": corpus.landmark_names,
        "triplets": [list(t) for t in corpus.triplets],
        "generator": corpus.generator,
        "study_noise_mm": corpus.study_noise_mm,
        "clips": clips,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    if splits is not None:
        save_splits(splits, root / "splits.json")


def save_splits(splits: SplitManifest, path) -> None:
    Path(path).write_text(json.dumps(splits.to_dict(), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_splits(path) -> SplitManifest:
    path = Path(path)
    try:
        return SplitManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise DataFormatError(f"cannot read split manifest: {err}", path=path) from None


def _read_table(path: Path, columns: list[str], rows: int) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise DataFormatError(f"cannot read: {err}", path=path) from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].split(",") != columns:
        got = lines[0].split(",") if lines else []
        bad = next((c for c, g in zip(columns, got) if c != g), None) if got else None
        raise DataFormatError(
            f"header mismatch: expected {len(columns)} columns {columns[:3]}..., got {len(got)}",
            path=path, line=1, field=bad)
    if len(lines) - 1 != rows:
        raise DataFormatError(f"expected {rows} data rows, found {len(lines) - 1}", path=path,
                              line=len(lines))
    out = np.empty((rows, len(columns)))
    for r, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != len(columns):
            raise DataFormatError(f"expected {len(columns)} values, found {len(cells)}", path=path,
                                  line=r + 2)
        for c, cell in enumerate(cells):
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise DataFormatError(f"not a number: {cell!r}", path=path, line=r + 2,
                                      field=columns[c]) from None
    if not np.isfinite(out).all():
        raise DataFormatError("non-finite coordinate", path=path)
    return out


def load_corpus(path) -> Corpus:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except OSError as err:
        raise DataFormatError(f"cannot read manifest: {err}", path=mpath) from None
    except json.JSONDecodeError as err:
        raise DataFormatError(f"invalid JSON: {err.msg}", path=mpath, line=err.lineno) from None
    for key in ("format_version", "T", "K", "L", "clips", "landmark_names", "keypoint_names"):
        if key not in manifest:
            raise DataFormatError("missing key", path=mpath, field=key)
    if manifest["format_version"] != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format_version {manifest['format_version']}",
                              path=mpath, field="format_version")
    T, K, L = manifest["T"], manifest["K"], manifest["L"]
    if len(manifest["keypoint_names"]) != K:
        raise DataFormatError(f"K={K} but {len(manifest['keypoint_names'])} keypoint names",
                              path=mpath, field="K")
    if len(manifest["landmark_names"]) != L:
        raise DataFormatError(f"L={L} but {len(manifest['landmark_names'])} landmark names",
                              path=mpath, field="L")

    vpath = root / "validity.csv"
    try:
        vlines = vpath.read_text(encoding="utf-8").rstrip("\n").split("\n")
    except OSError as err:
        raise DataFormatError(f"cannot read: {err}", path=vpath) from None
    if vlines[0] != "index,name,valid":
        raise DataFormatError("bad header", path=vpath, line=1)
    if len(vlines) - 1 != L:
        raise DataFormatError(f"expected {L} rows, found {len(vlines) - 1}", path=vpath,
                              field="L")
    validity = np.zeros(L, dtype=bool)
    for i, line in enumerate(vlines[1:]):
        parts = line.split(",")
        if len(parts) != 3 or parts[0] != str(i) or parts[2] not in ("0", "1"):
            raise DataFormatError(f"malformed row {line!r}", path=vpath, line=i + 2)
        validity[i] = parts[2] == "1"

    samples = []
    for entry in manifest["clips"]:
        cid = entry["id"]
        kpath, lpath = root / f"keypoints_{cid}.csv", root / f"landmarks_{cid}.csv"
        kp = _read_table(kpath, _columns("k", K), T)
        lm = _read_table(lpath, _columns("l", L), T)
        digest = hashlib.sha256(
            (kpath.read_text(encoding="utf-8") + lpath.read_text(encoding="utf-8")).encode("utf-8")
        ).hexdigest()
        if digest != entry.get("sha256"):
            raise DataFormatError("checksum mismatch", path=kpath, field="sha256")
        lm = lm.reshape(T, L, 3)
        if np.any(lm[:, ~validity] != 0.0):
            raise DataFormatError("padded landmark slot is non-zero", path=lpath)
        samples.append(MotionSample(kp.reshape(T, K, 3), lm, validity.copy(), entry["subject_id"],
                                    entry["study_id"], entry["sequence_id"], cid,
                                    bool(entry.get("ambiguous", False))))
    return Corpus(samples, validity, list(manifest["keypoint_names"]),
                  list(manifest["landmark_names"]),
                  [tuple(t) for t in manifest.get("triplets", [])],
                  manifest.get("generator", {}), manifest.get("study_noise_mm", {}))
