"""Kinematic chain and landmark layout used by the synthetic corpus.

20 keypoints (K) and 43 landmark slots (L): 40 anatomical landmarks plus 3
padded, always-invalid slots at the end. Coordinates are y-up, meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# name, parent index, rest offset from parent (m), joint rotation amplitude (rad, xyz)
JOINTS: list[tuple[str, int, tuple[float, float, float], tuple[float, float, float]]] = [
    ("pelvis", -1, (0.0, 0.0, 0.0), (0.10, 0.30, 0.10)),
    ("spine", 0, (0.0, 0.24, 0.0), (0.25, 0.25, 0.15)),
    ("neck", 1, (0.0, 0.26, 0.0), (0.20, 0.30, 0.15)),
    ("head", 2, (0.0, 0.16, 0.0), (0.0, 0.0, 0.0)),
    ("l_shoulder", 2, (0.18, -0.03, 0.0), (0.70, 0.40, 0.60)),
    ("l_elbow", 4, (0.0, -0.28, 0.0), (0.90, 0.0, 0.10)),
    ("l_wrist", 5, (0.0, -0.25, 0.0), (0.35, 0.0, 0.30)),
    ("l_hand", 6, (0.0, -0.08, 0.0), (0.0, 0.0, 0.0)),
    ("r_shoulder", 2, (-0.18, -0.03, 0.0), (0.70, 0.40, 0.60)),
    ("r_elbow", 8, (0.0, -0.28, 0.0), (0.90, 0.0, 0.10)),
    ("r_wrist", 9, (0.0, -0.25, 0.0), (0.35, 0.0, 0.30)),
    ("r_hand", 10, (0.0, -0.08, 0.0), (0.0, 0.0, 0.0)),
    ("l_hip", 0, (0.10, -0.06, 0.0), (0.70, 0.25, 0.25)),
    ("l_knee", 12, (0.0, -0.42, 0.0), (0.90, 0.0, 0.05)),
    ("l_ankle", 13, (0.0, -0.40, 0.0), (0.35, 0.10, 0.15)),
    ("l_toe", 14, (0.0, -0.06, 0.14), (0.0, 0.0, 0.0)),
    ("r_hip", 0, (-0.10, -0.06, 0.0), (0.70, 0.25, 0.25)),
    ("r_knee", 16, (0.0, -0.42, 0.0), (0.90, 0.0, 0.05)),
    ("r_ankle", 17, (0.0, -0.40, 0.0), (0.35, 0.10, 0.15)),
    ("r_toe", 18, (0.0, -0.06, 0.14), (0.0, 0.0, 0.0)),
]

KEYPOINT_NAMES = [j[0] for j in JOINTS]
PARENTS = np.array([j[1] for j in JOINTS])
REST_OFFSETS = np.array([j[2] for j in JOINTS], dtype=float)
ROT_AMPLITUDE = np.array([j[3] for j in JOINTS], dtype=float)

# Joints whose axial twist (rotation about the bone to their child) is
# invisible in keypoints but moves the markers on that bone.
TWIST_JOINTS = ("l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_hip", "l_knee", "r_hip", "r_knee")

# (segment start joint, segment end joint, landmark count)
_SEGMENTS = [
    ("neck", "head", 3),
    ("pelvis", "spine", 3),
    ("spine", "neck", 2),
    ("l_shoulder", "l_elbow", 3), ("l_elbow", "l_wrist", 3), ("l_wrist", "l_hand", 2),
    ("r_shoulder", "r_elbow", 3), ("r_elbow", "r_wrist", 3), ("r_wrist", "r_hand", 2),
    ("l_hip", "l_knee", 3), ("l_knee", "l_ankle", 3), ("l_ankle", "l_toe", 2),
    ("r_hip", "r_knee", 3), ("r_knee", "r_ankle", 3), ("r_ankle", "r_toe", 2),
]


@dataclass(frozen=True)
class LandmarkSpec:
    name: str
    joint: int  # segment frame owner
    child: int  # segment end keypoint
    along: float  # fraction of the bone from joint to child
    radius: float  # perpendicular offset (m)
    phase: float  # angle of the perpendicular offset about the bone (rad)


def _build_landmarks() -> list[LandmarkSpec]:
    index = {n: i for i, n in enumerate(KEYPOINT_NAMES)}
    specs = []
    for start, end, count in _SEGMENTS:
        for k in range(count):
            along = (k + 1) / (count + 1)
            radius = 0.035 + 0.015 * ((k + len(specs)) % 3)
            phase = 2.0 * np.pi * ((0.37 * (len(specs) + 1)) % 1.0)
            specs.append(LandmarkSpec(f"{start}-{end}.{k}", index[start], index[end],
                                      along, radius, phase))
    return specs


LANDMARKS = _build_landmarks()
REAL_LANDMARKS = len(LANDMARKS)  # 40


def landmark_names(total: int) -> list[str]:
    pad = total - REAL_LANDMARKS
    return [s.name for s in LANDMARKS] + [f"pad.{i}" for i in range(pad)]


def chain_triplets() -> list[tuple[int, int, int]]:
    """Landmark triplets spanning consecutive limb segments.

    Angle vertex is the first landmark of the distal segment; arms are the
    first landmark of the proximal segment and the last of the distal one.
    """
    by_segment: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(LANDMARKS):
        by_segment.setdefault((s.joint, s.child), []).append(i)
    out = []
    for (j, c), ids in by_segment.items():
        for (j2, c2), ids2 in by_segment.items():
            if j2 == c:
                out.append((ids[0], ids2[0], ids2[-1]))
    return sorted(out)


def validate_chain(parents, offsets, amplitude) -> None:
    from .errors import ConfigError

    parents = np.asarray(parents)
    offsets = np.asarray(offsets, dtype=float)
    amplitude = np.asarray(amplitude, dtype=float)
    n = len(parents)
    if offsets.shape != (n, 3) or amplitude.shape != (n, 3):
        raise ConfigError("chain spec: offsets and amplitudes must be (K, 3)")
    if parents[0] != -1 or np.any(parents[1:] < 0):
        raise ConfigError("chain spec: joint 0 must be the only root")
    if np.any(parents[1:] >= np.arange(1, n)):
        raise ConfigError("chain spec: every parent must precede its child")
    if np.any(np.linalg.norm(offsets[1:], axis=1) <= 0):
        raise ConfigError("chain spec: zero-length segment")
    if np.any(amplitude < 0):
        raise ConfigError("chain spec: negative joint amplitude")
