"""Skeleton layout, pose sequences and per-articulator stream partitioning.

A pose sequence is a ``T x J x 3`` array over a fixed skeleton made of four
keypoint groups (right hand, left hand, face, body). The multi-stream model
does not see the raw skeleton; it sees six sub-sequences:

* ``RH`` / ``LH``: the 21 hand keypoints translated so the wrist sits at the
  origin, uniformly resampled to ``S`` frames.
* ``NMM``: the face keypoints translated so the nose sits at the origin,
  resampled to ``S`` frames.
* ``BODY``: the remaining keypoints, raw coordinates, resampled.
* ``MOVR`` / ``MOVL``: the raw wrist trajectories over all ``T`` frames.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "StreamId",
    "STREAMS",
    "SkeletonLayout",
    "PoseSequence",
    "StreamBundle",
    "default_layout",
    "uniform_frame_sample",
    "partition_pose",
    "stream_source_indices",
    "flatten_stream",
    "unflatten_stream",
]


class StreamId(str, enum.Enum):
    """Articulator stream tags. ``ALL`` marks the single-stream baseline."""

    RH = "RH"
    LH = "LH"
    NMM = "NMM"
    BODY = "BODY"
    MOVR = "MOVR"
    MOVL = "MOVL"
    ALL = "ALL"


#: The six disentangled streams, in canonical order.
STREAMS: tuple[StreamId, ...] = (
    StreamId.RH,
    StreamId.LH,
    StreamId.NMM,
    StreamId.BODY,
    StreamId.MOVR,
    StreamId.MOVL,
)

HAND_KEYPOINTS = 21

HAND_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)

FACE_NAMES = (
    "nose", "nose_bridge", "forehead", "chin",
    "r_eye_inner", "r_eye_outer", "l_eye_inner", "l_eye_outer",
    "r_brow_inner", "r_brow_mid", "r_brow_outer",
    "l_brow_inner", "l_brow_mid", "l_brow_outer",
    "mouth_r", "mouth_l", "lip_upper", "lip_lower",
    "r_cheek", "l_cheek",
)

BODY_NAMES = (
    "neck", "chest", "mid_hip",
    "r_shoulder", "l_shoulder",
    "r_elbow", "l_elbow",
    "r_upper_arm", "l_upper_arm",
    "r_forearm", "l_forearm",
    "r_hip", "l_hip",
)


@dataclass(frozen=True)
class SkeletonLayout:
    """Named keypoint groups as contiguous index ranges into the joint axis.

    Groups are laid out right hand, left hand, face, body. The three single
    landmarks (the two wrists and the nose) are absolute joint indices.
    """

    face_count: int = 20
    body_count: int = 13
    keypoint_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.face_count < 1 or self.body_count < 0:
            raise ValueError("face_count must be >= 1 and body_count >= 0")

    @property
    def joint_count(self) -> int:
        return 2 * HAND_KEYPOINTS + self.face_count + self.body_count

    @property
    def right_hand(self) -> range:
        return range(0, HAND_KEYPOINTS)

    @property
    def left_hand(self) -> range:
        return range(HAND_KEYPOINTS, 2 * HAND_KEYPOINTS)

    @property
    def face(self) -> range:
        start = 2 * HAND_KEYPOINTS
        return range(start, start + self.face_count)

    @property
    def body(self) -> range:
        start = 2 * HAND_KEYPOINTS + self.face_count
        return range(start, start + self.body_count)

    @property
    def wrist_right(self) -> int:
        return self.right_hand.start

    @property
    def wrist_left(self) -> int:
        return self.left_hand.start

    @property
    def nose(self) -> int:
        return self.face.start

    def groups(self) -> dict[str, range]:
        return {
            "right_hand": self.right_hand,
            "left_hand": self.left_hand,
            "face": self.face,
            "body": self.body,
        }

    def to_dict(self) -> dict:
        return {
            "groups": {k: [v.start, v.stop] for k, v in self.groups().items()},
            "wrist_right": self.wrist_right,
            "wrist_left": self.wrist_left,
            "nose": self.nose,
            "keypoint_names": list(self.keypoint_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonLayout":
        groups = d["groups"]
        layout = cls(
            face_count=groups["face"][1] - groups["face"][0],
            body_count=groups["body"][1] - groups["body"][0],
            keypoint_names=tuple(d.get("keypoint_names", ())),
        )
        expected = {k: [v.start, v.stop] for k, v in layout.groups().items()}
        if {k: list(v) for k, v in groups.items()} != expected:
            raise ValueError(f"unsupported group layout {groups}")
        for name in ("wrist_right", "wrist_left", "nose"):
            if name in d and d[name] != getattr(layout, name):
                raise ValueError(f"{name}={d[name]} does not match layout")
        return layout


def default_layout() -> SkeletonLayout:
    names = (
        tuple("r_" + n for n in HAND_NAMES)
        + tuple("l_" + n for n in HAND_NAMES)
        + FACE_NAMES
        + BODY_NAMES
    )
    return SkeletonLayout(face_count=len(FACE_NAMES), body_count=len(BODY_NAMES), keypoint_names=names)


@dataclass(frozen=True)
class PoseSequence:
    """A ``T x J x 3`` keypoint trajectory over ``layout``."""

    frames: np.ndarray
    layout: SkeletonLayout = field(default_factory=default_layout)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must be T x J x 3, got shape {frames.shape}")
        if frames.shape[1] != self.layout.joint_count:
            raise ValueError(
                f"pose has {frames.shape[1]} keypoints, layout expects {self.layout.joint_count}"
            )
        if frames.shape[0] < 2:
            raise ValueError("a pose sequence needs at least 2 frames")
        if not np.all(np.isfinite(frames)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class StreamBundle:
    """The six per-articulator sub-sequences of one pose, each ``frames x keypoints x 3``."""

    streams: dict

    def __getitem__(self, sid: StreamId) -> np.ndarray:
        return self.streams[StreamId(sid)]

    def __iter__(self):
        return iter(STREAMS)


def uniform_frame_sample(T: int, S: int) -> list[int]:
    """Indices ``round(i * (T - 1) / (S - 1))`` for ``i < S``, rounding half up.

    >>> uniform_frame_sample(5, 2)
    [0, 4]
    """
    if T < 1 or S < 1:
        raise ValueError("T and S must be positive")
    if S > T:
        raise ValueError(f"cannot sample {S} frames from a sequence of {T}")
    if S == 1:
        return [0]
    i = np.arange(S, dtype=np.float64)
    return np.floor(i * (T - 1) / (S - 1) + 0.5).astype(int).tolist()


def stream_source_indices(layout: SkeletonLayout) -> dict[StreamId, list[int]]:
    """Joint indices each stream draws from, before any normalization."""
    return {
        StreamId.RH: list(layout.right_hand),
        StreamId.LH: list(layout.left_hand),
        StreamId.NMM: list(layout.face),
        StreamId.BODY: list(layout.body),
        StreamId.MOVR: [layout.wrist_right],
        StreamId.MOVL: [layout.wrist_left],
    }


def partition_pose(pose: PoseSequence, layout: SkeletonLayout | None = None, sample_count: int = 16) -> StreamBundle:
    """Split ``pose`` into the six articulator streams.

    Hand streams are wrist-centred and the face stream is nose-centred; the
    subtraction is done against the same frame's landmark so the landmark row
    comes out as exact zeros.
    """
    layout = pose.layout if layout is None else layout
    X = pose.frames
    if X.shape[1] != layout.joint_count:
        raise ValueError(f"pose has {X.shape[1]} keypoints, layout expects {layout.joint_count}")
    T = X.shape[0]
    if sample_count > T:
        raise ValueError(f"sample_count={sample_count} exceeds frame count {T}")
    idx = uniform_frame_sample(T, sample_count)
    Xs = X[idx]

    rh = Xs[:, layout.right_hand.start:layout.right_hand.stop]
    lh = Xs[:, layout.left_hand.start:layout.left_hand.stop]
    face = Xs[:, layout.face.start:layout.face.stop]
    streams = {
        StreamId.RH: rh - rh[:, :1],
        StreamId.LH: lh - lh[:, :1],
        StreamId.NMM: face - Xs[:, layout.nose:layout.nose + 1],
        StreamId.BODY: Xs[:, layout.body.start:layout.body.stop].copy(),
        StreamId.MOVR: X[:, layout.wrist_right:layout.wrist_right + 1].copy(),
        StreamId.MOVL: X[:, layout.wrist_left:layout.wrist_left + 1].copy(),
    }
    return StreamBundle(streams)


def flatten_stream(sub: np.ndarray) -> np.ndarray:
    """``frames x keypoints x 3`` to frame-major ``frames x (3 * keypoints)``."""
    sub = np.asarray(sub)
    return sub.reshape(sub.shape[0], -1)


def unflatten_stream(mat: np.ndarray, keypoints: int) -> np.ndarray:
    mat = np.asarray(mat)
    return mat.reshape(mat.shape[0], keypoints, -1)
