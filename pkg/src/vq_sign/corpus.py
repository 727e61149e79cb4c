"""Synthetic compositional sign corpus and the ``.slds`` dataset format.

Every sign in the vocabulary is a combination of 16 phonological feature
classes. Rendering maps each feature to one pose factor (finger templates,
hand placement, wrist path, facial displacement), so unseen glosses in the
test split are novel combinations of familiar parts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pose import PoseSequence, SkeletonLayout, StreamId, default_layout

__all__ = [
    "FeatureSpec",
    "PhonoFeatureSchema",
    "SignRecord",
    "SplitSpec",
    "CapacityError",
    "DatasetParseError",
    "DatasetVersionError",
    "default_schema",
    "build_vocabulary",
    "render_sign",
    "generate_corpus",
    "write_dataset",
    "read_dataset",
    "load_dataset",
    "RENDER_COUPLING",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1

RH, LH, NMM, BODY, MOVR, MOVL = (
    StreamId.RH, StreamId.LH, StreamId.NMM, StreamId.BODY, StreamId.MOVR, StreamId.MOVL,
)


class CapacityError(ValueError):
    """Requested more distinct items than the available space holds."""


class DatasetParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class DatasetVersionError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    classes: int
    streams: tuple[StreamId, ...]


@dataclass(frozen=True)
class PhonoFeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        if len(self.features) != 16:
            raise ValueError(f"schema needs exactly 16 features, got {len(self.features)}")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names")
        for f in self.features:
            if f.classes < 2:
                raise ValueError(f"{f.name}: class count must be >= 2")
            if not f.streams:
                raise ValueError(f"{f.name}: needs at least one stream")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __getitem__(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def space_size(self) -> int:
        return math.prod(f.classes for f in self.features)

    def validate_labels(self, labels: dict) -> None:
        if set(labels) != set(self.names):
            raise ValueError(f"labels must name exactly the schema features, got {sorted(labels)}")
        for f in self.features:
            c = labels[f.name]
            if not 0 <= c < f.classes:
                raise ValueError(f"{f.name}: class index {c} outside [0, {f.classes})")

    def to_dict(self) -> list:
        return [{"name": f.name, "classes": f.classes, "streams": [s.value for s in f.streams]}
                for f in self.features]

    @classmethod
    def from_dict(cls, items: list) -> "PhonoFeatureSchema":
        return cls(tuple(FeatureSpec(d["name"], int(d["classes"]), tuple(StreamId(s) for s in d["streams"]))
                         for d in items))


def default_schema() -> PhonoFeatureSchema:
    hands, moves = (LH, RH), (MOVL, MOVR)
    return PhonoFeatureSchema((
        FeatureSpec("Major Location", 5, (BODY,)),
        FeatureSpec("Minor Location", 4, (BODY,)),
        FeatureSpec("Selected Fingers", 8, hands),
        FeatureSpec("Flexion", 4, hands),
        FeatureSpec("Flexion Change", 2, moves),
        FeatureSpec("Spread", 2, hands),
        FeatureSpec("Spread Change", 2, moves),
        FeatureSpec("Thumb Position", 2, hands),
        FeatureSpec("Thumb Contact", 2, hands),
        FeatureSpec("Sign Type", 4, hands),
        FeatureSpec("Movement", 6, moves),
        FeatureSpec("Repeated Movement", 2, moves),
        FeatureSpec("Wrist Twist", 2, moves),
        FeatureSpec("Non-Manual Signal", 3, (NMM,)),
        FeatureSpec("Mouth Morpheme", 3, (NMM,)),
        FeatureSpec("Head Movement", 3, (NMM,)),
    ))


#: Streams a feature leaks into beyond its assigned ones. Location sets the
#: hands' base offset, which necessarily moves the raw wrist trajectories.
RENDER_COUPLING = {
    "Major Location": (MOVR, MOVL),
    "Minor Location": (MOVR, MOVL),
}


@dataclass(frozen=True)
class SignRecord:
    pose: PoseSequence
    gloss_id: int
    labels: dict
    signer_id: int = 0

    def __post_init__(self):
        if self.gloss_id < 0:
            raise ValueError("gloss_id must be >= 0")


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset = field(default_factory=frozenset)
    validation: frozenset = field(default_factory=frozenset)
    test: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, frozenset(int(g) for g in getattr(self, name)))
        if (self.train & self.validation) or (self.train & self.test) or (self.validation & self.test):
            raise ValueError("split gloss sets must be pairwise disjoint")

    def which(self, gloss_id: int) -> str | None:
        for name in ("train", "validation", "test"):
            if gloss_id in getattr(self, name):
                return name
        return None

    def to_dict(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("train", "validation", "test")}


# ---------------------------------------------------------------------------
# vocabulary


def _decode_combination(index: int, schema: PhonoFeatureSchema) -> dict:
    labels = {}
    for f in reversed(schema.features):
        index, c = divmod(index, f.classes)
        labels[f.name] = int(c)
    return {name: labels[name] for name in schema.names}


def build_vocabulary(schema: PhonoFeatureSchema, n_signs: int, seed: int) -> list[tuple[int, dict]]:
    """Draw ``n_signs`` distinct label combinations without replacement."""
    space = schema.space_size
    if n_signs > space:
        raise CapacityError(f"n_signs={n_signs} exceeds the {space} possible label combinations")
    if n_signs < 0:
        raise ValueError("n_signs must be >= 0")
    rng = np.random.default_rng(seed)
    picks = rng.choice(space, size=n_signs, replace=False)
    return [(g, _decode_combination(int(k), schema)) for g, k in enumerate(picks)]


# ---------------------------------------------------------------------------
# rendering

# hand-local frame: wrist at origin, fingers along +y, palm normal +z
_MCP = {
    "index": (0.030, 0.090, 0.0),
    "middle": (0.010, 0.095, 0.0),
    "ring": (-0.010, 0.090, 0.0),
    "pinky": (-0.028, 0.080, 0.0),
}
_SEGMENTS = {
    "index": (0.043, 0.026, 0.020),
    "middle": (0.047, 0.029, 0.022),
    "ring": (0.044, 0.027, 0.021),
    "pinky": (0.034, 0.020, 0.018),
}
_FINGERS = ("index", "middle", "ring", "pinky")
_SELECTED = (
    ("index",),
    ("index", "middle"),
    ("index", "middle", "ring"),
    ("index", "middle", "ring", "pinky"),
    ("pinky",),
    ("index", "pinky"),
    ("middle",),
    ("middle", "ring", "pinky"),
)
_FLEXION = ((0.0, 0.0, 0.0), (1.4, 0.0, 0.0), (0.6, 0.8, 0.5), (0.0, 1.4, 0.9))
_CLOSED = (1.5, 1.6, 0.9)
_SPREAD = {"index": 0.25, "middle": 0.08, "ring": -0.10, "pinky": -0.25}
_THUMB_CMC = np.array([0.025, 0.025, 0.010])
_THUMB_DIR = (np.array([0.30, 0.90, 0.30]), np.array([0.90, 0.45, 0.10]))
_THUMB_SEG = (0.035, 0.030, 0.025)

_MAJOR_LOC = np.array([
    [0.22, -0.15, 0.30],   # neutral space
    [0.10, 0.35, 0.12],    # head
    [0.10, -0.10, 0.12],   # torso
    [-0.05, -0.20, 0.18],  # arm
    [0.05, -0.30, 0.30],   # non-dominant hand
])
_MINOR_LOC = np.array([
    [0.0, 0.0, 0.0],
    [0.05, 0.04, 0.0],
    [-0.05, 0.04, 0.0],
    [0.0, -0.05, 0.03],
])

# face template relative to the nose, in FACE_NAMES order
_FACE = np.array([
    [0.0, 0.0, 0.0], [0.0, 0.035, -0.01], [0.0, 0.09, -0.03], [0.0, -0.09, -0.02],
    [0.015, 0.04, -0.02], [0.045, 0.04, -0.03], [-0.015, 0.04, -0.02], [-0.045, 0.04, -0.03],
    [0.015, 0.065, -0.015], [0.035, 0.07, -0.02], [0.055, 0.062, -0.035],
    [-0.015, 0.065, -0.015], [-0.035, 0.07, -0.02], [-0.055, 0.062, -0.035],
    [0.025, -0.045, -0.015], [-0.025, -0.045, -0.015], [0.0, -0.035, -0.005], [0.0, -0.055, -0.008],
    [0.06, -0.01, -0.04], [-0.06, -0.01, -0.04],
])
_BROWS = [8, 9, 10, 11, 12, 13]
_BROWS_INNER = [8, 11]


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


_ORIENT = (np.eye(3), _rot_y(math.pi / 2), _rot_y(math.pi), _rot_x(-math.pi / 3))


def _finger_chain(base, seg, abduction, flex) -> np.ndarray:
    d0 = np.array([math.sin(abduction), math.cos(abduction), 0.0])
    z = np.array([0.0, 0.0, 1.0])
    pts = [np.asarray(base, dtype=float)]
    angle = 0.0
    for length, bend in zip(seg, flex):
        angle += bend
        pts.append(pts[-1] + length * (math.cos(angle) * d0 + math.sin(angle) * z))
    return np.stack(pts)


def _handshape(labels: dict) -> np.ndarray:
    """Static 21 x 3 right-hand template in the hand-local frame."""
    selected = set(_SELECTED[labels["Selected Fingers"]])
    spread = labels["Spread"] == 1
    hand = np.zeros((21, 3))
    for k, finger in enumerate(_FINGERS):
        chosen = finger in selected
        flex = _FLEXION[labels["Flexion"]] if chosen else _CLOSED
        abd = _SPREAD[finger] if (chosen and spread) else 0.0
        hand[5 + 4 * k:9 + 4 * k] = _finger_chain(_MCP[finger], _SEGMENTS[finger], abd, flex)

    direction = _THUMB_DIR[labels["Thumb Position"]]
    direction = direction / np.linalg.norm(direction)
    thumb = [_THUMB_CMC]
    for length in _THUMB_SEG:
        thumb.append(thumb[-1] + length * direction)
    thumb = np.stack(thumb)
    if labels["Thumb Contact"] == 1:
        # pull the thumb most of the way onto the index fingertip
        reach = thumb[0] + (hand[8] - thumb[0]) * np.array([0.0, 0.4, 0.75, 1.0])[:, None]
        thumb = 0.3 * thumb + 0.7 * reach
    hand[1:5] = thumb
    return hand @ _ORIENT[labels["Sign Type"]].T


def _signer_traits(signer_id: int) -> dict:
    rng = np.random.default_rng([signer_id, 7919])
    return {
        "scale": rng.uniform(0.92, 1.08),
        "shoulder": rng.uniform(0.90, 1.10),
        "arm": rng.uniform(0.90, 1.10),
        "hand": rng.uniform(0.90, 1.10),
        "face": rng.uniform(0.92, 1.08),
        "offset": rng.uniform(-0.03, 0.03, size=3) * np.array([1.0, 1.0, 0.3]),
    }


def _wrist_path(labels: dict, u: np.ndarray, amp: float) -> np.ndarray:
    """Right-wrist displacement from its base location, ``len(u) x 3``."""
    n = 3 if labels["Repeated Movement"] == 1 else 1
    p = 0.5 - 0.5 * np.cos(np.pi * n * u)
    zeros = np.zeros_like(u)
    mv = labels["Movement"]
    if mv == 0:    # hold with a small push
        path = np.stack([zeros, zeros, 0.02 * p], axis=1)
    elif mv == 1:  # vertical line
        path = np.stack([zeros, 0.12 * (p - 0.5), zeros], axis=1)
    elif mv == 2:  # horizontal line
        path = np.stack([0.12 * (p - 0.5), zeros, zeros], axis=1)
    elif mv == 3:  # line away from the body
        path = np.stack([zeros, zeros, 0.12 * (p - 0.5)], axis=1)
    elif mv == 4:  # arc
        path = np.stack([0.12 * (p - 0.5), 0.06 * np.sin(np.pi * p), zeros], axis=1)
    else:          # circle
        path = np.stack([0.06 * (np.cos(2 * np.pi * p) - 1), 0.06 * np.sin(2 * np.pi * p), zeros], axis=1)
    path = amp * path
    if labels["Wrist Twist"] == 1:
        path[:, 0] += 0.015 * np.sin(8 * np.pi * u)
    if labels["Flexion Change"] == 1:
        path[:, 2] -= 0.04 * u
    if labels["Spread Change"] == 1:
        path[:, 1] += 0.03 * np.sin(np.pi * u)
    return path


def _face_frames(labels: dict, u: np.ndarray, size: float) -> np.ndarray:
    """Face keypoints relative to the head centre, ``T x 20 x 3``."""
    face = _FACE.copy()
    nms = labels["Non-Manual Signal"]
    if nms == 1:
        face[_BROWS, 1] += 0.015
    elif nms == 2:
        face[_BROWS_INNER, 1] -= 0.010
        face[_BROWS_INNER, 0] *= 0.5
    mouth = labels["Mouth Morpheme"]
    if mouth == 1:
        face[17, 1] -= 0.020
        face[3, 1] -= 0.015
    elif mouth == 2:
        face[[14, 15], 0] *= 0.5
        face[[16, 17], 2] += 0.010
    face = size * (face + np.array([0.0, 0.0, 0.10]))  # nose sits in front of the head centre

    head = labels["Head Movement"]
    out = np.empty((len(u), len(face), 3))
    for t, ut in enumerate(u):
        if head == 1:
            R = _rot_x(0.25 * math.sin(4 * math.pi * ut))
        elif head == 2:
            R = _rot_y(0.30 * math.sin(4 * math.pi * ut))
        else:
            R = np.eye(3)
        out[t] = face @ R.T
    return out


def render_sign(labels: dict, signer_id: int = 0, noise_scale: float = 0.0, T: int = 32, seed: int = 0,
                schema: PhonoFeatureSchema | None = None, layout: SkeletonLayout | None = None) -> PoseSequence:
    """Render one sign instance as a ``T x 75 x 3`` pose sequence.

    The output is a deterministic function of the arguments. Coordinates are
    rounded to 1e-6 so serialized files stay compact.
    """
    schema = default_schema() if schema is None else schema
    layout = default_layout() if layout is None else layout
    schema.validate_labels(labels)
    if T < 16:
        raise ValueError("T must be >= 16")
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if layout.face_count != len(_FACE) or layout.body_count != 13:
        raise ValueError("the synthetic renderer only supports the default skeleton")

    sg = _signer_traits(signer_id)
    g = sg["scale"]
    u = np.linspace(0.0, 1.0, T)

    base_r = (_MAJOR_LOC[labels["Major Location"]] + _MINOR_LOC[labels["Minor Location"]]) * sg["arm"]
    base_l = base_r * np.array([-1.0, 1.0, 1.0])
    path_r = _wrist_path(labels, u, sg["arm"])
    path_l = path_r * np.array([-1.0, 1.0, 1.0])
    wrist_r = base_r + path_r
    wrist_l = base_l + path_l

    hand_r = _handshape(labels) * sg["hand"]
    hand_l = hand_r * np.array([-1.0, 1.0, 1.0])

    shoulder = 0.18 * sg["shoulder"]
    sh_r, sh_l = np.array([shoulder, 0.0, 0.0]), np.array([-shoulder, 0.0, 0.0])
    el_r = sh_r + 0.5 * (base_r - sh_r) + np.array([0.04, -0.14, -0.06]) * sg["arm"]
    el_l = sh_l + 0.5 * (base_l - sh_l) + np.array([-0.04, -0.14, -0.06]) * sg["arm"]
    body = np.array([
        [0.0, 0.05, 0.0], [0.0, -0.15, 0.02], [0.0, -0.50, 0.0],
        sh_r, sh_l, el_r, el_l,
        0.5 * (sh_r + el_r), 0.5 * (sh_l + el_l),
        0.5 * (el_r + base_r), 0.5 * (el_l + base_l),
        [0.10, -0.50, 0.0], [-0.10, -0.50, 0.0],
    ])

    head_centre = np.array([0.0, 0.27, 0.0])
    face = head_centre + _face_frames(labels, u, sg["face"])

    X = np.empty((T, layout.joint_count, 3))
    X[:, layout.right_hand.start:layout.right_hand.stop] = wrist_r[:, None, :] + hand_r[None]
    X[:, layout.left_hand.start:layout.left_hand.stop] = wrist_l[:, None, :] + hand_l[None]
    X[:, layout.face.start:layout.face.stop] = face
    X[:, layout.body.start:layout.body.stop] = body[None]
    X = g * X + sg["offset"]
    if noise_scale > 0:
        X = X + np.random.default_rng(seed).normal(0.0, noise_scale, size=X.shape)
    return PoseSequence(np.round(X, 6), layout)


# ---------------------------------------------------------------------------
# corpus


def _split_glosses(n: int, fractions, rng: np.random.Generator) -> SplitSpec:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("splits must be three non-negative fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"splits must sum to 1, got {sum(fractions)!r}")
    order = rng.permutation(n).tolist()
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return SplitSpec(order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])


def generate_corpus(schema: PhonoFeatureSchema | None = None, n_signs: int = 600, instances_per_sign: int = 10,
                    n_signers: int = 8, splits=(0.8, 0.1, 0.1), noise_scale: float = 0.01, seed: int = 0,
                    frame_range: tuple[int, int] = (24, 48)) -> tuple[list[SignRecord], SplitSpec]:
    """Render a corpus whose train/validation/test vocabularies are disjoint.

    Records are ordered by gloss, then instance. Each record's signer, frame
    count and noise depend only on ``(seed, record index)``.
    """
    schema = default_schema() if schema is None else schema
    if instances_per_sign < 1 or n_signers < 1:
        raise ValueError("instances_per_sign and n_signers must be >= 1")
    lo, hi = frame_range
    if lo < 16 or hi < lo:
        raise ValueError(f"invalid frame_range {frame_range}")
    vocab = build_vocabulary(schema, n_signs, seed)
    split = _split_glosses(n_signs, splits, np.random.default_rng([seed, 1]))
    layout = default_layout()
    records = []
    for gloss_id, labels in vocab:
        for k in range(instances_per_sign):
            index = len(records)
            rng = np.random.default_rng([seed, 2, index])
            signer = int(rng.integers(n_signers))
            T = int(rng.integers(lo, hi + 1))
            pose = render_sign(labels, signer, noise_scale, T, seed=int(rng.integers(2**63)),
                               schema=schema, layout=layout)
            records.append(SignRecord(pose, gloss_id, labels, signer))
    return records, split


# ---------------------------------------------------------------------------
# .slds files


def write_dataset(records, split: SplitSpec, path, schema: PhonoFeatureSchema | None = None,
                  layout: SkeletonLayout | None = None) -> None:
    """Write a line-delimited ``.slds`` file: one JSON header, one JSON record per line."""
    schema = default_schema() if schema is None else schema
    if layout is None:
        layout = records[0].pose.layout if records else default_layout()
    header = {
        "format_version": FORMAT_VERSION,
        "layout": layout.to_dict(),
        "schema": schema.to_dict(),
        "split": split.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            row = {
                "gloss_id": r.gloss_id,
                "signer_id": r.signer_id,
                "labels": r.labels,
                "frames": r.pose.frames.tolist(),
            }
            fh.write(json.dumps(row) + "\n")


@dataclass
class Dataset:
    records: list
    split: SplitSpec
    schema: PhonoFeatureSchema
    layout: SkeletonLayout


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(1, "missing header")

    def parse(lineno, text):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(lineno, exc.msg) from None

    header = parse(1, lines[0])
    if not isinstance(header, dict) or "format_version" not in header:
        raise DatasetParseError(1, "header has no format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise DatasetVersionError(
            f"{path}: format_version {header['format_version']!r}, expected {FORMAT_VERSION}")
    try:
        layout = SkeletonLayout.from_dict(header["layout"])
        schema = PhonoFeatureSchema.from_dict(header["schema"])
        split = SplitSpec(**header["split"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(1, f"bad header: {exc}") from None

    records = []
    for lineno, text in enumerate(lines[1:], start=2):
        row = parse(lineno, text)
        try:
            pose = PoseSequence(np.array(row["frames"], dtype=np.float64), layout)
            labels = {k: int(v) for k, v in row["labels"].items()}
            schema.validate_labels(labels)
            records.append(SignRecord(pose, int(row["gloss_id"]), labels, int(row["signer_id"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(lineno, f"bad record: {exc}") from None
    return Dataset(records, split, schema, layout)


def read_dataset(path) -> tuple[list[SignRecord], SplitSpec]:
    ds = load_dataset(path)
    return ds.records, ds.split
