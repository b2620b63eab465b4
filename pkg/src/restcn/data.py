"""Skeleton ingestion, feature construction, splits and the synthetic
planted-motif generator used as the desk-scale training oracle.

On-disk format is the NTU `.skeleton` text layout:

    <frame count>
    per frame:
        <body count>
        per body:
            10-field descriptor line (last field = tracking state)
            <joint count, always 25>
            25 joint lines of 12 whitespace-separated fields,
            the first three being x y z in meters

Metadata comes from the `SsssCcccPpppRrrrAaaa` filename pattern. Synthetic
datasets serialize to the same layout so every downstream path is
format-uniform. Coordinates are written with `repr` so a parse ->
serialize -> parse round trip is exact.

Per-frame features are the raw coordinates, no view normalization: actor 0
joints 0..24 as (x, y, z), then actor 1, giving 2*25*3 = 150 dims. A
missing second actor is a zero block.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError, ParseError
from .ops import TemporalMap

NUM_JOINTS = 25
MAX_ACTORS = 2
FEATURE_DIM = MAX_ACTORS * NUM_JOINTS * 3

_FILENAME_RE = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")

# Right wrist in the 25-joint layout; the jitter motif is planted here.
JITTER_JOINT = 10

MOTIF_NAMES = ("jitter", "limb_translation", "actor_separation", "swing", "static", "kick")


def joint_names() -> list[str]:
    """The shipped 25-joint name table, indexed 0-based."""
    text = resources.files("restcn.assets").joinpath("ntu_joint_names.json").read_text("utf-8")
    return json.loads(text)


@dataclass
class SkeletonFrame:
    """Joint coordinates for up to two actors in one frame."""

    joints: np.ndarray  # (MAX_ACTORS, NUM_JOINTS, 3)
    present: np.ndarray  # (MAX_ACTORS,) bool


@dataclass
class SkeletonSequence:
    """An ordered stack of frames plus sample metadata.

    `event_frame` is generator-only bookkeeping: the center frame of the
    planted motif window (None for parsed real data).
    """

    joints: np.ndarray  # (T, MAX_ACTORS, NUM_JOINTS, 3)
    presence: np.ndarray  # (T, MAX_ACTORS) bool
    label: int = -1
    subject: int = -1
    camera: int = -1
    source: str = ""
    event_frame: int | None = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.presence = np.asarray(self.presence, dtype=bool)
        if self.joints.ndim != 4 or self.joints.shape[1:] != (MAX_ACTORS, NUM_JOINTS, 3):
            raise DataError(f"sequence joints must be (T, 2, 25, 3), got {self.joints.shape}")
        if self.joints.shape[0] < 1:
            raise DataError("sequence needs at least one frame")
        if self.presence.shape != self.joints.shape[:2]:
            raise DataError("presence shape does not match frames")

    def __len__(self) -> int:
        return self.joints.shape[0]

    def frame(self, t: int) -> SkeletonFrame:
        return SkeletonFrame(self.joints[t], self.presence[t])


def build_feature(frame: SkeletonFrame) -> np.ndarray:
    """Flatten a frame into the 150-dim raw-coordinate vector.

    dim d = 75*actor + 3*joint + axis; absent actors contribute zeros.
    """
    coords = np.where(frame.present[:, None, None], frame.joints, 0.0)
    return coords.reshape(FEATURE_DIM)


def sequence_features(seq: SkeletonSequence) -> TemporalMap:
    """Stack per-frame features into the model input map (all frames valid)."""
    coords = np.where(seq.presence[:, :, None, None], seq.joints, 0.0)
    return TemporalMap(coords.reshape(len(seq), FEATURE_DIM))


def dim_layout(d: int) -> tuple[int, int, int]:
    """Inverse of the feature layout: dim -> (actor, joint, axis)."""
    if not 0 <= d < FEATURE_DIM:
        raise DomainError(f"feature dim {d} out of range [0, {FEATURE_DIM})")
    return d // 75, (d % 75) // 3, d % 3


# --- parsing --------------------------------------------------------------


class _LineReader:
    def __init__(self, lines):
        self._lines = lines
        self.line_no = 0

    def next(self, what: str) -> str:
        self.line_no += 1
        try:
            return next(self._lines)
        except StopIteration:
            raise ParseError(f"unexpected end of file while reading {what}", self.line_no) from None

    def next_int(self, what: str) -> int:
        text = self.next(what).strip()
        try:
            return int(text)
        except ValueError:
            raise ParseError(f"expected an integer {what}, got {text!r}", self.line_no) from None

    def next_floats(self, what: str, count: int) -> list[float]:
        fields = self.next(what).split()
        if len(fields) != count:
            raise ParseError(f"{what} needs {count} fields, got {len(fields)}", self.line_no)
        try:
            return [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {what}", self.line_no) from None


def parse_metadata(name: str) -> tuple[int, int, int]:
    """(subject, camera, 0-based label) from an NTU-style filename, or (-1,-1,-1)."""
    m = _FILENAME_RE.search(name)
    if not m:
        return -1, -1, -1
    _setup, camera, subject, _rep, action = (int(g) for g in m.groups())
    return subject, camera, action - 1


def parse_skeleton_file(source, name: str | None = None) -> SkeletonSequence:
    """Parse one `.skeleton` file (path or open text stream).

    Takes the first two tracked bodies per frame; when more are present,
    keeps the two with the highest summed per-joint tracking state,
    falling back to file order. Raises ParseError with a line number on
    any malformed count or field.
    """
    if hasattr(source, "read"):
        lines = iter(source.read().splitlines())
        fname = name or getattr(source, "name", "")
    else:
        path = Path(source)
        lines = iter(path.read_text("utf-8").splitlines())
        fname = name or path.name
    reader = _LineReader(lines)

    num_frames = reader.next_int("frame count")
    if num_frames < 1:
        raise ParseError(f"frame count must be >= 1, got {num_frames}", reader.line_no)
    joints = np.zeros((num_frames, MAX_ACTORS, NUM_JOINTS, 3))
    presence = np.zeros((num_frames, MAX_ACTORS), dtype=bool)

    for t in range(num_frames):
        try:
            num_bodies = reader.next_int(f"body count of frame {t}")
        except ParseError as exc:
            if "end of file" in str(exc):
                raise ParseError(f"file ends before frame {t} of {num_frames}", reader.line_no) from None
            raise
        if num_bodies < 0:
            raise ParseError(f"negative body count {num_bodies}", reader.line_no)
        bodies = []
        for b in range(num_bodies):
            reader.next_floats(f"body {b} descriptor", 10)
            num_joints = reader.next_int(f"joint count of body {b}")
            if num_joints != NUM_JOINTS:
                raise ParseError(
                    f"body {b} advertises {num_joints} joints, expected {NUM_JOINTS}", reader.line_no
                )
            coords = np.empty((NUM_JOINTS, 3))
            confidence = 0.0
            for j in range(NUM_JOINTS):
                fields = reader.next_floats(f"joint {j} of body {b}", 12)
                coords[j] = fields[:3]
                confidence += fields[11]
            bodies.append((confidence, b, coords))
        if len(bodies) > MAX_ACTORS:
            keep = sorted(bodies, key=lambda x: -x[0])[:MAX_ACTORS]  # stable: ties keep file order
            keep.sort(key=lambda x: x[1])
        else:
            keep = bodies
        for slot, (_conf, _idx, coords) in enumerate(keep):
            joints[t, slot] = coords
            presence[t, slot] = True

    subject, camera, label = parse_metadata(fname)
    return SkeletonSequence(joints, presence, label=label, subject=subject,
                            camera=camera, source=fname)


def write_skeleton_file(seq: SkeletonSequence, path) -> None:
    """Serialize a sequence back to the `.skeleton` text layout (exact round trip)."""
    out = [str(len(seq))]
    for t in range(len(seq)):
        actors = [a for a in range(MAX_ACTORS) if seq.presence[t, a]]
        out.append(str(len(actors)))
        for a in actors:
            out.append(f"{a} 0 0 0 0 0 0 0 0 2")
            out.append(str(NUM_JOINTS))
            for j in range(NUM_JOINTS):
                x, y, z = (float(v) for v in seq.joints[t, a, j])
                out.append(f"{x!r} {y!r} {z!r} 0 0 0 0 0 0 0 0 2")
    Path(path).write_text("\n".join(out) + "\n", "utf-8")


def load_dataset(directory) -> list[SkeletonSequence]:
    """Parse every `.skeleton` file in a directory, sorted by name."""
    directory = Path(directory)
    files = sorted(directory.glob("*.skeleton"))
    if not files:
        raise DataError(f"no .skeleton files found in {directory}")
    return [parse_skeleton_file(f) for f in files]


def save_dataset(dataset: list[SkeletonSequence], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for seq in dataset:
        if not seq.source:
            raise DataError("sequence has no source name to write to")
        write_skeleton_file(seq, directory / seq.source)


# --- splits ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Cross-subject ("cs") or cross-view ("cv") partition by id sets.

    `test_ids` is the known complement; when given, a sample whose id is
    in neither set is a data error (unknown id). When None, everything not
    in `train_ids` goes to the test side.
    """

    mode: str
    train_ids: frozenset[int]
    test_ids: frozenset[int] | None = None

    def __post_init__(self):
        if self.mode not in ("cs", "cv"):
            raise ConfigError(f"split mode must be 'cs' or 'cv', got {self.mode!r}")
        object.__setattr__(self, "train_ids", frozenset(self.train_ids))
        if not self.train_ids:
            raise ConfigError("split train id set is empty")
        if self.test_ids is not None:
            object.__setattr__(self, "test_ids", frozenset(self.test_ids))
            if self.train_ids & self.test_ids:
                raise ConfigError("split train and test id sets overlap")


def canonical_split(mode: str) -> SplitSpec:
    """The shipped NTU id sets (overridable by constructing SplitSpec directly)."""
    text = resources.files("restcn.assets").joinpath("ntu_splits.json").read_text("utf-8")
    table = json.loads(text)
    if mode not in table:
        raise ConfigError(f"no canonical split named {mode!r}")
    entry = table[mode]
    return SplitSpec(mode, frozenset(entry["train"]), frozenset(entry["test"]))


def make_split(dataset: list[SkeletonSequence], spec: SplitSpec):
    """Exact partition: train iff the sample's subject (cs) / camera (cv) id
    is in the train-side set."""
    train, test = [], []
    for seq in dataset:
        key = seq.subject if spec.mode == "cs" else seq.camera
        if key in spec.train_ids:
            train.append(seq)
        elif spec.test_ids is None or key in spec.test_ids:
            test.append(seq)
        else:
            raise DataError(f"{seq.source or 'sample'}: {spec.mode} id {key} is outside the known id sets")
    return train, test


def load_id_file(path) -> frozenset[int]:
    """Split id file: UTF-8 text, one id per line; blank lines and # comments ignored."""
    ids = set()
    for raw in Path(path).read_text("utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ids.add(int(line))
        except ValueError:
            raise DataError(f"bad id line in {path}: {raw!r}") from None
    if not ids:
        raise DataError(f"id file {path} contains no ids")
    return frozenset(ids)


def pad_batch(maps: list[TemporalMap]) -> list[TemporalMap]:
    """Pad every map to the batch max length with zero frames and mask False."""
    if not maps:
        raise DataError("cannot pad an empty batch")
    t_max = max(m.num_frames for m in maps)
    out = []
    for m in maps:
        data = np.zeros((t_max, m.num_channels))
        mask = np.zeros(t_max, dtype=bool)
        data[:m.num_frames] = np.where(m.mask[:, None], m.data, 0.0)
        mask[:m.num_frames] = m.mask
        out.append(TemporalMap(data, mask))
    return out


# --- synthetic motif generator ---------------------------------------------
#
# Six motion motifs, each on designated joints with a known waveform, planted
# into baseline pose noise at a random time. Designed so a matched filter on
# the known (dim, waveform) support separates classes perfectly, which the
# test suite verifies before ever training a network.

# Standing pose in a body-centered, scale-normalized sensor frame. Keeping
# the static pose small relative to the planted motions (and with no
# multi-meter depth offset) lets the recipe's learning rate work on a few
# hundred samples and makes motif-tuned filters dominate activation
# timelines; features remain raw coordinates of this frame.
_POSE_SCALE = 0.25
_BASE_POSE = _POSE_SCALE * np.array([
    [0.0, 0.00, 0.00],   # spine base
    [0.0, 0.25, 0.01],   # spine mid
    [0.0, 0.50, 0.02],   # neck
    [0.0, 0.62, 0.02],   # head
    [-0.18, 0.45, 0.03], [-0.30, 0.25, 0.06], [-0.38, 0.05, 0.09], [-0.41, -0.02, 0.10],  # left arm
    [0.18, 0.45, 0.03], [0.30, 0.25, 0.06], [0.38, 0.05, 0.09], [0.41, -0.02, 0.10],      # right arm
    [-0.09, -0.05, 0.00], [-0.10, -0.45, 0.02], [-0.11, -0.85, 0.03], [-0.12, -0.93, 0.08],  # left leg
    [0.09, -0.05, 0.00], [0.10, -0.45, 0.02], [0.11, -0.85, 0.03], [0.12, -0.93, 0.08],      # right leg
    [0.0, 0.42, 0.02],   # spine shoulder
    [-0.43, -0.06, 0.11], [-0.40, -0.05, 0.10],  # left hand tip, thumb
    [0.43, -0.06, 0.11], [0.40, -0.05, 0.10],    # right hand tip, thumb
])

_NOISE_SIGMA = 0.01


def _motif_jitter(joints, onset):
    # the right wrist comes up and shakes, rising into and falling out of
    # the motion: a triangular envelope peaking mid-window scales both the
    # +0.3 Y lift and four period-4 square-wave cycles of +-0.25 on X/Z
    length = 16
    envelope = 1.0 - np.abs(np.linspace(-1.0, 1.0, length))
    wave = 0.25 * np.tile([1.0, 1.0, -1.0, -1.0], 4) * envelope
    joints[onset:onset + length, 0, JITTER_JOINT, 0] += wave
    joints[onset:onset + length, 0, JITTER_JOINT, 2] += wave
    joints[onset:onset + length, 0, JITTER_JOINT, 1] += 0.3 * envelope
    return length


def _motif_limb_translation(joints, onset):
    # left leg (hip, knee, ankle, foot) drifts 0.35 m along Z over 24 frames
    length = 24
    ramp = np.linspace(0.0, 0.35, length)
    for j in (12, 13, 14, 15):
        joints[onset:onset + length, 0, j, 2] += ramp
    return length


def _motif_actor_separation(joints, onset):
    # both actors translate apart along X over 30 frames
    length = 30
    ramp = np.linspace(0.0, 0.4, length)
    joints[onset:onset + length, 0, :, 0] -= ramp[:, None]
    joints[onset:onset + length, 1, :, 0] += ramp[:, None]
    return length


def _motif_swing(joints, onset):
    # right ankle and left wrist arc together: two smooth positive lobes on Y
    length = 28
    wave = 0.25 * np.abs(np.sin(np.linspace(0.0, 2.0 * np.pi, length)))
    joints[onset:onset + length, 0, 18, 1] += wave
    joints[onset:onset + length, 0, 6, 1] += wave
    return length


def _motif_static(joints, onset):
    return 0


def _motif_kick(joints, onset):
    # step (left hip+ankle drift), then a right-knee burst, with a right-ankle swing
    ramp = np.linspace(0.0, 0.3, 16)
    for j in (12, 14):
        joints[onset:onset + 16, 0, j, 2] += ramp
    burst = 0.35 * np.sin(np.linspace(0.0, np.pi, 8))
    joints[onset + 12:onset + 20, 0, 17, 2] += burst
    swing = 0.15 * np.sin(np.linspace(0.0, 3.0 * np.pi, 24))
    joints[onset:onset + 24, 0, 18, 1] += swing
    joints[onset:onset + 24, 0, 6, 1] += swing
    return 24


_MOTIF_FUNCS = (
    _motif_jitter,
    _motif_limb_translation,
    _motif_actor_separation,
    _motif_swing,
    _motif_static,
    _motif_kick,
)

_MAX_MOTIF_LEN = 30


def synth_generate(num_classes: int, per_class: int, seed: int) -> list[SkeletonSequence]:
    """Planted-motif dataset: per sample, baseline pose noise plus the class
    motif applied at a random time.

    Subjects cycle 1..5 and cameras 1..3 so split logic is exercisable.
    `event_frame` records the center of the planted motif window.
    """
    if not 1 <= num_classes <= len(_MOTIF_FUNCS):
        raise DomainError(f"num_classes must be in [1, {len(_MOTIF_FUNCS)}], got {num_classes}")
    if per_class < 0:
        raise DomainError(f"per_class must be >= 0, got {per_class}")
    dataset = []
    index = 0
    for label in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, label, i]))
            t = int(rng.integers(50, 91))
            two_actors = label == MOTIF_NAMES.index("actor_separation")
            joints = np.zeros((t, MAX_ACTORS, NUM_JOINTS, 3))
            presence = np.zeros((t, MAX_ACTORS), dtype=bool)
            joints[:, 0] = _BASE_POSE + rng.normal(0.0, _NOISE_SIGMA, (t, NUM_JOINTS, 3))
            presence[:, 0] = True
            if two_actors:
                offset = np.array([0.9, 0.0, 0.0])
                joints[:, 1] = _BASE_POSE + offset + rng.normal(0.0, _NOISE_SIGMA, (t, NUM_JOINTS, 3))
                presence[:, 1] = True
            onset = int(rng.integers(5, t - _MAX_MOTIF_LEN - 5))
            length = _MOTIF_FUNCS[label](joints, onset)
            event = onset + length // 2 if length else None
            subject = 1 + index % 5
            camera = 1 + index % 3
            source = f"S001C{camera:03d}P{subject:03d}R{i + 1:03d}A{label + 1:03d}.skeleton"
            dataset.append(SkeletonSequence(joints, presence, label=label, subject=subject,
                                            camera=camera, source=source, event_frame=event))
            index += 1
    return dataset


def synth_train_test(num_classes: int, per_class: int, test_per_class: int,
                     seed: int) -> tuple[list[SkeletonSequence], list[SkeletonSequence]]:
    """Disjoint train/test draw from one seeded stream: per class, the first
    `per_class` samples go to train and the next `test_per_class` to test."""
    full = synth_generate(num_classes, per_class + test_per_class, seed)
    train, test = [], []
    for i, seq in enumerate(full):
        if i % (per_class + test_per_class) < per_class:
            train.append(seq)
        else:
            test.append(seq)
    return train, test


def motif_templates(num_classes: int) -> list[list[tuple[int, np.ndarray]]]:
    """Known (feature dim, zero-mean waveform) support per class, for the
    matched-filter separability oracle."""
    if not 1 <= num_classes <= len(_MOTIF_FUNCS):
        raise DomainError(f"num_classes must be in [1, {len(_MOTIF_FUNCS)}], got {num_classes}")
    templates = []
    for label in range(num_classes):
        joints = np.zeros((_MAX_MOTIF_LEN + 1, MAX_ACTORS, NUM_JOINTS, 3))
        length = _MOTIF_FUNCS[label](joints, 0)
        flat = joints.reshape(-1, FEATURE_DIM)
        entries = []
        if length:
            window = flat[:length]
            for d in range(FEATURE_DIM):
                wave = window[:, d]
                if np.any(wave != 0.0):
                    entries.append((d, wave - wave.mean()))
        templates.append(entries)
    return templates


def matched_filter_classify(seq: SkeletonSequence, templates) -> int:
    """Score each class by its best cross-correlation over time, normalized by
    template energy. A motif-free class scores a fixed detection threshold,
    so it wins exactly when nothing correlates. Argmax wins."""
    x = sequence_features(seq).data
    scores = []
    for entries in templates:
        if not entries:
            scores.append(0.05)
            continue
        norm = np.sqrt(sum(float(w @ w) for _d, w in entries))
        length = len(entries[0][1])
        best = -np.inf
        for start in range(0, max(1, x.shape[0] - length + 1)):
            s = sum(float(w @ x[start:start + length, d]) for d, w in entries)
            best = max(best, s / norm)
        scores.append(best)
    return int(np.argmax(scores))
