"""Synthetic feature-sequence datasets and their on-disk format.

A dataset is a list of per-video feature matrices with video-level labels,
plus a sidecar list of annotated intervals. The generator plants a known
action/context/background structure: every action segment is flanked by
context frames whose features are drawn near the action class prototype
(nearer to it than to any other class) but shifted toward the background
distribution, so a classifier finds them discriminative while their
representation differs from the action itself. Training code only ever sees
(features, label); the interval annotations exist for the generator,
evaluator, and monitoring.

Binary layout (little-endian): magic ``WSALDS\\x00``, u32 version, u32 C,
u32 d, u32 video count; then per video: u32 id length, id bytes (utf-8),
u32 T, u32 label, T*d float32 features. Annotations live in a text sidecar:
a ``WSALGT 1`` magic line, optional ``#`` comment lines, then one
``video_id start end class kind`` line per segment.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"WSALDS\x00"
DATASET_VERSION = 1
SIDECAR_MAGIC = "WSALGT 1"


class ConfigurationError(ValueError):
    """A dataset spec that cannot produce a valid dataset."""


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the offending byte offset."""


@dataclass
class FeatureSequence:
    """One video: a (T, d) float32 feature matrix and a video-level label."""

    video_id: str
    features: np.ndarray
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (T>=1, d), got {self.features.shape}")
        if self.label < 0:
            raise ValueError("label must be >= 0")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class GroundTruthSegment:
    """Annotated interval [start, end) with class >= 1.

    ``kind`` distinguishes planted action segments from the context flanks
    around them; it is generator metadata for diagnostics and never reaches
    training. Only ``kind == "action"`` segments count as ground truth for
    evaluation.
    """

    video_id: str
    start: int
    end: int
    label: int
    kind: str = "action"

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad segment bounds [{self.start}, {self.end})")
        if self.label < 1:
            raise ValueError("segment class must be >= 1")
        if self.kind not in ("action", "context"):
            raise ValueError(f"unknown segment kind {self.kind!r}")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-structure generator.

    ``videos_per_class`` applies to every label 0..C; label-0 videos carry
    no action segments and supply honest background negatives.
    """

    num_classes: int = 5
    feature_dim: int = 16
    frames_per_video: int = 100
    videos_per_class: int = 40
    segments_min: int = 1
    segments_max: int = 2
    segment_len_min: int = 8
    segment_len_max: int = 14
    flank_min: int = 4
    flank_max: int = 8
    separation: float = 3.0
    context_offset: float = 1.0
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "frames_per_video": self.frames_per_video,
            "videos_per_class": self.videos_per_class,
            "segments_min": self.segments_min,
            "segments_max": self.segments_max,
            "segment_len_min": self.segment_len_min,
            "segment_len_max": self.segment_len_max,
        }
        for name, v in counts.items():
            if v < 1 and not (name.startswith("segments") and v == 0):
                raise ConfigurationError(f"{name} must be positive, got {v}")
        if self.flank_min < 0 or self.flank_max < self.flank_min:
            raise ConfigurationError("flank range must satisfy 0 <= min <= max")
        if self.segments_max < self.segments_min:
            raise ConfigurationError("segments_max < segments_min")
        if self.segment_len_max < self.segment_len_min:
            raise ConfigurationError("segment_len_max < segment_len_min")
        if self.noise <= 0 or self.separation <= 0 or self.context_offset < 0:
            raise ConfigurationError("noise and separation must be positive")
        if self.context_offset >= self.separation:
            raise ConfigurationError(
                "context_offset must be smaller than separation so context frames "
                "stay nearest their own action class"
            )
        worst = self.segments_max * (self.segment_len_max + 2 * self.flank_max)
        if worst > self.frames_per_video:
            raise ConfigurationError(
                f"{self.segments_max} segments of up to "
                f"{self.segment_len_max + 2 * self.flank_max} frames (with flanks) "
                f"cannot fit in T={self.frames_per_video}"
            )


def class_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Prototype features for labels 0..C, pairwise ~`separation` apart.

    When C+1 <= d the prototypes sit on scaled basis vectors and the pairwise
    distances are exact; otherwise random unit directions give approximate
    separation.
    """
    n = spec.num_classes + 1
    scale = spec.separation / np.sqrt(2.0)
    if n <= spec.feature_dim:
        protos = np.zeros((n, spec.feature_dim))
        protos[np.arange(n), np.arange(n)] = scale
        return protos
    dirs = rng.standard_normal((n, spec.feature_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * scale


def context_offsets(spec: SyntheticSpec, protos: np.ndarray) -> np.ndarray:
    """Per-class context shift: magnitude `context_offset`, pointing from the
    class prototype toward the background prototype. Context features thus
    stay nearest their own class while differing from the action cluster."""
    toward_bg = protos[0] - protos[1:]
    toward_bg /= np.linalg.norm(toward_bg, axis=1, keepdims=True)
    return toward_bg * spec.context_offset


def _place_blocks(spec: SyntheticSpec, rng: np.random.Generator):
    """Sample non-overlapping (flank, action, flank) blocks inside T frames."""
    n_seg = int(rng.integers(spec.segments_min, spec.segments_max + 1))
    lens = rng.integers(spec.segment_len_min, spec.segment_len_max + 1, size=n_seg)
    pre = rng.integers(spec.flank_min, spec.flank_max + 1, size=n_seg)
    post = rng.integers(spec.flank_min, spec.flank_max + 1, size=n_seg)
    block = lens + pre + post
    free = spec.frames_per_video - int(block.sum())
    gaps = rng.multinomial(free, np.full(n_seg + 1, 1.0 / (n_seg + 1)))
    blocks = []
    cursor = 0
    for i in range(n_seg):
        cursor += int(gaps[i])
        a_start = cursor + int(pre[i])
        a_end = a_start + int(lens[i])
        blocks.append((cursor, a_start, a_end, a_end + int(post[i])))
        cursor = a_end + int(post[i])
    return blocks


def generate_dataset(spec: SyntheticSpec):
    """Generate (sequences, segments) with the planted structure.

    Frames are drawn from N(prototype, noise^2 I): the class prototype inside
    action segments, the shifted class prototype in context flanks, and the
    background prototype elsewhere. Ground truth lists action segments only;
    context flanks are recorded with kind="context" for diagnostics.
    """
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec, rng)
    offsets = context_offsets(spec, protos)

    sequences: list[FeatureSequence] = []
    segments: list[GroundTruthSegment] = []
    T, d = spec.frames_per_video, spec.feature_dim
    index = 0
    for label in range(spec.num_classes + 1):
        for _ in range(spec.videos_per_class):
            vid = f"vid{index:04d}"
            index += 1
            means = np.tile(protos[0], (T, 1))
            blocks = _place_blocks(spec, rng) if label >= 1 else []
            for pre_s, a_s, a_e, post_e in blocks:
                means[pre_s:a_s] = protos[label] + offsets[label - 1]
                means[a_s:a_e] = protos[label]
                means[a_e:post_e] = protos[label] + offsets[label - 1]
                if a_s > pre_s:
                    segments.append(
                        GroundTruthSegment(vid, pre_s, a_s, label, "context")
                    )
                segments.append(GroundTruthSegment(vid, a_s, a_e, label, "action"))
                if post_e > a_e:
                    segments.append(
                        GroundTruthSegment(vid, a_e, post_e, label, "context")
                    )
            feats = means + spec.noise * rng.standard_normal((T, d))
            # a video that ended up with no action segments is honestly background
            video_label = label if blocks else 0
            sequences.append(FeatureSequence(vid, feats.astype(np.float32), video_label))
    return sequences, segments


def action_segments(segments) -> list[GroundTruthSegment]:
    return [s for s in segments if s.kind == "action"]


def frame_label_mask(sequence: FeatureSequence, segments, kind: str = "action") -> np.ndarray:
    """Boolean per-frame mask of the given segment kind for one video."""
    mask = np.zeros(sequence.num_frames, dtype=bool)
    for seg in segments:
        if seg.video_id == sequence.video_id and seg.kind == kind:
            mask[seg.start : seg.end] = True
    return mask


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def write_dataset(path, sequences, segments, num_classes=None, comments=()) -> None:
    """Write the binary dataset at `path` and its `.gt` sidecar next to it.

    `comments` lines are echoed into the sidecar prefixed with '# '.
    """
    path = Path(path)
    if num_classes is None:
        num_classes = max((s.label for s in sequences), default=0)
    d = sequences[0].dim if sequences else 0
    out = bytearray()
    out += DATASET_MAGIC
    out += struct.pack("<B", DATASET_VERSION)
    out += struct.pack("<III", num_classes, d, len(sequences))
    for seq in sequences:
        ident = seq.video_id.encode("utf-8")
        out += struct.pack("<I", len(ident)) + ident
        out += struct.pack("<II", seq.num_frames, seq.label)
        out += np.ascontiguousarray(seq.features, dtype="<f4").tobytes()
    path.write_bytes(bytes(out))

    lines = [SIDECAR_MAGIC]
    lines += [f"# {c}" for c in comments]
    for seg in segments:
        lines.append(f"{seg.video_id}\t{seg.start}\t{seg.end}\t{seg.label}\t{seg.kind}")
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sidecar_path(dataset_path) -> Path:
    return Path(str(dataset_path) + ".gt")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetFormatError(
                f"truncated dataset: needed {n} bytes for {what} at offset {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_dataset(path):
    """Read (sequences, segments) written by write_dataset."""
    path = Path(path)
    r = _Reader(path.read_bytes())
    magic = r.take(len(DATASET_MAGIC), "magic")
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic bytes at offset 0: {magic!r}")
    (version,) = struct.unpack("<B", r.take(1, "version"))
    if version != DATASET_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {version} at offset {len(DATASET_MAGIC)}"
        )
    num_classes = r.u32("class count")
    d = r.u32("feature dim")
    count = r.u32("video count")
    sequences = []
    for _ in range(count):
        id_len = r.u32("id length")
        ident = r.take(id_len, "video id").decode("utf-8")
        t = r.u32("frame count")
        label = r.u32("label")
        if label > num_classes:
            raise DatasetFormatError(
                f"label {label} exceeds class count {num_classes} at offset {r.pos - 4}"
            )
        raw = r.take(t * d * 4, f"features of {ident}")
        feats = np.frombuffer(raw, dtype="<f4").reshape(t, d)
        sequences.append(FeatureSequence(ident, feats.copy(), label))
    if r.pos != len(r.data):
        raise DatasetFormatError(f"trailing bytes at offset {r.pos}")

    segments = read_sidecar(sidecar_path(path))
    return sequences, segments


def read_sidecar(path) -> list[GroundTruthSegment]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SIDECAR_MAGIC:
        raise DatasetFormatError(f"sidecar {path}: bad magic line at offset 0")
    segments = []
    for i, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DatasetFormatError(f"sidecar {path}: malformed line {i}")
        vid, start, end, label, kind = parts
        try:
            segments.append(GroundTruthSegment(vid, int(start), int(end), int(label), kind))
        except ValueError as exc:
            raise DatasetFormatError(f"sidecar {path}: line {i}: {exc}") from exc
    return segments


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------


def split_dataset(sequences, segments, train_fraction: float, seed: int):
    """Disjoint, exhaustive, label-stratified split, deterministic in seed.

    Returns ((train_sequences, train_segments), (test_sequences, test_segments)).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0,1), got {train_fraction}")
    by_label: dict[int, list[FeatureSequence]] = {}
    for seq in sequences:
        by_label.setdefault(seq.label, []).append(seq)
    rng = np.random.default_rng(seed)
    train_ids, test_ids = set(), set()
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda s: s.video_id)
        if len(group) < 2:
            raise ConfigurationError(
                f"label {label} has {len(group)} video(s); need at least 2 to split"
            )
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        n_train = min(max(n_train, 1), len(group) - 1)
        for pos, idx in enumerate(order):
            (train_ids if pos < n_train else test_ids).add(group[idx].video_id)

    def pick(ids):
        seqs = [s for s in sequences if s.video_id in ids]
        segs = [g for g in segments if g.video_id in ids]
        return seqs, segs

    return pick(train_ids), pick(test_ids)
