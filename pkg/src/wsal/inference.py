"""From a trained model and a video to scored temporal proposals.

Frames whose attention clears a threshold form candidate segments; each
segment is scored per class by the classifier's pre-softmax logit on its
attention-pooled feature, refined by subtracting the scores of quarter-length
flanking windows, and finally filtered by per-class non-maximum suppression.
Long videos are uniformly subsampled to a frame cap first and the resulting
proposals mapped back to original frame indices.

Proposal files are JSON lines: one header record declaring the format
version, the time unit, and the run configuration, then one record per
proposal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FeatureSequence
from .losses import POOL_EPS
from .model import Classifier, ModelBundle
from .numerics import softmax
from .training import subsample_indices

PROPOSAL_FORMAT = "wsal-proposals"
PROPOSAL_VERSION = 1


class ProposalFormatError(ValueError):
    """Malformed proposal file."""


@dataclass(frozen=True)
class Proposal:
    """Scored candidate interval [start, end) of class label >= 1."""

    video_id: str
    start: int
    end: int
    label: int
    score: float

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad proposal bounds [{self.start}, {self.end})")
        if self.label < 1:
            raise ValueError("proposal class must be >= 1")


@dataclass(frozen=True)
class InferenceConfig:
    attention_threshold: float = 0.5
    eta: float = 0.25
    nms_iou: float = 0.5
    max_frames: int = 400
    class_prob_floor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.attention_threshold < 1.0:
            raise ValueError("attention_threshold must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")
        if self.max_frames < 1:
            raise ValueError("max_frames must be positive")
        if not 0.0 <= self.class_prob_floor < 1.0:
            raise ValueError("class_prob_floor must lie in [0, 1)")


def extract_segments(lam: np.ndarray, attention_threshold: float):
    """Maximal runs of frames with attention >= threshold, as [start, end) pairs."""
    above = np.asarray(lam) >= attention_threshold
    padded = np.concatenate([[False], above, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def _pooled(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    denom = max(weights.sum(), POOL_EPS)
    return (weights[:, None] * features).sum(axis=0) / denom


def segment_score(features, lam, start, end, label, classifier: Classifier) -> float:
    """Pre-softmax logit of `label` on the attention-pooled segment feature."""
    if not 0 <= start < end <= len(lam):
        raise ValueError(f"empty or out-of-range segment [{start}, {end})")
    x = np.asarray(features, dtype=np.float64)
    pooled = _pooled(x[start:end], np.asarray(lam, dtype=np.float64)[start:end])
    return float(classifier.logits(pooled)[label])


def refine_score(features, lam, start, end, label, eta, classifier: Classifier) -> float:
    """Segment score minus eta times the scores of its quarter-length flanks.

    Flank width is (end-start)/4 rounded to the nearest frame, at least 1;
    flanks are clipped to the video and contribute 0 when clipped away.
    """
    score = segment_score(features, lam, start, end, label, classifier)
    if eta == 0.0:
        return score
    t = len(lam)
    flank = max(1, int(np.floor((end - start) / 4.0 + 0.5)))
    left_start = max(0, start - flank)
    if left_start < start:
        score -= eta * segment_score(features, lam, left_start, start, label, classifier)
    right_end = min(t, end + flank)
    if right_end > end:
        score -= eta * segment_score(features, lam, end, right_end, label, classifier)
    return score


def _interval_iou(a, b) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    if inter == 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union


def nms(proposals, iou_threshold: float):
    """Greedy per-class suppression by descending score within each video.

    A proposal is dropped when it overlaps an already-kept proposal of the
    same video and class with IoU above the threshold.
    """
    by_group: dict[tuple, list[Proposal]] = {}
    for p in proposals:
        by_group.setdefault((p.video_id, p.label), []).append(p)
    kept: list[Proposal] = []
    for key in sorted(by_group):
        group = sorted(by_group[key], key=lambda p: (-p.score, p.start, p.end))
        chosen: list[Proposal] = []
        for cand in group:
            if all(
                _interval_iou((cand.start, cand.end), (c.start, c.end)) <= iou_threshold
                for c in chosen
            ):
                chosen.append(cand)
        kept.extend(chosen)
    kept.sort(key=lambda p: (-p.score, p.video_id, p.start, p.label))
    return kept


def predict(model: ModelBundle, sequence: FeatureSequence, config: InferenceConfig):
    """Scored, suppressed proposals for one video, in original frame indices.

    Classes considered are those whose video-level foreground probability
    clears the configured floor, plus the best-scoring action class.
    """
    idx = subsample_indices(sequence.num_frames, config.max_frames)
    x = sequence.features[idx].astype(np.float64)
    lam, _ = model.attention.forward(x)

    fg_probs = softmax(model.classifier.logits(_pooled(x, lam)))
    action_probs = fg_probs[1:]
    candidates = {int(np.argmax(action_probs)) + 1}
    candidates |= {int(c) + 1 for c in np.flatnonzero(action_probs > config.class_prob_floor)}

    proposals = []
    for seg_start, seg_end in extract_segments(lam, config.attention_threshold):
        for label in sorted(candidates):
            score = refine_score(
                x, lam, seg_start, seg_end, label, config.eta, model.classifier
            )
            proposals.append(
                Proposal(
                    video_id=sequence.video_id,
                    start=int(idx[seg_start]),
                    end=int(idx[seg_end - 1]) + 1,
                    label=label,
                    score=score,
                )
            )
    return nms(proposals, config.nms_iou)


# --------------------------------------------------------------------------
# Proposal files
# --------------------------------------------------------------------------


def write_proposals(path, proposals, header_extra=None) -> None:
    """JSON-lines proposal file with a leading header record.

    The header declares unit ("frames") and snippet length so evaluation is
    unit-safe; `header_extra` fields (config echo, seed, split) are merged in.
    """
    header = {
        "record": "header",
        "format": PROPOSAL_FORMAT,
        "version": PROPOSAL_VERSION,
        "unit": "frames",
        "frame_seconds": 1.0,
    }
    if header_extra:
        header.update(header_extra)
    lines = [json.dumps(header)]
    for p in proposals:
        lines.append(
            json.dumps(
                {
                    "record": "proposal",
                    "video_id": p.video_id,
                    "start": p.start,
                    "end": p.end,
                    "label": p.label,
                    "score": p.score,
                }
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_proposals(path):
    """Returns (proposals, header dict)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ProposalFormatError(f"{path}: empty proposal file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ProposalFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != PROPOSAL_FORMAT or header.get("record") != "header":
        raise ProposalFormatError(f"{path}: missing proposal header record")
    if header.get("version") != PROPOSAL_VERSION:
        raise ProposalFormatError(f"{path}: unsupported version {header.get('version')}")
    proposals = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProposalFormatError(f"{path}: line {i}: {exc}") from exc
        if rec.get("record") != "proposal":
            raise ProposalFormatError(f"{path}: line {i}: unexpected record type")
        proposals.append(
            Proposal(
                video_id=rec["video_id"],
                start=int(rec["start"]),
                end=int(rec["end"]),
                label=int(rec["label"]),
                score=float(rec["score"]),
            )
        )
    return proposals, header
