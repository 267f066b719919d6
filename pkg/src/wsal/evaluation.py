"""Detection metrics and attention diagnostics.

Average precision follows the ActivityNet protocol: proposals are matched
greedily in descending score order, each ground-truth interval is consumable
once, a match requires temporal IoU at or above the threshold, and AP is the
precision-envelope-weighted sum over recall increments. Attention statistics
compare the thresholded attention, per-frame classification score, and
ground-truth frame sets, pooled over all videos.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedStatisticsError(ValueError):
    """A statistic whose denominator set is empty."""


def validate_thresholds(thresholds) -> list[float]:
    out = [float(t) for t in thresholds]
    if not out:
        raise ValueError("need at least one IoU threshold")
    if any(not 0.0 < t <= 1.0 for t in out):
        raise ValueError("IoU thresholds must lie in (0, 1]")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError("IoU thresholds must be strictly increasing")
    return out


def iou(a, b) -> float:
    """Temporal intersection over union of two [start, end) intervals."""
    (a_s, a_e), (b_s, b_e) = a, b
    if a_s >= a_e or b_s >= b_e:
        raise ValueError("segments must be non-empty")
    inter = max(0, min(a_e, b_e) - max(a_s, b_s))
    if inter == 0:
        return 0.0
    return inter / ((a_e - a_s) + (b_e - b_s) - inter)


def _sorted_proposals(proposals):
    return sorted(proposals, key=lambda p: (-p.score, p.start, p.video_id))


def average_precision(proposals, ground_truths, iou_threshold: float) -> float:
    """AP for one class; ground_truths are (video_id, start, end) carriers."""
    if not ground_truths:
        raise UndefinedStatisticsError("AP is undefined without ground truth")
    if not proposals:
        return 0.0
    by_video: dict[str, list] = {}
    for g in ground_truths:
        by_video.setdefault(g.video_id, []).append(g)
    for group in by_video.values():
        group.sort(key=lambda g: (g.start, g.end))
    used = {vid: [False] * len(group) for vid, group in by_video.items()}

    ordered = _sorted_proposals(proposals)
    tp = np.zeros(len(ordered))
    for k, p in enumerate(ordered):
        group = by_video.get(p.video_id, [])
        best_iou, best_idx = 0.0, -1
        for i, g in enumerate(group):
            if used[p.video_id][i]:
                continue
            ov = iou((p.start, p.end), (g.start, g.end))
            if ov >= iou_threshold and ov > best_iou:
                best_iou, best_idx = ov, i
        if best_idx >= 0:
            used[p.video_id][best_idx] = True
            tp[k] = 1.0

    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(ordered) + 1)
    recall = cum_tp / len(ground_truths)
    # precision envelope over recall, summed across recall increments
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mprec[steps]))


def _action_only(ground_truths):
    return [g for g in ground_truths if getattr(g, "kind", "action") == "action"]


def ap_table(proposals, ground_truths, thresholds):
    """Per-threshold, per-class AP over the classes present in ground truth."""
    thresholds = validate_thresholds(thresholds)
    gts = _action_only(ground_truths)
    if not gts:
        raise UndefinedStatisticsError("no ground-truth segments to evaluate against")
    classes = sorted({g.label for g in gts})
    by_class_gt = {c: [g for g in gts if g.label == c] for c in classes}
    by_class_prop = {c: [p for p in proposals if p.label == c] for c in classes}
    return {
        thr: {
            c: average_precision(by_class_prop[c], by_class_gt[c], thr)
            for c in classes
        }
        for thr in thresholds
    }


def map_at(proposals, ground_truths, thresholds):
    """Returns ({threshold: mAP}, average over thresholds)."""
    table = ap_table(proposals, ground_truths, thresholds)
    per_thr = {
        thr: float(np.mean(list(by_class.values()))) for thr, by_class in table.items()
    }
    return per_thr, float(np.mean(list(per_thr.values())))


@dataclass(frozen=True)
class AttentionStats:
    """Frame-set ratios over attention (att), classification (cls), and
    ground truth (gt) sets, each denominated by |gt|."""

    falsely_captured: float  # |att - gt| / |gt|
    omitted: float  # |gt - att| / |gt|
    cls_fp_filtered: float  # |(cls - gt) & ~att| / |gt|
    att_recovered_fn: float  # |(att & gt) - cls| / |gt|


def attention_statistics(lam_by_video, cls_by_video, gt_by_video, tstar=0.5):
    """Pooled set statistics over all videos.

    Arguments are dicts keyed by video id: attention per frame, per-frame
    classification score of the video's label class, and boolean ground-truth
    frame masks. Sets are frames with value > tstar.
    """
    n_att_not_gt = n_gt_not_att = n_cls_fp_filtered = n_recovered = n_gt = 0
    for vid, gt in gt_by_video.items():
        gt = np.asarray(gt, dtype=bool)
        att = np.asarray(lam_by_video[vid]) > tstar
        cls = np.asarray(cls_by_video[vid]) > tstar
        if not (gt.shape == att.shape == cls.shape):
            raise ValueError(f"misaligned per-frame data for video {vid!r}")
        n_gt += int(gt.sum())
        n_att_not_gt += int((att & ~gt).sum())
        n_gt_not_att += int((gt & ~att).sum())
        n_cls_fp_filtered += int((cls & ~gt & ~att).sum())
        n_recovered += int((att & gt & ~cls).sum())
    if n_gt == 0:
        raise UndefinedStatisticsError("no ground-truth frames: statistics undefined")
    return AttentionStats(
        falsely_captured=n_att_not_gt / n_gt,
        omitted=n_gt_not_att / n_gt,
        cls_fp_filtered=n_cls_fp_filtered / n_gt,
        att_recovered_fn=n_recovered / n_gt,
    )


def frame_auc(scores, labels) -> float:
    """Probability a random positive frame outscores a random negative one,
    counting ties as half. Requires both classes present."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = int(pos.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedStatisticsError("AUC needs both positive and negative frames")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    group_start = np.concatenate([[0], np.cumsum(counts)[:-1]]) + 1.0
    avg_rank = group_start + (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
