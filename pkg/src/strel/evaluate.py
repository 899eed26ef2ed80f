"""Frame-mAP@0.5, test-time augmentation, ensembling and per-class reporting."""

from __future__ import annotations

import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Box2D, ClipSample, box_jitter, hflip_clip, resize_clip
from .heads import predict_scores
from .memory import MemoryBank, extract_and_store_all

PAPER_SCALES = (256, 288, 320)
# ratio of max side to min side used by the paper's resize (464 / 256)
MAX_SIDE_RATIO = 464 / 256


class AlignmentError(ValueError):
    pass


@dataclass
class DetectionResult:
    video_id: str
    timestamp: int
    box: Box2D
    scores: np.ndarray

    @property
    def key(self) -> tuple:
        return (self.video_id, self.timestamp, _box_key(self.box))


@dataclass
class GroundTruth:
    video_id: str
    timestamp: int
    box: Box2D
    labels: np.ndarray


@dataclass
class EvalReport:
    per_class_ap: np.ndarray  # NaN where a class has no ground-truth positive
    map: float
    per_class_sample_counts: np.ndarray

    def lines(self, class_names: Sequence[str] | None = None) -> list[str]:
        out = [f"map={self.map:.6f}"]
        for k, (ap, n) in enumerate(zip(self.per_class_ap, self.per_class_sample_counts)):
            name = class_names[k] if class_names else str(k)
            out.append(f"ap[{k}]={ap:.6f} count[{k}]={int(n)} name[{k}]={name}")
        return out


def _box_key(b: Box2D) -> tuple:
    return tuple(round(v, 6) for v in b.as_tuple())


def iou(a: Box2D | Sequence[float], b: Box2D | Sequence[float]) -> float:
    ax1, ay1, ax2, ay2 = a.as_tuple() if isinstance(a, Box2D) else a
    bx1, by1, bx2, by2 = b.as_tuple() if isinstance(b, Box2D) else b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def gt_from_clips(clips: Sequence[ClipSample]) -> list[GroundTruth]:
    return [GroundTruth(c.video_id, c.timestamp, b, lab)
            for c in clips if c.labels is not None for b, lab in zip(c.boxes, c.labels)]


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from a TP/FP sequence in descending score order."""
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_matches(predictions: Sequence[DetectionResult], gt: Sequence[GroundTruth], k: int,
                  thresh: float = 0.5) -> tuple[np.ndarray, int]:
    """TP flags in descending score order (stable) and the number of class-k positives."""
    frames = defaultdict(list)
    for g in gt:
        if g.labels[k] > 0:
            frames[(g.video_id, g.timestamp)].append(g.box)
    num_gt = sum(len(v) for v in frames.values())
    scores = np.array([p.scores[k] for p in predictions], dtype=float)
    order = np.argsort(-scores, kind="stable")
    used = {key: np.zeros(len(v), dtype=bool) for key, v in frames.items()}
    tp = np.zeros(len(predictions))
    for rank, i in enumerate(order):
        p = predictions[i]
        key = (p.video_id, p.timestamp)
        cands = frames.get(key)
        if not cands:
            continue
        best, best_j = -1.0, -1
        for j, gb in enumerate(cands):
            if used[key][j]:
                continue
            o = iou(p.box, gb)
            if o >= thresh and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[key][best_j] = True
            tp[rank] = 1.0
    return tp, num_gt


def frame_map_50(predictions: Sequence[DetectionResult], ground_truth: Sequence[GroundTruth],
                 num_classes: int | None = None) -> EvalReport:
    if num_classes is None:
        num_classes = len(ground_truth[0].labels) if ground_truth else len(predictions[0].scores)
    aps = np.full(num_classes, np.nan)
    counts = np.zeros(num_classes, dtype=int)
    for k in range(num_classes):
        tp, n = class_matches(predictions, ground_truth, k)
        counts[k] = n
        if n:
            aps[k] = average_precision(tp, n)
    valid = aps[~np.isnan(aps)]
    return EvalReport(aps, float(valid.mean()) if valid.size else float("nan"), counts)


# inference --------------------------------------------------------------------

def detector_boxes(clip: ClipSample, magnitude: float, seed: int = 0) -> list[Box2D]:
    """Stand-in for person-detector output: ground-truth boxes with deterministic jitter."""
    rng = np.random.default_rng(np.random.SeedSequence(
        [seed, zlib.crc32(clip.video_id.encode()), clip.timestamp]))
    return [box_jitter(b, magnitude, rng) for b in clip.boxes]


def predict_clips(model, clips: Sequence[ClipSample], bank: MemoryBank | None = None,
                  batch_size: int = 16) -> list[np.ndarray]:
    """Sigmoid scores (persons x K) per clip, reading the bank when the head uses memory."""
    use_mem = model.cfg.head.use_memory and bank is not None
    out: list[np.ndarray] = []
    groups = defaultdict(list)
    for i, c in enumerate(clips):
        groups[c.frames.shape].append(i)
    results: dict[int, np.ndarray] = {}
    for idxs in groups.values():
        for s in range(0, len(idxs), batch_size):
            chunk = [clips[i] for i in idxs[s:s + batch_size]]
            mems = [bank.read_window(c.video_id, c.timestamp) for c in chunk] if use_mem else None
            logits, _ = model.forward(np.stack([c.frames for c in chunk]), [c.boxes for c in chunk], mems)
            for i, lg in zip(idxs[s:s + batch_size], logits):
                results[i] = predict_scores(lg)
    out = [results[i] for i in range(len(clips))]
    return out


def _scale_variant(clip: ClipSample, scale: int) -> ClipSample:
    H, W = clip.frames.shape[2:]
    if min(H, W) == scale:
        return clip
    return resize_clip(clip, scale, int(math.ceil(scale * MAX_SIDE_RATIO)))


def tta_infer(model, clip: ClipSample, scales: Sequence[int], flip: bool = True,
              bank: MemoryBank | None = None) -> np.ndarray:
    """Mean per-person scores over rescaled (and optionally mirrored) variants."""
    return tta_infer_many(model, [clip], scales, flip, bank)[0]


def tta_infer_many(model, clips: Sequence[ClipSample], scales: Sequence[int], flip: bool = True,
                   bank: MemoryBank | None = None, batch_size: int = 16) -> list[np.ndarray]:
    if not scales:
        raise ValueError("at least one test scale is required")
    acc = [np.zeros((len(c.boxes), model.cfg.head.num_classes)) for c in clips]
    n = 0
    for s in scales:
        variants = [_scale_variant(c, s) for c in clips]
        passes = [variants] + ([[hflip_clip(v) for v in variants]] if flip else [])
        for vs in passes:
            for a, sc in zip(acc, predict_clips(model, vs, bank, batch_size)):
                a += sc
            n += 1
    return [a / n for a in acc]


def infer_results(model, clips: Sequence[ClipSample], *, gt_boxes: bool = True, jitter: float = 0.1,
                  seed: int = 0, scales: Sequence[int] | None = None, flip: bool = False,
                  bank: MemoryBank | None = None) -> list[DetectionResult]:
    """DetectionResults for annotated clips, using ground-truth or jittered detector boxes."""
    targets = [c for c in clips if c.annotated]
    if not gt_boxes:
        targets = [replace(c, boxes=detector_boxes(c, jitter, seed)) for c in targets]
    if model.cfg.head.use_memory and bank is None:
        bank = MemoryBank()
        extract_and_store_all(bank, model, clips)
    if scales:
        scores = tta_infer_many(model, targets, scales, flip, bank)
    else:
        scores = predict_clips(model, targets, bank)
    return [DetectionResult(c.video_id, c.timestamp, b, sc[i])
            for c, sc in zip(targets, scores) for i, b in enumerate(c.boxes)]


def gt_box_mode(model, clips: Sequence[ClipSample], bank: MemoryBank | None = None,
                scales: Sequence[int] | None = None, flip: bool = False) -> EvalReport:
    preds = infer_results(model, clips, gt_boxes=True, scales=scales, flip=flip, bank=bank)
    return frame_map_50(preds, gt_from_clips(clips), model.cfg.head.num_classes)


def detector_box_mode(model, clips: Sequence[ClipSample], jitter: float = 0.1, seed: int = 0,
                      bank: MemoryBank | None = None, scales: Sequence[int] | None = None,
                      flip: bool = False) -> EvalReport:
    preds = infer_results(model, clips, gt_boxes=False, jitter=jitter, seed=seed, scales=scales, flip=flip,
                          bank=bank)
    return frame_map_50(preds, gt_from_clips(clips), model.cfg.head.num_classes)


# ensembling and reporting --------------------------------------------------------

def ensemble_average(result_sets: Sequence[Sequence[DetectionResult]]) -> list[DetectionResult]:
    """Average voting: per (video, timestamp, box) key, the mean score vector across sets."""
    if not result_sets:
        raise ValueError("nothing to ensemble")
    ref = [r.key for r in result_sets[0]]
    ref_set = set(ref)
    if len(ref_set) != len(ref):
        raise AlignmentError("duplicate keys in the first result set")
    indexed = []
    for n, rs in enumerate(result_sets):
        table = {r.key: r for r in rs}
        missing = sorted(ref_set - set(table))
        extra = sorted(set(table) - ref_set)
        if missing or extra or len(table) != len(rs):
            bad = (missing + extra)[:5]
            raise AlignmentError(f"result set {n} is misaligned; offending keys: {bad}")
        indexed.append(table)
    out = []
    for key, r0 in zip(ref, result_sets[0]):
        scores = np.mean([np.asarray(t[key].scores, dtype=float) for t in indexed], axis=0)
        out.append(DetectionResult(r0.video_id, r0.timestamp, r0.box, scores))
    return out


def results_from_rows(rows, num_classes: int | None = None) -> list[DetectionResult]:
    """Group parsed CSV rows (one per box and class) back into DetectionResults."""
    grouped: dict[tuple, dict[int, float]] = {}
    boxes: dict[tuple, Box2D] = {}
    for r in rows:
        key = (r.video_id, r.timestamp, _box_key(r.box))
        grouped.setdefault(key, {})[r.action_id] = r.score if r.score is not None else 1.0
        boxes.setdefault(key, r.box)
    if num_classes is None:
        num_classes = 1 + max((a for d in grouped.values() for a in d), default=-1)
    out = []
    for key, d in grouped.items():
        s = np.zeros(num_classes)
        for a, v in d.items():
            s[a] = v
        out.append(DetectionResult(key[0], key[1], boxes[key], s))
    return out


def gt_from_rows(rows, num_classes: int) -> list[GroundTruth]:
    grouped: dict[tuple, np.ndarray] = {}
    boxes = {}
    for r in rows:
        key = (r.video_id, r.timestamp, _box_key(r.box))
        grouped.setdefault(key, np.zeros(num_classes))[r.action_id] = 1.0
        boxes.setdefault(key, r.box)
    return [GroundTruth(k[0], k[1], boxes[k], v) for k, v in grouped.items()]


@dataclass
class DeltaReport:
    deltas: np.ndarray
    order: np.ndarray  # class indices by descending sample count
    top_mean: float
    bottom_mean: float
    all_mean: float
    top_movers: list[tuple[int, float]] = field(default_factory=list)
    bottom_movers: list[tuple[int, float]] = field(default_factory=list)

    def lines(self, class_names: Sequence[str] | None = None) -> list[str]:
        out = [f"top_mean_delta={self.top_mean:.6f}", f"bottom_mean_delta={self.bottom_mean:.6f}",
               f"all_mean_delta={self.all_mean:.6f}"]
        for k in self.order:
            name = class_names[k] if class_names else str(k)
            out.append(f"delta[{k}]={self.deltas[k]:.6f} name[{k}]={name}")
        return out


def per_class_delta_report(before: EvalReport, after: EvalReport, counts=None, n: int = 20,
                           movers: int = 3) -> DeltaReport:
    """AP change per class, ranked by sample count; means over the top-n and bottom-n classes."""
    if len(before.per_class_ap) != len(after.per_class_ap):
        raise AlignmentError(f"class sets differ: {len(before.per_class_ap)} vs {len(after.per_class_ap)}")
    counts = np.asarray(before.per_class_sample_counts if counts is None else counts)
    deltas = np.asarray(after.per_class_ap, dtype=float) - np.asarray(before.per_class_ap, dtype=float)
    order = np.argsort(-counts, kind="stable")
    valid = [k for k in order if not np.isnan(deltas[k])]
    m = min(n, len(valid))
    top = valid[:m]
    bottom = valid[len(valid) - m:]
    ranked = sorted(valid, key=lambda k: -deltas[k])
    return DeltaReport(
        deltas, order,
        float(np.mean(deltas[top])) if top else float("nan"),
        float(np.mean(deltas[bottom])) if bottom else float("nan"),
        float(np.mean(deltas[valid])) if valid else float("nan"),
        [(int(k), float(deltas[k])) for k in ranked[:movers]],
        [(int(k), float(deltas[k])) for k in ranked[::-1][:movers]],
    )
