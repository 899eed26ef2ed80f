"""Synthetic relational clips, AVA-style CSV I/O and clip augmentation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import load_arrays, save_arrays

NUM_CLASSES = 3
CLASS_NAMES = ("has-twin", "is-max", "bright")


class SpecError(ValueError):
    """Invalid or infeasible dataset specification."""


class ParseError(ValueError):
    """Malformed line in an annotation file."""


class ValidationError(ValueError):
    """Well-formed value that violates a data invariant."""


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValidationError(f"invalid box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1


@dataclass
class ClipSample:
    video_id: str
    timestamp: int
    frames: np.ndarray  # C x T x H x W, values in [0, 1]
    boxes: list[Box2D]
    labels: np.ndarray | None  # persons x K multi-hot; None for non-annotated clips
    split: str = "train"
    domain: str = "A"
    signatures: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape[0] != len(self.boxes):
                raise ValidationError(
                    f"{self.video_id}@{self.timestamp}: {self.labels.shape[0]} label rows for {len(self.boxes)} boxes")
            if not np.all((self.labels == 0) | (self.labels == 1)):
                raise ValidationError(f"{self.video_id}@{self.timestamp}: labels must be 0/1")

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.timestamp)

    @property
    def annotated(self) -> bool:
        return self.labels is not None


@dataclass(frozen=True)
class SyntheticSpec:
    num_videos: int = 10
    clips_per_video: int = 20
    min_persons: int = 2
    max_persons: int = 4
    T: int = 4
    H: int = 32
    W: int = 32
    C: int = 3
    Q: int = 8
    seed: int = 0
    split: str = "train"
    domain: str = "A"
    persist_prob: float = 0.9
    # "all": every clip labelled; "center": one labelled clip per video (Kinetics-like)
    annotate: str = "all"
    # "clip": twins searched in the current clip; "neighbors": also in clips at t-1 and t+1
    twin_scope: str = "clip"
    # probability mass of signatures >= Q/2; None keeps signatures uniform
    bright_prob: float | None = None
    grid: int = 2
    first_timestamp: int = 900
    # peak value of the random blocky background in the signature channel (0 keeps it black)
    clutter: float = 0.0
    # box side range as a fraction of the grid cell
    box_scale: tuple[float, float] = (0.55, 0.85)

    def validate(self) -> None:
        if self.Q < 2:
            raise SpecError("Q must be at least 2")
        if self.C != 3:
            raise SpecError("synthetic clips have exactly 3 channels")
        if not 1 <= self.min_persons <= self.max_persons:
            raise SpecError(f"bad person range [{self.min_persons}, {self.max_persons}]")
        if self.max_persons > self.grid * self.grid:
            raise SpecError(f"{self.max_persons} persons do not fit a {self.grid}x{self.grid} placement grid")
        if min(self.num_videos, self.clips_per_video, self.T, self.H, self.W) < 1:
            raise SpecError("extents and counts must be positive")
        if self.H < 2 * self.grid or self.W < 2 * self.grid:
            raise SpecError("frames too small for the placement grid")
        if not 0.0 <= self.persist_prob <= 1.0:
            raise SpecError("persist_prob must lie in [0, 1]")
        if self.annotate not in ("all", "center"):
            raise SpecError(f"unknown annotate mode {self.annotate!r}")
        if self.twin_scope not in ("clip", "neighbors"):
            raise SpecError(f"unknown twin_scope {self.twin_scope!r}")
        if self.domain not in ("A", "K"):
            raise SpecError(f"unknown domain {self.domain!r}")
        if self.split not in ("train", "val"):
            raise SpecError(f"unknown split {self.split!r}")
        if self.bright_prob is not None and not 0.0 < self.bright_prob < 1.0:
            raise SpecError("bright_prob must lie in (0, 1)")
        lo, hi = self.box_scale
        if not 0.0 < lo <= hi <= 0.96:
            raise SpecError(f"box_scale {self.box_scale} must satisfy 0 < lo <= hi <= 0.96")
        if not 0.0 <= self.clutter <= 1.0:
            raise SpecError("clutter must lie in [0, 1]")


def relational_labels(signatures: Sequence[int], Q: int, twin_pool: Sequence[int] | None = None) -> np.ndarray:
    """Multi-hot labels for one clip.

    ``twin_pool`` lists extra signatures (from neighbouring clips) that also
    count as twins.
    """
    n = len(signatures)
    labels = np.zeros((n, NUM_CLASSES))
    extra = set(twin_pool or ())
    for i, s in enumerate(signatures):
        others = [signatures[j] for j in range(n) if j != i]
        labels[i, 0] = float(s in others or s in extra)
        labels[i, 1] = float(all(s > o for o in others))
        labels[i, 2] = float(s >= Q / 2)
    return labels


def _draw_signature(rng: np.random.Generator, spec: SyntheticSpec) -> int:
    if spec.bright_prob is None:
        return int(rng.integers(spec.Q))
    half = math.ceil(spec.Q / 2)
    if rng.random() < spec.bright_prob:
        return int(rng.integers(half, spec.Q))
    return int(rng.integers(0, half))


def _place_boxes(n: int, spec: SyntheticSpec, rng: np.random.Generator) -> list[Box2D]:
    g = spec.grid
    cells = rng.permutation(g * g)[:n]
    boxes = []
    for cell in cells:
        gy, gx = divmod(int(cell), g)
        bw = rng.uniform(*spec.box_scale) / g
        bh = rng.uniform(*spec.box_scale) / g
        x1 = (gx + rng.uniform(0.02, 0.98 - bw * g)) / g
        y1 = (gy + rng.uniform(0.02, 0.98 - bh * g)) / g
        boxes.append(Box2D(round(x1, 6), round(y1, 6), round(x1 + bw, 6), round(y1 + bh, 6)))
    return boxes


def box_pixel_mask(box: Box2D, H: int, W: int) -> np.ndarray:
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    return ((ys >= box.y1) & (ys < box.y2))[:, None] & ((xs >= box.x1) & (xs < box.x2))[None, :]


def render_frames(signatures: Sequence[int], boxes: Sequence[Box2D], spec: SyntheticSpec,
                  rng: np.random.Generator) -> np.ndarray:
    C, T, H, W = spec.C, spec.T, spec.H, spec.W
    frames = np.zeros((C, T, H, W))
    sig = np.zeros((H, W))
    if spec.clutter > 0:
        # coarse random blocks make the frame-wide average uninformative about the persons
        blocks = rng.uniform(0.0, spec.clutter, size=(4, 4))
        sig = blocks[(np.arange(H) * 4) // H][:, (np.arange(W) * 4) // W]
    for s, box in zip(signatures, boxes):
        sig[box_pixel_mask(box, H, W)] = s / (spec.Q - 1)
    if spec.domain == "K":
        # Kinetics-like footage: low-contrast rendering on a bright, grainy background
        sig = 0.6 + 0.3 * sig
        outside = np.ones((H, W), dtype=bool)
        for box in boxes:
            outside &= ~box_pixel_mask(box, H, W)
        sig = np.where(outside, 0.6, sig)
        frames[0] = np.clip(sig[None] + rng.uniform(-0.05, 0.05, size=(T, H, W)), 0.0, 1.0)
    else:
        frames[0] = sig[None]
    tcode = np.arange(T) / (T - 1) if T > 1 else np.zeros(1)
    frames[1] = tcode[:, None, None]
    frames[2] = rng.uniform(0.0, 1.0, size=(T, H, W))
    return frames


def gen_synthetic(spec: SyntheticSpec) -> list[ClipSample]:
    """Generate the relational-action dataset described by ``spec``.

    Persons keep their identity across the clips of a video; each signature
    survives from one timestamp to the next with probability ``persist_prob``.
    """
    spec.validate()
    root = np.random.SeedSequence([spec.seed, 0 if spec.split == "train" else 1, ord(spec.domain)])
    clips: list[ClipSample] = []
    for v, vseed in enumerate(root.spawn(spec.num_videos)):
        rng = np.random.default_rng(vseed)
        video_id = f"{spec.domain}{spec.split[0]}{v:04d}"
        n = int(rng.integers(spec.min_persons, spec.max_persons + 1))
        sigs = [_draw_signature(rng, spec) for _ in range(n)]
        per_clip = []
        for c in range(spec.clips_per_video):
            if c > 0:
                sigs = [s if rng.random() < spec.persist_prob else _draw_signature(rng, spec) for s in sigs]
            boxes = _place_boxes(n, spec, rng)
            per_clip.append((list(sigs), boxes, render_frames(sigs, boxes, spec, rng)))
        center = spec.clips_per_video // 2
        for c, (sigs_c, boxes, frames) in enumerate(per_clip):
            pool: list[int] = []
            if spec.twin_scope == "neighbors":
                for nb in (c - 1, c + 1):
                    if 0 <= nb < spec.clips_per_video:
                        pool.extend(per_clip[nb][0])
            labels = relational_labels(sigs_c, spec.Q, pool)
            if spec.annotate == "center" and c != center:
                labels = None
            clips.append(ClipSample(video_id, spec.first_timestamp + c, frames, boxes, labels,
                                    spec.split, spec.domain, sigs_c))
    return clips


# AVA-style CSV --------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationRow:
    video_id: str
    timestamp: int
    x1: float
    y1: float
    x2: float
    y2: float
    action_id: int
    person_id: int | None = None
    score: float | None = None

    @property
    def box(self) -> Box2D:
        return Box2D(self.x1, self.y1, self.x2, self.y2)


def parse_ava_csv(path) -> list[AnnotationRow]:
    """Read ``video_id,timestamp,x1,y1,x2,y2,action_id,person_id`` rows.

    The detection variant carries a confidence score in the last column; a
    value containing a decimal point or exponent is read as a score.
    """
    rows: list[AnnotationRow] = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) not in (7, 8):
                raise ParseError(f"{path}:{lineno}: expected 7 or 8 fields, got {len(rec)}")
            try:
                vid = rec[0].strip()
                ts = int(rec[1])
                x1, y1, x2, y2 = (float(f) for f in rec[2:6])
                action = int(rec[6])
                pid, score = None, None
                if len(rec) == 8:
                    last = rec[7].strip()
                    if any(ch in last for ch in ".eE"):
                        score = float(last)
                    else:
                        pid = int(last)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            for name, val in (("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)):
                if not 0.0 <= val <= 1.0:
                    raise ValidationError(f"{path}:{lineno}: {name}={val} outside [0, 1]")
            if not (x1 < x2 and y1 < y2):
                raise ValidationError(f"{path}:{lineno}: degenerate box ({x1}, {y1}, {x2}, {y2})")
            rows.append(AnnotationRow(vid, ts, x1, y1, x2, y2, action, pid, score))
    return rows


def emit_results_csv(results: Iterable, path, class_ids: Sequence[int] | None = None) -> None:
    """Write one ``video_id,timestamp,x1,y1,x2,y2,action_id,score`` line per (box, class).

    ``results`` are DetectionResult-like objects; ``scores`` may be a mapping
    action_id -> score or a K-vector (indexed by ``class_ids`` when given).
    """
    lines = []
    for r in results:
        b = r.box
        if isinstance(r.scores, dict):
            items = sorted(r.scores.items())
        else:
            ids = class_ids if class_ids is not None else range(len(r.scores))
            items = list(zip(ids, r.scores))
        for action, score in items:
            score = float(score)
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"score {score} outside [0, 1]")
            lines.append(f"{r.video_id},{r.timestamp},{b.x1:.6f},{b.y1:.6f},{b.x2:.6f},{b.y2:.6f},"
                         f"{int(action)},{score:.6f}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def write_gt_csv(clips: Iterable[ClipSample], path) -> None:
    """Ground truth in AVA form: one line per positive (person, action)."""
    with open(path, "w") as fh:
        for clip in clips:
            if clip.labels is None:
                continue
            for pid, (box, lab) in enumerate(zip(clip.boxes, clip.labels)):
                for k in np.flatnonzero(lab):
                    fh.write(f"{clip.video_id},{clip.timestamp},{box.x1:.6f},{box.y1:.6f},"
                             f"{box.x2:.6f},{box.y2:.6f},{int(k)},{pid}\n")


# augmentation -----------------------------------------------------------------

def box_jitter(box: Box2D, magnitude: float, rng: np.random.Generator) -> Box2D:
    """Perturb each coordinate by up to ``magnitude`` times the box side."""
    if not 0.0 <= magnitude < 0.5:
        raise ValueError(f"jitter magnitude {magnitude} outside [0, 0.5)")
    if magnitude == 0.0:
        return box
    d = rng.uniform(-magnitude, magnitude, size=4) * np.array([box.width, box.height, box.width, box.height])
    x1, y1, x2, y2 = np.array(box.as_tuple()) + d
    min_side = 1e-3
    x1 = float(np.clip(x1, 0.0, 1.0 - min_side))
    y1 = float(np.clip(y1, 0.0, 1.0 - min_side))
    x2 = float(np.clip(x2, x1 + min_side, 1.0))
    y2 = float(np.clip(y2, y1 + min_side, 1.0))
    return Box2D(x1, y1, x2, y2)


def color_jitter(clip: ClipSample, strength: float, rng: np.random.Generator) -> ClipSample:
    """Random brightness/contrast on the noise channel only."""
    if strength == 0.0:
        return clip
    frames = clip.frames.copy()
    ch = frames[2]
    contrast = 1.0 + rng.uniform(-strength, strength)
    brightness = rng.uniform(-strength, strength)
    mean = ch.mean()
    frames[2] = np.clip((ch - mean) * contrast + mean + brightness, 0.0, 1.0)
    return replace(clip, frames=frames)


def _resize_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    shape = [1] * x.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(x, lo, axis=axis) * (1.0 - frac) + np.take(x, hi, axis=axis) * frac


def resized_extent(H: int, W: int, min_side: int, max_side: int) -> tuple[int, int]:
    if min_side > max_side:
        raise ValueError(f"min_side {min_side} exceeds max_side {max_side}")
    short, long = min(H, W), max(H, W)
    scale = min_side / short
    if long * scale > max_side:
        scale = max_side / long
    return int(round(H * scale)), int(round(W * scale))


def resize_clip(clip: ClipSample, min_side: int, max_side: int) -> ClipSample:
    """Bilinear per-frame resize; normalized boxes are unchanged."""
    C, T, H, W = clip.frames.shape
    h, w = resized_extent(H, W, min_side, max_side)
    frames = _resize_axis(_resize_axis(clip.frames, h, 2), w, 3)
    return replace(clip, frames=frames)


def hflip_box(box: Box2D) -> Box2D:
    return Box2D(1.0 - box.x2, box.y1, 1.0 - box.x1, box.y2)


def hflip_clip(clip: ClipSample) -> ClipSample:
    return replace(clip, frames=clip.frames[..., ::-1].copy(), boxes=[hflip_box(b) for b in clip.boxes])


# persistence ------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def save_dataset(clips: Sequence[ClipSample], root) -> None:
    """Manifest (one JSON record per clip) plus one frame file per clip."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w") as fh:
        for clip in clips:
            fname = f"frames/{clip.video_id}_{clip.timestamp}.bin"
            save_arrays(root / fname, {"frames": clip.frames})
            rec = {
                "video_id": clip.video_id,
                "timestamp": clip.timestamp,
                "split": clip.split,
                "domain": clip.domain,
                "frames": fname,
                "boxes": [list(b.as_tuple()) for b in clip.boxes],
                "labels": None if clip.labels is None else clip.labels.astype(int).tolist(),
                "signatures": list(clip.signatures),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(root) -> list[ClipSample]:
    root = Path(root)
    path = root / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    clips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            frames = load_arrays(root / rec["frames"])["frames"]
            labels = None if rec["labels"] is None else np.array(rec["labels"], dtype=np.float64)
            clips.append(ClipSample(rec["video_id"], int(rec["timestamp"]), frames,
                                    [Box2D(*b) for b in rec["boxes"]], labels, rec["split"],
                                    rec.get("domain", "A"), rec.get("signatures", [])))
    return clips
