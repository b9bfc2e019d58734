"""Explaining anomalies with external object/action detections.

Saliency "heat" is accumulated inside every detected box; boxes are ranked by
that score and those at or above a threshold are reported as the anomalous
regions, labelled with the detector's class.

A pixel (row i, column j) belongs to box [x1, y1, x2, y2] when its centre
(j + 0.5, i + 0.5) lies in [x1, x2) x [y1, y2).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import GroundTruthLabels
from .detect import EvaluationError, SaliencyMap

SOURCES = ("object", "action")
BOX_MODES = ("sum", "mean")


class DetectionFormatError(ValueError):
    pass


@dataclass
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    label: str
    confidence: float = 1.0
    source: str = "object"

    def coords(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def pixel_slices(self, height: int, width: int) -> tuple[slice, slice]:
        c0 = min(max(math.ceil(self.x1 - 0.5), 0), width)
        c1 = min(max(math.ceil(self.x2 - 0.5), 0), width)
        r0 = min(max(math.ceil(self.y1 - 0.5), 0), height)
        r1 = min(max(math.ceil(self.y2 - 0.5), 0), height)
        return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy, self.label, self.confidence, self.source)


@dataclass
class DetectionSet:
    frames: dict[tuple[str, int], list[Box]] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.frames.values())

    def get(self, clip_id: str, frame: int) -> list[Box]:
        return self.frames.get((clip_id, frame), [])

    def clips(self) -> set[str]:
        return {c for c, _ in self.frames}


def _fail(path, lineno, msg):
    raise DetectionFormatError(f"{path}:{lineno}: {msg}")


def load_detections(path: str | Path, frame_size: tuple[int, int] | None = None) -> DetectionSet:
    """Read detections from JSON lines, one object per frame::

        {"clip": str, "frame": int,
         "boxes": [{"box": [x1, y1, x2, y2], "label": str, "score": float,
                    "source": "object" | "action"}]}

    Boxes are clipped to ``frame_size`` (height, width) when given; a box
    left with no area after clipping is dropped.
    """
    out = DetectionSet()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(path, lineno, f"invalid JSON ({exc.msg})")
            if not isinstance(rec, dict) or set(rec) != {"clip", "frame", "boxes"}:
                _fail(path, lineno, "record must have exactly the keys clip, frame, boxes")
            clip, frame, boxes = rec["clip"], rec["frame"], rec["boxes"]
            if not isinstance(clip, str) or isinstance(frame, bool) or not isinstance(frame, int) or frame < 0:
                _fail(path, lineno, "clip must be a string and frame a non-negative integer")
            if not isinstance(boxes, list):
                _fail(path, lineno, "boxes must be a list")
            parsed = out.frames.setdefault((clip, frame), [])
            for b in boxes:
                if not isinstance(b, dict) or set(b) != {"box", "label", "score", "source"}:
                    _fail(path, lineno, "box entry must have exactly the keys box, label, score, source")
                coords = b["box"]
                if (not isinstance(coords, list) or len(coords) != 4
                        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in coords)):
                    _fail(path, lineno, "box must be four numbers [x1, y1, x2, y2]")
                x1, y1, x2, y2 = (float(v) for v in coords)
                if not (x1 < x2 and y1 < y2):
                    _fail(path, lineno, f"degenerate box {coords}: need x1 < x2 and y1 < y2")
                label = b["label"]
                if not isinstance(label, str) or not label:
                    _fail(path, lineno, "label must be a non-empty string")
                score = b["score"]
                if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
                    _fail(path, lineno, "score must be a number in [0, 1]")
                if b["source"] not in SOURCES:
                    _fail(path, lineno, f"source must be one of {SOURCES}")
                if frame_size is not None:
                    h, w = frame_size
                    x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
                    y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
                    if not (x1 < x2 and y1 < y2):
                        continue
                parsed.append(Box(x1, y1, x2, y2, label, float(score), b["source"]))
    return out


def box_scores(smap: SaliencyMap | np.ndarray, boxes: Sequence[Box], mode: str = "sum") -> list[float]:
    if mode not in BOX_MODES:
        raise ValueError(f"unknown box mode {mode!r}")
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    h, w = values.shape
    out = []
    for box in boxes:
        rows, cols = box.pixel_slices(h, w)
        patch = values[rows, cols]
        total = math.fsum(patch.astype(np.float64, copy=False).ravel().tolist())  # correctly rounded
        if mode == "mean":
            total = total / patch.size if patch.size else 0.0
        out.append(total)
    return out


@dataclass
class ExplanationEntry:
    box: list[float]
    label: str
    source: str
    box_score: float
    anomalous: bool
    detector_confidence: float = 1.0


@dataclass
class ExplanationRecord:
    clip_id: str
    frame_id: int
    entries: list[ExplanationEntry] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"clip": self.clip_id, "frame": self.frame_id,
                           "entries": [asdict(e) for e in self.entries]})

    @classmethod
    def from_json(cls, line: str) -> "ExplanationRecord":
        d = json.loads(line)
        return cls(d["clip"], int(d["frame"]), [ExplanationEntry(**e) for e in d["entries"]])

    def labels(self) -> list[str]:
        return [e.label for e in self.entries if e.anomalous]


def explain_frame(smap: SaliencyMap, boxes: Sequence[Box], threshold: float, mode: str = "sum",
                  clip_id: str | None = None, frame_id: int | None = None) -> ExplanationRecord:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    scores = box_scores(smap, boxes, mode)
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])  # stable: ties keep detection order
    entries = [ExplanationEntry(boxes[i].coords(), boxes[i].label, boxes[i].source, scores[i],
                                scores[i] >= threshold, boxes[i].confidence) for i in order]
    return ExplanationRecord(smap.clip_id if clip_id is None else clip_id,
                             smap.frame_id if frame_id is None else frame_id, entries)


def calibrate_threshold(box_score_values: Iterable[float], percentile: float = 99.0) -> float:
    """Threshold from per-box scores collected on normal-only data."""
    values = np.asarray(list(box_score_values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no box scores to calibrate on")
    return float(np.percentile(values, percentile))


def save_records(records: Iterable[ExplanationRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def load_records(path: str | Path) -> list[ExplanationRecord]:
    with open(path) as fh:
        return [ExplanationRecord.from_json(line) for line in fh if line.strip()]


@dataclass
class MapReport:
    ap: dict[str, float]
    support: dict[str, int]
    mean_ap: float
    false_positive_only: dict[str, int] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "AP", "support"])
            for cls in sorted(self.ap):
                w.writerow([cls, repr(self.ap[cls]), self.support[cls]])
            w.writerow(["mAP", repr(self.mean_ap), sum(self.support.values())])


def average_precision(hits: Sequence[bool], n_positive: int) -> float:
    """AP of a ranked hit list: mean of precision at each hit, over all positives.

    Accumulated as an exact fraction so the result does not depend on
    summation order."""
    return float(_average_precision(hits, n_positive))


def _average_precision(hits: Sequence[bool], n_positive: int) -> Fraction:
    if n_positive == 0:
        raise ValueError("no positives")
    tp = 0
    total = Fraction(0)
    for k, hit in enumerate(hits, 1):
        if hit:
            tp += 1
            total += Fraction(tp, k)
    return total / n_positive


def evaluate_map(records: Iterable[ExplanationRecord], labels: GroundTruthLabels,
                 aliases: dict[str, str] | None = None, exclude: Iterable[str] = (),
                 emitted: str = "anomalous") -> MapReport:
    """Per-class AP and unweighted mAP with frame-level matching.

    A prediction is an emitted (label, box_score) on a frame; it is a hit if
    the frame's ground-truth label set has that class and no higher-ranked
    prediction of the class on the same frame already claimed it. ``emitted``
    is ``"anomalous"`` (entries over threshold) or ``"all"``.
    """
    aliases = aliases or {}
    exclude = set(exclude)
    gt: dict[tuple[str, int], set[str]] = {}
    for cid, per_frame in labels.explanation_labels.items():
        for f, labs in per_frame.items():
            keep = {lab for lab in labs if lab not in exclude}
            if keep:
                gt[(cid, f)] = keep
    support: dict[str, int] = {}
    for labs in gt.values():
        for lab in labs:
            support[lab] = support.get(lab, 0) + 1
    if not support:
        raise EvaluationError("ground truth has no explanation labels")

    preds: dict[str, list[tuple[float, str, int, int]]] = {}
    seq = 0
    for rec in records:
        flags = labels.frame_flags.get(rec.clip_id)
        if flags is None or not 0 <= rec.frame_id < len(flags):
            raise EvaluationError(f"record frame {rec.clip_id!r}:{rec.frame_id} is not in the ground truth")
        for e in rec.entries:
            if emitted == "anomalous" and not e.anomalous:
                continue
            cls = aliases.get(e.label, e.label)
            if cls in exclude:
                continue
            preds.setdefault(cls, []).append((e.box_score, rec.clip_id, rec.frame_id, seq))
            seq += 1

    ap = {}
    for cls, n_pos in support.items():
        ranked = sorted(preds.get(cls, []), key=lambda p: (-p[0], p[3]))
        claimed = set()
        hits = []
        for _, cid, f, _ in ranked:
            key = (cid, f)
            hit = cls in gt.get(key, ()) and key not in claimed
            if hit:
                claimed.add(key)
            hits.append(hit)
        ap[cls] = _average_precision(hits, n_pos)
    fp_only = {cls: len(p) for cls, p in preds.items() if cls not in support}
    mean_ap = float(sum(ap.values()) / len(ap))
    return MapReport({c: float(v) for c, v in ap.items()}, support, mean_ap, fp_only)
