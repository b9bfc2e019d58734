"""Saliency maps, frame scores and frame-level ROC-AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from scipy.stats import rankdata

from .dataset import GroundTruthLabels, VideoClip, WindowDataset, make_windows

NORMALIZATIONS = ("per_video_minmax", "none")


class EvaluationError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W, float64, >= 0
    frame_id: int = -1
    clip_id: str = ""


def saliency(predicted, target, frame_id: int = -1, clip_id: str = "") -> SaliencyMap:
    """Per-pixel squared error summed over channels. Images are H x W x C
    arrays (numpy) or C x H x W tensors."""
    if isinstance(predicted, torch.Tensor):
        if predicted.shape != target.shape:
            raise ValueError("shape mismatch")
        values = (predicted.detach().double() - target.detach().double()).pow(2).sum(0).cpu().numpy()
    else:
        predicted = np.asarray(predicted, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if predicted.shape != target.shape:
            raise ValueError("shape mismatch")
        values = ((predicted - target) ** 2).sum(-1)
    return SaliencyMap(values, frame_id, clip_id)


def frame_score(smap: SaliencyMap) -> float:
    return float(smap.values.sum())


def minmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


@dataclass
class ScoreSeries:
    """Per-clip frame scores. ``frames[c]`` holds the frame indices that
    ``raw[c]`` refers to (the targets of the sliding windows)."""
    raw: dict[str, np.ndarray] = field(default_factory=dict)
    frames: dict[str, np.ndarray] = field(default_factory=dict)
    normalization: str = "per_video_minmax"

    def add(self, clip_id: str, frame_indices, scores) -> None:
        self.frames[clip_id] = np.asarray(frame_indices, dtype=np.int64)
        self.raw[clip_id] = np.asarray(scores, dtype=np.float64)

    def normalized(self, clip_id: str, normalization: str | None = None) -> np.ndarray:
        mode = normalization or self.normalization
        if mode not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {mode!r}")
        raw = self.raw[clip_id]
        return minmax(raw) if mode == "per_video_minmax" else raw.copy()

    def clips(self) -> list[str]:
        return sorted(self.raw)

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for cid in self.clips():
            norm = self.normalized(cid, "per_video_minmax")
            with open(out_dir / f"{cid}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame_index", "raw_score", "normalized_score"])
                for f, r, nv in zip(self.frames[cid], self.raw[cid], norm):
                    w.writerow([int(f), repr(float(r)), repr(float(nv))])

    @classmethod
    def load(cls, score_dir: str | Path, normalization: str = "per_video_minmax") -> "ScoreSeries":
        score_dir = Path(score_dir)
        s = cls(normalization=normalization)
        files = sorted(score_dir.glob("*.csv"))
        if not files:
            raise EvaluationError(f"no score CSV files in {score_dir}")
        for path in files:
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            s.add(path.stem, [int(r["frame_index"]) for r in rows], [float(r["raw_score"]) for r in rows])
        return s


def auc_mann_whitney(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC-AUC as the Mann-Whitney statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        which = "positive" if n_pos == 0 else "negative"
        raise EvaluationError(f"degenerate labels: no {which} frames among {labels.size}")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact ROC: one point per distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / max(labels.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~labels).sum(), 1)]
    return fpr, tpr, np.r_[np.inf, s[last]]


def collect(scores: ScoreSeries, labels: GroundTruthLabels, normalization: str | None = None):
    """Concatenate (score, flag) pairs over all clips in sorted clip order."""
    all_s, all_y = [], []
    for cid in scores.clips():
        if cid not in labels.frame_flags:
            raise EvaluationError(f"no labels for clip {cid!r}")
        flags = labels.frame_flags[cid]
        idx = scores.frames[cid]
        if idx.size and (idx.min() < 0 or idx.max() >= len(flags)):
            raise EvaluationError(f"clip {cid!r}: score frame index outside label range 0..{len(flags) - 1}")
        if idx.size != scores.raw[cid].size:
            raise EvaluationError(f"clip {cid!r}: {scores.raw[cid].size} scores for {idx.size} frames")
        all_s.append(scores.normalized(cid, normalization))
        all_y.append(flags[idx])
    return np.concatenate(all_s), np.concatenate(all_y)


def evaluate_auc(scores: ScoreSeries, labels: GroundTruthLabels, normalization: str | None = None) -> float:
    s, y = collect(scores, labels, normalization)
    return auc_mann_whitney(s, y)


@torch.no_grad()
def predict_clip(model, clip: VideoClip, n: int, batch_size: int = 16, device: str = "cpu"):
    """Yields ``(frame_index, predicted, target)`` tensors (C x H x W) over a clip."""
    model.eval()
    windows = make_windows(clip, n)
    ds = WindowDataset(windows)
    for start in range(0, len(ds), batch_size):
        items = [ds[i] for i in range(start, min(start + batch_size, len(ds)))]
        x = torch.stack([a for a, _ in items]).to(device=device, dtype=next(model.parameters()).dtype)
        y = torch.stack([b for _, b in items]).to(x)
        out = model(x).predicted
        for j in range(len(items)):
            yield windows[start + j].target_index, out[j], y[j]


def score_clips(model, clips: Iterable[VideoClip], n: int, batch_size: int = 16,
                on_frame=None) -> ScoreSeries:
    """Frame scores for every window target in ``clips``. ``on_frame`` is
    called with each ``(clip, SaliencyMap, predicted, target)``."""
    series = ScoreSeries()
    for clip in clips:
        idx, vals = [], []
        for t, pred, target in predict_clip(model, clip, n, batch_size):
            smap = saliency(pred, target, t, clip.clip_id)
            idx.append(t)
            vals.append(frame_score(smap))
            if on_frame is not None:
                on_frame(clip, smap, pred, target)
        series.add(clip.clip_id, idx, vals)
    return series
