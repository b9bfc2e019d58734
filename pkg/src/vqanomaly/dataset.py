"""Frame datasets in the standard anomaly-benchmark layout.

Layout on disk::

    root/
      training/frames/<clip_id>/000000.png ...
      testing/frames/<clip_id>/000000.png ...
      testing/labels/<clip_id>.csv            # one 0/1 flag per line
      testing/explanations/<clip_id>.jsonl    # {"frame": int, "labels": [...]}

Frames are resized to ``image_size`` with bilinear interpolation, grayscale
sources are replicated to three channels and pixel values are mapped linearly
from [0, 255] onto [-1, 1].
"""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
LAYOUTS = ("ucsd_avenue", "synthetic")
DEFAULT_IMAGE_SIZE = 256
CHANNELS = 3


class DatasetError(ValueError):
    pass


def normalize(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def denormalize(img: np.ndarray) -> np.ndarray:
    out = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def read_frame(path: Path, image_size: int | None = None) -> np.ndarray:
    """Read one image as uint8 H x W x 3."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


class VideoClip:
    """An ordered sequence of frames read lazily from disk.

    Indexing returns a normalized float32 ``H x W x 3`` array. A small LRU
    cache keeps recently read frames, which is what sliding windows need.
    """

    def __init__(self, clip_id: str, paths: Sequence[Path], image_size: int | None = DEFAULT_IMAGE_SIZE,
                 fps: float = 25.0, cache_size: int = 64):
        if not paths:
            raise DatasetError(f"clip {clip_id!r}: no frames")
        self.clip_id = clip_id
        self.paths = list(paths)
        self.image_size = image_size
        self.fps = fps
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_size = cache_size
        with Image.open(self.paths[0]) as im:
            w, h = im.size
        self.source_size = (h, w)

    def __len__(self) -> int:
        return len(self.paths)

    def __repr__(self) -> str:
        return f"VideoClip({self.clip_id!r}, frames={len(self)})"

    def raw(self, i: int) -> np.ndarray:
        if i < 0:
            i += len(self)
        if i in self._cache:
            self._cache.move_to_end(i)
            return self._cache[i]
        img = read_frame(self.paths[i], self.image_size)
        if self._cache:
            first = next(iter(self._cache.values()))
            if img.shape != first.shape:
                raise DatasetError(f"clip {self.clip_id!r}: frame {i} has shape {img.shape}, expected {first.shape}")
        self._cache[i] = img
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return img

    def __getitem__(self, i: int) -> np.ndarray:
        return normalize(self.raw(i))

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.raw(0).shape

    @property
    def frames(self) -> np.ndarray:
        """All frames, normalized, as a T x H x W x C array."""
        return np.stack([self[i] for i in range(len(self))])


@dataclass
class FrameWindow:
    """n consecutive frames stacked channel-wise plus the frame that follows.

    With ``n == 0`` (reconstruction) the input is the target frame itself.
    """
    clip: VideoClip
    t0: int
    n: int

    @property
    def clip_id(self) -> str:
        return self.clip.clip_id

    @property
    def target_index(self) -> int:
        return self.t0 + self.n

    @property
    def target(self) -> np.ndarray:
        return self.clip[self.t0 + self.n]

    @property
    def inputs(self) -> np.ndarray:
        if self.n == 0:
            return self.target
        return np.concatenate([self.clip[self.t0 + i] for i in range(self.n)], axis=-1)


def make_windows(clip: VideoClip, n: int) -> list[FrameWindow]:
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    count = len(clip) - n
    if count <= 0:
        log.warning("clip %s has %d frames, too short for n=%d; no windows", clip.clip_id, len(clip), n)
        return []
    return [FrameWindow(clip, t0, n) for t0 in range(count)]


@dataclass
class GroundTruthLabels:
    frame_flags: dict[str, np.ndarray] = field(default_factory=dict)
    explanation_labels: dict[str, dict[int, list[str]]] = field(default_factory=dict)

    def validate(self, clips: Sequence[VideoClip]) -> None:
        for clip in clips:
            flags = self.frame_flags.get(clip.clip_id)
            if flags is None:
                raise DatasetError(f"clip {clip.clip_id!r}: missing label file")
            if len(flags) != len(clip):
                raise DatasetError(f"clip {clip.clip_id!r}: label length {len(flags)} ≠ {len(clip)}")
        for clip_id, per_frame in self.explanation_labels.items():
            flags = self.frame_flags.get(clip_id)
            for frame, labels in per_frame.items():
                if not labels:
                    continue
                if flags is None or frame >= len(flags) or flags[frame] != 1:
                    raise DatasetError(
                        f"clip {clip_id!r}: frame {frame} has explanation labels but is not flagged anomalous")


@dataclass
class AnomalyDataset:
    root: Path
    layout: str
    training: list[VideoClip]
    testing: list[VideoClip]
    labels: GroundTruthLabels

    def clip(self, clip_id: str) -> VideoClip:
        for c in self.testing + self.training:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)


def _frame_paths(clip_dir: Path) -> list[Path]:
    return sorted(p for p in clip_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def _load_split(split_dir: Path, image_size: int | None, fps: float) -> list[VideoClip]:
    frames_dir = split_dir / "frames"
    if not frames_dir.is_dir():
        raise DatasetError(f"missing directory {frames_dir}")
    clips = []
    for clip_dir in sorted(d for d in frames_dir.iterdir() if d.is_dir()):
        paths = _frame_paths(clip_dir)
        if not paths:
            raise DatasetError(f"clip {clip_dir.name!r}: no frames in {clip_dir}")
        clips.append(VideoClip(clip_dir.name, paths, image_size=image_size, fps=fps))
    return clips


def read_flags(path: Path) -> np.ndarray:
    values = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise DatasetError(f"{path}:{lineno}: expected 0 or 1, got {line!r}")
        values.append(int(line))
    return np.asarray(values, dtype=np.int64)


def read_explanations(path: Path) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[int(rec["frame"])] = [str(s) for s in rec["labels"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed explanation record ({exc})") from exc
    return out


def load_dataset(root: str | Path, layout: str = "ucsd_avenue", image_size: int | None = DEFAULT_IMAGE_SIZE,
                 fps: float = 25.0) -> AnomalyDataset:
    root = Path(root)
    if layout not in LAYOUTS:
        raise DatasetError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if layout == "synthetic":
        from .synthetic import CONFIG_NAME, SyntheticConfig
        if not (root / CONFIG_NAME).is_file():
            raise DatasetError(f"{root} has no {CONFIG_NAME}; not a synthetic dataset")
        fps = SyntheticConfig.load(root / CONFIG_NAME).fps

    training = _load_split(root / "training", image_size, fps)
    testing = _load_split(root / "testing", image_size, fps)

    labels = GroundTruthLabels()
    label_dir = root / "testing" / "labels"
    expl_dir = root / "testing" / "explanations"
    for clip in testing:
        path = label_dir / f"{clip.clip_id}.csv"
        if not path.is_file():
            raise DatasetError(f"clip {clip.clip_id!r}: missing label file {path}")
        labels.frame_flags[clip.clip_id] = read_flags(path)
        expl = expl_dir / f"{clip.clip_id}.jsonl"
        if expl.is_file():
            labels.explanation_labels[clip.clip_id] = read_explanations(expl)
    labels.validate(testing)
    return AnomalyDataset(root, layout, training, testing, labels)


class WindowDataset(torch.utils.data.Dataset):
    """Torch view over a list of windows: yields ``(inputs, target)`` as C x H x W tensors."""

    def __init__(self, windows: Sequence[FrameWindow]):
        self.windows = list(windows)

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        w = self.windows[i]
        x = torch.from_numpy(np.ascontiguousarray(w.inputs.transpose(2, 0, 1)))
        y = torch.from_numpy(np.ascontiguousarray(w.target.transpose(2, 0, 1)))
        return x, y


def windows_for(clips: Sequence[VideoClip], n: int) -> list[FrameWindow]:
    out = []
    for clip in clips:
        out.extend(make_windows(clip, n))
    return out


def detect_layout(root: str | Path) -> str:
    from .synthetic import CONFIG_NAME
    return "synthetic" if (Path(root) / CONFIG_NAME).is_file() else "ucsd_avenue"
