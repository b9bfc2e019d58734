"""Deterministic synthetic surveillance-style videos with injected anomalies.

A fixed scene (textured background, a walkway band and an off-limits region)
is crossed by normal entities that enter at either edge of the walkway and
walk out the other side, so the crowd size fluctuates over time. Test clips get
scheduled anomaly segments of three kinds:

``novel_shape``
    an entity whose appearance never occurs in training (object anomaly)
``fast_mover``
    a normal-looking pedestrian moving at ``fast_factor`` times normal speed
    (action anomaly)
``forbidden_region``
    a pedestrian walking inside the off-limits region (location anomaly)

Config schema (YAML, every key optional)::

    frame_size: 128            # square frames, pixels
    fps: 25.0
    train_clips: 4
    test_clips: 4
    clip_length: 80
    crowd_size: 6.0            # mean number of normal entities in view
    normal_kinds: [pedestrian] # templates from ENTITY_TEMPLATES
    normal_speed: 2            # pixels per frame
    fast_factor: 3
    walkway: [64, 120]         # [y1, y2) rows normal entities use
    forbidden_region: [0, 8, 128, 52]   # [x1, y1, x2, y2)
    noise_std: 0.0             # additive pixel noise, 0-255 scale
    anomalies:                 # omitted -> one segment per test clip
      - {clip: 0, kind: fast_mover, start: 30, length: 20}
      - {clip: 1, kind: novel_shape, start: 10, length: 25, entity: cart, label: cart}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

CONFIG_NAME = "synthetic.yaml"
ANOMALY_KINDS = ("novel_shape", "fast_mover", "forbidden_region")


class SyntheticConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EntityTemplate:
    shape: str  # "rect" | "disc"
    width: int
    height: int
    color: tuple[int, int, int]
    object_label: str
    action_label: str | None = None


ENTITY_TEMPLATES = {
    "pedestrian": EntityTemplate("rect", 6, 12, (225, 225, 225), "person", "walking"),
    "dog": EntityTemplate("rect", 9, 6, (160, 120, 80), "dog"),
    "cart": EntityTemplate("disc", 10, 10, (200, 70, 50), "cart"),
    "vehicle": EntityTemplate("rect", 24, 14, (40, 60, 220), "car"),
}

DEFAULT_LABELS = {"fast_mover": "running", "forbidden_region": "wrong location"}


@dataclass
class Injection:
    clip: int
    kind: str
    start: int
    length: int
    entity: str = "cart"
    label: str | None = None

    @property
    def explanation(self) -> str:
        if self.label:
            return self.label
        if self.kind == "novel_shape":
            return ENTITY_TEMPLATES[self.entity].object_label
        return DEFAULT_LABELS[self.kind]


@dataclass
class SyntheticConfig:
    frame_size: int = 128
    fps: float = 25.0
    train_clips: int = 4
    test_clips: int = 4
    clip_length: int = 80
    crowd_size: float = 6.0
    normal_kinds: list[str] = field(default_factory=lambda: ["pedestrian"])
    normal_speed: int = 2
    fast_factor: int = 3
    walkway: tuple[int, int] = (64, 120)
    forbidden_region: tuple[int, int, int, int] = (0, 8, 128, 52)
    noise_std: float = 0.0
    anomalies: list[Injection] | None = None

    def __post_init__(self):
        self.walkway = tuple(self.walkway)
        self.forbidden_region = tuple(self.forbidden_region)
        if self.anomalies is not None:
            self.anomalies = [a if isinstance(a, Injection) else Injection(**a) for a in self.anomalies]
        self.validate()

    @classmethod
    def from_dict(cls, d: dict | None) -> "SyntheticConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SyntheticConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        data.pop("seed", None)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["walkway"] = list(self.walkway)
        d["forbidden_region"] = list(self.forbidden_region)
        return d

    def schedule(self) -> list[Injection]:
        if self.anomalies is not None:
            return list(self.anomalies)
        kinds = ANOMALY_KINDS
        length = max(1, self.clip_length // 4)
        start = self.clip_length // 3
        return [Injection(clip=i, kind=kinds[i % len(kinds)], start=start, length=length)
                for i in range(self.test_clips)]

    def validate(self) -> None:
        s = self.frame_size
        if s < 16:
            raise SyntheticConfigError("frame_size must be at least 16")
        if self.clip_length < 2 or self.train_clips < 1 or self.test_clips < 0:
            raise SyntheticConfigError("clip_length >= 2, train_clips >= 1, test_clips >= 0 required")
        for kind in self.normal_kinds:
            if kind not in ENTITY_TEMPLATES:
                raise SyntheticConfigError(f"unknown entity kind {kind!r}")
        y1, y2 = self.walkway
        if not (0 <= y1 < y2 <= s):
            raise SyntheticConfigError(f"walkway {self.walkway} outside frame of size {s}")
        tallest = max(ENTITY_TEMPLATES[k].height for k in self.normal_kinds)
        if y2 - y1 < tallest:
            raise SyntheticConfigError("walkway too narrow for normal entities")
        x1, fy1, x2, fy2 = self.forbidden_region
        if not (0 <= x1 < x2 <= s and 0 <= fy1 < fy2 <= s):
            raise SyntheticConfigError(f"forbidden_region {self.forbidden_region} outside frame of size {s}")
        if max(fy1, y1) < min(fy2, y2):
            raise SyntheticConfigError("forbidden_region overlaps the walkway")
        for inj in self.schedule():
            if inj.kind not in ANOMALY_KINDS:
                raise SyntheticConfigError(f"unknown anomaly kind {inj.kind!r}")
            if not 0 <= inj.clip < self.test_clips:
                raise SyntheticConfigError(f"anomaly clip index {inj.clip} out of range")
            if inj.start < 0 or inj.length < 1 or inj.start + inj.length > self.clip_length:
                raise SyntheticConfigError(f"anomaly segment [{inj.start}, {inj.start + inj.length}) outside clip")
            if inj.kind == "novel_shape":
                if inj.entity not in ENTITY_TEMPLATES:
                    raise SyntheticConfigError(f"unknown entity kind {inj.entity!r}")
                if inj.entity in self.normal_kinds:
                    raise SyntheticConfigError(f"novel shape {inj.entity!r} is also a normal kind")
                t = ENTITY_TEMPLATES[inj.entity]
                if t.height > y2 - y1 or t.width > s:
                    raise SyntheticConfigError(f"entity {inj.entity!r} does not fit the walkway")
            if inj.kind == "forbidden_region":
                t = ENTITY_TEMPLATES["pedestrian"]
                if t.width > x2 - x1 or t.height > fy2 - fy1:
                    raise SyntheticConfigError("forbidden_region too small for a pedestrian")


@dataclass
class _Entity:
    template: str
    x: int
    y: int
    vx: int
    action: str | None
    # bounce between these x positions; None for entities that walk off-screen
    x_lo: int | None = None
    x_hi: int | None = None
    injection: Injection | None = None

    def step(self):
        self.x += self.vx
        if self.x_lo is None:
            return
        if self.x < self.x_lo:
            self.x = 2 * self.x_lo - self.x
            self.vx = -self.vx
        elif self.x > self.x_hi:
            self.x = 2 * self.x_hi - self.x
            self.vx = -self.vx

    def box(self) -> list[int]:
        t = ENTITY_TEMPLATES[self.template]
        return [self.x, self.y, self.x + t.width, self.y + t.height]

    def gone(self, size: int) -> bool:
        x1, _, x2, _ = self.box()
        return (self.vx > 0 and x1 >= size) or (self.vx < 0 and x2 <= 0)


def _background(cfg: SyntheticConfig, seed: int) -> np.ndarray:
    s = cfg.frame_size
    rng = np.random.default_rng([seed, 7])
    yy, xx = np.mgrid[0:s, 0:s] / s
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 8 * np.sin(2 * np.pi * 3 * xx + phase[0]) * np.cos(2 * np.pi * 2 * yy + phase[1])
    bg = np.empty((s, s, 3), dtype=np.float64)
    bg[:] = (90, 90, 95)
    bg += texture[..., None]
    y1, y2 = cfg.walkway
    bg[y1:y2] += 25
    x1, fy1, x2, fy2 = cfg.forbidden_region
    bg[fy1:fy2, x1:x2] = (60, 105, 60)
    bg[fy1:fy2, x1:x2] += texture[fy1:fy2, x1:x2, None] * 0.5
    return bg


def _draw(frame: np.ndarray, e: _Entity) -> None:
    t = ENTITY_TEMPLATES[e.template]
    s = frame.shape[0]
    x1, y1, x2, y2 = e.box()
    if t.shape == "rect":
        frame[max(y1, 0):min(y2, s), max(x1, 0):min(x2, s)] = t.color
        return
    yy, xx = np.mgrid[0:s, 0:s]
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    mask = ((xx + 0.5 - cx) / (t.width / 2)) ** 2 + ((yy + 0.5 - cy) / (t.height / 2)) ** 2 <= 1.0
    frame[mask] = t.color


def _bouncer(rng: np.random.Generator, template: str, speed: int,
             region: tuple[int, int, int, int], action: str | None) -> _Entity:
    t = ENTITY_TEMPLATES[template]
    x1, y1, x2, y2 = region
    x_lo, x_hi = x1, x2 - t.width
    y = int(rng.integers(y1, y2 - t.height + 1))
    x = int(rng.integers(x_lo, x_hi + 1))
    vx = speed if rng.random() < 0.5 else -speed
    return _Entity(template, x, y, vx, action, x_lo, x_hi)


class _Crowd:
    """Normal entities entering at a random edge of the walkway and leaving at the other."""

    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        s = cfg.frame_size
        widest = max(ENTITY_TEMPLATES[k].width for k in cfg.normal_kinds)
        crossing = (s + widest) / cfg.normal_speed
        self.rate = cfg.crowd_size / crossing
        self.members: list[_Entity] = []
        for _ in range(int(2 * crossing)):  # warm up to the steady state
            self.step()

    def step(self):
        cfg, rng, s = self.cfg, self.rng, self.cfg.frame_size
        for e in self.members:
            e.step()
        self.members = [e for e in self.members if not e.gone(s)]
        for _ in range(rng.poisson(self.rate)):
            kind = cfg.normal_kinds[int(rng.integers(len(cfg.normal_kinds)))]
            t = ENTITY_TEMPLATES[kind]
            y = int(rng.integers(cfg.walkway[0], cfg.walkway[1] - t.height + 1))
            if rng.random() < 0.5:
                e = _Entity(kind, -t.width, y, cfg.normal_speed, t.action_label)
            else:
                e = _Entity(kind, s, y, -cfg.normal_speed, t.action_label)
            self.members.append(e)


def _clipped(box: list[int], size: int) -> list[int] | None:
    x1, y1, x2, y2 = box
    x1, y1, x2, y2 = max(x1, 0), max(y1, 0), min(x2, size), min(y2, size)
    if x1 >= x2 or y1 >= y2:
        return None
    return [x1, y1, x2, y2]


def render_clip(cfg: SyntheticConfig, seed: int, split: str, index: int,
                injections: list[Injection] = ()) -> tuple[np.ndarray, list[list[dict]]]:
    """Render one clip. Returns uint8 frames (T, S, S, 3) and per-frame detection boxes."""
    s = cfg.frame_size
    rng = np.random.default_rng([seed, 0 if split == "training" else 1, index])
    bg = _background(cfg, seed)
    crowd = _Crowd(cfg, rng)
    walk_region = (0, cfg.walkway[0], s, cfg.walkway[1])
    anomalous = []
    for inj in injections:
        if inj.kind == "novel_shape":
            e = _bouncer(rng, inj.entity, cfg.normal_speed, walk_region, None)
        elif inj.kind == "fast_mover":
            e = _bouncer(rng, "pedestrian", cfg.normal_speed * cfg.fast_factor, walk_region, "running")
        else:
            e = _bouncer(rng, "pedestrian", cfg.normal_speed, cfg.forbidden_region, "walking")
        e.injection = inj
        anomalous.append(e)

    frames = np.empty((cfg.clip_length, s, s, 3), dtype=np.uint8)
    boxes: list[list[dict]] = []
    for t in range(cfg.clip_length):
        frame = bg.copy()
        frame_boxes = []
        active = [e for e in anomalous if e.injection.start <= t < e.injection.start + e.injection.length]
        for e in crowd.members + active:
            box = _clipped(e.box(), s)
            if box is None:
                continue
            _draw(frame, e)
            tmpl = ENTITY_TEMPLATES[e.template]
            frame_boxes.append({"box": box, "label": tmpl.object_label, "score": 1.0, "source": "object"})
            if e.action:
                frame_boxes.append({"box": box, "label": e.action, "score": 1.0, "source": "action"})
        if cfg.noise_std > 0:
            frame += rng.normal(0.0, cfg.noise_std, size=frame.shape)
        frames[t] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        boxes.append(frame_boxes)
        crowd.step()
        for e in active:
            e.step()
    return frames, boxes


def clip_name(index: int) -> str:
    return f"{index + 1:02d}"


def generate_synthetic(config: SyntheticConfig, seed: int, out: str | Path) -> Path:
    """Write a full synthetic dataset under ``out`` and return the root."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule()
    meta = config.to_dict()
    meta["anomalies"] = [asdict(a) for a in schedule]
    meta["seed"] = seed
    (out / CONFIG_NAME).write_text(yaml.safe_dump(meta, sort_keys=True))

    for split, count in (("training", config.train_clips), ("testing", config.test_clips)):
        det_lines = []
        for i in range(count):
            injections = [a for a in schedule if a.clip == i] if split == "testing" else []
            frames, boxes = render_clip(config, seed, split, i, injections)
            cid = clip_name(i)
            clip_dir = out / split / "frames" / cid
            clip_dir.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                Image.fromarray(frame).save(clip_dir / f"{t:06d}.png")
            for t, fb in enumerate(boxes):
                det_lines.append(json.dumps({"clip": cid, "frame": t, "boxes": fb}))
            if split == "testing":
                flags = np.zeros(config.clip_length, dtype=np.int64)
                expl: dict[int, list[str]] = {}
                for inj in injections:
                    flags[inj.start:inj.start + inj.length] = 1
                    for t in range(inj.start, inj.start + inj.length):
                        expl.setdefault(t, []).append(inj.explanation)
                (out / split / "labels").mkdir(parents=True, exist_ok=True)
                (out / split / "labels" / f"{cid}.csv").write_text("".join(f"{v}\n" for v in flags))
                (out / split / "explanations").mkdir(parents=True, exist_ok=True)
                with open(out / split / "explanations" / f"{cid}.jsonl", "w") as fh:
                    for t in range(config.clip_length):
                        fh.write(json.dumps({"frame": t, "labels": expl.get(t, [])}) + "\n")
        (out / split / "detections.jsonl").write_text("".join(line + "\n" for line in det_lines))
    return out
