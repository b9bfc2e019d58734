"""Training loop, run configuration and the temporal x codebook ablation."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .codebook import QuantizationError, codebook_init
from .dataset import DEFAULT_IMAGE_SIZE, WindowDataset, load_dataset, windows_for
from .detect import evaluate_auc, score_clips
from .losses import LossWeights, total_loss
from .model import NetworkConfig, build_model

log = logging.getLogger(__name__)

DEFAULT_LR = {"prediction": 2e-4, "reconstruction": 2e-5}
METRIC_FIELDS = ["step", "epoch", "pred", "embed", "commit", "sep", "total"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ArchConfig:
    n: int = 5
    levels: int = 4
    base_channels: int = 64
    bottleneck_dim: int = 512
    codebook_size: int = 256
    codebook_init: str = "uniform_small"


@dataclass
class TrainConfig:
    dataset_root: str = ""
    layout: str = "ucsd_avenue"
    image_size: int | None = DEFAULT_IMAGE_SIZE
    out_dir: str = "runs/train"
    mode: str = "prediction"
    use_codebook: bool = True
    learning_rate: float | None = None  # None: 2e-4 prediction, 2e-5 reconstruction
    epochs: int = 60
    batch_size: int = 8
    seed: int = 0
    grad_clip: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    network: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.network, dict):
            self.network = ArchConfig(**self.network)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.network_config()  # validates mode / n

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.mode]

    @property
    def n(self) -> int:
        return self.network.n if self.mode == "prediction" else 0

    def network_config(self) -> NetworkConfig:
        a = self.network
        return NetworkConfig(n=self.n, levels=a.levels, base_channels=a.base_channels,
                             bottleneck_dim=a.bottleneck_dim, mode=self.mode,
                             use_codebook=self.use_codebook, codebook_size=a.codebook_size)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    metrics: Path
    epoch_pred: list[float]
    epoch_total: list[float]
    steps: int
    seconds: float


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    return torch.Generator().manual_seed(seed)


def train(config: TrainConfig, dataset=None) -> TrainResult:
    """Train one model. Writes ``last.pt`` (every epoch end, plus an epoch-0
    snapshot before the first step), ``best.pt`` and ``metrics.csv`` to
    ``config.out_dir``."""
    t_start = time.perf_counter()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = _seed_everything(config.seed)
    if dataset is None:
        dataset = load_dataset(config.dataset_root, config.layout, config.image_size)
    windows = windows_for(dataset.training, config.n)
    if not windows:
        raise ValueError("training split yields no windows")
    loader = torch.utils.data.DataLoader(WindowDataset(windows), batch_size=config.batch_size,
                                         shuffle=True, generator=gen, num_workers=0)

    netcfg = config.network_config()
    model = build_model(netcfg, seed=config.seed)
    if netcfg.use_codebook and config.network.codebook_init != "uniform_small":
        x, _ = next(iter(torch.utils.data.DataLoader(WindowDataset(windows), batch_size=config.batch_size)))
        model.eval()
        with torch.no_grad():
            z_e, _ = model.encode(x)
        feats = z_e.permute(0, 2, 3, 1).reshape(-1, netcfg.bottleneck_dim)
        fresh = codebook_init(netcfg.codebook_size, netcfg.bottleneck_dim, config.seed,
                              config.network.codebook_init, feats)
        model.codebook.entries.data.copy_(fresh.entries.data)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    last, best = out / "last.pt", out / "best.pt"
    meta = {"train_config": config.to_dict(), "image_size": config.image_size}
    save_checkpoint(last, model, opt, epoch=0, **meta)
    best_loss = math.inf
    epoch_pred, epoch_total = [], []
    step = 0
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for epoch in range(1, config.epochs + 1):
            model.train()
            sums = np.zeros(2)
            count = 0
            for x, y in loader:
                try:
                    output = model(x)
                except QuantizationError as exc:
                    fh.flush()
                    raise TrainingDiverged(f"step {step + 1}: {exc}; last good checkpoint {last}") from exc
                br = total_loss(output.predicted, y, output.quantization, config.weights)
                values = br.items()
                for term in ("pred", "embed", "commit", "sep", "total"):
                    if not math.isfinite(values[term]):
                        fh.flush()
                        raise TrainingDiverged(
                            f"step {step + 1}: non-finite {term} loss; last good checkpoint {last}")
                opt.zero_grad(set_to_none=True)
                br.total.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                step += 1
                writer.writerow({"step": step, "epoch": epoch, **{k: repr(v) for k, v in values.items()}})
                sums += len(x) * np.array([values["pred"], values["total"]])
                count += len(x)
            fh.flush()
            mean_pred, mean_total = sums / count
            epoch_pred.append(float(mean_pred))
            epoch_total.append(float(mean_total))
            log.info("epoch %d/%d pred %.4g total %.4g", epoch, config.epochs, mean_pred, mean_total)
            save_checkpoint(last, model, opt, epoch=epoch, **meta)
            if mean_total < best_loss:
                best_loss = mean_total
                save_checkpoint(best, model, opt, epoch=epoch, **meta)
    model.eval()
    return TrainResult(last, best, metrics_path, epoch_pred, epoch_total, step,
                       time.perf_counter() - t_start)


ABLATION_CELLS = [("reconstruction", False), ("reconstruction", True),
                  ("prediction", False), ("prediction", True)]


@dataclass
class AblationRow:
    temporal: bool
    codebook: bool
    auc: float
    auc_raw: float
    checkpoint: str = ""
    error: str = ""
    seconds: float = math.nan  # training plus scoring


def format_table(rows: list[AblationRow]) -> str:
    mark = {True: "yes", False: "no"}
    lines = [f"{'Temporal':<10}{'Codebook':<10}{'AUC':>8}"]
    for r in rows:
        auc = "failed" if r.error else f"{100 * r.auc:.1f}"
        lines.append(f"{mark[r.temporal]:<10}{mark[r.codebook]:<10}{auc:>8}")
    return "\n".join(lines)


def run_ablation(base: TrainConfig, dataset=None, normalization: str = "per_video_minmax") -> list[AblationRow]:
    """Train and evaluate {reconstruction, prediction} x {no codebook, codebook}.

    Each cell trains under ``<base.out_dir>/<mode>_<codebook|plain>``; a
    failing cell is recorded and the rest still run. Writes ``ablation.csv``.
    """
    from .checkpoint import load_checkpoint

    if dataset is None:
        dataset = load_dataset(base.dataset_root, base.layout, base.image_size)
    root = Path(base.out_dir)
    rows = []
    for mode, cb in ABLATION_CELLS:
        cell_dir = root / f"{mode}_{'codebook' if cb else 'plain'}"
        t0 = time.perf_counter()
        try:
            cfg = base.replace(mode=mode, use_codebook=cb, out_dir=str(cell_dir))
            result = train(cfg, dataset)
            model, _ = load_checkpoint(result.checkpoint)
            scores = score_clips(model, dataset.testing, cfg.n)
            scores.save(cell_dir / "scores")
            rows.append(AblationRow(mode == "prediction", cb,
                                    evaluate_auc(scores, dataset.labels, normalization),
                                    evaluate_auc(scores, dataset.labels, "none"),
                                    str(result.checkpoint), seconds=time.perf_counter() - t0))
        except Exception as exc:  # a failing cell must not stop the others
            log.exception("ablation cell %s/%s failed", mode, cb)
            rows.append(AblationRow(mode == "prediction", cb, math.nan, math.nan, "",
                                    f"{type(exc).__name__}: {exc}", time.perf_counter() - t0))
        log.info("ablation %s codebook=%s done", mode, cb)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Temporal", "Codebook", "AUC", "AUC_raw", "seconds", "checkpoint", "error"])
        for r in rows:
            w.writerow([int(r.temporal), int(r.codebook), repr(r.auc), repr(r.auc_raw), f"{r.seconds:.1f}",
                        r.checkpoint, r.error])
    return rows
