"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Runtime failures
print one line to stderr: ``error[<category>]: <message>``.

Training configuration is layered: YAML file < ``VQAD_*`` environment
variables < ``--override key=value`` flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("vqanomaly")

MANIFEST = "manifest.json"
PRECEDENCE = "Config precedence: file < VQAD_* environment (nested keys with __) < --override key=value."


class CLIError(RuntimeError):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class Manifest:
    """``manifest.json`` in an output directory, written before the work starts."""

    def __init__(self, out_dir, command: str, argv: list[str], config: dict, seed: int | None = None):
        self.path = Path(out_dir) / MANIFEST
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._t0 = time.perf_counter()
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "seed": seed,
            "version": __version__,
            "python": platform.python_version(),
            "started": datetime.now(timezone.utc).isoformat(),
            "outputs": {},
            "status": "running",
        }
        self.write()

    def write(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, default=str))
        tmp.replace(self.path)

    def finish(self, status: str = "ok", **outputs):
        self.data["outputs"].update({k: str(v) for k, v in outputs.items()})
        self.data["status"] = status
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["seconds"] = round(time.perf_counter() - self._t0, 3)
        self.write()


def _load_dataset(root, layout=None, image_size=None, need_frames=True):
    from .dataset import DatasetError, detect_layout, load_dataset
    layout = layout or detect_layout(root)
    try:
        return load_dataset(root, layout, image_size)
    except DatasetError as exc:
        raise CLIError("dataset", str(exc)) from exc


def _load_checkpoint(path):
    from .checkpoint import CheckpointError, load_checkpoint
    try:
        return load_checkpoint(path)
    except (CheckpointError, FileNotFoundError) as exc:
        raise CLIError("checkpoint", str(exc)) from exc


def _train_config(args):
    from .config import OverrideError, load_layered
    from .train import TrainConfig
    try:
        data = load_layered(args.config, args.override)
        return TrainConfig.from_dict(data)
    except (OverrideError, ValueError, TypeError, OSError) as exc:
        raise CLIError("config", str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(args, argv):
    from .synthetic import SyntheticConfig, SyntheticConfigError, generate_synthetic
    try:
        cfg = SyntheticConfig.load(args.config) if args.config else SyntheticConfig()
    except (SyntheticConfigError, TypeError, OSError) as exc:
        raise CLIError("config", str(exc)) from exc
    m = Manifest(args.out, "gen-synthetic", argv, cfg.to_dict(), args.seed)
    generate_synthetic(cfg, args.seed, args.out)
    m.finish(root=args.out)
    print(f"wrote synthetic dataset to {args.out}")


def cmd_train(args, argv):
    from .train import TrainingDiverged, train
    cfg = _train_config(args)
    m = Manifest(cfg.out_dir, "train", argv, cfg.to_dict(), cfg.seed)
    ds = _load_dataset(cfg.dataset_root, cfg.layout, cfg.image_size)
    try:
        result = train(cfg, ds)
    except TrainingDiverged as exc:
        m.finish("diverged")
        raise CLIError("training", str(exc)) from exc
    m.finish(checkpoint=result.checkpoint, best_checkpoint=result.best_checkpoint, metrics=result.metrics)
    print(f"checkpoint {result.checkpoint}\nmetrics {result.metrics}")


def cmd_ablate(args, argv):
    from .train import format_table, run_ablation
    cfg = _train_config(args)
    m = Manifest(cfg.out_dir, "ablate", argv, cfg.to_dict(), cfg.seed)
    ds = _load_dataset(cfg.dataset_root, cfg.layout, cfg.image_size)
    rows = run_ablation(cfg, ds, args.normalization)
    m.finish(table=Path(cfg.out_dir) / "ablation.csv")
    print(format_table(rows))
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"cell temporal={r.temporal} codebook={r.codebook} failed: {r.error}", file=sys.stderr)
    if failed:
        raise CLIError("training", f"{len(failed)} ablation cell(s) failed")


def cmd_score(args, argv):
    from .detect import score_clips
    from .plotting import save_heatmap
    model, state = _load_checkpoint(args.checkpoint)
    image_size = args.image_size or state.get("image_size")
    ds = _load_dataset(args.dataset, args.layout, image_size)
    out = Path(args.out)
    m = Manifest(out, "score", argv, {"checkpoint": args.checkpoint, "dataset": args.dataset,
                                      "layout": ds.layout, "image_size": image_size,
                                      "split": args.split, "heatmap_every": args.heatmap_every})
    clips = ds.testing if args.split == "testing" else ds.training
    on_frame = None
    if args.heatmap_every:
        heat_dir = out / "heatmaps"
        heat_dir.mkdir(parents=True, exist_ok=True)

        def on_frame(clip, smap, pred, target):
            if smap.frame_id % args.heatmap_every == 0:
                save_heatmap(target.cpu().numpy().transpose(1, 2, 0), pred.cpu().numpy().transpose(1, 2, 0),
                             smap.values, heat_dir / f"{clip.clip_id}_{smap.frame_id:06d}.png")

    series = score_clips(model, clips, model.cfg.n, args.batch_size, on_frame)
    series.save(out)
    m.finish(scores=out)
    print(f"scored {sum(len(v) for v in series.raw.values())} frames in {len(series.raw)} clips -> {out}")


def cmd_eval_auc(args, argv):
    from .detect import EvaluationError, ScoreSeries, evaluate_auc
    ds = _load_dataset(args.labels, args.layout)
    try:
        series = ScoreSeries.load(args.scores)
        result = {norm: evaluate_auc(series, ds.labels, norm) for norm in ("per_video_minmax", "none")}
    except EvaluationError as exc:
        raise CLIError("evaluation", str(exc)) from exc
    result["primary"] = args.normalization
    if args.out:
        m = Manifest(args.out, "eval-auc", argv, {k: v for k, v in vars(args).items() if k != "func"})
        (Path(args.out) / "auc.json").write_text(json.dumps(result, indent=2))
        m.finish(auc=Path(args.out) / "auc.json")
    print(f"AUC ({args.normalization}): {100 * result[args.normalization]:.2f}")
    other = "none" if args.normalization == "per_video_minmax" else "per_video_minmax"
    print(f"AUC ({other}): {100 * result[other]:.2f}")


def _box_rescaler(clip, saliency_shape):
    h_src, w_src = clip.source_size
    h, w = saliency_shape
    return w / w_src, h / h_src


def cmd_explain(args, argv):
    from .detect import predict_clip, saliency
    from .explain import (DetectionFormatError, box_scores, calibrate_threshold, explain_frame,
                          load_detections, save_records)
    model, state = _load_checkpoint(args.checkpoint)
    image_size = args.image_size or state.get("image_size")
    ds = _load_dataset(args.dataset, args.layout, image_size)
    modes = ["sum", "mean"] if args.box_mode == "both" else [args.box_mode]
    calib_path = args.calibration
    if args.threshold is None and calib_path is None:
        default = Path(args.dataset) / "training" / "detections.jsonl"
        if not default.is_file():
            raise CLIError("config", "no --threshold given and no calibration detections "
                                     f"(--calibration or {default})")
        calib_path = str(default)
    out = Path(args.out)
    m = Manifest(out, "explain", argv, {k: v for k, v in vars(args).items() if k != "func"}
                 | {"calibration": calib_path, "image_size": image_size})
    try:
        detections = load_detections(args.detections)
        calibration = load_detections(calib_path) if args.threshold is None else None
    except (DetectionFormatError, OSError) as exc:
        raise CLIError("input", str(exc)) from exc
    n = model.cfg.n

    def boxes_for(dets, clip, frame, shape):
        sx, sy = _box_rescaler(clip, shape)
        return [b.scaled(sx, sy) for b in dets.get(clip.clip_id, frame)]

    thresholds = {}
    for mode in modes:
        if args.threshold is not None:
            thresholds[mode] = float(args.threshold)
    if calibration is not None:
        collected = {mode: [] for mode in modes}
        for clip in ds.training:
            for t, pred, target in predict_clip(model, clip, n):
                smap = saliency(pred, target, t, clip.clip_id)
                boxes = boxes_for(calibration, clip, t, smap.values.shape)
                for mode in modes:
                    collected[mode].extend(box_scores(smap, boxes, mode))
        try:
            for mode in modes:
                thresholds[mode] = calibrate_threshold(collected[mode], args.percentile)
        except ValueError as exc:
            raise CLIError("input", f"calibration failed: {exc}") from exc

    records = {mode: {} for mode in modes}
    for clip in ds.testing:
        for t, pred, target in predict_clip(model, clip, n):
            smap = saliency(pred, target, t, clip.clip_id)
            boxes = boxes_for(detections, clip, t, smap.values.shape)
            for mode in modes:
                records[mode].setdefault(clip.clip_id, []).append(
                    explain_frame(smap, boxes, thresholds[mode], mode))
    for mode in modes:
        mode_dir = out / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        for cid, recs in records[mode].items():
            save_records(recs, mode_dir / f"{cid}.jsonl")
    (out / "thresholds.json").write_text(json.dumps(thresholds, indent=2))
    m.finish(explanations=out, thresholds=out / "thresholds.json")
    for mode in modes:
        print(f"{mode}: threshold {thresholds[mode]:.6g}, records in {out / mode}")


def cmd_eval_map(args, argv):
    from .detect import EvaluationError
    from .explain import load_records, evaluate_map
    ds = _load_dataset(args.labels, args.layout)
    aliases = {}
    if args.aliases:
        aliases = json.loads(Path(args.aliases).read_text())
    root = Path(args.explanations)
    mode_dirs = [d for d in (root / "sum", root / "mean") if d.is_dir()] or [root]
    reports = {}
    for d in mode_dirs:
        files = sorted(d.glob("*.jsonl"))
        if not files:
            raise CLIError("input", f"no explanation files in {d}")
        records = [r for f in files for r in load_records(f)]
        try:
            reports[d.name if d != root else "explanations"] = evaluate_map(
                records, ds.labels, aliases, args.exclude_classes, args.emitted)
        except EvaluationError as exc:
            raise CLIError("evaluation", str(exc)) from exc
    out = Path(args.out) if args.out else None
    if out:
        m = Manifest(out, "eval-map", argv, {k: v for k, v in vars(args).items() if k != "func"})
    for name, rep in reports.items():
        print(f"[{name}] mAP {100 * rep.mean_ap:.2f}")
        for cls in sorted(rep.ap):
            print(f"  {cls:<24} AP {100 * rep.ap[cls]:6.2f}  support {rep.support[cls]}")
        if out:
            rep.save(out / f"map_{name}.csv")
    if out:
        m.finish(**{f"map_{k}": out / f"map_{k}.csv" for k in reports})


def cmd_plot(args, argv):
    from .detect import ScoreSeries, collect, evaluate_auc, roc_curve
    from .plotting import plot_roc, plot_timeline
    scores_dir = Path(args.scores)
    labels_root = args.labels
    if labels_root is None:
        man = scores_dir / MANIFEST
        if man.is_file():
            labels_root = json.loads(man.read_text()).get("config", {}).get("dataset")
    if labels_root is None:
        raise CLIError("config", "no --labels given and the scores manifest names no dataset")
    ds = _load_dataset(labels_root, args.layout)
    series = ScoreSeries.load(scores_dir, args.normalization)
    out = Path(args.out) if args.out else scores_dir / "plots"
    m = Manifest(out, "plot", argv, {"scores": str(scores_dir), "labels": labels_root,
                                     "normalization": args.normalization})
    s, y = collect(series, ds.labels)
    fpr, tpr, _ = roc_curve(s, y)
    plot_roc(fpr, tpr, evaluate_auc(series, ds.labels), out / "roc.png")
    for cid in series.clips():
        flags = ds.labels.frame_flags[cid][series.frames[cid]]
        plot_timeline(series.frames[cid], series.normalized(cid, "per_video_minmax"), flags,
                      out / f"timeline_{cid}.png", title=f"clip {cid}")
    m.finish(roc=out / "roc.png")
    print(f"wrote plots to {out}")


def cmd_codebook(args, argv):
    model, _ = _load_checkpoint(args.checkpoint)
    if model.codebook is None:
        raise CLIError("checkpoint", "model has no codebook")
    out = Path(args.out)
    m = Manifest(out, "codebook", argv, {"checkpoint": args.checkpoint})
    entries = model.codebook.entries.detach().cpu().numpy()
    usage = model.codebook.usage_counts.cpu().numpy()
    header = "entry," + ",".join(f"d{j}" for j in range(entries.shape[1]))
    np.savetxt(out / "entries.csv", np.column_stack([np.arange(len(entries)), entries]), delimiter=",",
               fmt=["%d"] + ["%.9g"] * entries.shape[1], header=header, comments="")
    with open(out / "usage.csv", "w") as fh:
        fh.write("entry,count\n")
        for i, c in enumerate(usage):
            fh.write(f"{i},{int(c)}\n")
    used = int((usage > 0).sum())
    m.finish(entries=out / "entries.csv", usage=out / "usage.csv")
    print(f"{used}/{len(usage)} codebook entries used")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqanomaly", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def layout_flag(sp):
        sp.add_argument("--layout", choices=["ucsd_avenue", "synthetic"], default=None,
                        help="dataset layout (default: detected from the root)")

    sp = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    sp.add_argument("--out", required=True, help="output dataset root")
    sp.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    sp.add_argument("--config", help="synthetic config YAML (see vqanomaly.synthetic)")
    sp.set_defaults(func=cmd_gen_synthetic)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("ablate", cmd_ablate, "train and evaluate the temporal x codebook grid")):
        sp = sub.add_parser(name, help=helptext, description=f"{helptext}. {PRECEDENCE}")
        sp.add_argument("--config", help="training config YAML")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. network.levels=3 (repeatable)")
        if name == "ablate":
            sp.add_argument("--normalization", choices=["per_video_minmax", "none"], default="per_video_minmax")
        sp.set_defaults(func=func)

    sp = sub.add_parser("score", help="per-frame anomaly scores from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True, help="dataset root")
    sp.add_argument("--out", required=True, help="output directory for per-clip score CSVs")
    sp.add_argument("--split", choices=["testing", "training"], default="testing")
    sp.add_argument("--image-size", type=int, default=None, help="default: the training image size")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--heatmap-every", type=int, default=0, metavar="K",
                    help="write a heatmap PNG for every K-th frame (0: none)")
    layout_flag(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval-auc", help="frame-level ROC-AUC of saved scores")
    sp.add_argument("--scores", required=True, help="directory of per-clip score CSVs")
    sp.add_argument("--labels", required=True, help="dataset root holding testing/labels")
    sp.add_argument("--normalization", choices=["per_video_minmax", "none"], default="per_video_minmax",
                    help="primary normalization; both are reported")
    sp.add_argument("--out", help="optional directory for auc.json")
    layout_flag(sp)
    sp.set_defaults(func=cmd_eval_auc)

    sp = sub.add_parser("explain", help="label anomalous regions using external detections")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--detections", required=True, help="detections JSON-lines for the test split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float, default=None, help="absolute box-score threshold")
    sp.add_argument("--calibration", default=None,
                    help="detections on the training split used to calibrate the threshold "
                         "(default: <dataset>/training/detections.jsonl)")
    sp.add_argument("--percentile", type=float, default=99.0, help="calibration percentile (default 99)")
    sp.add_argument("--box-mode", choices=["sum", "mean", "both"], default="both")
    sp.add_argument("--image-size", type=int, default=None)
    layout_flag(sp)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("eval-map", help="per-class AP and mAP of explanations")
    sp.add_argument("--explanations", required=True, help="output directory of the explain command")
    sp.add_argument("--labels", required=True, help="dataset root holding testing/explanations")
    sp.add_argument("--aliases", help="JSON object mapping detector labels to ground-truth classes")
    sp.add_argument("--exclude-classes", nargs="*", default=[], metavar="CLASS",
                    help="ground-truth classes to leave out, e.g. location classes")
    sp.add_argument("--emitted", choices=["anomalous", "all"], default="anomalous",
                    help="which ranked entries count as predictions")
    sp.add_argument("--out", help="optional directory for map_<mode>.csv reports")
    layout_flag(sp)
    sp.set_defaults(func=cmd_eval_map)

    sp = sub.add_parser("plot", help="ROC curve and per-clip score timelines")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--labels", default=None, help="dataset root (default: from the scores manifest)")
    sp.add_argument("--normalization", choices=["per_video_minmax", "none"], default="per_video_minmax")
    sp.add_argument("--out", default=None, help="default: <scores>/plots")
    layout_flag(sp)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("codebook", help="dump codebook entries and usage counts as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_codebook)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args, argv)
    except CLIError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the one-line contract for unexpected failures too
        log.debug("unhandled", exc_info=True)
        print(f"error[runtime]: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
