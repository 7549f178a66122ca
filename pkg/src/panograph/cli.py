"""Command line entry points: synth, cluster, train, infer, eval, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np

from panograph import pipeline
from panograph.config import PipelineConfig, apply_overrides, load_config
from panograph.edgenet.checkpoint import load_checkpoint, save_checkpoint
from panograph.edgenet.optim import EpochStats, TrainState, train
from panograph.errors import ConfigError, DataError, PanographError
from panograph.graph_builder import N_PROB_CLASSES
from panograph.metrics import PanopticEvaluator, format_table, pct
from panograph.oversegmentation import NOISE, oversegment_foreground
from panograph.scene_io import generate_synthetic_scene, read_labels, write_frame, write_labels

log = logging.getLogger("panograph")

LOSS_LOG = "loss.csv"
LOSS_COLUMNS = ("epoch", "mean_loss", "edge_accuracy")
LAST_CKPT = "last.ckpt"
ABLATION_METHODS = (("DBSCAN", "dbscan"), ("HDBSCAN", "hdbscan"), ("MeanShift", "meanshift"), ("Graph merge", None))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _prepare_output(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to write into it)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_dir(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} {p} is not a directory")
    return p


def _checkpoint_meta(config: PipelineConfig) -> dict:
    table = config.classes()
    return {
        "class_ids": sorted(table.names),
        "thing_ids": sorted(table.thing_ids),
        "prob_width": N_PROB_CLASSES,
        "voxel_size": config.voxel_size,
        "normal_k": config.normal_k,
        "train": dataclasses.asdict(dataclasses.replace(config.training(), epochs=0)),
        "clustering": dataclasses.asdict(config.clustering()),
    }


def _check_class_table(config: PipelineConfig) -> None:
    table = config.classes()
    if table.names and max(table.names) >= N_PROB_CLASSES:
        raise ConfigError(f"class ids must be < {N_PROB_CLASSES} to fit the probability block")


def _load_model(config: PipelineConfig):
    if not config.checkpoint:
        raise ConfigError("no checkpoint given")
    state, meta = load_checkpoint(config.checkpoint)
    table = config.classes()
    if meta.get("class_ids") is not None and meta["class_ids"] != sorted(table.names):
        raise ConfigError(
            f"checkpoint was trained with classes {meta['class_ids']}, config has {sorted(table.names)}"
        )
    if meta.get("prob_width", N_PROB_CLASSES) != N_PROB_CLASSES:
        raise ConfigError("checkpoint probability width differs from this build")
    return state.params


# synth


def _synth_one(config: PipelineConfig, out: Path, item):
    name, seed = item
    frame = generate_synthetic_scene(config.scene(seed))
    write_frame(frame, out / "velodyne" / f"{name}.bin", out / "labels" / f"{name}.label")
    return {"name": name, "seed": seed, "n_points": len(frame)}


def cmd_synth(config: PipelineConfig, out_dir: str, force: bool = False, jobs: int = 1) -> Path:
    """Frame ``i`` is generated with seed ``config.seed + i``."""
    out = _prepare_output(Path(out_dir or config.output_dir or "."), force)
    (out / "velodyne").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    items = [(f"{i:06d}", config.seed + i) for i in range(config.n_frames)]
    frames = pipeline.ordered_map(partial(_synth_one, config, out), items, jobs)
    scene = dataclasses.asdict(config.scene(config.seed))
    scene.pop("seed")
    manifest = {"n_frames": len(frames), "frames": frames, "generator": scene, "classes": config.classes().to_text()}
    (out / pipeline.MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d frames to %s", len(frames), out)
    return out


# cluster


def _cluster_one(config: PipelineConfig, out: Path, ref: pipeline.FrameRef):
    frame = pipeline.with_semantics(ref.load(config.classes()), config, ref.name)
    assignment = oversegment_foreground(frame, config.clustering())
    ids = np.where(assignment.labels == NOISE, 0, assignment.labels + 1)
    if ids.max(initial=0) > 0xFFFF:
        raise DataError(f"{ref.name}: more than 65535 clusters")
    write_labels(out / f"{ref.name}.label", frame.semantic, ids)
    return assignment.n_clusters


def cmd_cluster(config: PipelineConfig, data_dir: str, out_dir: str, force: bool = False, jobs: int = 1) -> list[int]:
    """Write each frame's over-segmentation as a label file: instance field = cluster id + 1, 0 for noise."""
    refs = pipeline.dataset_frames(_require_dir(data_dir or config.data_dir, "data directory"))
    out = _prepare_output(Path(out_dir or config.output_dir), force)
    return pipeline.ordered_map(partial(_cluster_one, config, out), refs, jobs)


# train


def _sample_one(config: PipelineConfig, ref: pipeline.FrameRef):
    return pipeline.training_sample(ref.load(config.classes()), config, ref.name)


def _read_loss_rows(path: Path, upto_epoch: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if int(r[0]) < upto_epoch]


def _write_loss_rows(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def cmd_train(config: PipelineConfig, data_dir: str, out_dir: str, resume: bool = False, force: bool = False, jobs: int = 1):
    """Train EdgeNet; writes ``epoch_NNNN.ckpt`` and ``last.ckpt`` each epoch and a CSV loss log."""
    _check_class_table(config)
    refs = pipeline.dataset_frames(_require_dir(data_dir or config.data_dir, "data directory"))
    if not refs:
        raise DataError("training set is empty")
    out = Path(out_dir or config.output_dir)
    meta = _checkpoint_meta(config)
    state = None
    if resume:
        state, old_meta = load_checkpoint(out / LAST_CKPT)
        if old_meta != meta:
            raise ConfigError("resume config differs from the checkpoint's training setup")
        rows = _read_loss_rows(out / LOSS_LOG, state.epoch)
        log.info("resuming from epoch %d", state.epoch)
    else:
        _prepare_output(out, force)
        rows = []
    samples = pipeline.ordered_map(partial(_sample_one, config), refs, jobs)

    def on_epoch(st: TrainState, stats: EpochStats):
        rows.append([str(stats.epoch), repr(stats.mean_loss), repr(stats.edge_accuracy)])
        save_checkpoint(out / f"epoch_{st.epoch:04d}.ckpt", st, meta)
        save_checkpoint(out / LAST_CKPT, st, meta)
        _write_loss_rows(out / LOSS_LOG, rows)

    if state is not None and state.epoch >= config.epochs:
        log.info("checkpoint already at epoch %d", state.epoch)
        return state
    result = train(samples, config.training(), state, on_epoch=on_epoch, dump_dir=out)
    return result.state


# infer


def _infer_one(config: PipelineConfig, params, out: Path, dump: bool, ref: pipeline.FrameRef):
    frame = pipeline.with_semantics(ref.load(config.classes()), config, ref.name)
    result = pipeline.infer_frame(frame, params, config)
    write_labels(out / f"{ref.name}.label", result.panoptic.semantic, result.panoptic.instance)
    if dump:
        (out / "debug" / f"{ref.name}.json").write_text(json.dumps(pipeline.graph_dump(frame, result, params)))
    return {"name": ref.name, **dataclasses.asdict(result.fusion)}


def cmd_infer(config: PipelineConfig, data_dir: str, out_dir: str, force: bool = False, jobs: int = 1, dump_graph: bool = False):
    """Predict panoptic labels for every frame; writes ``<name>.label`` and ``fusion.json``."""
    _check_class_table(config)
    refs = pipeline.dataset_frames(_require_dir(data_dir or config.data_dir, "data directory"))
    if config.semantic_dir:
        _require_dir(config.semantic_dir, "semantic directory")
    params = _load_model(config)
    out = _prepare_output(Path(out_dir or config.output_dir), force)
    if dump_graph:
        (out / "debug").mkdir(exist_ok=True)
    diag = pipeline.ordered_map(partial(_infer_one, config, params, out, dump_graph), refs, jobs)
    (out / "fusion.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    return diag


# eval


def _label_dir(path: Path) -> Path:
    return path / "labels" if (path / "labels").is_dir() else path


def _eval_pairs(pred_dir: Path, gt_dir: Path, strict: bool):
    pred = {p.stem: p for p in sorted(_label_dir(pred_dir).glob("*.label"))}
    gt = {p.stem: p for p in sorted(_label_dir(gt_dir).glob("*.label"))}
    missing_pred = sorted(set(gt) - set(pred))
    missing_gt = sorted(set(pred) - set(gt))
    for name in missing_pred:
        log.warning("no prediction for %s; frame skipped", name)
    for name in missing_gt:
        log.warning("no ground truth for %s; frame skipped", name)
    if strict and (missing_pred or missing_gt):
        raise DataError(f"unpaired frames: {len(missing_pred)} without prediction, {len(missing_gt)} without ground truth")
    names = sorted(set(pred) & set(gt))
    if not names:
        raise DataError("no frame has both a prediction and ground truth")
    return [(n, pred[n], gt[n]) for n in names]


def cmd_eval(config: PipelineConfig, pred_dir: str, gt_dir: str, out_dir: str = "", strict: bool = False, force: bool = False):
    """Score predictions; writes ``report.json`` and ``report.txt`` when an output directory is set."""
    pairs = _eval_pairs(_require_dir(pred_dir, "prediction directory"), _require_dir(gt_dir, "ground-truth directory"), strict)
    ev = PanopticEvaluator(config.classes(), config.ignore_set(), config.min_stuff_points)
    for name, p, g in pairs:
        ps, pi = read_labels(p)
        gs, gi = read_labels(g)
        if len(ps) != len(gs):
            raise DataError(f"{name}: prediction has {len(ps)} points, ground truth {len(gs)}")
        ev.add_frame(ps, pi, gs, gi)
    report = ev.report()
    text = report.to_table() + "\n" + report.class_table_text()
    if out_dir or config.output_dir:
        out = _prepare_output(Path(out_dir or config.output_dir), force)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report.txt").write_text(text)
    return report, text


# ablate


def _ablate_one(config: PipelineConfig, params, ref: pipeline.FrameRef):
    table = config.classes()
    gt = ref.load(table)
    frame = pipeline.with_semantics(gt, config, ref.name)
    outputs = []
    for _, method in ABLATION_METHODS:
        if method is None:
            pan = pipeline.infer_frame(frame, params, config).panoptic
        else:
            pan = pipeline.clusters_as_instances(frame, config, method)
        outputs.append((pan.semantic, pan.instance, gt.semantic, gt.instance))
    return outputs


def cmd_ablate(config: PipelineConfig, data_dir: str, out_dir: str = "", force: bool = False, jobs: int = 1):
    """Clustering baselines against the full graph merge; writes ``ablation.json`` and ``ablation.txt``."""
    _check_class_table(config)
    refs = pipeline.dataset_frames(_require_dir(data_dir or config.data_dir, "data directory"))
    params = _load_model(config)
    out = _prepare_output(Path(out_dir or config.output_dir), force) if (out_dir or config.output_dir) else None
    per_frame = pipeline.ordered_map(partial(_ablate_one, config, params), refs, jobs)
    evaluators = [PanopticEvaluator(config.classes(), config.ignore_set(), config.min_stuff_points) for _ in ABLATION_METHODS]
    for outputs in per_frame:
        for ev, args in zip(evaluators, outputs):
            ev.add_frame(*args)
    rows, data = [], []
    for (label, _), ev in zip(ABLATION_METHODS, evaluators):
        r = ev.report()
        rows.append([label, pct(r.pq), pct(r.pq_th), pct(r.rq_th), pct(r.sq_th)])
        data.append({"method": label, "pq": r.pq, "pq_th": r.pq_th, "rq_th": r.rq_th, "sq_th": r.sq_th})
    text = format_table(["Method", "PQ", "PQTh", "RQTh", "SQTh"], rows)
    if out is not None:
        (out / "ablation.json").write_text(json.dumps(data, indent=2) + "\n")
        (out / "ablation.txt").write_text(text)
    return data, text


# argument parsing


def _config_from_args(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for key in ("checkpoint", "semantic_dir", "seed", "epochs", "tau"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    config = apply_overrides(config, pairs)
    if config.class_table and not Path(config.class_table).is_file():
        raise ConfigError(f"class table {config.class_table} does not exist")
    return config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-frame work")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="panograph", description="Graph-based LiDAR instance segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, help="number of frames (config key n_frames)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("cluster", parents=[common], help="write over-segmentation cluster ids as label files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--semantic-dir", dest="semantic_dir")

    p = sub.add_parser("train", parents=[common], help="train EdgeNet on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint and loss-log directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")

    p = sub.add_parser("infer", parents=[common], help="predict panoptic labels")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--semantic-dir", dest="semantic_dir", help="external semantic .label predictions (default: ground truth)")
    p.add_argument("--dump-graph", action="store_true", help="also write cluster graphs and adjacency as JSON")

    p = sub.add_parser("eval", parents=[common], help="score predictions with panoptic quality")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default="")
    p.add_argument("--strict", action="store_true", help="fail on frames without a counterpart")

    p = sub.add_parser("ablate", parents=[common], help="compare clustering baselines with graph merge")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="")
    p.add_argument("--tau", type=float)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth" and args.count is not None:
        args.set = (args.set or []) + [f"n_frames={args.count}"]
    config = _config_from_args(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.command == "synth":
        out = cmd_synth(config, args.out, args.force, args.jobs)
        print(f"wrote {config.n_frames} frames to {out}")
    elif args.command == "cluster":
        counts = cmd_cluster(config, args.data, args.out, args.force, args.jobs)
        print(f"clustered {len(counts)} frames, {sum(counts)} clusters")
    elif args.command == "train":
        state = cmd_train(config, args.data, args.out, args.resume, args.force, args.jobs)
        print(f"trained to epoch {state.epoch} ({state.step} steps); checkpoints in {args.out}")
    elif args.command == "infer":
        diag = cmd_infer(config, args.data, args.out, args.force, args.jobs, args.dump_graph)
        print(f"wrote predictions for {len(diag)} frames to {args.out}")
    elif args.command == "eval":
        _, text = cmd_eval(config, args.pred, args.gt, args.out, args.strict, args.force)
        print(text, end="")
    elif args.command == "ablate":
        _, text = cmd_ablate(config, args.data, args.out, args.force, args.jobs)
        print(text, end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        # argparse exits on usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    except PanographError as exc:
        print(f"panograph: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"panograph: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
