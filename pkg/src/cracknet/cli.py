"""``cracknet`` command line: prepare, train, eval, compare-losses, predict, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file error,
3 numeric abort. ``CRACKNET_THREADS`` caps the native thread pools; set it to 1
for byte-reproducible runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import metrics as MT
from . import models as M
from . import training as TR
from .checkpoint import checkpoint_load, checkpoint_save
from .errors import (ConfigError, ContractError, DataError, DimensionError, FormatError, GeometryError,
                     NumericError)
from .fileio import atomic_write, read_csv, write_csv
from .losses import LOSS_NAMES, LossSpec
from .runconfig import RunConfig, build_run_config, load_config, parse_pairs
from .tensor import Tensor, no_grad

log = logging.getLogger("cracknet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _f6(x):
    return f"{x:.6f}"


def _write_json(path, obj):
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def dataset_digest(root):
    """File count and SHA-256 over the relative paths and bytes of ``images/`` and ``masks/``."""
    root = Path(root)
    h = hashlib.sha256()
    count = 0
    for sub in ("images", "masks"):
        for path in sorted((root / sub).iterdir()):
            if path.is_file() and not path.name.startswith("."):
                h.update(f"{sub}/{path.name}\0".encode())
                h.update(path.read_bytes())
                count += 1
    return {"files": count, "sha256": h.hexdigest()}


def load_data_dir(root):
    root = Path(root)
    return D.load_dataset(root / "images", root / "masks")


def _check_extents(samples, config):
    bad = [s.id for s in samples if s.mask.shape != config.input_size]
    if bad:
        size = "x".join(map(str, config.input_size))
        raise DataError(f"{len(bad)} sample(s) do not match the model input {size}",
                        [f"{i}: expected {size}" for i in bad[:20]])


def _subset(samples, ids):
    by_id = {s.id: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"{len(missing)} id(s) from the manifest are not in the dataset",
                        [f"{i}: missing" for i in missing[:20]])
    return [by_id[i] for i in ids]


# -- prepare -----------------------------------------------------------

def cmd_prepare(args):
    out = Path(args.out)
    if args.synthesize is not None:
        if args.images or args.masks:
            raise ConfigError("give either --synthesize or --images/--masks, not both")
        samples = D.synth_cracks(args.synthesize, args.size, args.seed, args.noise)
    else:
        if not (args.images and args.masks):
            raise ConfigError("prepare needs --images and --masks, or --synthesize N")
        samples, problems = [], []
        for source in D.load_dataset(args.images, args.masks):
            try:
                samples.extend(D.tile_crop(source.image, source.mask, args.tile, args.stride, source.id))
            except ContractError as exc:
                problems.append(f"{source.id}: {exc}")
        if problems:
            raise DataError(f"{len(problems)} image(s) could not be tiled", problems)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = [["id", "height", "width", "crack_pixels"]]
    for s in samples:
        D.save_sample(s, out / "images", out / "masks", write=atomic_write)
        rows.append([s.id, str(s.mask.shape[0]), str(s.mask.shape[1]), str(int(s.mask.sum()))])
    write_csv(out / "manifest.csv", rows)
    log.info("wrote %d samples to %s", len(samples), out)
    return EXIT_OK


# -- train -------------------------------------------------------------

def _run_config(args):
    if args.config:
        return load_config(args.config)
    raise ConfigError("train needs --config")


def _print_epoch(record):
    val = "" if record.val is None else f" val_iou {record.val.iou:.4f}"
    log.info("epoch %d loss %.6f%s", record.epoch, record.train_loss, val)


def cmd_train(args):
    run = _run_config(args)
    samples = load_data_dir(args.data)
    _check_extents(samples, run.model)
    split = D.split_folds(samples, run.split_ratio, args.fold, run.train.seed)
    train_set, val_set = _subset(samples, split.train_ids), _subset(samples, split.val_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "cracknet", "version": __version__, "config": run.to_dict(), "seed": run.train.seed,
        "fold": args.fold, "dataset": dataset_digest(args.data), "data": str(Path(args.data)),
        "train_ids": list(split.train_ids), "val_ids": list(split.val_ids),
        "artifacts": {"checkpoint": "model.ckpt", "runlog": "runlog.csv", "timing": "timing.csv",
                      "summary": "summary.json"},
    }
    _write_json(out / "manifest.json", manifest)
    model = M.build_model(run.model, seed=run.train.seed)
    runlog = TR.train(model, train_set, val_set, run.train, callback=_print_epoch)
    write_csv(out / "runlog.csv", runlog.csv_rows())
    write_csv(out / "timing.csv", runlog.timing_rows())
    checkpoint_save(model, out / "model.ckpt")
    speed = TR.measure_throughput(model, val_set or train_set, run.train.batch_size)
    _write_json(out / "summary.json", {"arch": run.model.arch, "epochs": len(runlog), "img_per_sec": speed,
                                       "param_count": M.param_count(model), "size_mb": M.model_size_mb(model)})
    log.info("finished %d epochs; artifacts in %s", len(runlog), out)
    return EXIT_OK


# -- eval / predict ----------------------------------------------------

def _load_run(checkpoint, manifest_path=None):
    manifest_path = Path(manifest_path) if manifest_path else Path(checkpoint).parent / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        run = RunConfig.from_dict(manifest["config"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"cannot read run manifest {manifest_path}: {exc}") from exc
    return manifest, run, checkpoint_load(checkpoint, run.model)


def cmd_eval(args):
    manifest, run, model = _load_run(args.checkpoint, args.manifest)
    samples = load_data_dir(args.data)
    if args.split != "all":
        samples = _subset(samples, manifest[f"{args.split}_ids"])
    _check_extents(samples, run.model)
    threshold = run.train.threshold if args.threshold is None else args.threshold
    ev = TR.evaluate(model, samples, threshold, run.train.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arch, fold = run.model.arch, manifest.get("fold", "")
    write_csv(out / "metrics.csv", [["average", *MT.CSV_FIELDS],
                                    ["micro", *ev.micro.csv_row(arch, args.split, fold)],
                                    ["macro", *ev.macro.csv_row(arch, args.split, fold)]])
    write_csv(out / "per_image.csv", [["id", "iou"]] + [[i, _f6(v)] for i, v in ev.per_image_iou])
    hist = MT.histogram([v for _, v in ev.per_image_iou], bins=args.bins)
    write_csv(out / "histogram.csv", [["bin_low", "bin_high", "center", "count"]] + [
        [_f6(lo), _f6(hi), _f6(c), str(n)] for lo, hi, c, n in zip(hist.edges[:-1], hist.edges[1:], hist.centers,
                                                                   hist.counts)])
    header = ["amplitude", "mu", "sigma", "fwhm", "residual_norm", "converged", "iterations"]
    try:
        fit = MT.gaussian_fit(hist.centers, hist.counts)
        row = [_f6(fit.amplitude), _f6(fit.mu), _f6(fit.sigma), _f6(fit.fwhm), _f6(fit.residual_norm),
               str(fit.converged).lower(), str(fit.iterations)]
    except ContractError as exc:
        log.warning("no Gaussian fit: %s", exc)
        row = [""] * 5 + ["false", "0"]
    write_csv(out / "gaussfit.csv", [header, row])
    log.info("micro IoU %.6f, macro IoU %.6f over %d images", ev.micro.iou, ev.macro.iou, len(samples))
    return EXIT_OK


def predict_logits(model, image, batch_size=12):
    """Logits for an image of any size at least the model input, stitched from covering tiles.

    Overlapping tiles are averaged.
    """
    th, tw = model.config.input_size
    h, w = image.shape[:2]
    if h < th or w < tw:
        raise ContractError(f"image {w}x{h} is smaller than the model input {tw}x{th}")
    starts = [(y, x) for y in D.tile_starts(h, th, th) for x in D.tile_starts(w, tw, tw)]
    total = np.zeros((h, w))
    hits = np.zeros((h, w))
    with no_grad():
        for i in range(0, len(starts), batch_size):
            chunk = starts[i:i + batch_size]
            tiles = np.stack([image[y:y + th, x:x + tw] for y, x in chunk]).astype(np.float32)
            logits = M.forward(model, Tensor(tiles)).data[..., 0]
            for (y, x), tile in zip(chunk, logits):
                total[y:y + th, x:x + tw] += tile
                hits[y:y + th, x:x + tw] += 1
    return total / hits


def cmd_predict(args):
    _, run, model = _load_run(args.checkpoint, args.manifest)
    threshold = run.train.threshold if args.threshold is None else args.threshold
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in D.IMAGE_SUFFIXES)
    problems = []
    for path in paths:
        try:
            image = D.read_image(path)
            mask = M.predict_mask(predict_logits(model, image, run.train.batch_size), threshold)
        except (OSError, ContractError) as exc:
            problems.append(f"{path.name}: {exc}")
            continue
        atomic_write(out / f"{path.stem}.png", D.encode_png((mask * 255).astype(np.uint8)))
    log.info("wrote %d mask(s) to %s", len(paths) - len(problems), out)
    if problems:
        raise DataError(f"{len(problems)} image(s) failed", problems)
    return EXIT_OK


# -- compare-losses ----------------------------------------------------

def cmd_compare_losses(args):
    names = [n.strip() for n in args.losses.split(",") if n.strip()]
    if len(names) < 2:
        raise ConfigError("compare-losses needs at least two loss names")
    for n in names:
        LossSpec.named(n)
    if len(set(names)) != len(names):
        raise ConfigError("loss names must be distinct")
    pairs = {"arch": args.arch}
    if args.config:
        pairs = parse_pairs(Path(args.config).read_text(encoding="utf-8"))
        pairs["arch"] = args.arch
    if args.epochs is not None:
        pairs["epochs"] = str(args.epochs)
    base = build_run_config(pairs)
    samples = load_data_dir(args.data)
    _check_extents(samples, base.model)
    split = D.split_folds(samples, base.split_ratio, args.fold, base.train.seed)
    train_set, val_set = _subset(samples, split.train_ids), _subset(samples, split.val_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {
        "tool": "cracknet", "version": __version__, "config": base.to_dict(), "losses": names,
        "fold": args.fold, "dataset": dataset_digest(args.data), "train_ids": list(split.train_ids),
        "val_ids": list(split.val_ids)})
    rows = [["loss_name", "epoch", "train_loss", "val_iou", "val_f1"]]
    for name in names:
        cfg = TR.TrainConfig(**{**base.train.to_dict(), "loss": name})
        model = M.build_model(base.model, seed=cfg.seed)
        log.info("training with %s", name)
        runlog = TR.train(model, train_set, val_set, cfg, callback=_print_epoch)
        for r in runlog.records:
            val = ["", ""] if r.val is None else [_f6(r.val.iou), _f6(r.val.f1)]
            rows.append([name, str(r.epoch), _f6(r.train_loss), *val])
    write_csv(out / "compare.csv", rows)
    return EXIT_OK


# -- report ------------------------------------------------------------

TABLE_FIELDS = ("model", "run", "epochs", "tail_n", "speed_img_s", "size_mb", "params", "train_loss",
                "iou", "f1", "precision", "recall", "accuracy")
SERIES_FIELDS = ("model", "run", "window", "mean", "std")


def _read_run(run_dir):
    run_dir = Path(run_dir)
    needed = [run_dir / n for n in ("manifest.json", "runlog.csv", "summary.json")]
    missing = [p.name for p in needed if not p.is_file()]
    if missing:
        raise DataError(f"{run_dir}: incomplete run", [f"{run_dir}: missing {', '.join(missing)}"])
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    _, records = read_csv(run_dir / "runlog.csv")
    if not records:
        raise DataError(f"{run_dir}: empty run log", [f"{run_dir}: no epochs recorded"])
    return summary, records


def _column(records, name):
    return [float(r[name]) for r in records if r.get(name, "") != ""]


def cmd_report(args):
    table = [list(TABLE_FIELDS)]
    series = [list(SERIES_FIELDS)]
    for run_dir in args.runs:
        try:
            summary, records = _read_run(run_dir)
        except (DataError, ValueError, OSError) as exc:
            log.warning("skipping %s: %s", run_dir, exc)
            continue
        name = Path(run_dir).name
        ious = _column(records, "val_iou")
        n = min(args.tail, len(records))
        row = [summary["arch"], name, str(len(records)), str(n), _f6(summary["img_per_sec"]),
               _f6(summary["size_mb"]), str(summary["param_count"]),
               _f6(MT.tail_average(_column(records, "train_loss"), n))]
        for metric in ("val_iou", "val_f1", "val_precision", "val_recall", "val_accuracy"):
            values = _column(records, metric)
            row.append(_f6(MT.tail_average(values, min(args.tail, len(values)))) if values else "")
        table.append(row)
        if len(ious) >= args.window:
            for k, (mean, std) in enumerate(MT.rolling_stats(ious, args.window), start=1):
                series.append([summary["arch"], name, str(k), _f6(mean), _f6(std)])
    if len(table) == 1:
        raise DataError("no complete runs to report", [f"{r}: unusable" for r in args.runs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "table.csv", table)
    write_csv(out / "series.csv", series)
    log.info("reported %d run(s)", len(table) - 1)
    return EXIT_OK


# -- entry point -------------------------------------------------------

def build_parser():
    parser = _Parser(prog="cracknet", description="Crack segmentation training and evaluation.")
    common = _Parser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="tile a labelled dataset or synthesize one")
    p.add_argument("--out", required=True)
    p.add_argument("--images")
    p.add_argument("--masks")
    p.add_argument("--tile", type=int, default=224)
    p.add_argument("--stride", type=int, default=224)
    p.add_argument("--synthesize", type=int, metavar="N")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=D.NOISE_KINDS, default="none")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train one model on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, choices=(1, 2), default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="run manifest (default: next to the checkpoint)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-losses", parents=[common], help="train one architecture under several losses")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=M.ARCHS, default="mtunet")
    p.add_argument("--losses", default=",".join(LOSS_NAMES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--config")
    p.add_argument("--fold", type=int, choices=(1, 2), default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_losses)

    p = sub.add_parser("predict", parents=[common], help="write 0/255 crack masks for a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="summary table and rolling series over finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tail", type=int, default=100)
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return parser


def _thread_limit():
    value = os.environ.get("CRACKNET_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"CRACKNET_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("CRACKNET_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, ContractError, GeometryError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
