"""``agmt`` command line: generate, train, eval, visualize, selfcheck.

Exit codes: 0 success, 1 self-check failure, 2 config/usage error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_pairs, load_config, parse_pairs
from .data import generate_synthetic, split_zero_shot, write_dataset
from .errors import AgmtError, CheckpointError, ConfigError, FileError, NumericError, UsageError
from .evaluation import evaluate
from .experiment import load_dataset
from .interpret import export_group_exemplars, group_heatmaps, overlay_raster, write_index
from .imaging import write_pixmap
from .model import Model
from .selfcheck import format_table, run_selfcheck
from .trainer import Trainer, load_checkpoint, restore_model

logger = logging.getLogger("agmt")

EXIT_OK, EXIT_SELFCHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.agmt"


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _run_config(args) -> TrainConfig:
    pairs = parse_pairs(Path(args.config).read_text(), args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return config_from_pairs(pairs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    dataset = generate_synthetic(args.classes, args.per_class, args.size, args.seed)
    write_dataset(dataset, out)
    print(f"wrote {len(dataset)} images in {len(dataset.classes)} classes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(config.to_text())
    train_set, _ = split_zero_shot(load_dataset(config), config.data.train_fraction, config.data.seed)
    trainer = Trainer(config, train_set)
    latest = out / CHECKPOINT_NAME
    if args.resume and latest.exists():
        trainer.load(latest)
        logger.info("resumed from %s at step %d", latest, trainer.step)
    mode = "a" if args.resume else "w"
    with open(out / "train.log", mode) as log:
        def on_step(rec):
            log.write(rec.to_line() + "\n")

        def on_epoch(epoch):
            log.flush()
            trainer.save(out / f"epoch_{epoch:03d}.agmt")
            trainer.save(latest)
            logger.info("epoch %d %s", epoch, trainer.history[-1].to_line())

        trainer.run(on_step=on_step, on_epoch=on_epoch)
    if not latest.exists():
        trainer.save(latest)
    print(f"trained {trainer.step} steps; checkpoint {latest}")
    return EXIT_OK


def _load_trained(checkpoint: Path, data: str | None):
    config_path = checkpoint.parent / CONFIG_NAME
    if not config_path.exists():
        raise ConfigError(f"{config_path}: no config next to checkpoint")
    config = load_config(config_path)
    if data:
        config = config.replace(**{"data.dir": str(data)})
    model = Model(config.model_config(), config.metric_params(), config.train.seed)
    restore_model(model, load_checkpoint(checkpoint))
    return config, model


def _split(config: TrainConfig, which: str):
    dataset = load_dataset(config)
    if which == "all":
        return dataset
    train, test = split_zero_shot(dataset, config.data.train_fraction, config.data.seed)
    return train if which == "train" else test


def cmd_eval(args) -> int:
    config, model = _load_trained(Path(args.checkpoint), args.data)
    subset = _split(config, args.split)
    ks = _int_list(args.k) if args.k else config.eval.k
    emb, _ = model.embed(subset.images, config.eval.batch)
    report = evaluate(emb, subset.labels, ks=ks, seed=config.eval.seed)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        out.with_suffix(".jsonl").write_text(report.to_json_line())
    return EXIT_OK


def cmd_visualize(args) -> int:
    config, model = _load_trained(Path(args.checkpoint), args.data)
    if config.model.grouping != "A":
        raise UsageError(f"no attention maps for {config.model.grouping}-grouping")
    subset = _split(config, args.split)
    groups = config.model.groups
    wanted = range(groups) if args.group is None else [args.group]
    for g in wanted:
        if not 0 <= g < groups:
            raise UsageError(f"--group {g} out of range for {groups} groups")
    _, attention = model.embed(subset.images, config.eval.batch)
    out = Path(args.out)
    exported = []
    for g in wanted:
        exported += export_group_exemplars(subset.images, attention, g, out, count=args.top,
                                           statistic=args.statistic, split=args.split)
    write_index(exported, out / "index.txt", args.statistic)
    if args.shift:
        dy, dx = _int_list(args.shift)
        _export_shift_pair(model, subset.images[exported[0].image_id], exported[0].group, dy, dx, out)
    print(f"exported {len(exported)} overlays to {out}")
    return EXIT_OK


def _export_shift_pair(model: Model, image: np.ndarray, group: int, dy: int, dx: int, out: Path) -> None:
    """Original vs cyclically shifted input: the shifted heatmap must be the shifted original."""
    shifted = np.roll(image, (dy, dx), axis=(0, 1))
    _, attention = model.embed(np.stack([image, shifted]))
    hw = image.shape[:2]
    h0 = group_heatmaps(attention[0], hw, hw)[group]
    h1 = group_heatmaps(attention[1], hw, hw)[group]
    diff = float(np.abs(np.roll(h0, (dy, dx), axis=(0, 1)) - h1).max())
    try:
        write_pixmap(out / f"shift_{group}_original.ppm", overlay_raster(image, h0))
        write_pixmap(out / f"shift_{group}_shifted_{dy}_{dx}.ppm", overlay_raster(shifted, h1))
    except OSError as exc:
        raise FileError(f"{out}: cannot write shift demo ({exc.strerror})") from exc
    print(f"shift ({dy},{dx}) group {group}: max heatmap deviation from cyclic shift {diff:.3e}")


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(fault=args.fault, quick=args.quick)
    sys.stdout.write(format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {failed[0].name}")
        return EXIT_SELFCHECK
    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agmt", description="Attentive grouping metric learning at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic glyph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=40)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.agmt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--k", help="comma-separated K values for Recall@K")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", help="write the report here (plus a .jsonl twin)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="export attention overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--group", type=int)
    p.add_argument("--top", type=int, default=12)
    p.add_argument("--statistic", choices=("max", "mean"), default="max")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--shift", metavar="DY,DX", help="also export an original/shifted heatmap pair")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("selfcheck", help="run the numerical self-check suite")
    p.add_argument("--fault", choices=("softmax-axis",), help="inject a known defect")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def _limit_threads():
    raw = os.environ.get("AGMT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"AGMT_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(args)
    except NumericError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AgmtError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
