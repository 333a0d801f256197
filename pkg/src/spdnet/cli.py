"""spdnet command line: synth, train, eval, ablate, report."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .runconfig import ConfigError, RunConfigFile

log = logging.getLogger("spdnet")


class CommandError(RuntimeError):
    pass


def _load_config(args) -> RunConfigFile:
    cfg = RunConfigFile.load(args.config) if args.config else RunConfigFile.from_mapping({})
    model = cfg.model
    if getattr(args, "variant", None):
        model = model.with_variant(args.variant)
    if getattr(args, "seed", None) is not None:
        model = dataclasses.replace(model, seed=args.seed)
        cfg.seeds = (args.seed,)
    cfg.model = model
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out).resolve()
    return cfg


def cmd_synth(args) -> int:
    from .synthdata import generate_split

    if args.count is None or args.count < 1:
        raise CommandError("--count must be at least 1")
    if not args.out:
        raise CommandError("--out is required")
    seed = 0 if args.seed is None else args.seed
    try:
        manifest = generate_split(args.count, seed, args.out, workers=args.workers)
    except OSError as exc:
        raise CommandError(f"cannot write split: {exc}") from exc
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from .model import build_variant
    from .trainer import NonFiniteLossError, save_checkpoint, train

    cfg = _load_config(args)
    if args.manifest:
        cfg.train_manifest = Path(args.manifest).resolve()
    manifest = cfg.require_manifest("train_manifest")
    out = cfg.check_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    log_path = out / "train_log.txt"
    log_path.write_text("")
    try:
        state = train(build_variant(cfg.model), manifest, cfg.iterations, cfg.settings, log_file=log_path)
    except NonFiniteLossError as exc:
        raise CommandError(f"training aborted at iteration {exc.iteration}: {exc}") from exc
    ckpt = save_checkpoint(state, args.checkpoint or out / "checkpoint.pt")
    print(ckpt)
    return 0


def write_report(report, out: Path) -> None:
    from .core_types import CLASS_NAMES

    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text(CLASS_NAMES))


def cmd_eval(args) -> int:
    from .trainer import evaluate, evaluate_targets, load_checkpoint

    cfg = _load_config(args)
    if args.manifest:
        cfg.eval_manifest = Path(args.manifest).resolve()
    manifest = cfg.require_manifest("eval_manifest")
    out = cfg.check_out_dir()
    if args.self_check:
        report = evaluate_targets(manifest, cfg.model.num_classes)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoint.pt"
        if not ckpt.is_file():
            raise CommandError(f"checkpoint not found: {ckpt}")
        state = load_checkpoint(ckpt)
        report = evaluate(state.model, manifest, batch_size=cfg.settings.eval_batch_size)
    write_report(report, out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg = _load_config(args)
    train_manifest = cfg.require_manifest("train_manifest")
    eval_manifest = cfg.require_manifest("eval_manifest")
    out = cfg.check_out_dir()
    table = run_ablation(cfg.model, train_manifest, eval_manifest, cfg.seeds, cfg.iterations, cfg.settings)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table.to_text())
    (out / "ablation.csv").write_text(table.to_csv())
    sys.stdout.write(table.to_text())
    failed = [key for key, cell in table.cells.items() if isinstance(cell, str)]
    if failed:
        raise CommandError(f"{len(failed)} ablation cell(s) failed; see {out / 'ablation.txt'}")
    return 0


def cmd_report(args) -> int:
    from .dataset import load_split
    from .objectives import parse_log_line
    from .report import plot_class_iou, plot_losses, write_overlays
    from .trainer import evaluate, load_checkpoint

    cfg = _load_config(args)
    if args.manifest:
        cfg.eval_manifest = Path(args.manifest).resolve()
    manifest = cfg.require_manifest("eval_manifest")
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoint.pt"
    if not ckpt.is_file():
        raise CommandError(f"checkpoint not found: {ckpt}")
    out = cfg.check_out_dir()
    state = load_checkpoint(ckpt)
    samples = load_split(manifest)
    if args.count is not None:
        samples = samples[: args.count]
    if not samples:
        raise CommandError("no samples to render")
    overlay_dir = out / "overlays"
    for s in samples:
        write_overlays(state.model, s, overlay_dir)
    if args.log:
        history = [parse_log_line(line)[1] for line in Path(args.log).read_text().splitlines() if line.strip()]
    else:
        history = state.loss_history
    if history:
        plot_losses(history, out / "loss_curve.png")
    report = evaluate(state.model, samples, batch_size=cfg.settings.eval_batch_size)
    plot_class_iou([c.iou for c in report.per_class], out / "class_iou.png")
    write_report(report, out)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spdnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", help="YAML run config; flags override its values")
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "variant" in flags:
            p.add_argument("--variant", choices=("SPD", "SP", "SD", "S"))
        if "out" in flags:
            p.add_argument("--out")
        if "manifest" in flags:
            p.add_argument("--manifest")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint")

    p = sub.add_parser("synth", help="generate a synthetic split")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant")
    common(p, "seed", "variant", "out", "manifest", "checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, "variant", "out", "manifest", "checkpoint")
    p.add_argument("--self-check", action="store_true", help="score the annotations against themselves")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all four variants per seed")
    common(p, "seed", "out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="overlays and plots for a checkpoint")
    common(p, "out", "manifest", "checkpoint")
    p.add_argument("--count", type=int, help="render only the first N samples")
    p.add_argument("--log", help="training log to plot instead of the checkpoint history")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"spdnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
