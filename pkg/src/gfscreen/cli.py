"""Command-line harness: gen-data, train, infer, eval, ablate, report.

Every subcommand takes ``--config``, ``--out`` and ``--seed``. Exit codes:
0 success, 1 validation error (bad config, missing file, corrupt blob),
2 numerical failure (NaN/inf loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from ._fnv import fnv1a64_hex
from ._validation import NumericalError, ValidationError
from .config import ExperimentConfig, load_config
from .metrics import EvalReport, FlopModel
from .pipeline import (
    ABLATION_VARIANTS,
    LOSS_CURVE_COLUMNS,
    EpochStats,
    Trainer,
    _inference_focus,
    evaluate,
    infer_scan,
    run_ablation,
    screen_scans,
)
from .synthvol import generate_scan

log = logging.getLogger("gfscreen")

EVAL_SPLITS = ("val", "healthy-val")
SUMMARY_COLUMNS = ("variant", "glance_sensitivity", "glance_specificity", "preserved_ratio",
                   "positive_window_prevalence", "speedup", "aggregate_dsc", "detection_f1", "fp_rate",
                   "n_windows", "n_selected")


def _write_csv(path, columns, rows, digest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*columns, "config_digest"])
        for row in rows:
            w.writerow([*(_fmt(row[c]) for c in columns), digest])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _setup(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config, seed=args.seed)
    out = Path(args.out if args.out is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.dump_json(out / "resolved_config.json", {"config": cfg.to_dict(), "config_digest": cfg.digest})
    return cfg, out


def _manifest_path(args, out: Path) -> Path:
    return Path(args.manifest) if args.manifest else out / "manifest.json"


def cmd_gen_data(args) -> int:
    cfg, out = _setup(args)
    data = out / "data"
    entries = []
    for scan_id, split, spec in cfg.scan_specs():
        scan = generate_scan(spec, scan_id=scan_id)
        sidecar = io.write_scan(data, scan, cfg.digest)
        entries.append((scan_id, split, sidecar.relative_to(out).as_posix()))
    io.write_manifest(out / "manifest.json", entries, cfg.digest)
    log.info("wrote %d scans to %s", len(entries), data)
    return 0


def _checkpoint_kwargs(cfg: ExperimentConfig, trainer: Trainer):
    return dict(train_config=cfg.train.to_dict(), history=[h.to_dict() for h in trainer.history],
                digest=cfg.digest)


def cmd_train(args) -> int:
    cfg, out = _setup(args)
    scans = [s for s, _ in io.read_manifest(_manifest_path(args, out), splits=("train",))]
    trainer = Trainer(cfg.train, scans)
    state = trainer.init_state()
    if args.resume:
        ckpt = io.load_checkpoint(args.resume)
        if ckpt.train_config != cfg.train.to_dict():
            raise ValidationError(f"{args.resume}: checkpoint was trained with a different train config")
        rows = io.restore_state(ckpt, state)
        trainer.history = [EpochStats(**h) for h in ckpt.history]
        trainer.loss_rows = [{c: (int(v) if c in ("step", "epoch") else float(v))
                              for c, v in zip(LOSS_CURVE_COLUMNS, row)} for row in rows]
        log.info("resumed from %s at epoch %d", args.resume, state.epoch)
    trainer.fit(state, stop_after=args.stop_after_epoch)

    g = cfg.train.grl
    resume = io.state_arrays(state, trainer.loss_rows, LOSS_CURVE_COLUMNS)
    io.save_checkpoint(out / "checkpoint_final.ckpt", state.glance, state.focus, g, state.epoch, cfg.seed,
                       resume=resume, kind="final", **_checkpoint_kwargs(cfg, trainer))
    if state.best_glance is not None:
        io.save_checkpoint(out / "checkpoint_best.ckpt", state.best_glance, state.best_focus, g,
                           state.best_epoch + 1, cfg.seed, kind="best", **_checkpoint_kwargs(cfg, trainer))
    _write_csv(out / "loss_curve.csv", LOSS_CURVE_COLUMNS, trainer.loss_rows, cfg.digest)
    io.dump_json(out / "epoch_stats.json", {
        "config_digest": cfg.digest,
        "epochs_completed": state.epoch,
        "best_epoch": state.best_epoch,
        "best_selected_reward": state.best_score if state.best_epoch >= 0 else None,
        "epochs": [h.to_dict() for h in trainer.history],
    })
    return 0


def _pred_dir(args, out: Path) -> Path:
    if args.pred_dir:
        return Path(args.pred_dir)
    return out / ("pred_noglance" if getattr(args, "no_glance", False) else "pred")


def cmd_infer(args) -> int:
    cfg, out = _setup(args)
    ckpt = io.load_checkpoint(args.checkpoint or out / "checkpoint_final.ckpt")
    scans = io.read_manifest(_manifest_path(args, out), splits=EVAL_SPLITS)
    inf = cfg.inference
    focus = _inference_focus(cfg.train, ckpt.focus)
    glance = None if args.no_glance else ckpt.glance
    pred_dir = _pred_dir(args, out)
    pred_dir.mkdir(parents=True, exist_ok=True)
    ckpt_digest = ckpt.header["weights"]["digest"]
    summary = []
    for scan, split in scans:
        mask, stats = infer_scan(glance, focus, scan, inf.window, inf.stride, inf.tau, inf.seg_threshold)
        mask_digest = io.write_mask(pred_dir / f"{scan.scan_id}.mask", mask)
        io.dump_json(pred_dir / f"{scan.scan_id}.json", {
            **stats,
            "split": split,
            "dims": list(scan.dims),
            "mask_file": f"{scan.scan_id}.mask",
            "mask_digest": mask_digest,
            "selected_regions": [w["region"] for w in stats["windows"] if w["selected"]],
            "checkpoint_digest": ckpt_digest,
            "config_digest": cfg.digest,
        })
        summary.append({"scan_id": scan.scan_id, "split": split, "n_windows": stats["n_windows"],
                         "n_selected": stats["n_selected"]})
    n_win = sum(s["n_windows"] for s in summary)
    n_sel = sum(s["n_selected"] for s in summary)
    io.dump_json(pred_dir / "selection_stats.json", {
        "config_digest": cfg.digest,
        "checkpoint_digest": ckpt_digest,
        "glance_used": glance is not None,
        "glance_hidden": ckpt.glance.hidden,
        "inference": inf.to_dict(),
        "n_windows": n_win,
        "n_selected": n_sel,
        "preserved_ratio": n_sel / n_win if n_win else 0.0,
        "scans": summary,
    })
    log.info("screened %d scans: kept %d of %d windows", len(summary), n_sel, n_win)
    return 0


def cmd_eval(args) -> int:
    cfg, out = _setup(args)
    pred_dir = _pred_dir(args, out)
    sel = io.load_json(pred_dir / "selection_stats.json")
    scans = dict((s.scan_id, (s, split)) for s, split in io.read_manifest(_manifest_path(args, out),
                                                                          splits=EVAL_SPLITS))
    results = []
    for entry in sel["scans"]:
        if entry["scan_id"] not in scans:
            raise ValidationError(f"prediction for unknown scan {entry['scan_id']!r}")
        scan, split = scans[entry["scan_id"]]
        stats = io.load_json(pred_dir / f"{scan.scan_id}.json")
        pred = io.read_mask(pred_dir / stats["mask_file"], scan.dims)
        if fnv1a64_hex((pred_dir / stats["mask_file"]).read_bytes()) != stats["mask_digest"]:
            raise ValidationError(f"{stats['mask_file']}: digest mismatch")
        results.append((scan, pred, stats, split))
    fm = FlopModel.for_window(sel["inference"]["window"], sel["glance_hidden"])
    report = evaluate(results, fm, variant=pred_dir.name)
    dest = out / f"eval_{pred_dir.name}"
    dest.mkdir(parents=True, exist_ok=True)
    io.dump_json(dest / "report.json", {**report.to_dict(), "config_digest": cfg.digest})
    _write_csv(dest / "summary.csv", SUMMARY_COLUMNS, [report.summary_row()], cfg.digest)
    log.info("%s: dsc %.3f sens %.3f ratio %.3f speedup %.2f", pred_dir.name, report.aggregate_dsc,
             report.glance_sensitivity, report.preserved_ratio, report.speedup)
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _setup(args)
    manifest = _manifest_path(args, out)
    train_scans = [s for s, _ in io.read_manifest(manifest, splits=("train",))]
    eval_scans = io.read_manifest(manifest, splits=EVAL_SPLITS)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    inf = cfg.inference
    dest = out / "ablation"
    dest.mkdir(parents=True, exist_ok=True)
    fm = FlopModel.for_window(inf.window, cfg.train.glance_hidden)
    rows = []
    if cfg.train.focus_mode == "oracle":
        # the segment-everything baseline needs no training with an oracle focus model
        focus = _inference_focus(cfg.train, None)
        rows.append(evaluate(screen_scans(None, focus, eval_scans, inf.window, inf.stride, inf.tau,
                                          inf.seg_threshold), fm, variant="no_glance"))
    for variant in variants:
        rows.append(run_ablation(variant, cfg.train, train_scans, eval_scans, inf.window, inf.stride, inf.tau,
                                 inf.seg_threshold))
        log.info("%s: sens %.3f ratio %.3f", variant, rows[-1].glance_sensitivity, rows[-1].preserved_ratio)
    for rep in rows:
        io.dump_json(dest / f"{rep.variant}.json", {**rep.to_dict(), "config_digest": cfg.digest})
    _write_csv(dest / "comparison.csv", SUMMARY_COLUMNS, [r.summary_row() for r in rows], cfg.digest)
    return 0


def cmd_report(args) -> int:
    cfg, out = _setup(args)
    rows = []
    for path in sorted(out.glob("eval_*/report.json")):
        rows.append(EvalReport.from_dict({k: v for k, v in io.load_json(path).items() if k != "config_digest"}))
    for path in sorted((out / "ablation").glob("*.json")):
        rows.append(EvalReport.from_dict({k: v for k, v in io.load_json(path).items() if k != "config_digest"}))
    if not rows:
        raise ValidationError(f"no evaluation or ablation reports under {out}")
    cols = SUMMARY_COLUMNS[:-2]
    lines = [f"config digest: {cfg.digest}", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        d = r.summary_row()
        lines.append("| " + " | ".join(d[c] if c == "variant" else f"{d[c]:.3f}" for c in cols) + " |")
    text = "\n".join(lines) + "\n"
    (out / "report.md").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfscreen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="config JSON path or packaged config name")
    common.add_argument("--out", help="output directory (default: the config's out_dir)")
    common.add_argument("--seed", type=int, help="override the config seed")

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset and manifest")
    p = sub.add_parser("train", parents=[common], help="train glance and focus models")
    p.add_argument("--manifest")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after-epoch", type=int, help="stop once this many epochs are complete")
    p = sub.add_parser("infer", parents=[common], help="screen val scans with a checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--no-glance", action="store_true", help="segment every window (baseline)")
    p.add_argument("--pred-dir")
    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--manifest")
    p.add_argument("--pred-dir")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the objective variants")
    p.add_argument("--manifest")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATION_VARIANTS)}")
    sub.add_parser("report", parents=[common], help="tabulate evaluation and ablation results")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"gfscreen: numerical error: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"gfscreen: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
