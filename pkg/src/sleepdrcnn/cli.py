"""Command-line entry point: ``sleepdrcnn <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import clinical, metrics, pipeline, training
from .errors import FormatError, NumericalError, SleepNetError, ValidationError
from .model import load_checkpoint
from .record_io import generate_synthetic, read_plan, read_record, write_record
from .signal_prep import NIGHT_S, prepare_directory, read_prepared

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("sleepdrcnn")


def _check_out_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)


def _record_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if (p / "manifest").is_file())


def _load_config(path: str | None, **overrides) -> pipeline.RunConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return pipeline.RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(a) -> int:
    out = Path(a.out)
    plan = read_plan(a.plan) if a.plan else None
    if plan is not None and a.n != 1:
        raise ValidationError("--plan describes a single record; use --n 1")
    for i in range(a.n):
        rid = f"rec{i:04d}"
        rec = generate_synthetic(pipeline.derive_seed(a.seed, "synth", i), a.duration,
                                 event_plan=plan, record_id=rid)
        write_record(rec, out / rid, overwrite=a.force)
    print(f"wrote {a.n} records to {out}")
    return EXIT_OK


def cmd_prepare(a) -> int:
    ids = prepare_directory(a.src, a.out, pad_to_s=a.pad_to, normalize=not a.no_normalize,
                            workers=a.workers, overwrite=a.force)
    print(f"prepared {len(ids)} records into {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = _load_config(a.config, seed=a.seed)
    out = Path(a.out)
    pipeline.prepare_output(out, a.force)
    (out / pipeline.CONFIG_NAME).write_text(cfg.to_json())
    store = training.RecordStore.from_directory(a.data)
    fold = training.make_folds(len(store), pipeline.derive_seed(cfg.seed, "folds"))[a.fold - 1]
    res = training.fit(cfg.model_config(), cfg.train_config(), store, fold,
                       pipeline.derive_seed(cfg.seed, "train"), out, on_epoch=print)
    print(f"fold {a.fold}: best epoch {res.best_epoch}, arousal AUPRC "
          f"{res.best_scores['arousal_auprc']:.4f}; checkpoint {out / 'best'}")
    return EXIT_OK


def _predict_to(models, record_path: str, out: Path, force: bool) -> None:
    _check_out_file(out, force)
    rec = read_prepared(record_path)
    np.save(out, training.ensemble_predict(models, rec.signals))


def cmd_ensemble(a) -> int:
    if len(a.models) < 2:
        raise ValidationError("ensemble needs at least two checkpoints")
    _predict_to(training.load_models(a.models), a.record, Path(a.out), a.force)
    print(f"wrote {a.out}")
    return EXIT_OK


def cmd_predict(a) -> int:
    _predict_to([load_checkpoint(a.model)[0]], a.record, Path(a.out), a.force)
    print(f"wrote {a.out}")
    return EXIT_OK


def _load_predictions(pred_dir: Path) -> dict[str, np.ndarray]:
    if not pred_dir.is_dir():
        raise ValidationError(f"{pred_dir} is not a directory")
    preds = {p.stem: np.load(p) for p in sorted(pred_dir.glob("*.npy"))}
    if not preds:
        raise ValidationError(f"no .npy predictions in {pred_dir}")
    return preds


def _write_report(text: str, rows: list[dict], out: str | None, force: bool) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    _check_out_file(path, force)
    path.write_text(text)
    with path.with_suffix(".jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_evaluate(a) -> int:
    preds = _load_predictions(Path(a.pred))
    per_task = {t: [] for t in ("arousal", "apnea", "sleep")}
    for d in _record_dirs(Path(a.truth)):
        rec = read_prepared(d)
        if rec.source_id not in preds:
            continue
        for task, tr in metrics.task_tracks_from_bins(preds[rec.source_id], rec.bin_labels_1hz).items():
            per_task[task].append(tr)
    if not per_task["arousal"]:
        raise ValidationError("no prediction matches a record in the truth directory")
    scores = metrics.six_metrics({t: metrics.concat_tracks(v) for t, v in per_task.items()})
    text = "".join(f"{k:<16}{pipeline._fmt(scores[k]):>10}\n" for k in training.METRIC_KEYS)
    text = f"records: {len(per_task['arousal'])}\n" + text
    _write_report(text, [pipeline._clean(scores)], a.out, a.force)
    return EXIT_OK


def cmd_report(a) -> int:
    preds = _load_predictions(Path(a.pred))
    truth, pred_sum, rows = [], [], []
    for d in _record_dirs(Path(a.truth)):
        raw = read_record(d)
        if raw.record_id not in preds:
            continue
        t = pipeline.truth_summary(raw)
        p = clinical.summary_from_probs(preds[raw.record_id], int(round(raw.duration_s)),
                                        apnea_threshold=a.apnea_threshold)
        truth.append(t), pred_sum.append(p)
        rows.append({"record": raw.record_id, "truth": pipeline._clean(t.to_dict()),
                     "pred": pipeline._clean(p.to_dict())})
    if not truth:
        raise ValidationError("no prediction matches a record in the truth directory")
    text = clinical.format_report(clinical.cohort_stats(pred_sum, truth))
    _write_report(text, rows, a.out, a.force)
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg = _load_config(a.config, out_dir=a.out, seed=a.seed)
    rows = pipeline.run_ablation_suite(cfg, a.experiments or list(range(1, 11)), force=a.force,
                                       on_epoch=print if a.verbose else None)
    sys.stdout.write(pipeline.format_ablation_table(rows))
    return EXIT_OK


def cmd_run(a) -> int:
    cfg = _load_config(a.config, out_dir=a.out, seed=a.seed)
    out = pipeline.end_to_end(cfg, force=a.force, on_epoch=print if a.verbose else None)
    sys.stdout.write((out / "metrics.txt").read_text())
    return EXIT_OK


def cmd_selftest(a) -> int:
    from . import selftest
    ok = selftest.run(print)
    return EXIT_OK if ok else EXIT_NUMERICAL


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sleepdrcnn", description="Sleep arousal/apnea detection pipeline")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate synthetic records")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--duration", type=int, default=1200, help="seconds per record")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plan", help="event plan file (task start end value per line)")
    p.add_argument("--force", action="store_true")

    p = add("prepare", cmd_prepare, "filter, decimate, normalize and pad records")
    p.add_argument("--in", "--src", dest="src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pad-to", type=int, default=NIGHT_S, help="padded length in seconds")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--force", action="store_true")

    p = add("train", cmd_train, "train one fold")
    p.add_argument("--data", required=True, help="prepared records")
    p.add_argument("--fold", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("ensemble", cmd_ensemble, "average checkpoints on one prepared record")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True, help=".npy output")
    p.add_argument("--force", action="store_true")

    p = add("predict", cmd_predict, "single-checkpoint prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True, help=".npy output")
    p.add_argument("--force", action="store_true")

    p = add("evaluate", cmd_evaluate, "six metrics for predictions against prepared records")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = add("report", cmd_report, "clinical report against raw records")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--apnea-threshold", type=float, default=clinical.APNEA_THRESHOLD)
    p.add_argument("--force", action="store_true")

    p = add("ablate", cmd_ablate, "ablation suite on fold 1")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--experiments", type=int, nargs="*")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--force", action="store_true")

    p = add("run", cmd_run, "full pipeline")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--force", action="store_true")

    add("selftest", cmd_selftest, "quick numerical self checks")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, FormatError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SleepNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
