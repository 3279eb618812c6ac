"""Run configuration, the end-to-end desk pipeline and the ablation suite."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import clinical, metrics, training
from .errors import ValidationError
from .model import ABLATIONS, ModelConfig, apply_ablation, load_checkpoint
from .record_io import RawRecord, generate_synthetic, read_record, write_record
from .signal_prep import (NIGHT_S, PreparedRecord, downsample_labels, prepare_record,
                          write_prepared)

log = logging.getLogger(__name__)

CONFIG_NAME = "run_config.json"
AUX_METRICS = ("apnea_auprc", "apnea_auroc", "sleep_auprc", "sleep_auroc")


def derive_seed(root: int, stage: str, *extra: int) -> int:
    """Stable per-stage seed derived from the root seed."""
    ss = np.random.SeedSequence([root, zlib.crc32(stage.encode()), *extra])
    return int(ss.generate_state(1)[0])


@dataclass
class RunConfig:
    out_dir: str = "run"
    data_dir: str | None = None   # raw records; synthesized when absent
    seed: int = 0
    n_records: int = 20
    duration_s: int = 1200
    pad_to_s: int = 1200
    folds: tuple[int, ...] = (1, 2, 3, 4)
    model: dict = field(default_factory=dict)   # ModelConfig.desk overrides
    train: dict = field(default_factory=dict)   # TrainConfig.desk overrides
    workers: int = 1

    def __post_init__(self) -> None:
        self.folds = tuple(self.folds)
        if any(f not in (1, 2, 3, 4) for f in self.folds) or not self.folds:
            raise ValidationError("folds must be a non-empty subset of 1..4")
        if self.duration_s > self.pad_to_s:
            raise ValidationError("duration_s exceeds pad_to_s")
        if self.pad_to_s > NIGHT_S:
            raise ValidationError(f"pad_to_s above the {NIGHT_S} s night length")
        self.model_config()
        self.train_config()

    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        base = dict(n_records=training.REFERENCE_RECORDS, duration_s=NIGHT_S, pad_to_s=NIGHT_S,
                    model={"__full__": True}, train={"__full__": True})
        base.update(overrides)
        return cls(**base)

    def model_config(self) -> ModelConfig:
        m = dict(self.model)
        if m.pop("__full__", False):
            return ModelConfig.from_dict({**ModelConfig().to_dict(), **m})
        return ModelConfig.desk(**m)

    def train_config(self) -> training.TrainConfig:
        t = dict(self.train)
        if t.pop("__full__", False):
            return training.TrainConfig.from_dict(t)
        return training.TrainConfig.from_dict({**training.TrainConfig.desk().to_dict(), **t})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["folds"] = list(self.folds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.4f}"


def _clean(d: dict) -> dict:
    # JSON has no NaN; write null
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def prepare_output(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------
# data stages
# --------------------------------------------------------------------------

def synthesize(out: Path, n_records: int, duration_s: int, seed: int,
               overwrite: bool = False) -> list[Path]:
    paths = []
    for i in range(n_records):
        rec = generate_synthetic(derive_seed(seed, "synth", i), duration_s, record_id=f"rec{i:04d}")
        p = out / rec.record_id
        write_record(rec, p, overwrite=overwrite)
        paths.append(p)
    return paths


def load_raw(cfg: RunConfig, raw_dir: Path) -> list[RawRecord]:
    if cfg.data_dir is not None:
        src = Path(cfg.data_dir)
        paths = sorted(p for p in src.iterdir() if (p / "manifest").is_file())
    else:
        paths = synthesize(raw_dir, cfg.n_records, cfg.duration_s, cfg.seed)
    return [read_record(p) for p in paths]


def truth_summary(raw: RawRecord) -> clinical.ClinicalSummary:
    ar, ap, sl = downsample_labels(raw.arousal_labels, raw.apnea_labels, raw.sleep_labels)
    return clinical.summary_from_labels(ar, ap, sl)


# --------------------------------------------------------------------------
# end to end
# --------------------------------------------------------------------------

def _metric_rows(name: str, scores: dict) -> str:
    return f"{name:<18}" + "".join(f"{_fmt(scores[k]):>15}" for k in training.METRIC_KEYS)


def _metric_header() -> str:
    return f"{'model':<18}" + "".join(f"{k:>15}" for k in training.METRIC_KEYS)


def challenge_metrics(models, raws: Sequence[RawRecord], preps: Sequence[PreparedRecord]) -> dict:
    """Arousal AUPRC/AUROC on the 200 Hz label track with -1 samples excluded."""
    tracks = []
    for raw, prep in zip(raws, preps):
        probs = training.ensemble_predict(models, prep.signals)
        tracks.append(metrics.challenge_arousal_track(probs, raw.arousal_labels))
    tr = metrics.concat_tracks(tracks)
    out = {}
    for name, fn in (("auprc", metrics.auprc), ("auroc", metrics.auroc)):
        try:
            out[f"arousal_{name}"] = fn(tr)
        except ValidationError:
            out[f"arousal_{name}"] = float("nan")
    return out


def end_to_end(cfg: RunConfig, force: bool = False,
               on_epoch: Callable[[str], None] | None = None) -> Path:
    """synth/prepare -> per-fold training -> ensemble -> metric and clinical reports."""
    out = Path(cfg.out_dir)
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
        raise ValidationError(f"data directory {cfg.data_dir} does not exist")
    model_cfg, train_cfg = cfg.model_config(), cfg.train_config()
    prepare_output(out, force)
    (out / CONFIG_NAME).write_text(cfg.to_json())

    raws = load_raw(cfg, out / "raw")
    if len(raws) < 10:
        raise ValidationError(f"need at least 10 records, found {len(raws)}")
    preps = [prepare_record(r, pad_to_s=cfg.pad_to_s, normalize=model_cfg.moving_normalization)
             for r in raws]
    for p in preps:
        write_prepared(p, out / "prepared" / p.source_id)
    store = training.RecordStore(preps)

    folds = training.make_folds(len(preps), derive_seed(cfg.seed, "folds"))
    (out / "folds.json").write_text(json.dumps([f.to_dict() for f in folds], indent=1) + "\n")
    members = []
    per_model = {}
    test_idx = folds[0].testing_indices
    for fold in folds:
        if fold.fold_number not in cfg.folds:
            continue
        training.fit(model_cfg, train_cfg, store, fold, derive_seed(cfg.seed, "train"),
                     out / f"fold{fold.fold_number}", on_epoch)
        model, _ = load_checkpoint(out / f"fold{fold.fold_number}" / "best")
        members.append(model)
        per_model[f"fold{fold.fold_number}"] = training.evaluate(model, store, test_idx)

    pred_dir = out / "predictions"
    pred_dir.mkdir()
    preds = {}
    for i in test_idx:
        rec = store[i]
        p = training.ensemble_predict(members, rec.signals)
        preds[i] = p
        np.save(pred_dir / f"{rec.source_id}.npy", p)
    per_model["ensemble"] = training.evaluate(members, store, test_idx)
    chal = challenge_metrics(members, [raws[i] for i in test_idx], [preps[i] for i in test_idx])

    lines = ["Test-set metrics (1 Hz tracks, ignore bins excluded)", "", _metric_header()]
    lines += [_metric_rows(k, v) for k, v in per_model.items()]
    lines += ["", "Ensemble arousal on the 200 Hz label track (-1 samples excluded)",
              f"auprc {_fmt(chal['arousal_auprc'])}  auroc {_fmt(chal['arousal_auroc'])}"]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    with (out / "metrics.jsonl").open("w") as fh:
        for k, v in per_model.items():
            fh.write(json.dumps({"model": k, **_clean(v)}, sort_keys=True) + "\n")
        fh.write(json.dumps({"model": "ensemble_200hz", **_clean(chal)}, sort_keys=True) + "\n")

    write_clinical(out, [raws[i] for i in test_idx], [preds[i] for i in test_idx],
                   [preps[i] for i in test_idx])
    return out


def write_clinical(out: Path, raws: Sequence[RawRecord], preds: Sequence[np.ndarray],
                   preps: Sequence[PreparedRecord]) -> None:
    truth, pred_own, pred_true_tst = [], [], []
    with (out / "clinical.jsonl").open("w") as fh:
        for raw, p, prep in zip(raws, preds, preps):
            n = int(round(prep.valid_length_s))
            t = truth_summary(raw)
            a = clinical.summary_from_probs(p, n)
            b = clinical.summary_from_probs(p, n, tst_override_min=t.tst_min if t.defined else None)
            truth.append(t), pred_own.append(a), pred_true_tst.append(b)
            fh.write(json.dumps({"record": prep.source_id, "truth": _clean(t.to_dict()),
                                 "pred_tst_predicted": _clean(a.to_dict()),
                                 "pred_tst_annotated": _clean(b.to_dict())}, sort_keys=True) + "\n")
    parts = []
    for label, preds_ in (("TST from predicted sleep", pred_own),
                          ("TST from annotated sleep", pred_true_tst)):
        try:
            parts.append(clinical.format_report(clinical.cohort_stats(preds_, truth),
                                                f"Clinical summary ({label})"))
        except ValidationError as exc:
            parts.append(f"Clinical summary ({label})\nunavailable: {exc}\n")
    (out / "clinical.txt").write_text("\n".join(parts))


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

@dataclass
class AblationRow:
    experiment: int
    description: str
    scores: dict
    status: str = "ok"
    invalid: tuple[str, ...] = ()
    best_epoch: int = 0
    progress: list = field(default_factory=list)   # per-epoch validation arousal AUPRC

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "description": self.description,
                "status": self.status, "invalid": list(self.invalid),
                "best_epoch": self.best_epoch, **_clean(self.scores)}


def run_ablation_suite(cfg: RunConfig, experiments: Sequence[int] = tuple(range(1, 11)),
                       force: bool = False, raws: Sequence[RawRecord] | None = None,
                       on_epoch: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train every experiment on fold 1 and report six test metrics per row."""
    for e in experiments:
        if e not in ABLATIONS:
            raise ValidationError(f"unknown experiment {e}")
    out = Path(cfg.out_dir)
    prepare_output(out, force)
    (out / CONFIG_NAME).write_text(cfg.to_json())
    if raws is None:
        raws = load_raw(cfg, out / "raw")
    base, train_cfg = cfg.model_config(), cfg.train_config()
    fold = training.make_folds(len(raws), derive_seed(cfg.seed, "folds"))[0]
    stores: dict[bool, training.RecordStore] = {}
    rows = []
    for e in experiments:
        mcfg = apply_ablation(base, e)
        try:
            if mcfg.moving_normalization not in stores:
                stores[mcfg.moving_normalization] = training.RecordStore(
                    [prepare_record(r, pad_to_s=cfg.pad_to_s, normalize=mcfg.moving_normalization)
                     for r in raws])
            store = stores[mcfg.moving_normalization]
            res = training.fit(mcfg, train_cfg, store, fold, derive_seed(cfg.seed, "train"),
                               out / f"exp{e}", on_epoch)
            scores = training.evaluate(res.best_model, store, fold.testing_indices)
            rows.append(AblationRow(e, ABLATIONS[e], scores,
                                    invalid=AUX_METRICS if not mcfg.multi_task else (),
                                    best_epoch=res.best_epoch,
                                    progress=[h["arousal_auprc"] for h in res.history]))
        except Exception as exc:  # isolate the row
            log.exception("experiment %d failed", e)
            rows.append(AblationRow(e, ABLATIONS[e], {k: float("nan") for k in training.METRIC_KEYS},
                                    status=f"failed: {type(exc).__name__}: {exc}"))
    write_ablation_report(out, rows)
    return rows


def format_ablation_table(rows: Sequence[AblationRow]) -> str:
    head = f"{'exp':>4}  {'description':<52}" + "".join(f"{k:>15}" for k in training.METRIC_KEYS)
    lines = ["Ablation results (fold 1, test records; * = metric not valid for the experiment)",
             "", head]
    for r in rows:
        cells = []
        for k in training.METRIC_KEYS:
            v = _fmt(r.scores[k]) + ("*" if k in r.invalid else " ")
            cells.append(f"{v:>15}")
        line = f"{r.experiment:>4}  {r.description:<52}" + "".join(cells)
        if r.status != "ok":
            line += "  " + r.status
        lines.append(line)
    return "\n".join(lines) + "\n"


def format_progress(rows: Sequence[AblationRow]) -> str:
    """Validation arousal AUPRC per epoch, one column per experiment."""
    n = max((len(r.progress) for r in rows), default=0)
    lines = ["Validation arousal AUPRC by epoch", "",
             f"{'epoch':>6}" + "".join(f"{'exp' + str(r.experiment):>9}" for r in rows)]
    for i in range(n):
        cells = "".join(f"{_fmt(r.progress[i]) if i < len(r.progress) else '':>9}" for r in rows)
        lines.append(f"{i + 1:>6}" + cells)
    return "\n".join(lines) + "\n"


def write_ablation_report(out: Path, rows: Sequence[AblationRow]) -> None:
    (out / "ablation.txt").write_text(format_ablation_table(rows))
    (out / "ablation_progress.txt").write_text(format_progress(rows))
    with (out / "ablation.jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    with (out / "ablation_progress.jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps({"experiment": r.experiment,
                                 "arousal_auprc": [None if math.isnan(v) else v for v in r.progress]})
                     + "\n")
