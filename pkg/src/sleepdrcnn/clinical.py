"""Clinical sleep summary: SE, arousal index, AHI, AHI grade and cohort statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import label_remap
from .errors import ValidationError
from .metrics import confusion_matrix, one_vs_all_sens_spec

GRADES = ("normal", "mild", "moderate", "severe")
GRADE_BOUNDS = (5.0, 15.0, 30.0)  # lower-inclusive starts of mild, moderate, severe

APNEA_THRESHOLD = 0.2
AROUSAL_THRESHOLD = 0.5
SLEEP_THRESHOLD = 0.5
MIN_EVENT_S = 10


def binarize(prob_track, threshold: float) -> np.ndarray:
    return (np.asarray(prob_track) >= threshold).astype(np.int8)


def event_runs(binary_track) -> list[tuple[int, int]]:
    """Maximal runs of ones as (start, end-exclusive)."""
    b = np.asarray(binary_track).astype(np.int8)
    edges = np.diff(np.concatenate(([0], b, [0])))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def count_events(binary_track, min_duration_s: int = MIN_EVENT_S) -> int:
    """Number of runs strictly longer than ``min_duration_s`` samples at 1 Hz."""
    return sum(1 for s, e in event_runs(binary_track) if e - s > min_duration_s)


def grade_ahi(ahi: float) -> str:
    if ahi is None or math.isnan(ahi):
        raise ValidationError("AHI undefined")
    if ahi < 0:
        raise ValidationError("AHI cannot be negative")
    for grade, bound in zip(GRADES, GRADE_BOUNDS):
        if ahi < bound:
            return grade
    return GRADES[-1]


@dataclass
class ClinicalSummary:
    tst_min: float
    trt_min: float
    se: float
    ai: float
    ahi: float
    grade: str | None
    n_arousals: int
    n_apneas: int
    defined: bool = True  # False when TST == 0 (AI, AHI and grade undefined)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_summary(sleep_track, arousal_track, apnea_track, trt_s: float,
                    tst_override_min: float | None = None) -> ClinicalSummary:
    """SE = TST / TRT; AI and AHI = qualifying events * 60 / TST (minutes).

    ``tst_override_min`` normalizes the event counts by another TST (for example
    the annotated one) while SE still uses the track's own TST.
    """
    sleep_track = np.asarray(sleep_track)
    if trt_s <= 0:
        raise ValidationError("total recording time must be positive")
    tst_min = float(np.sum(sleep_track == 1)) / 60.0
    trt_min = trt_s / 60.0
    if tst_min > trt_min + 1e-9:
        raise ValidationError("sleep track longer than the recording time")
    n_ar = count_events(arousal_track)
    n_ap = count_events(apnea_track)
    denom = tst_min if tst_override_min is None else tst_override_min
    if denom <= 0:
        return ClinicalSummary(tst_min, trt_min, tst_min / trt_min, float("nan"), float("nan"),
                               None, n_ar, n_ap, defined=False, notes=["TST is zero"])
    ai = n_ar * 60.0 / denom
    ahi = n_ap * 60.0 / denom
    return ClinicalSummary(tst_min, trt_min, tst_min / trt_min, ai, ahi, grade_ahi(ahi), n_ar, n_ap)


def summary_from_probs(probs: np.ndarray, n_seconds: int,
                       apnea_threshold: float = APNEA_THRESHOLD,
                       arousal_threshold: float = AROUSAL_THRESHOLD,
                       sleep_threshold: float = SLEEP_THRESHOLD,
                       tst_override_min: float | None = None) -> ClinicalSummary:
    m = label_remap.marginals(probs[:, :n_seconds], check=False)
    return compute_summary(binarize(m.sleep, sleep_threshold), binarize(m.arousal, arousal_threshold),
                           binarize(m.apnea, apnea_threshold), trt_s=n_seconds,
                           tst_override_min=tst_override_min)


def summary_from_labels(arousal_1hz, apnea_1hz, sleep_1hz) -> ClinicalSummary:
    """Reference summary from per-second annotations."""
    return compute_summary(np.asarray(sleep_1hz) == 1, np.asarray(arousal_1hz) == 1,
                           np.asarray(apnea_1hz) == 1, trt_s=len(sleep_1hz))


@dataclass
class CohortStats:
    mae_se: float
    mae_ai: float
    mae_ahi: float
    mean_true: dict
    mean_pred: dict
    confusion: np.ndarray
    accuracy: float
    normal_osr: float
    usr: dict  # grade -> under-estimation rate
    sens_spec: dict  # grade -> (sensitivity, specificity)
    n_subjects: int
    n_excluded: int


def grade_rates(cm: np.ndarray) -> tuple[float, float, dict]:
    """Accuracy, normal over-estimation rate, per-grade under-estimation rates."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else float("nan")
    row0 = cm[0].sum()
    osr = float(cm[0, 1:].sum() / row0) if row0 else float("nan")
    usr = {}
    for g in range(1, cm.shape[0]):
        row = cm[g].sum()
        usr[GRADES[g]] = float(cm[g, :g].sum() / row) if row else float("nan")
    return acc, osr, usr


def cohort_stats(summaries_pred: Sequence[ClinicalSummary],
                 summaries_true: Sequence[ClinicalSummary]) -> CohortStats:
    if len(summaries_pred) != len(summaries_true):
        raise ValidationError("predicted and true summaries must pair up")
    pairs = [(p, t) for p, t in zip(summaries_pred, summaries_true) if p.defined and t.defined]
    if not pairs:
        raise ValidationError("no subject with a defined summary on both sides")

    def col(side, key):
        return np.array([getattr(pair[side], key) for pair in pairs], dtype=np.float64)

    mae = {k: float(np.mean(np.abs(col(0, k) - col(1, k)))) for k in ("se", "ai", "ahi")}
    idx = {g: i for i, g in enumerate(GRADES)}
    cm = confusion_matrix([idx[p.grade] for p, _ in pairs], [idx[t.grade] for _, t in pairs], 4)
    acc, osr, usr = grade_rates(cm)
    rates = one_vs_all_sens_spec(cm)
    return CohortStats(
        mae_se=mae["se"], mae_ai=mae["ai"], mae_ahi=mae["ahi"],
        mean_true={k: float(col(1, k).mean()) for k in ("se", "ai", "ahi")},
        mean_pred={k: float(col(0, k).mean()) for k in ("se", "ai", "ahi")},
        confusion=cm, accuracy=acc, normal_osr=osr, usr=usr,
        sens_spec={g: (r.sensitivity, r.specificity) for g, r in zip(GRADES, rates)},
        n_subjects=len(pairs), n_excluded=len(summaries_pred) - len(pairs))


def format_report(stats: CohortStats, title: str = "Clinical summary") -> str:
    """Plain-text report: MAE block, grade confusion matrix, OSR/USR, sensitivity/specificity."""
    lines = [title, "=" * len(title), ""]
    lines.append(f"subjects: {stats.n_subjects} (excluded, TST = 0: {stats.n_excluded})")
    lines.append("")
    lines.append(f"{'metric':<22}{'value':>10}")
    for key, label in (("se", "SE"), ("ai", "AI"), ("ahi", "AHI")):
        lines.append(f"{label + ' MAE':<22}{getattr(stats, 'mae_' + key):>10.4f}")
    for key, label in (("se", "SE"), ("ai", "AI"), ("ahi", "AHI")):
        lines.append(f"{'Actual average ' + label:<22}{stats.mean_true[key]:>10.4f}")
        lines.append(f"{'Predicted average ' + label:<22}{stats.mean_pred[key]:>10.4f}")
    lines += ["", "AHI grade confusion matrix (rows real, columns predicted)"]
    lines.append(f"{'':<16}" + "".join(f"{g:>10}" for g in GRADES))
    for g, row in zip(GRADES, stats.confusion):
        lines.append(f"{'real ' + g:<16}" + "".join(f"{int(v):>10d}" for v in row))
    lines += ["", f"{'Overall accuracy':<22}{stats.accuracy:>10.4f}",
              f"{'Normal grade OSR':<22}{stats.normal_osr:>10.4f}"]
    for g, v in stats.usr.items():
        lines.append(f"{g.capitalize() + ' grade USR':<22}{v:>10.4f}")
    lines += ["", f"{'grade':<12}{'sensitivity':>12}{'specificity':>12}"]
    for g, (se, sp) in stats.sens_spec.items():
        lines.append(f"{g:<12}{se:>12.3f}{sp:>12.3f}")
    return "\n".join(lines) + "\n"
