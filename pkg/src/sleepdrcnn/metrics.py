"""Ranking metrics over long score tracks, confusion matrices, one-vs-all rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import label_remap
from .errors import ValidationError
from .record_io import SAMPLE_RATE


@dataclass
class ScoredTrack:
    scores: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None  # True = sample is scored

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(bool)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        n = self.scores.shape[0]
        if self.labels.shape[0] != n or (self.mask is not None and self.mask.shape[0] != n):
            raise ValidationError("scores, labels and mask must have equal lengths")

    def valid(self) -> tuple[np.ndarray, np.ndarray]:
        if self.mask is None:
            return self.scores, self.labels
        return self.scores[self.mask], self.labels[self.mask]


def _curve(track: ScoredTrack) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative TP/FP counts at each distinct score, highest score first."""
    s, y = track.valid()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    last = np.concatenate((last, [s.size - 1])) if s.size else last
    tp = np.cumsum(y, dtype=np.int64)[last]
    fp = (last + 1) - tp
    return tp, fp, int(y.sum()), int(y.size - y.sum())


def auprc(track: ScoredTrack) -> float:
    """Average precision: sum over thresholds of precision times recall gain.

    Samples sharing a score enter together.
    """
    tp, fp, n_pos, _ = _curve(track)
    if n_pos == 0:
        raise ValidationError("AUPRC needs at least one valid positive")
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.concatenate(([0], tp))) / n_pos
    return float(np.sum(precision * recall_gain))


def auroc(track: ScoredTrack) -> float:
    """Trapezoidal ROC area (ties count one half)."""
    tp, fp, n_pos, n_neg = _curve(track)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs valid positives and negatives")
    tpr = np.concatenate(([0], tp)) / n_pos
    fpr = np.concatenate(([0], fp)) / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auprc_bruteforce(scores, labels) -> float:
    """O(n * thresholds) reference for :func:`auprc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    total, prev_recall = 0.0, 0.0
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        tp = np.sum(pred & labels)
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / pred.sum())
        prev_recall = recall
    return float(total)


def auroc_pairwise(scores, labels) -> float:
    """Mann-Whitney reference for :func:`auroc`: P(score_pos > score_neg) + ties / 2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


def upsample_hold(track_1hz: np.ndarray, factor: int = SAMPLE_RATE, length: int | None = None) -> np.ndarray:
    out = np.repeat(np.asarray(track_1hz), factor)
    return out if length is None else out[:length]


def challenge_arousal_track(probs: np.ndarray, arousal_labels: np.ndarray,
                            mask_nontarget: bool = True) -> ScoredTrack:
    """Arousal marginal held at 200 Hz against the per-sample arousal labels.

    With ``mask_nontarget`` samples labelled -1 are not scored; otherwise they
    count as negatives.
    """
    p_ar = label_remap.marginals(probs, check=False).arousal
    n = arousal_labels.shape[0]
    if p_ar.size * SAMPLE_RATE < n:
        raise ValidationError("prediction track shorter than the labels")
    scores = upsample_hold(p_ar, SAMPLE_RATE, n)
    mask = arousal_labels != -1 if mask_nontarget else None
    return ScoredTrack(scores, arousal_labels == 1, mask)


def task_tracks_from_bins(probs: np.ndarray, bins: np.ndarray,
                          mask_nontarget: bool = True) -> dict[str, ScoredTrack]:
    """Per-task scored tracks at the label resolution of ``bins`` (1 Hz output codes).

    Ignore bins are never scored. For arousal, wake and apnea bins carry the
    non-target label and are dropped when ``mask_nontarget`` is set.
    """
    n = bins.shape[0]
    m = label_remap.marginals(probs[:, :n], check=False)
    y_ar, y_ap, y_sl, valid = label_remap.bin_targets(bins)
    ar_mask = valid & ~np.isin(bins, (label_remap.WAKE, label_remap.APNEA)) if mask_nontarget else valid
    return {
        "arousal": ScoredTrack(m.arousal, y_ar, ar_mask),
        "apnea": ScoredTrack(m.apnea, y_ap, valid),
        "sleep": ScoredTrack(m.sleep, y_sl, valid),
    }


def concat_tracks(tracks: list[ScoredTrack]) -> ScoredTrack:
    masks = [t.mask if t.mask is not None else np.ones(t.scores.size, bool) for t in tracks]
    return ScoredTrack(np.concatenate([t.scores for t in tracks]),
                       np.concatenate([t.labels for t in tracks]),
                       np.concatenate(masks))


def six_metrics(tracks: dict[str, ScoredTrack]) -> dict[str, float]:
    """AUROC and AUPRC for each task; NaN where a task has no positives or negatives."""
    out = {}
    for task in ("arousal", "apnea", "sleep"):
        tr = tracks[task]
        for name, fn in (("auroc", auroc), ("auprc", auprc)):
            try:
                out[f"{task}_{name}"] = fn(tr)
            except ValidationError:
                out[f"{task}_{name}"] = float("nan")
    return out


def confusion_matrix(predicted, true, k: int) -> np.ndarray:
    """k x k counts, rows = true class, columns = predicted class."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValidationError("predicted and true class vectors differ in length")
    if predicted.size and (min(predicted.min(), true.min()) < 0 or max(predicted.max(), true.max()) >= k):
        raise ValidationError(f"class index outside 0..{k - 1}")
    return np.bincount(true * k + predicted, minlength=k * k).reshape(k, k)


@dataclass
class ClassRates:
    sensitivity: float
    specificity: float
    sensitivity_defined: bool
    specificity_defined: bool


def one_vs_all_sens_spec(cm: np.ndarray) -> list[ClassRates]:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    out = []
    for i in range(cm.shape[0]):
        tp = cm[i, i]
        fn = cm[i].sum() - tp
        fp = cm[:, i].sum() - tp
        tn = total - tp - fn - fp
        sd, pd = (tp + fn) > 0, (tn + fp) > 0
        out.append(ClassRates(
            sensitivity=tp / (tp + fn) if sd else float("nan"),
            specificity=tn / (tn + fp) if pd else float("nan"),
            sensitivity_defined=bool(sd), specificity_defined=bool(pd)))
    return out
