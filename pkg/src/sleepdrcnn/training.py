"""Fold construction, Adam, record-sampling epochs, checkpointing and ensembling."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import label_remap, metrics
from .autodiff import Tensor
from .errors import NumericalError, ValidationError
from .model import DRCNN, ModelConfig, load_checkpoint, save_checkpoint
from .signal_prep import PreparedRecord, read_prepared

log = logging.getLogger(__name__)

REFERENCE_RECORDS = 994
TEST_SLICE = (0, 100)
VALIDATION_SLICES = {1: (100, 200), 2: (300, 400), 3: (600, 700), 4: (894, 994)}
METRIC_KEYS = ("arousal_auprc", "arousal_auroc", "apnea_auprc", "apnea_auroc",
               "sleep_auprc", "sleep_auroc")


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    fold_number: int
    training_indices: tuple[int, ...]
    validation_indices: tuple[int, ...]
    testing_indices: tuple[int, ...]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _scaled(boundary: int, n: int) -> int:
    # round half up, so the split never depends on banker's rounding
    return int(math.floor(boundary * n / REFERENCE_RECORDS + 0.5))


def make_folds(n_records: int, seed: int) -> list[FoldPlan]:
    """Four folds over one seeded shuffle of ``range(n_records)``.

    Slice boundaries are the 994-record ones scaled by ``n / 994``; at 994 they
    are exact.
    """
    if n_records < 10:
        raise ValidationError(f"need at least 10 records for 4 folds, got {n_records}")
    perm = np.random.default_rng(seed).permutation(n_records).tolist()
    t0, t1 = (_scaled(b, n_records) for b in TEST_SLICE)
    test = perm[t0:t1]
    plans = []
    for k, (a, b) in VALIDATION_SLICES.items():
        a, b = _scaled(a, n_records), _scaled(b, n_records)
        val = perm[a:b]
        train = [i for j, i in enumerate(perm) if not (t0 <= j < t1 or a <= j < b)]
        if not (test and val and train):
            raise ValidationError(f"{n_records} records cannot form non-empty splits for fold {k}")
        plans.append(FoldPlan(k, tuple(train), tuple(val), tuple(test)))
    return plans


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    """Adam without weight decay. Parameters whose grad is None are skipped."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out


@dataclass
class TrainConfig:
    epochs: int = 500
    patience: int = 50
    records_per_epoch: int = 100
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    snapshot_on_auroc: bool = True
    checkpoint_on_auprc: bool = True
    prefetch: int = 2

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=60, patience=50, records_per_epoch=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    model: DRCNN
    optimizer: Adam
    epoch: int = 0
    best_validation_ap: float = 0.0
    best_validation_auroc: float = 0.0
    epochs_since_improvement: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: DRCNN, cfg: TrainConfig) -> "TrainState":
        return cls(model, Adam(model.params, cfg.lr, cfg.betas, cfg.eps))


def task_weights(config: ModelConfig) -> tuple[float, float, float]:
    return label_remap.DEFAULT_TASK_WEIGHTS if config.multi_task else (1.0, 0.0, 0.0)


# --------------------------------------------------------------------------
# data access
# --------------------------------------------------------------------------

class RecordStore:
    """Indexable prepared records, either in memory or loaded from directories."""

    def __init__(self, records: Sequence[PreparedRecord] | None = None,
                 paths: Sequence[str | os.PathLike] | None = None, cache: bool = True):
        if (records is None) == (paths is None):
            raise ValidationError("give either records or paths")
        self._records = list(records) if records is not None else None
        self._paths = [Path(p) for p in paths] if paths is not None else None
        self._cache: dict[int, PreparedRecord] = {}
        self._use_cache = cache

    @classmethod
    def from_directory(cls, root: str | os.PathLike, cache: bool = True) -> "RecordStore":
        root = Path(root)
        if not root.is_dir():
            raise ValidationError(f"data directory {root} does not exist")
        paths = sorted(p for p in root.iterdir() if (p / "manifest").is_file())
        if not paths:
            raise ValidationError(f"no prepared records under {root}")
        return cls(paths=paths, cache=cache)

    def __len__(self) -> int:
        return len(self._records) if self._records is not None else len(self._paths)

    def __getitem__(self, i: int) -> PreparedRecord:
        if self._records is not None:
            return self._records[i]
        if i in self._cache:
            return self._cache[i]
        rec = read_prepared(self._paths[i])
        if self._use_cache:
            self._cache[i] = rec
        return rec

    def iterate(self, indices: Sequence[int], prefetch: int = 2) -> Iterator[PreparedRecord]:
        """Yield records in order while up to ``prefetch`` later ones load in a thread."""
        if prefetch <= 0 or self._records is not None:
            for i in indices:
                yield self[i]
            return
        with ThreadPoolExecutor(1) as pool:
            pending = [pool.submit(self.__getitem__, i) for i in indices[:prefetch]]
            nxt = prefetch
            while pending:
                rec = pending.pop(0).result()
                if nxt < len(indices):
                    pending.append(pool.submit(self.__getitem__, indices[nxt]))
                    nxt += 1
                yield rec


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def train_step(model: DRCNN, optimizer: Adam, record: PreparedRecord,
               weights: tuple[float, float, float]) -> float:
    model.zero_grad()
    out = model.forward(record.signals, training=True)
    loss, grad = label_remap.multitask_loss(out.data, record.bin_labels_1hz, weights)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss on record {record.source_id} "
                             f"(prob range {out.data.min():.3g}..{out.data.max():.3g})")
    out.backward(grad)
    optimizer.step(model.params)
    return loss


def train_epoch(state: TrainState, store: RecordStore, fold: FoldPlan,
                rng: np.random.Generator, cfg: TrainConfig) -> list[float]:
    """``records_per_epoch`` training records drawn with replacement, one step each."""
    picks = rng.choice(np.asarray(fold.training_indices), size=cfg.records_per_epoch, replace=True)
    weights = task_weights(state.model.config)
    losses = []
    for rec in store.iterate([int(i) for i in picks], cfg.prefetch):
        try:
            losses.append(train_step(state.model, state.optimizer, rec, weights))
        except NumericalError as exc:
            raise NumericalError(f"epoch {state.epoch + 1}: {exc}") from exc
    state.epoch += 1
    return losses


def evaluate(models: DRCNN | Sequence[DRCNN], store: RecordStore,
             indices: Sequence[int]) -> dict[str, float]:
    """Six validation metrics over the concatenated 1 Hz tracks of ``indices``."""
    members = [models] if isinstance(models, DRCNN) else list(models)
    per_task: dict[str, list[metrics.ScoredTrack]] = {t: [] for t in ("arousal", "apnea", "sleep")}
    for i in indices:
        rec = store[i]
        probs = ensemble_mean([m.predict(rec.signals) for m in members])
        for task, tr in metrics.task_tracks_from_bins(probs, rec.bin_labels_1hz).items():
            per_task[task].append(tr)
    return metrics.six_metrics({t: metrics.concat_tracks(v) for t, v in per_task.items()})


def validate_and_checkpoint(state: TrainState, scores: dict[str, float],
                            checkpoint_dir: str | os.PathLike | None, cfg: TrainConfig,
                            metadata: dict | None = None) -> list[str]:
    """Save ``best`` on a strictly better arousal AUPRC, ``best_auroc`` on a better AUROC.

    Returns the names of the checkpoints written this epoch.
    """
    saved = []
    ap, roc = scores["arousal_auprc"], scores["arousal_auroc"]
    meta = dict(metadata or {}, epoch=state.epoch, scores=scores)
    if cfg.checkpoint_on_auprc and not math.isnan(ap) and ap > state.best_validation_ap:
        state.best_validation_ap = ap
        saved.append("best")
    if cfg.snapshot_on_auroc and not math.isnan(roc) and roc > state.best_validation_auroc:
        state.best_validation_auroc = roc
        saved.append("best_auroc")
    if checkpoint_dir is not None:
        for name in saved:
            save_checkpoint(state.model, Path(checkpoint_dir) / name, meta)
    state.epochs_since_improvement = 0 if saved else state.epochs_since_improvement + 1
    return saved


def format_epoch_line(epoch: int, loss: float, scores: dict[str, float], saved: Sequence[str]) -> str:
    parts = [f"epoch {epoch:4d}", f"loss {loss:.5f}"]
    parts += [f"{k} {scores[k]:.4f}" for k in METRIC_KEYS]
    if saved:
        parts.append("saved " + ",".join(saved))
    return "  ".join(parts)


@dataclass
class FitResult:
    fold: int
    best_epoch: int
    best_scores: dict[str, float]
    epochs_run: int
    history: list[dict]
    best_model: DRCNN


def fit(model_cfg: ModelConfig, train_cfg: TrainConfig, store: RecordStore, fold: FoldPlan,
        seed: int, out_dir: str | os.PathLike | None = None,
        on_epoch: Callable[[str], None] | None = None) -> FitResult:
    """Train one fold to the epoch cap or until patience runs out."""
    seeds = np.random.SeedSequence([seed, fold.fold_number]).spawn(2)
    model = DRCNN(model_cfg, seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    state = TrainState.fresh(model, train_cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "history.jsonl"
        hist_path.write_text("")
    best_model, best_epoch, best_scores = model.copy(), 0, {k: float("nan") for k in METRIC_KEYS}
    meta = {"fold": fold.fold_number, "seed": seed}
    while state.epoch < train_cfg.epochs:
        losses = train_epoch(state, store, fold, rng, train_cfg)
        scores = evaluate(state.model, store, fold.validation_indices)
        saved = validate_and_checkpoint(state, scores, out, train_cfg, meta)
        if "best" in saved:
            best_model, best_epoch, best_scores = state.model.copy(), state.epoch, scores
        row = {"epoch": state.epoch, "loss": float(np.mean(losses)), **scores, "saved": saved}
        state.history.append(row)
        line = format_epoch_line(state.epoch, row["loss"], scores, saved)
        log.info("fold %d %s", fold.fold_number, line)
        if on_epoch:
            on_epoch(line)
        if out is not None:
            with hist_path.open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if state.epochs_since_improvement >= train_cfg.patience:
            log.info("fold %d: no improvement for %d epochs, stopping", fold.fold_number,
                     train_cfg.patience)
            break
    if best_epoch == 0 and out is not None:
        # validation never produced a usable score; keep the final weights
        save_checkpoint(state.model, out / "best", dict(meta, epoch=state.epoch))
        best_model = state.model.copy()
    return FitResult(fold.fold_number, best_epoch, best_scores, state.epoch, state.history, best_model)


# --------------------------------------------------------------------------
# ensembling
# --------------------------------------------------------------------------

def ensemble_mean(predictions: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of 4 x N probability tracks, renormalized only if a column drifts >1e-6."""
    if not predictions:
        raise ValidationError("no predictions to average")
    shape = predictions[0].shape
    for p in predictions[1:]:
        if p.shape != shape:
            raise ValidationError(f"prediction shapes differ: {shape} vs {p.shape}")
    if len(predictions) == 1:
        return predictions[0]
    acc = predictions[0].astype(np.float64)
    for p in predictions[1:]:
        acc = acc + p
    mean = (acc / len(predictions)).astype(predictions[0].dtype)
    col = mean.sum(axis=0)
    if np.abs(col - 1).max() > 1e-6:
        mean = mean / col
    return mean


def ensemble_predict(models: Sequence[DRCNN], signals: np.ndarray) -> np.ndarray:
    return ensemble_mean([m.predict(signals) for m in models])


def load_models(paths: Sequence[str | os.PathLike]) -> list[DRCNN]:
    return [load_checkpoint(p)[0] for p in paths]
