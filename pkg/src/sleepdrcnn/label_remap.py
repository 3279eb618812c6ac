"""Joint label bins for the three detection tasks, and the multi-task loss.

Each sample carries an (arousal, apnea, sleep) triple with arousal in
{-1, 0, 1}, apnea in {0, 1} and sleep in {-1, 0, 1}. The 18 possible
triples index a full histogram ``f = (arousal+1)*6 + apnea*3 + (sleep+1)``;
only 12 of them occur in scored data. Those are renumbered 0..11 and then
collapsed onto the four network outputs::

    bin 1   wake
    bin 5   apnea-hypopnea
    bin 7   normal sleep
    bin 10  target arousal
    bin 0   ignore (sleep stage undefined): no loss, no gradient

The network emits a probability vector over (1, 5, 7, 10) in that order.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

IGNORE, WAKE, APNEA, NORMAL, AROUSAL = 0, 1, 5, 7, 10
OUTPUT_BINS = (WAKE, APNEA, NORMAL, AROUSAL)  # channel order of the network output

NONEMPTY_FULL = (0, 1, 2, 3, 4, 5, 6, 8, 9, 12, 14, 15)
EMPTY_FULL = tuple(f for f in range(18) if f not in NONEMPTY_FULL)

# full index -> bin12, -1 marks an empty combination
_FULL_TO_BIN12 = np.full(18, -1, dtype=np.int8)
_FULL_TO_BIN12[list(NONEMPTY_FULL)] = np.arange(12)

# bin12 -> output code
_REMAP = np.array([IGNORE, WAKE, WAKE, IGNORE, APNEA, APNEA, IGNORE, NORMAL,
                   IGNORE, IGNORE, AROUSAL, IGNORE], dtype=np.int8)

# output code -> channel index in the probability vector (-1 for ignore)
_CODE_TO_CHANNEL = np.full(11, -1, dtype=np.int8)
for _i, _c in enumerate(OUTPUT_BINS):
    _CODE_TO_CHANNEL[_c] = _i

DEFAULT_TASK_WEIGHTS = (2.0, 1.0, 1.0)  # arousal, apnea, sleep
PROB_CLAMP = 1e-12


class Marginals(NamedTuple):
    arousal: np.ndarray
    apnea: np.ndarray
    sleep: np.ndarray


def full_index(arousal, apnea, sleep) -> np.ndarray:
    arousal, apnea, sleep = (np.asarray(v, dtype=np.int64) for v in (arousal, apnea, sleep))
    if (~np.isin(arousal, (-1, 0, 1))).any() or (~np.isin(apnea, (0, 1))).any() \
            or (~np.isin(sleep, (-1, 0, 1))).any():
        raise ValidationError("label triple outside its declared value sets")
    return (arousal + 1) * 6 + apnea * 3 + (sleep + 1)


def encode_bin(arousal, apnea, sleep) -> np.ndarray | int:
    """Map label triples (scalars or equal-length arrays) to bin12 indices 0..11."""
    f = full_index(arousal, apnea, sleep)
    b = _FULL_TO_BIN12[f]
    if (b < 0).any():
        bad = np.atleast_1d(f)[np.atleast_1d(b) < 0][0]
        a, rest = divmod(int(bad), 6)
        raise ValidationError(
            f"label combination (arousal={a - 1}, apnea={rest // 3}, sleep={rest % 3 - 1}) "
            "never occurs in scored data"
        )
    return int(b) if np.ndim(b) == 0 else b


def remap(bin12) -> np.ndarray | int:
    b = np.asarray(bin12)
    if ((b < 0) | (b > 11)).any():
        raise ValidationError("bin12 index outside 0..11")
    out = _REMAP[b]
    return int(out) if out.ndim == 0 else out


def triples_to_bins(arousal, apnea, sleep) -> np.ndarray:
    return np.atleast_1d(remap(encode_bin(arousal, apnea, sleep))).astype(np.int8)


def bin_targets(bins: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Binary task targets implied by output codes, plus the validity mask."""
    bins = np.asarray(bins)
    valid = bins != IGNORE
    return bins == AROUSAL, bins == APNEA, np.isin(bins, (APNEA, NORMAL, AROUSAL)), valid


def marginals(p: np.ndarray, check: bool = True) -> Marginals:
    """Task marginals from joint probabilities shaped (4,) or (4, N)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] != 4:
        raise ValidationError(f"expected 4 joint probabilities, got shape {p.shape}")
    if check:
        if (p < 0).any() or (np.abs(p.sum(axis=0) - 1.0) > 1e-6).any():
            raise ValidationError("joint probabilities must be non-negative and sum to 1")
    return Marginals(arousal=p[3], apnea=p[1], sleep=p[1] + p[2] + p[3])


def multitask_loss(probs: np.ndarray, bins: np.ndarray,
                   weights: tuple[float, float, float] = DEFAULT_TASK_WEIGHTS
                   ) -> tuple[float, np.ndarray]:
    """Weighted sum of three binary cross-entropies on the task marginals.

    Returns the loss averaged over non-ignored samples and its gradient with
    respect to ``probs`` (same shape, 4 x N). Complements are formed from the
    remaining joint probabilities rather than ``1 - q``.
    """
    probs = np.asarray(probs)
    bins = np.asarray(bins)
    if probs.ndim != 2 or probs.shape[0] != 4 or probs.shape[1] != bins.shape[0]:
        raise ValidationError(f"probs {probs.shape} do not match {bins.shape[0]} labels")
    grad = np.zeros_like(probs)
    valid = bins != IGNORE
    n = int(valid.sum())
    if n == 0:
        logger.warning("every sample is ignored; loss defined as 0")
        return 0.0, grad

    p = probs[:, valid].astype(np.float64)
    y_ar, y_ap, y_sl, _ = bin_targets(bins[valid])
    w_ar, w_ap, w_sl = weights
    g = np.zeros_like(p)
    total = 0.0
    # (weight, target, positive channels, negative channels)
    for w, y, pos, neg in (
        (w_ar, y_ar, (3,), (0, 1, 2)),
        (w_ap, y_ap, (1,), (0, 2, 3)),
        (w_sl, y_sl, (1, 2, 3), (0,)),
    ):
        if w == 0:
            continue
        q = np.maximum(p[list(pos)].sum(axis=0), PROB_CLAMP)
        qbar = np.maximum(p[list(neg)].sum(axis=0), PROB_CLAMP)
        total += w * float(np.sum(np.where(y, -np.log(q), -np.log(qbar))))
        dq = np.where(y, -w / q, 0.0)
        dqbar = np.where(y, 0.0, -w / qbar)
        g[list(pos)] += dq
        g[list(neg)] += dqbar
    grad[:, valid] = (g / n).astype(probs.dtype)
    return total / n, grad


def truth_table() -> list[dict]:
    """Every one of the 18 triples with its fate: error, ignore, remapped or fixed."""
    rows = []
    for a in (-1, 0, 1):
        for ap in (0, 1):
            for s in (-1, 0, 1):
                f = int(full_index(a, ap, s))
                row = {"arousal": a, "apnea": ap, "sleep": s, "full": f}
                if f in EMPTY_FULL:
                    row.update(bin12=None, output=None, kind="invalid")
                else:
                    b = encode_bin(a, ap, s)
                    out = remap(b)
                    kind = "ignore" if out == IGNORE else ("fixed" if out == b else "remapped")
                    row.update(bin12=b, output=out, kind=kind)
                rows.append(row)
    return rows
