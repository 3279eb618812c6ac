"""A few seconds of numerical sanity checks, run by ``sleepdrcnn selftest``."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import label_remap, metrics, signal_prep
from .model import DRCNN, ModelConfig


def _grads() -> bool:
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((3, 20)), rng.standard_normal((4, 3, 3))
    e1 = ad.grad_check(lambda a, b: ad.conv1d(a, b, dilation=2), [x, w])
    e2 = ad.grad_check(lambda a: ad.softmax(ad.selu(a)), [x])
    return max(e1, e2) < 1e-4


def _remap() -> bool:
    kinds = [r["kind"] for r in label_remap.truth_table()]
    return (kinds.count("invalid"), kinds.count("ignore"), kinds.count("remapped"),
            kinds.count("fixed")) == (6, 6, 2, 4)


def _metrics() -> bool:
    rng = np.random.default_rng(1)
    s, y = rng.random(300).round(2), rng.random(300) < 0.3
    tr = metrics.ScoredTrack(s, y)
    return (abs(metrics.auprc(tr) - metrics.auprc_bruteforce(s, y)) < 1e-9
            and abs(metrics.auroc(tr) - metrics.auroc_pairwise(s, y)) < 1e-9)


def _filter() -> bool:
    k = signal_prep.design_antialias_fir()
    return abs(k.gain_db([signal_prep.CUTOFF_3DB_HZ])[0] + 3.0103) < 0.01


def _shape() -> bool:
    m = DRCNN(ModelConfig.desk(), seed=0)
    p = m.predict(np.random.default_rng(2).standard_normal((12, 3000)).astype(np.float32))
    return p.shape == (4, 60) and np.abs(p.sum(axis=0) - 1).max() < 1e-6


CHECKS: dict[str, Callable[[], bool]] = {
    "gradient check": _grads,
    "label remap table": _remap,
    "ranking metric oracles": _metrics,
    "anti-alias filter -3 dB point": _filter,
    "network output shape": _shape,
}


def run(emit: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            passed = bool(fn())
        except Exception as exc:  # report, keep going
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        emit(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return ok
