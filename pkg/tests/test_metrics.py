import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepdrcnn.errors import ValidationError
from sleepdrcnn.metrics import (ScoredTrack, auprc, auprc_bruteforce, auroc, auroc_pairwise,
                                challenge_arousal_track, confusion_matrix, one_vs_all_sens_spec,
                                six_metrics, task_tracks_from_bins)

from tables import CM_VALIDATION, vectors_from_matrix


def T(s, y, m=None):
    return ScoredTrack(np.asarray(s, float), np.asarray(y), m)


def test_hand_average_precision():
    assert auprc(T([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_perfect_and_inverted():
    s, y = [0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]
    assert auprc(T(s, y)) == 1.0 and auroc(T(s, y)) == 1.0
    assert auroc(T(-np.array(s), y)) == 0.0


def test_all_ties():
    assert auroc(T(np.full(10, 0.3), [0, 1] * 5)) == 0.5
    assert auprc(T(np.full(10, 0.3), [0, 1] * 5)) == 0.5


def test_errors():
    with pytest.raises(ValidationError):
        auprc(T([0.1, 0.2], [0, 0]))
    with pytest.raises(ValidationError):
        auroc(T([0.1, 0.2], [1, 1]))
    with pytest.raises(ValidationError):
        T([0.1, 0.2], [1])


def test_mask_drops_samples():
    s = [0.9, 0.8, 0.7]
    assert auprc(T(s, [0, 1, 0], np.array([False, True, True]))) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_oracles_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 1000))
    s = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding forces ties
    y = rng.random(n) < rng.uniform(0.05, 0.9)
    y[0], y[1] = True, False
    assert abs(auprc(T(s, y)) - auprc_bruteforce(s, y)) < 1e-9
    assert abs(auroc(T(s, y)) - auroc_pairwise(s, y)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_monotone_invariance_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(200)
    y = np.arange(200) % 3 == 0
    assert auprc(T(np.exp(s), y)) == pytest.approx(auprc(T(s, y)), abs=1e-12)
    assert auroc(T(s, y)) + auroc(T(-s, y)) == pytest.approx(1, abs=1e-12)


def test_long_track_runs():
    rng = np.random.default_rng(0)
    n = 5_040_000
    y = rng.random(n) < 0.05
    s = y * 0.3 + rng.random(n)
    assert 0.5 < auroc(T(s, y)) < 1


def test_challenge_track_upsamples_and_masks():
    n = 5
    probs = np.tile(np.array([[0.1], [0.2], [0.3], [0.4]]), (1, n))
    labels = np.zeros(n * 200, np.int8)
    labels[:250] = -1
    labels[400:600] = 1
    tr = challenge_arousal_track(probs, labels)
    assert tr.scores.shape == (1000,) and (tr.scores == 0.4).all()
    assert (~tr.mask).sum() == 250
    assert challenge_arousal_track(probs, labels, mask_nontarget=False).mask is None
    with pytest.raises(ValidationError):
        challenge_arousal_track(probs, np.zeros(1001, np.int8))


def test_task_tracks_from_bins():
    probs = np.random.default_rng(0).dirichlet(np.ones(4), 6).T
    bins = np.array([0, 1, 5, 7, 10, 7])
    tr = task_tracks_from_bins(probs, bins)
    assert tr["arousal"].mask.tolist() == [False, False, False, True, True, True]
    assert tr["sleep"].labels.tolist() == [False, False, True, True, True, True]
    m = six_metrics(tr)
    assert set(m) == {f"{t}_{k}" for t in ("arousal", "apnea", "sleep") for k in ("auroc", "auprc")}


def test_six_metrics_nan_without_positives():
    probs = np.full((4, 3), 0.25)
    m = six_metrics(task_tracks_from_bins(probs, np.array([7, 7, 1])))
    assert np.isnan(m["arousal_auprc"]) and np.isnan(m["apnea_auroc"])


def test_confusion_matrix_basics():
    v = np.array([0, 1, 2, 3, 1])
    assert (confusion_matrix(v, v, 4) == np.diag([1, 2, 1, 1])).all()
    assert (confusion_matrix([], [], 3) == 0).all()
    with pytest.raises(ValidationError):
        confusion_matrix([0, 4], [0, 1], 4)


def test_confusion_from_reference_counts():
    pred, true = vectors_from_matrix(CM_VALIDATION)
    cm = confusion_matrix(pred, true, 4)
    assert (cm == CM_VALIDATION).all()
    assert cm[0].tolist() == [12, 2, 0, 0]
    assert one_vs_all_sens_spec(cm)[0].sensitivity == pytest.approx(12 / 14)


def test_sens_spec_diagonal_and_degenerate():
    assert all(r.sensitivity == 1 and r.specificity == 1 for r in one_vs_all_sens_spec(np.diag([3, 1, 2])))
    r = one_vs_all_sens_spec(np.array([[2, 0], [0, 0]]))[1]
    assert np.isnan(r.sensitivity) and not r.sensitivity_defined
