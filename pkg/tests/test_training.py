import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sleepdrcnn import training as tr
from sleepdrcnn.autodiff import Tensor
from sleepdrcnn.errors import ValidationError
from sleepdrcnn.model import DRCNN, ModelConfig, apply_ablation, load_checkpoint
from sleepdrcnn.record_io import generate_synthetic
from sleepdrcnn.signal_prep import prepare_record, write_prepared


def tiny_cfg(**kw):
    base = dict(dcu1_widths=(4, 8, 8), dcu1_growth=4, dcu2_count=2, dilation_schedule=(1, 2),
                dcu2_width=8, dcu2_growth=4, lstm_hidden=4, head_hidden=4)
    base.update(kw)
    return ModelConfig.desk(**base)


@pytest.fixture(scope="module")
def small_store():
    recs = [prepare_record(generate_synthetic(500 + i, 300), pad_to_s=300) for i in range(12)]
    return tr.RecordStore(recs)


def test_full_scale_folds():
    folds = tr.make_folds(994, 7)
    f1 = folds[0]
    assert (len(f1.training_indices), len(f1.validation_indices), len(f1.testing_indices)) == (794, 100, 100)
    assert len({f.testing_indices for f in folds}) == 1
    perm = np.random.default_rng(7).permutation(994).tolist()
    assert list(folds[3].validation_indices) == perm[894:994]
    assert list(folds[1].validation_indices) == perm[300:400]


def test_desk_scale_folds():
    for f in tr.make_folds(20, 0):
        assert (len(f.training_indices), len(f.validation_indices), len(f.testing_indices)) == (16, 2, 2)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 400), seed=st.integers(0, 2 ** 31))
def test_folds_disjoint_and_exhaustive(n, seed):
    folds = tr.make_folds(n, seed)
    assert folds == tr.make_folds(n, seed)
    for f in folds:
        a, b, c = map(set, (f.training_indices, f.validation_indices, f.testing_indices))
        assert not (a & b or a & c or b & c)
        assert a | b | c == set(range(n))


def test_folds_too_small():
    with pytest.raises(ValidationError):
        tr.make_folds(9, 0)


def test_adam_zero_gradient_and_none():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True), "u": Tensor(np.ones(2), requires_grad=True)}
    opt = tr.Adam(p)
    p["w"].grad = np.zeros(2)
    before = {k: t.data.copy() for k, t in p.items()}
    opt.step(p)
    assert all((p[k].data == before[k]).all() for k in p)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    opt = tr.Adam(p, lr=0.01)
    p["w"].grad = np.array([3.0, -0.5])
    opt.step(p)
    np.testing.assert_allclose(p["w"].data, [0.99, -1.99], atol=1e-8)


def test_task_weights():
    assert tr.task_weights(ModelConfig()) == (2.0, 1.0, 1.0)
    assert tr.task_weights(apply_ablation(ModelConfig(), 9)) == (1.0, 0.0, 0.0)


def test_train_config_round_trip():
    c = tr.TrainConfig.desk()
    assert c.records_per_epoch == 8 and c.epochs == 60
    assert tr.TrainConfig.from_dict(c.to_dict()) == c


def test_loss_decreases_on_fixed_record(small_store):
    model = DRCNN(tiny_cfg(), seed=0)
    opt = tr.Adam(model.params)
    rec = small_store[0]
    losses = [tr.train_step(model, opt, rec, (2.0, 1.0, 1.0)) for _ in range(50)]
    assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])


def test_training_is_deterministic(small_store):
    fold = tr.make_folds(12, 3)[0]
    cfg = tr.TrainConfig(epochs=2, records_per_epoch=3, patience=5)
    a = tr.fit(tiny_cfg(), cfg, small_store, fold, seed=5)
    b = tr.fit(tiny_cfg(), cfg, small_store, fold, seed=5)
    assert json.dumps(a.history) == json.dumps(b.history)
    for k in a.best_model.params:
        assert a.best_model.params[k].data.tobytes() == b.best_model.params[k].data.tobytes()


def test_checkpoint_rules():
    model = DRCNN(tiny_cfg())
    cfg = tr.TrainConfig()
    st_ = tr.TrainState.fresh(model, cfg)
    s = {k: 0.5 for k in tr.METRIC_KEYS}
    assert tr.validate_and_checkpoint(st_, s, None, cfg) == ["best", "best_auroc"]
    assert tr.validate_and_checkpoint(st_, s, None, cfg) == []
    assert st_.epochs_since_improvement == 1
    worse = dict(s, arousal_auprc=0.4, arousal_auroc=0.6)
    assert tr.validate_and_checkpoint(st_, worse, None, cfg) == ["best_auroc"]
    assert st_.epochs_since_improvement == 0
    assert tr.validate_and_checkpoint(st_, dict(s, arousal_auprc=float("nan")), None, cfg) == []
    off = tr.TrainConfig(snapshot_on_auroc=False)
    st2 = tr.TrainState.fresh(DRCNN(tiny_cfg()), off)
    assert tr.validate_and_checkpoint(st2, s, None, off) == ["best"]


def test_fit_writes_and_reload_reproduces_scores(small_store, tmp_path):
    fold = tr.make_folds(12, 1)[0]
    res = tr.fit(tiny_cfg(), tr.TrainConfig(epochs=2, records_per_epoch=2), small_store, fold,
                 seed=2, out_dir=tmp_path)
    lines = (tmp_path / "history.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 1
    model, meta = load_checkpoint(tmp_path / "best")
    assert meta["epoch"] == res.best_epoch
    again = tr.evaluate(model, small_store, fold.validation_indices)
    assert json.dumps(again) == json.dumps(res.best_scores)


def test_early_stopping(small_store):
    fold = tr.make_folds(12, 1)[0]
    res = tr.fit(tiny_cfg(), tr.TrainConfig(epochs=30, records_per_epoch=1, patience=1,
                                            snapshot_on_auroc=False), small_store, fold, seed=0)
    assert res.epochs_run < 30 or res.best_epoch == 30


def test_record_store_directory(tmp_path):
    for i in range(3):
        write_prepared(prepare_record(generate_synthetic(i, 60), pad_to_s=60), tmp_path / f"r{i}")
    store = tr.RecordStore.from_directory(tmp_path)
    assert len(store) == 3
    ids = [r.source_id for r in store.iterate([2, 0, 1, 2], prefetch=2)]
    assert ids == [store[i].source_id for i in (2, 0, 1, 2)]
    with pytest.raises(ValidationError):
        tr.RecordStore.from_directory(tmp_path / "nope")


def test_ensemble_mean_exact():
    rng = np.random.default_rng(0)
    preds = [rng.dirichlet(np.ones(4), 50).T.astype(np.float32) for _ in range(4)]
    ref = (np.stack(preds).astype(np.float64).mean(axis=0)).astype(np.float32)
    out = tr.ensemble_mean(preds)
    assert out.tobytes() == ref.tobytes()
    assert np.abs(out.sum(axis=0) - 1).max() <= 1e-6
    same = tr.ensemble_mean([preds[0]] * 4)
    assert same.tobytes() == preds[0].tobytes()
    with pytest.raises(ValidationError):
        tr.ensemble_mean([preds[0], preds[1][:, :10]])


def test_ensemble_identical_members_same_metrics(small_store):
    m = DRCNN(tiny_cfg(), seed=4)
    idx = [0, 1, 2]
    single = tr.evaluate(m, small_store, idx)
    ens = tr.evaluate([m.copy() for _ in range(4)], small_store, idx)
    assert json.dumps(single) == json.dumps(ens)
