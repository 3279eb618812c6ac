import json

import numpy as np
import pytest

from sleepdrcnn import pipeline
from sleepdrcnn.cli import main
from sleepdrcnn.errors import ValidationError

TINY_MODEL = {"dcu1_widths": [4, 8, 8], "dcu1_growth": 4, "dcu2_count": 2, "dilation_schedule": [1, 2],
              "dcu2_width": 8, "dcu2_growth": 4, "lstm_hidden": 4, "head_hidden": 4}


def tiny_run(out, **kw):
    base = dict(out_dir=str(out), n_records=10, duration_s=120, pad_to_s=120, folds=(1, 2),
                model=TINY_MODEL, train={"epochs": 1, "records_per_epoch": 2}, seed=3)
    base.update(kw)
    return pipeline.RunConfig(**base)


def test_derive_seed_stable_and_distinct():
    assert pipeline.derive_seed(1, "train") == pipeline.derive_seed(1, "train")
    assert len({pipeline.derive_seed(1, s) for s in ("train", "folds", "synth")}) == 3


def test_run_config_round_trip(tmp_path):
    cfg = tiny_run(tmp_path)
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert pipeline.RunConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ValidationError):
        pipeline.RunConfig.from_dict({"nope": 1})
    with pytest.raises(ValidationError):
        pipeline.RunConfig(duration_s=600, pad_to_s=300)
    full = pipeline.RunConfig.full_scale()
    assert full.model_config().dcu2_width == 64 and full.train_config().records_per_epoch == 100


def test_end_to_end_artifacts_and_determinism(tmp_path):
    a = pipeline.end_to_end(tiny_run(tmp_path / "a"))
    b = pipeline.end_to_end(tiny_run(tmp_path / "b"))
    for name in ("metrics.txt", "metrics.jsonl", "clinical.txt", "clinical.jsonl", "folds.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "fold1" / "best" ).is_dir() and (a / "fold2" / "history.jsonl").is_file()
    assert len(list((a / "predictions").glob("*.npy"))) == 1
    resolved = pipeline.RunConfig.load(a / pipeline.CONFIG_NAME)
    assert resolved == tiny_run(tmp_path / "a")
    with pytest.raises(FileExistsError):
        pipeline.end_to_end(tiny_run(tmp_path / "a"))


def test_missing_data_dir_fails_before_compute(tmp_path):
    with pytest.raises(ValidationError):
        pipeline.end_to_end(tiny_run(tmp_path / "o", data_dir=str(tmp_path / "missing")))
    assert not (tmp_path / "o").exists()


def test_ablation_rows_isolated_and_marked(tmp_path):
    rows = pipeline.run_ablation_suite(tiny_run(tmp_path), experiments=[1, 9])
    assert [r.experiment for r in rows] == [1, 9]
    assert rows[1].invalid and not rows[0].invalid
    table = (tmp_path / "ablation.txt").read_text()
    assert "*" in table.splitlines()[-1]
    assert len((tmp_path / "ablation.jsonl").read_text().splitlines()) == 2
    with pytest.raises(ValidationError):
        pipeline.run_ablation_suite(tiny_run(tmp_path / "x"), experiments=[11])


def test_ablation_failure_stays_in_row(tmp_path, monkeypatch):
    real = pipeline.training.fit

    def flaky(mcfg, *a, **k):
        if not mcfg.use_lstm:
            raise RuntimeError("boom")
        return real(mcfg, *a, **k)

    monkeypatch.setattr(pipeline.training, "fit", flaky)
    rows = pipeline.run_ablation_suite(tiny_run(tmp_path), experiments=[1, 5])
    assert rows[0].status == "ok" and rows[1].status.startswith("failed")
    assert np.isnan(rows[1].scores["arousal_auprc"])


def test_cli_pipeline_stages(tmp_path, capsys):
    raw, prep = tmp_path / "raw", tmp_path / "prep"
    assert main(["synth", "--out", str(raw), "--n", "10", "--duration", "60", "--seed", "1"]) == 0
    assert main(["synth", "--out", str(raw), "--n", "10", "--duration", "60"]) == 2
    assert main(["prepare", "--in", str(raw), "--out", str(prep), "--pad-to", "60"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "train": {"epochs": 1, "records_per_epoch": 1}}))
    for k in (1, 2):
        assert main(["train", "--data", str(prep), "--fold", str(k), "--config", str(cfg),
                     "--out", str(tmp_path / f"f{k}")]) == 0
    assert main(["train", "--data", str(prep), "--fold", "1", "--config", str(cfg),
                 "--out", str(tmp_path / "f1")]) == 2
    rec = sorted(prep.iterdir())[0]
    pred = tmp_path / "pred"
    assert main(["ensemble", "--models", str(tmp_path / "f1" / "best"), str(tmp_path / "f2" / "best"),
                 "--record", str(rec), "--out", str(pred / f"{rec.name}.npy")]) == 0
    assert np.load(pred / f"{rec.name}.npy").shape == (4, 60)
    assert main(["predict", "--model", str(tmp_path / "f1" / "best"), "--record", str(rec),
                 "--out", str(pred / f"{rec.name}.npy")]) == 2
    assert main(["predict", "--model", str(tmp_path / "f1" / "best"), "--record", str(rec),
                 "--out", str(pred / f"{rec.name}.npy"), "--force"]) == 0
    assert main(["evaluate", "--pred", str(pred), "--truth", str(prep),
                 "--out", str(tmp_path / "eval.txt")]) == 0
    assert "arousal_auroc" in (tmp_path / "eval.txt").read_text()
    assert (tmp_path / "eval.jsonl").is_file()
    code = main(["report", "--pred", str(pred), "--truth", str(raw), "--out", str(tmp_path / "rep.txt")])
    assert code in (0, 2)  # a 60 s record may have no scored sleep, which excludes it


def test_cli_errors(tmp_path, capsys):
    assert main(["prepare", "--in", str(tmp_path / "none"), "--out", str(tmp_path / "p")]) == 2
    assert main(["train", "--data", str(tmp_path / "none"), "--fold", "1", "--out", str(tmp_path / "t")]) == 2
    assert main(["run", "--out", str(tmp_path / "r"), "--config", str(tmp_path / "missing.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5
