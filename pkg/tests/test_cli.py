import csv
import json
import time

import pytest
import yaml

from hds.cli import main

SMOKE = {
    "data": {"synth": {"devices": ["Pcat-Pcat", "R33-S34"], "T": 20}},
    "training": {"epochs": 5, "K_train": 10, "K_eval": 20, "batch_size": 12, "lr": 3e-3},
}

HOLDOUT = {
    "data": {"synth": {"devices": ["Pcat-Pcat", "R33-S175", "RS100-S34", "R33-S34"], "T": 20,
                       "C6": [0, 16], "C12": [0, 64]}},
    "training": {"epochs": 2, "K_train": 5, "K_eval": 10, "batch_size": 8, "lr": 3e-3},
}


def write_config(tmp_path, raw, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSynth:
    def test_default_row_count_and_sidecar(self, tmp_path):
        out = tmp_path / "new" / "dir"
        assert main(["synth", "--out", str(out)]) == 0
        rows = read_csv(out / "data.csv")
        assert len(rows) == 6 * 12 * 50
        assert list(rows[0]) == ["instance_id", "device", "C6", "C12", "time", "OD", "RFP", "YFP", "CFP"]
        side = json.loads((out / "truth.json").read_text())
        assert set(side["devices"]) == {r["device"] for r in rows}

    def test_same_seed_identical_files(self, tmp_path):
        for d in ("a", "b"):
            assert main(["synth", "--seed", "5", "--out", str(tmp_path / d)]) == 0
        for f in ("data.csv", "truth.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        main(["synth", "--seed", "6", "--out", str(tmp_path / "c")])
        assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "c" / "data.csv").read_bytes()

    def test_synth_refuses_csv_input(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"data": {"path": "x.csv"}})
        assert main(["synth", "--config", cfg, "--out", str(tmp_path)]) == 2
        assert "data.path" in capsys.readouterr().err


class TestTrainEval:
    def test_smoke_run_under_a_minute(self, tmp_path):
        cfg = write_config(tmp_path, SMOKE)
        start = time.perf_counter()
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        assert time.perf_counter() - start < 60
        recs = [json.loads(l) for l in (tmp_path / "run" / "metrics.ndjson").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2, 3, 4, 5]
        assert (tmp_path / "run" / "checkpoint.npz").exists() and (tmp_path / "run" / "config.yaml").exists()

    def test_resume_continues_epoch_counter(self, tmp_path):
        short = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "epochs": 2}}, "short.yaml")
        long = write_config(tmp_path, SMOKE, "long.yaml")
        run = tmp_path / "run"
        assert main(["train", "--config", short, "--out", str(run)]) == 0
        assert main(["train", "--config", long, "--out", str(run), "--from-checkpoint", str(run / "checkpoint.npz")]) == 0
        recs = [json.loads(l) for l in (run / "metrics.ndjson").read_text().splitlines()]
        assert [r["epoch"] for r in recs] == [1, 2, 3, 4, 5]

    def test_resume_with_other_config_is_rejected(self, tmp_path):
        run = tmp_path / "run"
        cfg = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "epochs": 1}})
        main(["train", "--config", cfg, "--out", str(run)])
        other = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "lr": 0.05}}, "o.yaml")
        assert main(["train", "--config", other, "--from-checkpoint", str(run / "checkpoint.npz")]) == 2

    def test_invalid_prior_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {**SMOKE, "prior": {"bogus": {"mean": 1.0}}})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
        assert "bogus" in capsys.readouterr().err
        assert not (tmp_path / "r").exists()

    def test_numerical_failure_exits_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "grad_abort": 1e-9}})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
        assert "gradient norm" in capsys.readouterr().err

    def test_eval_outputs(self, tmp_path):
        cfg = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "epochs": 1}})
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--out", str(run)])
        assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--out", str(tmp_path / "ev")]) == 0
        bounds = read_csv(tmp_path / "ev" / "bounds.csv")
        assert len(bounds) == 24 and {b["split"] for b in bounds} == {"train"}
        preds = read_csv(tmp_path / "ev" / "predictions.csv")
        assert list(preds[0]) == ["instance_id", "signal", "time", "mean", "std"]
        assert len(preds) == 24 * 4 * 20
        summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
        assert summary["n_instances"] == 24 and set(summary["rmse"]) == {"OD", "RFP", "YFP", "CFP"}

    def test_eval_missing_checkpoint_exits_2(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.npz")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2

    def test_bad_threads(self):
        assert main(["synth", "--threads", "0"]) == 2


class TestDrivers:
    def test_crossval_outputs(self, tmp_path):
        cfg = write_config(tmp_path, {**SMOKE, "training": {**SMOKE["training"], "epochs": 1}})
        out = tmp_path / "cv"
        assert main(["crossval", "--config", cfg, "--out", str(out), "--threads", "1"]) == 0
        assert sorted(p.parent.name for p in out.glob("fold*/checkpoint.npz")) == ["fold0", "fold1", "fold2", "fold3"]
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["fold_means"]) == 4 and sum(summary["fold_sizes"]) == 24
        folds = read_csv(out / "folds.csv")
        assert sorted(int(r["fold"]) for r in folds) == sorted([0, 1, 2, 3] * 6)
        assert len(read_csv(out / "bounds.csv")) == 24

    def test_holdout_response_curves(self, tmp_path):
        cfg = write_config(tmp_path, HOLDOUT)
        out = tmp_path / "ho"
        assert main(["holdout", "--config", cfg, "--device", "R33-S34", "--out", str(out)]) == 0
        curves = read_csv(out / "response_curves.csv")
        assert list(curves[0]) == ["instance_id", "device", "signal", "series", "concentration",
                                   "observed", "mean", "lower", "upper"]
        assert {c["device"] for c in curves} == {"R33-S34"}
        summary = json.loads((out / "summary.json").read_text())
        assert all(v["composed"] == v["cassette_sum"] for v in summary["composition"].values())

    def test_holdout_unidentifiable_device_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMOKE)
        assert main(["holdout", "--config", cfg, "--device", "R33-S34", "--out", str(tmp_path / "h")]) == 2
        assert "never appears" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [["holdout"], ["eval"]])
    def test_required_flags(self, argv):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 2
