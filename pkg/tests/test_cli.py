import hashlib
from pathlib import Path

import pytest

from pddiag.cli import main, read_predictions
from pddiag.config import ConfigError, RunConfig, load_config


def tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    """A small synth -> train 1,2,3 -> predict pipeline shared by read-only tests."""
    root = tmp_path_factory.mktemp("mini")
    data = root / "data"
    out = root / "run"
    assert run_cli("synth", "--out", data, "--n", 16, "--dims", 16, "--seed", 9, "--noise-std", 2.0) == 0
    common = [
        "--manifest", data / "manifest.csv",
        "--atlas", data / "atlas.nii",
        "--relevance", data / "relevance.csv",
    ]
    for stage in (1, 2, 3):
        code = run_cli("train", "--stage", stage, "--out-dir", out, "--epochs", 3, "--seed", 4, *common)
        assert code == 0
    pred = root / "pred.csv"
    assert run_cli("predict", "--checkpoint", out / "stage3.ckpt", "--out", pred, *common) == 0
    return {"data": data, "out": out, "pred": pred, "common": common}


class TestSynthCommand:
    def test_deterministic_output_tree(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("synth", "--out", out, "--n", 4, "--dims", 8, "--seed", 3) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_zero_subjects_ok(self, tmp_path, capsys):
        assert run_cli("synth", "--out", tmp_path / "z", "--n", 0, "--dims", 8) == 0
        manifest = (tmp_path / "z" / "manifest.csv").read_text().splitlines()
        assert manifest == ["subject_id,path,age,label,is_healthy"]
        assert (tmp_path / "z" / "atlas.nii").exists()

    def test_indivisible_dims_fail_loudly(self, tmp_path, capsys):
        assert run_cli("synth", "--out", tmp_path / "x", "--n", 2, "--dims", 30) == 1
        assert "divisible" in capsys.readouterr().err

    def test_unknown_subcommand_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err


class TestTrainCommand:
    def test_missing_prerequisite_names_stage(self, tmp_path, mini_run, capsys):
        code = run_cli(
            "train", "--stage", 3, "--out-dir", tmp_path / "fresh", "--epochs", 1, *mini_run["common"]
        )
        assert code == 1
        assert "stage 2" in capsys.readouterr().err

    def test_stage2_requires_stage1_checkpoint(self, tmp_path, mini_run, capsys):
        code = run_cli(
            "train", "--stage", 2, "--out-dir", tmp_path / "fresh2", "--epochs", 1, *mini_run["common"]
        )
        assert code == 1
        assert "stage 1" in capsys.readouterr().err

    def test_three_checkpoints_written(self, mini_run):
        for stage in (1, 2, 3):
            assert (mini_run["out"] / f"stage{stage}.ckpt").exists()
            assert (mini_run["out"] / f"stage{stage}_trace.csv").exists()

    def test_seeded_trace_is_reproducible(self, tmp_path, mini_run):
        out2 = tmp_path / "re"
        code = run_cli(
            "train", "--stage", 1, "--out-dir", out2, "--epochs", 3, "--seed", 4, *mini_run["common"]
        )
        assert code == 0
        assert (out2 / "stage1_trace.csv").read_bytes() == (mini_run["out"] / "stage1_trace.csv").read_bytes()


class TestPredictEvaluateReport:
    def test_predict_deterministic(self, tmp_path, mini_run):
        again = tmp_path / "again.csv"
        code = run_cli("predict", "--checkpoint", mini_run["out"] / "stage3.ckpt", "--out", again, *mini_run["common"])
        assert code == 0
        assert again.read_bytes() == mini_run["pred"].read_bytes()

    def test_predictions_parse(self, mini_run):
        records = read_predictions(mini_run["pred"])
        assert len(records) == 16
        assert all(0.0 <= r.p_pd <= 1.0 for r in records)

    def test_evaluate_from_predictions_fixture(self, tmp_path, capsys):
        # TP=3, TN=4, FP=1, FN=2 -> ACC 0.7, TPR 0.6, FPR 0.2
        rows = ["subject_id,label,p_pd,delta,predicted_age,decision"]
        rows += [f"tp{i},pd,0.9,10.0,75.0,pd" for i in range(3)]
        rows += [f"tn{i},other,0.1,0.0,65.0,other" for i in range(4)]
        rows += ["fp0,other,0.8,8.0,73.0,pd"]
        rows += [f"fn{i},pd,0.2,1.0,66.0,other" for i in range(2)]
        fixture = tmp_path / "fix.csv"
        fixture.write_text("\n".join(rows) + "\n")
        out = tmp_path / "metrics.txt"
        assert run_cli("evaluate", "--predictions", fixture, "--out", out) == 0
        text = out.read_text()
        assert "acc=0.7\n" in text
        assert "tpr=0.6\n" in text
        assert "fpr=0.2\n" in text
        assert "tp=3" in text and "tn=4" in text and "fp=1" in text and "fn=2" in text

    def test_evaluate_from_model(self, mini_run, tmp_path, capsys):
        out = tmp_path / "m.txt"
        code = run_cli(
            "evaluate", "--checkpoint", mini_run["out"] / "stage3.ckpt", "--out", out, *mini_run["common"]
        )
        assert code == 0
        assert "acc=" in out.read_text()

    def test_evaluate_unlabeled_suggests_predict(self, tmp_path, capsys):
        fixture = tmp_path / "nolabel.csv"
        fixture.write_text(
            "subject_id,label,p_pd,delta,predicted_age,decision\ns0,,0.9,1.0,66.0,pd\ns1,pd,0.2,0.0,65.0,other\n"
        )
        assert run_cli("evaluate", "--predictions", fixture) == 1
        assert "predict" in capsys.readouterr().err

    def test_report_roc_and_confusion(self, mini_run, tmp_path, capsys):
        roc = tmp_path / "roc.csv"
        assert run_cli("report", "--predictions", mini_run["pred"], "--out-roc", roc) == 0
        lines = roc.read_text().splitlines()
        assert lines[0] == "fpr,tpr,threshold"
        assert lines[1].startswith("0.0,0.0,inf")
        last = lines[-1].split(",")
        assert float(last[0]) == 1.0 and float(last[1]) == 1.0
        assert "confusion matrix" in capsys.readouterr().out


class TestSplitCommand:
    def test_writes_stratified_fold_manifests(self, tmp_path, mini_run):
        out = tmp_path / "folds"
        code = run_cli("split", "--manifest", mini_run["data"] / "manifest.csv", "--folds", 4, "--out-dir", out)
        assert code == 0
        from pddiag.cohort import read_manifest
        from pddiag.diagnoser import Label

        all_test_ids = []
        for k in range(4):
            train = read_manifest(out / f"fold{k}_train.csv")
            test = read_manifest(out / f"fold{k}_test.csv")
            assert len(train) + len(test) == 16
            assert sum(1 for s in test if s.label is Label.PD) == 2  # 8 PD over 4 folds
            assert not {s.subject_id for s in train} & {s.subject_id for s in test}
            all_test_ids.extend(s.subject_id for s in test)
        assert len(set(all_test_ids)) == 16

    def test_fold_manifests_resolve_volumes(self, tmp_path, mini_run):
        out = tmp_path / "folds2"
        assert run_cli("split", "--manifest", mini_run["data"] / "manifest.csv", "--folds", 2, "--out-dir", out) == 0
        from pddiag.cohort import read_manifest

        cohort = read_manifest(out / "fold0_test.csv")
        cohort[0].load_volume()  # paths stayed valid outside the source tree

    def test_multi_fold_evaluate_reports_both_rules(self, tmp_path, capsys):
        header = "subject_id,label,p_pd,delta,predicted_age,decision"
        # fold A: 1 TP, 1 TN -> acc 1.0; fold B: 1 TP, 1 TN, 2 FP -> acc 0.5
        a = tmp_path / "a.csv"
        a.write_text(f"{header}\np0,pd,0.9,10,75,pd\np1,other,0.1,0,65,other\n")
        b = tmp_path / "b.csv"
        b.write_text(
            f"{header}\nq0,pd,0.9,9,74,pd\nq1,other,0.2,0,65,other\nq2,other,0.8,7,70,pd\nq3,other,0.7,8,70,pd\n"
        )
        assert run_cli("evaluate", "--predictions", a, "--predictions", b) == 0
        out = capsys.readouterr().out
        assert "fold0.acc=1.0" in out
        assert "fold1.acc=0.5" in out
        assert "mean.acc=0.75" in out
        assert "pooled.acc=" + repr(4 / 6) in out
        assert "pooled.tp=2" in out


class TestConfig:
    def test_default_hyperparameters(self):
        cfg = RunConfig()
        assert cfg.get("train", "lr") == 1e-3
        assert cfg.get("train", "weight_decay") == 1e-3
        assert cfg.get("train", "batch") == 4
        assert cfg.get("prior", "alpha") == 1.0
        assert cfg.get("prior", "zeta") == 9.5
        assert cfg.get("prior", "tau") == 4.5

    def test_dump_load_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.set("train", "epochs", "7")
        cfg.set("prior", "zeta", "11.5")
        path = tmp_path / "run.ini"
        path.write_text(cfg.dump())
        reloaded = load_config(path)
        assert reloaded.values == cfg.values
        assert reloaded.dump() == cfg.dump()

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[prior]\nzeta = 9.5\nbogus = 1\n")
        with pytest.raises(ConfigError, match="bogus"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ConfigError, match="nonsense"):
            load_config(path)

    def test_type_errors_reported(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[train]\nepochs = soon\n")
        with pytest.raises(ConfigError, match="epochs"):
            load_config(path)

    def test_dump_config_command(self, tmp_path, capsys):
        path = tmp_path / "run.ini"
        path.write_text("[train]\nepochs = 5\n")
        assert run_cli("report", "--config", path, "--dump-config") == 0
        out = capsys.readouterr().out
        assert "epochs = 5" in out
        assert "zeta = 9.5" in out  # defaults included

    def test_flag_overrides_file(self, tmp_path, capsys):
        path = tmp_path / "run.ini"
        path.write_text("[synth]\ndims = 30\n")  # invalid, but the flag wins
        assert run_cli("synth", "--config", path, "--out", tmp_path / "o", "--n", 1, "--dims", 8) == 0
