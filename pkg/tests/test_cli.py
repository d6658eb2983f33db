import csv
import json

import pytest

from disaster_vsa import train as train_mod
from disaster_vsa.cli import main
from disaster_vsa.manifest import builtin_task_spec
from disaster_vsa.synthetic import write_multi_label_images, write_single_label_images


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def imbalanced(tmp_path_factory):
    spec = builtin_task_spec("task1")
    return write_single_label_images(
        tmp_path_factory.mktemp("imb"), spec, {"negative": 5, "positive": 3, "neutral": 2}, size=16
    )


@pytest.fixture(scope="module")
def task2_run(tmp_path_factory):
    spec = builtin_task_spec("task2")
    root = tmp_path_factory.mktemp("t2")
    train_m = write_multi_label_images(root / "train", spec, n_images=12, seed=0)
    eval_m = write_multi_label_images(root / "eval", spec, n_images=4, seed=1)
    ws = root / "ws"
    assert main(["train", "--task", "task2", "--backbone", "toy", "--epochs", "1", "--batch-size", "4",
                 "--train-manifest", str(train_m), "--workspace", str(ws), "--name", "t2"]) == 0
    return ws / "run" / "t2", eval_m


class TestPrepare:
    def test_balanced_summary(self, capsys, imbalanced, tmp_path):
        code, out, _ = run(capsys, "prepare", "--task", "task1", "--manifest", imbalanced, "--workspace", tmp_path)
        assert code == 0
        summary = json.loads(out)
        assert summary["counts_before"] == {"negative": 5, "positive": 3, "neutral": 2}
        assert summary["counts_after_balance"] == {"negative": 5, "positive": 5, "neutral": 5}
        assert summary["augmentation"]["planned_variants"] == 15
        assert (tmp_path / "prepared" / "task1" / "summary.json").is_file()

    def test_identity_pipeline(self, capsys, imbalanced, tmp_path):
        code, out, _ = run(capsys, "prepare", "--task", "task1", "--manifest", imbalanced, "--no-balance",
                           "--no-augment", "--dry-run", "--workspace", tmp_path)
        summary = json.loads(out)
        assert code == 0
        assert summary["counts_after_balance"] == summary["counts_before"] == summary["counts_after_augment"]
        assert list(tmp_path.iterdir()) == []

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, err = run(capsys, "prepare", "--task", "task1", "--manifest", tmp_path / "absent.csv")
        assert code == 2
        assert "absent.csv" in err

    def test_unknown_label_row(self, capsys, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("image_path,labels\na.jpg,negative\nb.jpg,happiness\n")
        code, _, err = run(capsys, "prepare", "--task", "task1", "--manifest", bad, "--dry-run")
        assert code == 2 and "row 3" in err and "happiness" in err


class TestTrain:
    @pytest.mark.parametrize("preset, backbone", [("run1", "inception_v3"), ("run2", "vgg19")])
    def test_presets(self, capsys, tmp_path, preset, backbone):
        code, out, _ = run(capsys, "train", "--preset", preset, "--task", "task1", "--config-only",
                           "--workspace", tmp_path)
        assert code == 0
        cfg = json.loads((tmp_path / "run" / f"{preset}-task1" / "config.json").read_text())
        assert cfg["model"]["backbone"] == backbone
        assert (cfg["epochs"], cfg["learning_rate"], cfg["optimizer"]) == (50, 0.0001, "adam")

    def test_global_flags_before_subcommand(self, capsys, tmp_path):
        code, _, _ = run(capsys, "--task", "task3", "--seed", "5", "--workspace", tmp_path,
                         "train", "--preset", "run2", "--config-only")
        assert code == 0
        cfg = json.loads((tmp_path / "run" / "run2-task3" / "config.json").read_text())
        assert cfg["task"]["task_id"] == "task3" and cfg["seed"] == 5

    def test_seed_changes_derived_streams(self, capsys, tmp_path):
        for seed in (1, 2):
            run(capsys, "train", "--preset", "run1", "--task", "task1", "--seed", seed, "--config-only",
                "--workspace", tmp_path, "--name", f"s{seed}")
        a, b = (json.loads((tmp_path / "run" / f"s{s}" / "config.json").read_text()) for s in (1, 2))
        assert a["balance"]["seed"] != b["balance"]["seed"]
        assert a["augment"]["seed"] != b["augment"]["seed"]

    def test_duplicate_explicit_name(self, capsys, tmp_path):
        args = ["train", "--preset", "run1", "--task", "task1", "--config-only", "--workspace", tmp_path,
                "--name", "x"]
        assert run(capsys, *args)[0] == 0
        code, _, err = run(capsys, *args)
        assert code == 2 and "already exists" in err

    def test_config_file_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        run(capsys, "train", "--preset", "run1", "--task", "task1", "--config-only", "--workspace", tmp_path,
            "--name", "base")
        payload = json.loads((tmp_path / "run" / "base" / "config.json").read_text())
        payload["epoch"] = 3
        cfg.write_text(json.dumps(payload))
        code, _, err = run(capsys, "train", "--config", cfg, "--config-only", "--workspace", tmp_path)
        assert code == 2 and "epoch" in err

    def test_smoke(self, capsys, imbalanced, tmp_path):
        code, out, _ = run(capsys, "train", "--task", "task1", "--epochs", "1", "--backbone", "toy",
                           "--train-manifest", imbalanced, "--workspace", tmp_path)
        assert code == 0
        run_dir = tmp_path / "run" / "toy-task1"
        for name in ("ckpt-final.pt", "ckpt-final.json", "ckpt-best.pt", "ckpt-best.json", "log.jsonl"):
            assert (run_dir / name).is_file()
        registry = [json.loads(line) for line in (tmp_path / "runs.jsonl").read_text().splitlines()]
        assert registry[0]["run_name"] == "toy-task1" and registry[0]["backbone"] == "toy"

    def test_training_failure_exit_code(self, capsys, imbalanced, tmp_path, monkeypatch):
        real_loss = train_mod.loss
        monkeypatch.setattr(train_mod, "loss", lambda *a: real_loss(*a) * float("inf"))
        code, _, err = run(capsys, "train", "--task", "task1", "--epochs", "1", "--backbone", "toy",
                           "--train-manifest", imbalanced, "--workspace", tmp_path)
        assert code == 3 and "non-finite loss" in err


class TestPredict:
    def test_shape(self, capsys, task2_run, tmp_path):
        run_dir, eval_m = task2_run
        code, _, _ = run(capsys, "predict", "--checkpoint", run_dir / "ckpt-best.pt", "--manifest", eval_m,
                         "--out", tmp_path / "p.csv")
        assert code == 0
        rows = read_rows(tmp_path / "p.csv")
        assert len(rows) == 4
        assert all(len(r["scores"].split(";")) == 7 for r in rows)

    def test_high_threshold_shrinks_sets(self, capsys, task2_run, tmp_path):
        run_dir, eval_m = task2_run
        for t in ("0.5", "0.99"):
            run(capsys, "predict", "--checkpoint", run_dir / "ckpt-best.pt", "--manifest", eval_m,
                "--out", tmp_path / f"p{t}.csv", "--threshold", t)
        low, high = read_rows(tmp_path / "p0.5.csv"), read_rows(tmp_path / "p0.99.csv")
        for a, b in zip(low, high):
            assert set(filter(None, b["decoded"].split(";"))) <= set(filter(None, a["decoded"].split(";")))

    def test_vocabulary_mismatch(self, capsys, task2_run, imbalanced, tmp_path):
        run_dir, _ = task2_run
        code, _, err = run(capsys, "predict", "--checkpoint", run_dir / "ckpt-best.pt", "--manifest", imbalanced,
                           "--out", tmp_path / "p.csv")
        assert code == 2 and "vocabulary" in err

    def test_task_flag_mismatch(self, capsys, task2_run, tmp_path):
        run_dir, eval_m = task2_run
        code, _, err = run(capsys, "predict", "--task", "task1", "--checkpoint", run_dir / "ckpt-best.pt",
                           "--manifest", eval_m, "--out", tmp_path / "p.csv")
        assert code == 2


class TestEvaluate:
    def write(self, path, text):
        path.write_text(text)
        return path

    def test_perfect(self, capsys, tmp_path):
        truth = self.write(tmp_path / "t.csv", "image_path,labels\na.jpg,joy;fear\nb.jpg,anger\n")
        preds = self.write(tmp_path / "p.csv", "image_path,scores,decoded\n"
                           "a.jpg,0.9;0;0.8;0;0;0;0,joy;fear\nb.jpg,0;0;0;0;0.7;0;0,anger\n")
        code, out, _ = run(capsys, "evaluate", "--task", "task2", "--truth", truth, "--predictions", preds)
        assert code == 0
        assert out.strip().splitlines()[-1].endswith("| 1.000 |")
        report = json.loads((tmp_path / "p.metrics.json").read_text())
        assert report["weighted_f1"] == 1.0

    def test_single_label_worked_example(self, capsys, tmp_path):
        truth = self.write(tmp_path / "t.csv", "image_path,labels\n1.jpg,negative\n2.jpg,negative\n3.jpg,positive\n")
        preds = self.write(tmp_path / "p.csv", "image_path,scores,decoded\n1.jpg,1;0;0,negative\n"
                           "2.jpg,0;1;0,positive\n3.jpg,0;1;0,positive\n")
        code, out, _ = run(capsys, "evaluate", "--task", "task1", "--truth", truth, "--predictions", preds,
                           "--out", tmp_path / "m.json")
        assert code == 0
        assert "| 0.667 |" in out.strip().splitlines()[-1]

    def test_missing_prediction(self, capsys, tmp_path):
        truth = self.write(tmp_path / "t.csv", "image_path,labels\n1.jpg,negative\n2.jpg,positive\n")
        preds = self.write(tmp_path / "p.csv", "image_path,scores,decoded\n1.jpg,1;0;0,negative\n")
        code, _, err = run(capsys, "evaluate", "--task", "task1", "--truth", truth, "--predictions", preds)
        assert code == 2 and "2.jpg" in err

    def test_rethreshold(self, capsys, tmp_path):
        truth = self.write(tmp_path / "t.csv", "image_path,labels\na.jpg,joy\n")
        preds = self.write(tmp_path / "p.csv", "image_path,scores,decoded\na.jpg,0.4;0;0;0;0;0;0,\n")
        run(capsys, "evaluate", "--task", "task2", "--truth", truth, "--predictions", preds, "--threshold", "0.3")
        report = json.loads((tmp_path / "p.metrics.json").read_text())
        assert report["weighted_f1"] == 1.0 and report["threshold"] == 0.3


def test_predict_then_evaluate_reproduces_logged_dev_f1(capsys, tmp_path):
    spec = builtin_task_spec("task1")
    train_m = write_single_label_images(tmp_path / "train", spec, 5, seed=3)
    dev_m = write_single_label_images(tmp_path / "dev", spec, 3, seed=4)
    ws = tmp_path / "ws"
    assert run(capsys, "train", "--task", "task1", "--backbone", "toy", "--epochs", "3", "--batch-size", "8",
               "--train-manifest", train_m, "--dev-manifest", dev_m, "--workspace", ws, "--name", "r")[0] == 0
    run_dir = ws / "run" / "r"
    meta = json.loads((run_dir / "ckpt-best.json").read_text())
    logged = [json.loads(x) for x in (run_dir / "log.jsonl").read_text().splitlines()][meta["epoch"] - 1]
    assert run(capsys, "predict", "--checkpoint", run_dir / "ckpt-best.pt", "--manifest", dev_m,
               "--out", tmp_path / "p.csv")[0] == 0
    assert run(capsys, "evaluate", "--task", "task1", "--truth", dev_m, "--predictions", tmp_path / "p.csv",
               "--out", tmp_path / "m.json")[0] == 0
    report = json.loads((tmp_path / "m.json").read_text())
    assert report["weighted_f1"] == pytest.approx(logged["dev_weighted_f1"], abs=1e-6)


def test_report(capsys, tmp_path):
    code, out, _ = run(capsys, "report", "--published", "test", "--out", tmp_path / "runs.json")
    assert code == 0
    assert "| Run 2 | 0.526 | 0.584 | 0.495 |" in out
    assert len(json.loads((tmp_path / "runs.json").read_text())["runs"]) == 6


def test_report_from_metrics(capsys, tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({
        "task_id": "task2", "per_label": {}, "weighted_f1": 0.5, "record_count": 0, "threshold": 0.5}))
    code, out, _ = run(capsys, "report", "--metrics", f"run1={tmp_path / 'm.json'}")
    assert code == 0 and "| Run 1 | 0.500 |" in out


def test_report_requires_input(capsys):
    assert run(capsys, "report")[0] == 2
