import json
import os

import numpy as np
import pytest

from mdaggr import cli, data, evaluation

SYNTH_SPEC = {
    "kind": "classification",
    "num_sources": 2,
    "num_classes": 3,
    "images_per_domain": 48,
    "image_size": 16,
    "seed": 13,
}

TRAIN_CONFIG = {
    "trainer": {
        "task_kind": "classification",
        "stage1_epochs": 1, "stage1_task_epochs": 1, "stage1_finetune_epochs": 1,
        "stage2_epochs": 1, "stage3_epochs": 1, "outer_iterations": 1,
        "batch_size": 16, "max_steps_per_epoch": 3,
        "translator_blocks": 1, "translator_width": 6,
        "discriminator_width": 6, "task_width": 6, "feature_disc_width": 6,
    },
    "weights": {"cycle": 10.0},
}


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC))
    data_dir = root / "data"
    assert run(["synth", "--spec", str(spec_path), "--out", str(data_dir)]) == 0
    return root, spec_path, data_dir


@pytest.fixture(scope="module")
def trained_run(dataset):
    root, spec_path, data_dir = dataset
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(TRAIN_CONFIG))
    out = root / "run0"
    code = run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                "--mode", "madan", "--out", str(out), "--seed", "0"])
    assert code == 0
    return root, cfg_path, data_dir, out


class TestSynth:
    def test_dataset_layout(self, dataset):
        _, _, data_dir = dataset
        manifest = data.load_manifest(data_dir)
        assert manifest.source_names == ["src0", "src1"]
        assert (data_dir / "src0" / "images" / "00000.png").is_file()
        assert (data_dir / "src0" / "labels.csv").is_file()
        assert (data_dir / "target_eval" / "labels.csv").is_file()

    def test_bad_spec_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"num_sources": 1}))
        assert run(["synth", "--spec", str(bad), "--out", str(tmp_path / "x")]) \
            == cli.EXIT_CONFIG


class TestTrain:
    def test_outputs_exist(self, trained_run):
        _, _, _, out = trained_run
        for name in ("run_manifest.json", "history.jsonl", "final.pt", "report.json"):
            assert (out / name).is_file(), name
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["seed"] == 0
        assert manifest["config"]["mode"] == "madan"
        assert manifest["input_hash"]

    def test_eval_reproduces_history_final_metrics(self, trained_run):
        root, _, data_dir, out = trained_run
        report_path = root / "reeval.json"
        code = run(["eval", "--checkpoint", str(out / "final.pt"),
                    "--data", str(data_dir), "--domain", "target_eval",
                    "--report", str(report_path)])
        assert code == 0
        fresh = json.loads(report_path.read_text())
        emitted = json.loads((out / "report.json").read_text())
        assert fresh["overall"] == emitted["overall"]
        assert fresh["confusion"] == emitted["confusion"]
        history = [json.loads(line) for line in
                   (out / "history.jsonl").read_text().splitlines()]
        final = [r for r in history if r.get("event") == "final_eval"][-1]
        assert final["overall"] == fresh["overall"]

    def test_override_zeroes_stage_one(self, dataset, tmp_path):
        root, spec_path, data_dir = dataset
        out = tmp_path / "short"
        cfg_path = root / "config.json"
        code = run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                    "--out", str(out), "--seed", "1",
                    "--override", "trainer.stage1_epochs=0"])
        assert code == 0
        history = [json.loads(line) for line in
                   (out / "history.jsonl").read_text().splitlines()]
        assert not [r for r in history if r.get("phase") == "translate"]

    def test_bad_override_key(self, dataset, tmp_path):
        root, spec_path, data_dir = dataset
        cfg_path = root / "config.json"
        assert run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                    "--out", str(tmp_path / "x"),
                    "--override", "trainer.bogus_key=1"]) == cli.EXIT_CONFIG
        assert run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                    "--out", str(tmp_path / "y"),
                    "--override", "nosection.key=1"]) == cli.EXIT_CONFIG

    def test_lock_prevents_concurrent_runs(self, dataset, tmp_path):
        root, spec_path, data_dir = dataset
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").write_text("held")
        cfg_path = root / "config.json"
        assert run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                    "--out", str(out)]) == cli.EXIT_LOCK

    def test_train_from_spec_json(self, dataset, tmp_path):
        root, spec_path, _ = dataset
        cfg_path = root / "config.json"
        out = tmp_path / "fromspec"
        code = run(["train", "--config", str(cfg_path), "--data", str(spec_path),
                    "--out", str(out), "--seed", "2"])
        assert code == 0
        assert (out / "report.json").is_file()

    def test_determinism_bit_for_bit(self, dataset, tmp_path):
        root, spec_path, data_dir = dataset
        cfg_path = root / "config.json"
        histories = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                        "--out", str(out), "--seed", "3"]) == 0
            histories.append((out / "history.jsonl").read_bytes())
        assert histories[0] == histories[1]


class TestTranslate:
    def test_adapted_images_emitted(self, trained_run, tmp_path):
        root, _, data_dir, out = trained_run
        adapted_dir = tmp_path / "adapted"
        code = run(["translate", "--checkpoint", str(out / "final.pt"),
                    "--source", "src0", "--in", str(data_dir / "src0" / "images"),
                    "--out", str(adapted_dir)])
        assert code == 0
        originals = sorted((data_dir / "src0" / "images").glob("*.png"))
        emitted = sorted(adapted_dir.glob("*.png"))
        assert [p.name for p in emitted] == [p.name for p in originals]

    def test_unknown_source_rejected(self, trained_run, tmp_path):
        root, _, data_dir, out = trained_run
        assert run(["translate", "--checkpoint", str(out / "final.pt"),
                    "--source", "nope", "--in", str(data_dir / "src0" / "images"),
                    "--out", str(tmp_path / "x")]) == cli.EXIT_DATA


class TestReport:
    def test_mean_std_match_recomputation(self, dataset, tmp_path):
        root, spec_path, data_dir = dataset
        cfg_path = root / "config.json"
        runs = []
        for seed in (10, 11, 12):
            out = tmp_path / ("seed%d" % seed)
            assert run(["train", "--config", str(cfg_path), "--data", str(data_dir),
                        "--out", str(out), "--seed", str(seed)]) == 0
            runs.append(out)
        summary_path = tmp_path / "summary.json"
        assert run(["report", "--runs"] + [str(r) for r in runs]
                   + ["--out", str(summary_path)]) == 0
        summary = json.loads(summary_path.read_text())["groups"]["madan"]
        overall = [json.loads((r / "report.json").read_text())["overall"] for r in runs]
        assert summary["runs"] == 3
        assert summary["overall_mean"] == pytest.approx(float(np.mean(overall)))
        assert summary["overall_std"] == pytest.approx(float(np.std(overall, ddof=1)))

    def test_missing_run_rejected(self, tmp_path):
        assert run(["report", "--runs", str(tmp_path / "ghost"),
                    "--out", str(tmp_path / "s.json")]) == cli.EXIT_DATA


class TestErrors:
    def test_unknown_flag_usage_code(self, capsys):
        assert run(["synth", "--nonsense"]) == cli.EXIT_USAGE
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        record = json.loads(err)
        assert record["error"] == "usage"

    def test_missing_data_dir(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{}")
        assert run(["train", "--config", str(cfg), "--data", str(tmp_path / "none"),
                    "--out", str(tmp_path / "o")]) == cli.EXIT_DATA

    def test_error_is_single_line_json(self, tmp_path, capsys):
        run(["eval", "--checkpoint", str(tmp_path / "nope.pt"),
             "--data", str(tmp_path), "--domain", "x",
             "--report", str(tmp_path / "r.json")])
        err = capsys.readouterr().err.strip()
        assert len(err.splitlines()) == 1
        json.loads(err)

    def test_env_var_default_out(self, dataset, tmp_path, monkeypatch):
        root, spec_path, data_dir = dataset
        out = tmp_path / "envout"
        monkeypatch.setenv("MDAGGR_OUT", str(out))
        spec2 = dict(SYNTH_SPEC)
        spec2["images_per_domain"] = 8
        sp = tmp_path / "s.json"
        sp.write_text(json.dumps(spec2))
        assert run(["synth", "--spec", str(sp)]) == 0
        assert (out / "manifest.json").is_file()

    def test_no_out_anywhere(self, monkeypatch, tmp_path):
        monkeypatch.delenv("MDAGGR_OUT", raising=False)
        sp = tmp_path / "s.json"
        sp.write_text(json.dumps(SYNTH_SPEC))
        assert run(["synth", "--spec", str(sp)]) == cli.EXIT_CONFIG
