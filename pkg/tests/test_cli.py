import hashlib
import json
from pathlib import Path

import pytest
import yaml

from dafakd.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_IO, EXIT_OK, main
from dafakd.config import ConfigBudgetError, ConfigError, ExperimentConfig, dump_config, from_dict, load_config
from dafakd.data import read_dataset
from dafakd.gradcheck import standard_suite

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "data": {"freq_bins": 4, "time_frames": 2, "train_per_cell": 4, "validation_per_cell": 3},
    "teacher": {"hidden_dims": [16], "embedding_dim": 8},
    "student": {"hidden_dims": [8], "embedding_dim": 4},
    "train_teacher": {"epochs": 2, "batch_size": 32, "peak_lr": 0.01},
    "train_distill": {"epochs": 2, "batch_size": 32, "peak_lr": 0.01},
    "train_dsft": {"epochs": 2, "batch_size": 8, "peak_lr": 0.01},
}


def _write(tmp_path, doc, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


class TestConfig:
    def test_defaults_round_trip_through_yaml(self):
        cfg = ExperimentConfig()
        assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg

    def test_shipped_configs_load(self):
        paper = load_config(ROOT / "configs" / "paper.yaml")
        assert paper.hash() == ExperimentConfig().hash()
        assert paper.kd.lam == 0.98 and paper.kd.tau == 2.0
        assert paper.train_teacher.epochs == 500 and paper.train_teacher.batch_size == 128
        desk = load_config(ROOT / "configs" / "desk.yaml")
        assert desk.student == paper.student

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="lamda"):
            from_dict({"kd": {"lamda": 0.9}})
        with pytest.raises(ConfigError, match="extras"):
            from_dict({"extras": {}})

    def test_type_errors(self):
        with pytest.raises(ConfigError, match="epochs"):
            from_dict({"train_teacher": {"epochs": "many"}})
        with pytest.raises(ConfigError):
            from_dict({"mixup": {"enabled": 1}})

    def test_value_errors(self):
        with pytest.raises(ConfigError):
            from_dict({"kd": {"lam": 2.0}})
        with pytest.raises(ConfigError):
            from_dict({"ensemble": {"members": ["ce_only", "magic"]}})
        with pytest.raises(ConfigError):
            from_dict({"data": {"noise_min": 0.5, "noise_max": 0.1}})

    def test_budget_checked_at_load(self):
        with pytest.raises(ConfigBudgetError, match="parameter memory"):
            from_dict({"student": {"hidden_dims": [512]}})
        assert from_dict({"student": {"hidden_dims": [512]}}, check_budget=False).student.hidden_dims == (512,)

    def test_hash_ignores_output_location(self):
        a = ExperimentConfig()
        assert a.hash() == a.with_overrides(output_dir="/elsewhere").hash()
        assert a.hash() != a.with_overrides(seed=1).hash()

    def test_stage_seeds_distinct(self):
        cfg = ExperimentConfig(seed=3)
        seeds = [cfg.stage_seed("teacher", 0), cfg.stage_seed("teacher", 1), cfg.stage_seed("distill"),
                 cfg.stage_seed("dsft")]
        assert len(set(seeds)) == 4

    def test_augmentation_switches(self):
        cfg = ExperimentConfig()
        assert cfg.augment_for("teacher").mixup is not None
        assert cfg.augment_for("dsft").mixup is None
        off = from_dict({"mixup": {"enabled": False}})
        assert off.augment_for("teacher").mixup is None
        assert off.augment_for("teacher").freq_mixstyle.apply_probability == 0.4


class TestGradcheckCommand:
    def test_suite_names_every_loss(self):
        names = [r.name for r in standard_suite()]
        for required in ("cross_entropy", "dcsl", "gdal", "dafa_teacher_loss", "mlp layers (ce + dafa)"):
            assert required in names
        assert sum(n.startswith("kd_loss") for n in names) == 12

    def test_passes_and_catches_sign_flip(self, capsys):
        assert main(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "bug detected" in out
        assert "18/18 checks passed" in out

    def test_failure_exit_code(self, monkeypatch, capsys):
        import dafakd.cli as cli

        def broken(seed=0):
            results = standard_suite(seed)
            results[0].max_rel_error = 1.0
            return results

        monkeypatch.setattr(cli, "standard_suite", broken)
        assert main(["gradcheck"]) == EXIT_GRADCHECK
        assert "FAIL  cross_entropy" in capsys.readouterr().out


class TestBudgetCommand:
    def test_default_passes_with_margins(self, capsys):
        assert main(["budget"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "margin 22360 B" in out
        assert "margin 29973056" in out

    def test_oversize_fails(self, tmp_path, capsys):
        path = _write(tmp_path, {"student": {"hidden_dims": [512]}})
        assert main(["budget", "--config", path]) == EXIT_BUDGET
        assert "parameter memory" in capsys.readouterr().out


class TestGenerateCommand:
    def test_writes_dataset_and_manifest(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        out = tmp_path / "d.dafa"
        assert main(["generate", "--config", cfg, "--seed", "4", "--out", str(out)]) == EXIT_OK
        manifest = json.loads((tmp_path / "d.dafa.manifest.json").read_text())
        assert manifest["sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()
        assert manifest["seed"] == 4
        assert len(read_dataset(out).train) == 6 * 10 * 4

    def test_deterministic(self, tmp_path):
        cfg = _write(tmp_path, TINY)
        main(["generate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["generate", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_refuses_overwrite(self, tmp_path, capsys):
        out = tmp_path / "d.dafa"
        out.write_bytes(b"keep me")
        assert main(["generate", "--config", _write(tmp_path, TINY), "--out", str(out)]) == EXIT_IO
        assert out.read_bytes() == b"keep me"
        assert "--force" in capsys.readouterr().err
        assert main(["generate", "--config", _write(tmp_path, TINY), "--out", str(out), "--force"]) == EXIT_OK

    def test_bad_config(self, tmp_path, capsys):
        path = _write(tmp_path, {"data": {"colour": "blue"}})
        assert main(["generate", "--config", path, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
        assert "colour" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write(root, TINY)
    assert main(["run", "--config", cfg, "--out", str(root / "out")]) == EXIT_OK
    return root, cfg


class TestRunCommand:
    def test_outputs(self, tiny_run):
        root, _ = tiny_run
        out = root / "out"
        for rel in ("manifest.json", "reports/before.json", "reports/after.json", "reports/delta.json",
                    "reports/delta.txt", "bundle/bundle.json", "bundle/base.ckpt", "student/base.ckpt",
                    "teachers/teacher0_ce_only.ckpt", "teachers/teacher1_dafa.ckpt", "metrics/distill.jsonl"):
            assert (out / rel).exists(), rel
        manifest = json.loads((out / "manifest.json").read_text())
        assert {"config_hash", "dataset", "seed", "versions", "reports"} <= set(manifest)
        assert "Improvement (delta)" in (out / "reports" / "delta.txt").read_text()

    def test_rerun_is_byte_identical(self, tiny_run):
        root, cfg = tiny_run
        assert main(["run", "--config", cfg, "--out", str(root / "again")]) == EXIT_OK
        for rel in ("reports/before.json", "reports/after.json", "reports/delta.json", "bundle/base.ckpt",
                    "teachers/teacher1_dafa.ckpt", "manifest.json"):
            assert (root / "out" / rel).read_bytes() == (root / "again" / rel).read_bytes(), rel

    def test_resume_reuses_checkpoints(self, tiny_run, caplog):
        root, cfg = tiny_run
        with caplog.at_level("INFO", logger="dafakd"):
            assert main(["run", "--config", cfg, "--out", str(root / "out")]) == EXIT_OK
        assert sum("reusing" in r.message for r in caplog.records) == 3

    def test_skip_dsft(self, tiny_run):
        root, cfg = tiny_run
        assert main(["run", "--config", cfg, "--out", str(root / "skip"), "--skip-dsft"]) == EXIT_OK
        assert json.loads((root / "skip" / "bundle" / "bundle.json").read_text())["specialists"] == {}
        d = json.loads((root / "skip" / "reports" / "delta.json").read_text())
        assert all(v is None for v in d["per_device"].values())
        assert all(v == 0.0 for v in d["aggregates"].values())

    def test_budget_failure(self, tmp_path, capsys):
        doc = dict(TINY, student={"hidden_dims": [4096], "embedding_dim": 4})
        assert main(["run", "--config", _write(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_BUDGET
        assert "budget" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_missing_dataset_file(self, tmp_path, capsys):
        doc = dict(TINY, data=dict(TINY["data"], dataset_path=str(tmp_path / "absent.dafa")))
        assert main(["run", "--config", _write(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_IO
        assert "absent.dafa" in capsys.readouterr().err


class TestEvalCommand:
    def test_no_device_labels_equals_base(self, tiny_run, tmp_path):
        out = tiny_run[0] / "out"
        args = ["eval", "--bundle", str(out / "bundle"), "--dataset", str(out / "dataset.dafa"),
                "--format", "structured"]
        assert main(args + ["--no-device-labels", "--out", str(tmp_path / "e.json")]) == EXIT_OK
        report = json.loads((tmp_path / "e.json").read_text())
        before = json.loads((out / "reports" / "before.json").read_text())
        assert report["per_device"] == before["per_device"]

    def test_routed_matches_after_report(self, tiny_run, tmp_path):
        out = tiny_run[0] / "out"
        args = ["eval", "--bundle", str(out / "bundle"), "--dataset", str(out / "dataset.dafa"),
                "--format", "structured", "--out", str(tmp_path / "e.json")]
        assert main(args) == EXIT_OK
        after = json.loads((out / "reports" / "after.json").read_text())
        assert json.loads((tmp_path / "e.json").read_text())["per_device"] == after["per_device"]

    def test_missing_files(self, tiny_run, tmp_path, capsys):
        out = tiny_run[0] / "out"
        assert main(["eval", "--bundle", str(out / "bundle"), "--dataset", str(tmp_path / "nope.dafa")]) == EXIT_IO
        assert "nope.dafa" in capsys.readouterr().err
        assert main(["eval", "--bundle", str(tmp_path), "--dataset", str(out / "dataset.dafa")]) == EXIT_IO

    def test_corrupt_dataset(self, tiny_run, tmp_path, capsys):
        bad = tmp_path / "bad.dafa"
        bad.write_bytes(b"DAFA\x01\x00garbage")
        out = tiny_run[0] / "out"
        assert main(["eval", "--bundle", str(out / "bundle"), "--dataset", str(bad)]) == EXIT_IO
        assert "offset" in capsys.readouterr().err
