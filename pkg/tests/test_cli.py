import json
import subprocess
import sys

import pytest
import yaml

from conftest import SMALL_SCENE
from tempo_align.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main

FAST = {
    "seeds": [0],
    "scene": SMALL_SCENE,
    "pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16},
    "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 16},
}


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(FAST))
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestWorkflow:
    def test_full_chain(self, tmp_path, config, capsys):
        data, runs = tmp_path / "data", tmp_path / "runs"
        assert run("synth", "--config", config, "--out", data, "--audio-only") == EXIT_OK
        assert not list((data / "features").iterdir())
        # training before features exist is a data error
        assert run("pretrain", "--config", config, "--data", data, "--out", runs) == EXIT_DATA
        assert run("extract", "--config", config, "--out", data) == EXIT_OK
        assert len(list((data / "features").iterdir())) == 100
        assert run("pretrain", "--config", config, "--data", data, "--out", runs,
                   "--strategy", "nearest:1") == EXIT_OK
        assert (runs / "seed0" / "pretrain_last.xck").exists()
        assert run("finetune", "--config", config, "--data", data, "--out", runs) == EXIT_OK
        assert (runs / "seed0" / "finetune_last.xck").exists()
        capsys.readouterr()
        assert run("evaluate", "--config", config, "--data", data, "--out", runs) == EXIT_OK
        table = capsys.readouterr().out
        assert "nearest:1" in table and "T->A R@1" in table
        reports = json.loads((runs / "reports.json").read_text())
        assert {r["direction"] for r in reports} == {"A->I", "I->A", "T->A", "A->T"}

    def test_matrix_single_row(self, tmp_path, config, small_data_dir):
        out = tmp_path / "m"
        assert run("matrix", "--config", config, "--data", small_data_dir, "--out", out,
                   "--strategy", "multiframe", "--seed", "3") == EXIT_OK
        assert (out / "multiframe" / "seed3" / "finetune_last.xck").exists()
        assert "multiframe" in (out / "matrix_table.txt").read_text()

    def test_synth_seed_flag(self, tmp_path, config):
        assert run("synth", "--config", config, "--out", tmp_path / "a", "--seed", "5") == EXIT_OK
        scene = json.loads((tmp_path / "a" / "scene.jsonl").read_text())
        assert scene["seed"] == 5


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("nope: 1\n")
        assert run("pretrain", "--config", bad) == EXIT_CONFIG

    def test_unreadable_yaml(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("a: [1, 2\n")
        assert run("evaluate", "--config", bad) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run("synth", "--config", tmp_path / "none.yaml") == EXIT_CONFIG

    def test_bad_strategy_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("pretrain", "--strategy", "softmax")
        assert exc.value.code == 2

    def test_missing_data(self, tmp_path, config):
        assert run("pretrain", "--config", config, "--data", tmp_path / "none") == EXIT_DATA

    def test_missing_checkpoint(self, tmp_path, config, small_data_dir):
        assert run("finetune", "--config", config, "--data", small_data_dir,
                   "--checkpoint", tmp_path / "none.xck") == EXIT_DATA

    def test_extract_without_audio(self, tmp_path, config, small_data_dir):
        # manifest from a features-only synth run has no wav paths
        import shutil
        shutil.copytree(small_data_dir, tmp_path / "d")
        assert run("extract", "--config", config, "--out", tmp_path / "d") == EXIT_DATA


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tempo_align", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "extract", "pretrain", "finetune", "evaluate", "matrix"):
        assert cmd in proc.stdout
