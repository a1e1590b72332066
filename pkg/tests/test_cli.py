import json
import subprocess
import sys

import pytest

from depmil.bagsynth import BagRecipe
from depmil.cli import main
from depmil.checkpoint import load_checkpoint
from depmil.pseudolabel import read_records
from depmil.train import OUTPUT_ENV, TrainConfig

from conftest import tiny_spec


@pytest.fixture
def config_path(tmp_path):
    recipe = BagRecipe(label_rule="max_rule", count=24, seed=2, k_min=6, k_max=10)
    config = TrainConfig(model=tiny_spec(), data=recipe, epochs=1, folds=2, ensemble=1, seed=1)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config.to_dict()))
    return path


@pytest.fixture(autouse=True)
def no_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)


def last_json(text):
    return json.loads(text)


class TestErrors:
    def test_missing_config_exits_1(self, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert main(["train", "--config", str(missing)]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "FileNotFoundError" and err["path"] == str(missing)

    def test_unknown_flag_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--bogus"])
        assert exc.value.code == 2

    def test_bad_fold(self, config_path, tmp_path, capsys):
        main(["train", "--config", str(config_path), "--out", str(tmp_path / "r"), "--folds-to-run", "0"])
        ckpt = str(tmp_path / "r" / "fold0_m0.ckpt")
        capsys.readouterr()
        assert main(["eval", "--config", str(config_path), "--checkpoints", ckpt, "--fold", "7"]) == 1
        assert "fold 7" in json.loads(capsys.readouterr().err)["message"]


class TestGradcheck:
    def test_subset_exit_0(self, capsys):
        assert main(["gradcheck", "--trials", "2", "--only", "add", "softmax"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 2 and all(l.startswith("PASS") for l in lines)

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "depmil", "gradcheck", "--trials", "1", "--only", "tanh"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("PASS")


class TestPipeline:
    def test_gen_data(self, tmp_path, capsys):
        recipe = tmp_path / "recipe.json"
        recipe.write_text(json.dumps(BagRecipe(count=10, seed=4).to_dict()))
        assert main(["gen-data", "--recipe", str(recipe), "--out", str(tmp_path / "d"), "--write-bags"]) == 0
        summary = last_json(capsys.readouterr().out)
        assert summary["bags"] == 10 and sum(summary["label_counts"]) == 10
        assert (tmp_path / "d" / "manifest.json").exists() and (tmp_path / "d" / "bags.jsonl").exists()

    def test_train_label_retrain_eval_report(self, config_path, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(config_path), "--out", str(a), "--members", "2"]) == 0
        rep = last_json(capsys.readouterr().out)
        assert rep["meta"]["members"] == 2 and rep["meta"]["method"] == "attention"
        ckpts = sorted(str(p) for p in a.glob("fold0_m*.ckpt"))
        assert len(ckpts) == 2
        _, header = load_checkpoint(ckpts[0])
        assert header["extra"]["fold"] == 0

        records = tmp_path / "pl.jsonl"
        assert main(["pseudo-label", "--config", str(config_path), "--checkpoints", *ckpts,
                     "--fold", "0", "--output", str(records)]) == 0
        summary = last_json(capsys.readouterr().out)
        assert summary["instances"] == len(read_records(records)) > 0

        assert main(["retrain", "--config", str(config_path), "--records", str(records), "--out", str(b),
                     "--init", *ckpts, "--name", "with PL"]) == 0
        rep = last_json(capsys.readouterr().out)
        assert rep["meta"]["pseudo_labels"] is True and rep["meta"]["method"] == "with PL"

        out = tmp_path / "eval.json"
        assert main(["eval", "--config", str(config_path), "--checkpoints", *ckpts, "--fold", "0",
                     "--output", str(out)]) == 0
        assert json.loads(out.read_text())["meta"]["checkpoints"] == 2
        capsys.readouterr()

        csv = tmp_path / "table.csv"
        assert main(["report", str(a / "report.json"), str(b / "report.json"), "--output", str(csv)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("attention,") and lines[2].startswith("with PL,")
        assert csv.read_text() == "\n".join(lines) + "\n"

    def test_env_overrides_out(self, config_path, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["train", "--config", str(config_path), "--out", str(tmp_path / "flag"),
                     "--folds-to-run", "1", "--deterministic"]) == 0
        assert (tmp_path / "env" / "report.json").exists()
        assert (tmp_path / "env" / "fold1_m0.ckpt").exists()
        assert not (tmp_path / "flag").exists()

    def test_seed_flag_is_deterministic(self, config_path, tmp_path, capsys):
        outs = []
        for name in ("x", "y"):
            main(["train", "--config", str(config_path), "--out", str(tmp_path / name), "--seed", "9",
                  "--folds-to-run", "0", "--threads", "1"])
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]
