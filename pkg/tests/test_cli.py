import hashlib
import json
from pathlib import Path

import pytest

from semisiam.cli import main
from semisiam.config import DataConfig, OptimConfig, RunConfig
from semisiam.datagen import SynthConfig, TileDataset
from semisiam.model import EncoderConfig


def tiny_config(tmp_path: Path, **kw) -> RunConfig:
    base = dict(
        data=DataConfig(
            root=str(tmp_path / "data"),
            synth=SynthConfig(canvas_size=512, tile_size=32,
                              target_positive_ratio=0.05,
                              structure_size_range=(10, 24), noise_octaves=3),
            fractions=(0.5, 0.25, 0.25),
            labeled_block_fraction=0.3,
            enrich_positive_fraction=0.3,
            resize=32,
        ),
        model=EncoderConfig(feature_dim=32, input_side=32),
        optim=OptimConfig(lr=0.02),
        batch_unlabeled=32,
        batch_labeled=16,
        subgroup_size=8,
        epochs=1,
        probe_epochs=2,
        baseline_epochs=1,
        ablation_seeds=(0,),
        out_dir=str(tmp_path / "run"),
    )
    base.update(kw)
    return RunConfig(**base)


def write_config(tmp_path: Path, **kw) -> str:
    cfg = tiny_config(tmp_path, **kw)
    path = tmp_path / "config.json"
    cfg.to_json(path)
    return str(path)


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != ".lock":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestPurityVerb:
    def test_paper_row(self, capsys):
        assert main(["purity", "--pool", "505", "--positives", "5", "--draw", "16"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "n,probability,cumulative"
        row1 = lines[2].split(",")
        assert row1[0] == "1"
        assert abs(float(row1[2]) - 0.991) <= 0.001

    def test_deterministic_output(self, capsys):
        main(["purity", "--pool", "100", "--positives", "3", "--draw", "8"])
        first = capsys.readouterr().out
        main(["purity", "--pool", "100", "--positives", "3", "--draw", "8"])
        assert capsys.readouterr().out == first

    def test_invalid_bounds_exit_1(self, capsys):
        assert main(["purity", "--pool", "10", "--positives", "20", "--draw", "5"]) == 1
        assert "error" in capsys.readouterr().err


class TestGenData:
    def test_hash_identical_reruns(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg_path, "--seed", "7"]) == 0
        first = tree_hash(tmp_path / "data")
        assert main(["gen-data", "--config", cfg_path, "--seed", "7"]) == 0
        assert tree_hash(tmp_path / "data") == first

    def test_seed_changes_dataset(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        main(["gen-data", "--config", cfg_path, "--seed", "1"])
        first = tree_hash(tmp_path / "data")
        main(["gen-data", "--config", cfg_path, "--seed", "2"])
        assert tree_hash(tmp_path / "data") != first

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg_path, "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert json.loads(out)["verb"] == "gen-data"
        assert not (tmp_path / "data").exists()


class TestSplitVerb:
    def test_resplit_deterministic(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        main(["gen-data", "--config", cfg_path])
        manifest = tmp_path / "data" / "manifest.csv"
        main(["split", "--config", cfg_path, "--seed", "9"])
        first = manifest.read_bytes()
        main(["split", "--config", cfg_path, "--seed", "9"])
        assert manifest.read_bytes() == first
        main(["split", "--config", cfg_path, "--seed", "10"])
        assert manifest.read_bytes() != first


class TestUpsampleVerb:
    def test_factor_duplicates_positives(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        main(["gen-data", "--config", cfg_path])
        before = TileDataset.load(tmp_path / "data").subset("train").counts()
        assert main(["upsample", "--config", cfg_path, "--factor", "3"]) == 0
        after = TileDataset.load(tmp_path / "data").subset("train").counts()
        assert after["pos"] == 3 * before["pos"]
        assert after["neg"] == before["neg"]

    def test_requires_mode(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["upsample", "--config", cfg_path]) == 2


class TestErrorPaths:
    def test_missing_config_exit_2(self, capsys):
        assert main(["pretrain", "--config", "/nonexistent/cfg.json"]) == 2

    def test_unknown_verb_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_bad_override_exit_1(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["gen-data", "--config", cfg_path, "--set", "nope=1"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_lock_contention_exit_1(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / ".lock").write_text("123")
        assert main(["gen-data", "--config", cfg_path]) == 1
        assert "locked" in capsys.readouterr().err


class TestTrainVerbs:
    def test_pretrain_probe_eval_chain(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["gen-data", "--config", cfg_path]) == 0
        assert main(["pretrain", "--config", cfg_path]) == 0
        assert (run / "checkpoints" / "final.pt").exists()
        assert (run / "train_log.csv").exists()
        assert (run / "config.json").exists()
        assert main(["probe", "--config", cfg_path]) == 0
        assert (run / "probe.pt").exists()
        assert (run / "probe_metrics.csv").exists()
        assert main(["eval", "--config", cfg_path, "--split", "test"]) == 0
        out = capsys.readouterr().out
        assert (run / "eval_test.csv").exists()
        assert "test" in out

    def test_pretrain_rerun_identical_log(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        main(["gen-data", "--config", cfg_path])
        main(["pretrain", "--config", cfg_path])
        log = (tmp_path / "run" / "train_log.csv").read_bytes()
        ckpt = (tmp_path / "run" / "checkpoints" / "final.pt").read_bytes()
        main(["pretrain", "--config", cfg_path])
        assert (tmp_path / "run" / "train_log.csv").read_bytes() == log
        assert (tmp_path / "run" / "checkpoints" / "final.pt").read_bytes() == ckpt


class TestReportVerb:
    def test_missing_metrics_clear_error(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["report", "--run", str(tmp_path / "empty")]) == 1
        assert "metrics.csv" in capsys.readouterr().err

    def test_renders_table_and_is_idempotent(self, tmp_path, capsys):
        run = tmp_path / "ablation"
        run.mkdir()
        tiny_config(tmp_path).to_json(run / "config.json")
        rows = [
            "supervised,test,1,3,2,90,5,0.6,0.65",
            "loss1,test,4,5,2,90,3,0.7,0.77",
            "loss1+2,test,6,6,2,90,2,0.8,0.83",
            "loss2,test,2,0,0,92,8,0.45,0.5",
        ]
        (run / "metrics.csv").write_text(
            "arm,split,epoch,tp,fp,tn,fn,macro_f1,balanced_accuracy\n"
            + "\n".join(rows) + "\n")
        assert main(["report", "--run", str(run)]) == 0
        first = capsys.readouterr().out
        assert first.count("|") > 0
        body = [l for l in first.splitlines() if l.startswith("|")][2:]
        assert len(body) == 4
        assert body[0].split("|")[2].strip() == "loss1+2"  # ranked by balanced accuracy
        assert (run / "report.md").exists()
        assert main(["report", "--run", str(run)]) == 0
        assert capsys.readouterr().out == first
