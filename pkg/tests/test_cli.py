"""Command line surface: flows, guard rails, exit codes, reproducibility."""

import json
import shutil
from pathlib import Path

import pytest

from sci3d.checkpoint import load_checkpoint
from sci3d.cli import DATA_ENV, main
from sci3d.metrics import parse_report

pytestmark = pytest.mark.usefixtures("no_data_env")


@pytest.fixture(autouse=True)
def no_data_env(monkeypatch):
    monkeypatch.delenv(DATA_ENV, raising=False)


GEN_FLAGS = [
    "--num-train", "6",
    "--num-val", "3",
    "--seed", "4",
    "--canvas", "48",
    "--video-len", "24",
    "--atomic-len", "8",
    "--objects-min", "1",
    "--objects-max", "2",
    "--events-min", "1",
    "--events-max", "2",
    "--motions", "slide,rotate",
]

SMALL_NET = [
    "--encoder-widths", "8,16",
    "--encoder-blocks", "1,1",
    "--stem-width", "4",
]


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    assert main(["generate", "--data-dir", str(root)] + GEN_FLAGS) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, ds):
    """An r3d_nl atomic run shared by the eval tests."""
    out = tmp_path_factory.mktemp("cli_run")
    code = main(
        [
            "train",
            "--data-dir", str(ds),
            "--out", str(out),
            "--task", "atomic",
            "--variant", "r3d_nl",
            "--epochs", "1",
            "--clip-len", "8",
            "--dropout", "0.0",
            "--seed", "1",
        ]
        + SMALL_NET
    )
    assert code == 0
    return out


class TestGenerate:
    def test_writes_dataset_and_summary(self, ds, capsys):
        assert (ds / "generate_config.json").exists()
        code = main(["generate", "--data-dir", str(ds), "--force"] + GEN_FLAGS)
        out = capsys.readouterr().out
        assert code == 0
        assert "wrote 9 videos" in out
        assert "atomic classes" in out
        assert "positives per class" in out
        assert "composite classes:" in out

    def test_refuses_nonempty_dir_without_force(self, ds, capsys):
        assert main(["generate", "--data-dir", str(ds)] + GEN_FLAGS) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_rerun_is_identical(self, ds, tmp_path):
        other = tmp_path / "again"
        assert main(["generate", "--data-dir", str(other)] + GEN_FLAGS) == 0
        for rel in sorted(
            p.relative_to(ds) for p in ds.rglob("*") if p.is_file()
        ):
            if rel.name == "generate_config.json":
                continue
            assert (other / rel).read_bytes() == (ds / rel).read_bytes(), rel

    def test_rejects_zero_train_videos(self, tmp_path, capsys):
        args = ["generate", "--data-dir", str(tmp_path / "x"), "--num-train", "0"]
        assert main(args) == 2
        assert "num-train" in capsys.readouterr().err

    def test_rejects_bad_scene_spec(self, tmp_path, capsys):
        args = [
            "generate", "--data-dir", str(tmp_path / "x"), "--canvas", "16"
        ]
        assert main(args) == 3

    def test_requires_data_dir_or_env(self, capsys):
        assert main(["generate"] + GEN_FLAGS) == 2
        assert DATA_ENV in capsys.readouterr().err

    def test_env_var_supplies_data_dir(self, tmp_path, monkeypatch):
        root = tmp_path / "from_env"
        monkeypatch.setenv(DATA_ENV, str(root))
        assert main(["generate"] + GEN_FLAGS) == 0
        assert (root / "generate_config.json").exists()


class TestPretrain:
    def test_writes_checkpoint_and_history(self, ds, tmp_path, capsys):
        out = tmp_path / "pre.ckpt"
        code = main(
            [
                "pretrain",
                "--data-dir", str(ds),
                "--out", str(out),
                "--epochs", "1",
            ]
            + SMALL_NET[:4] + ["--stem-width", "4"]
        )
        assert code == 0
        assert load_checkpoint(out).stage == "2d-pretrain"
        history = json.loads(out.with_suffix(".ckpt.history.json").read_text())
        assert len(history["set_loss"]) == 1
        assert "pretrain loss" in capsys.readouterr().out

    def test_zero_epochs_writes_init_weights(self, ds, tmp_path):
        out = tmp_path / "init.ckpt"
        args = [
            "pretrain", "--data-dir", str(ds), "--out", str(out),
            "--epochs", "0",
        ] + SMALL_NET[:4] + ["--stem-width", "4"]
        assert main(args) == 0
        ck = load_checkpoint(out)
        assert ck.epoch == 0
        history = json.loads(out.with_suffix(".ckpt.history.json").read_text())
        assert history["set_loss"] == []

    def test_rerun_same_seed_identical_bytes(self, ds, tmp_path):
        outs = []
        for name in ("a.ckpt", "b.ckpt"):
            out = tmp_path / name
            args = [
                "pretrain", "--data-dir", str(ds), "--out", str(out),
                "--epochs", "1", "--seed", "9",
            ] + SMALL_NET[:4] + ["--stem-width", "4"]
            assert main(args) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_dataset_without_states_fails_with_data_error(self, ds, tmp_path, capsys):
        broken = tmp_path / "broken_ds"
        shutil.copytree(ds, broken)
        victim = next(broken.rglob("states.bin"))
        victim.unlink()
        args = [
            "pretrain", "--data-dir", str(broken), "--out",
            str(tmp_path / "x.ckpt"), "--epochs", "1",
        ]
        assert main(args) == 3


class TestTrainGuards:
    def test_atomic_with_lstm_head_conflicts(self, ds, tmp_path, capsys):
        args = [
            "train", "--data-dir", str(ds), "--out", str(tmp_path / "r"),
            "--task", "atomic", "--variant", "r3d_nl", "--head", "lstm",
        ]
        assert main(args) == 2
        err = capsys.readouterr().err
        assert "'fc' head" in err and "atomic" in err

    def test_composite_with_fc_head_conflicts(self, ds, tmp_path, capsys):
        args = [
            "train", "--data-dir", str(ds), "--out", str(tmp_path / "r"),
            "--task", "composite", "--variant", "r3d_nl", "--head", "fc",
        ]
        assert main(args) == 2
        assert "'lstm' head" in capsys.readouterr().err

    def test_dspn_variant_requires_pretrained(self, ds, tmp_path, capsys):
        args = [
            "train", "--data-dir", str(ds), "--out", str(tmp_path / "r"),
            "--task", "atomic", "--variant", "sci3d",
        ]
        assert main(args) == 2
        assert "--allow-random-init" in capsys.readouterr().err

    def test_missing_pretrained_checkpoint_is_data_error(self, ds, tmp_path):
        args = [
            "train", "--data-dir", str(ds), "--out", str(tmp_path / "r"),
            "--task", "atomic", "--variant", "sci3d_single",
            "--pretrained", str(tmp_path / "nope.ckpt"),
        ]
        assert main(args) == 3

    def test_resume_from_pretrain_stage_rejected(self, ds, tmp_path):
        pre = tmp_path / "pre.ckpt"
        args = [
            "pretrain", "--data-dir", str(ds), "--out", str(pre), "--epochs", "0",
        ] + SMALL_NET[:4] + ["--stem-width", "4"]
        assert main(args) == 0
        args = [
            "train", "--data-dir", str(ds), "--out", str(tmp_path / "r"),
            "--task", "atomic", "--variant", "r3d_nl",
            "--resume", str(pre), "--epochs", "1",
        ] + SMALL_NET
        assert main(args) == 2


class TestTrainRuns:
    def test_atomic_run_writes_artifacts(self, trained):
        assert (trained / "final.ckpt").exists()
        assert (trained / "best.ckpt").exists()
        history = json.loads((trained / "history.json").read_text())
        assert len(history["val_map"]) == 1
        config = json.loads((trained / "config.json").read_text())
        assert config["task"] == "atomic"
        assert config["model"]["head"] == "fc"

    def test_composite_run_uses_lstm_head(self, ds, tmp_path):
        out = tmp_path / "comp"
        code = main(
            [
                "train",
                "--data-dir", str(ds),
                "--out", str(out),
                "--task", "composite",
                "--variant", "sci3d_single",
                "--allow-random-init",
                "--epochs", "1",
                "--clip-len", "8",
                "--lstm-hidden", "8",
                "--dropout", "0.0",
            ]
            + SMALL_NET
        )
        assert code == 0
        config = json.loads((out / "config.json").read_text())
        assert config["model"]["head"] == "lstm"

    def test_pretrained_conditioning_flows_into_training(self, ds, tmp_path):
        pre = tmp_path / "pre.ckpt"
        args = [
            "pretrain", "--data-dir", str(ds), "--out", str(pre), "--epochs", "1",
        ] + SMALL_NET[:4] + ["--stem-width", "4"]
        assert main(args) == 0
        out = tmp_path / "ft"
        code = main(
            [
                "train",
                "--data-dir", str(ds),
                "--out", str(out),
                "--task", "atomic",
                "--variant", "sci3d_single",
                "--pretrained", str(pre),
                "--epochs", "1",
                "--clip-len", "8",
                "--dropout", "0.0",
            ]
            + SMALL_NET
        )
        assert code == 0


class TestEval:
    def test_matches_training_history_exactly(self, ds, trained, capsys):
        history = json.loads((trained / "history.json").read_text())
        report_path = trained / "report.txt"
        code = main(
            [
                "eval",
                "--data-dir", str(ds),
                "--checkpoint", str(trained / "final.ckpt"),
                "--report", str(report_path),
            ]
        )
        out = capsys.readouterr().out
        assert code == 0
        got = parse_report(report_path)
        assert got.map == history["val_map"][-1]
        assert f"mAP: {100 * got.map:.1f}%" in out

    def test_shuffle_segments_flag_runs(self, ds, trained):
        code = main(
            [
                "eval",
                "--data-dir", str(ds),
                "--checkpoint", str(trained / "final.ckpt"),
                "--shuffle-segments",
            ]
        )
        assert code == 0

    def test_missing_checkpoint_is_data_error(self, ds, tmp_path, capsys):
        code = main(
            [
                "eval",
                "--data-dir", str(ds),
                "--checkpoint", str(tmp_path / "ghost.ckpt"),
            ]
        )
        assert code == 3
        assert "cannot load checkpoint" in capsys.readouterr().err

    def test_pretrain_checkpoint_is_not_evaluable(self, ds, tmp_path, capsys):
        pre = tmp_path / "pre.ckpt"
        args = [
            "pretrain", "--data-dir", str(ds), "--out", str(pre), "--epochs", "0",
        ] + SMALL_NET[:4] + ["--stem-width", "4"]
        assert main(args) == 0
        code = main(
            ["eval", "--data-dir", str(ds), "--checkpoint", str(pre)]
        )
        assert code == 3
        assert "not a trained model checkpoint" in capsys.readouterr().err
