"""End-to-end command-line tests: exit codes, artifacts, and round trips."""

import json

import numpy as np
import pytest

from dualprec import packstore
from dualprec.cli import main
from dualprec.config import TrainConfig
from dualprec.trainer import DualPrecisionTrainer

SMOKE = ["--dataset", "synth", "--epochs", "4", "--phase1-epochs", "2",
         "--seed", "0", "--set", "synth_train=500", "--set", "synth_test=200"]


def run_train(out_dir, extra=()):
    code = main(["train", *SMOKE, *extra, "--out", str(out_dir)])
    assert code == 0
    return out_dir


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    return run_train(tmp_path_factory.mktemp("run") / "r0")


# ============================================================================
# train
# ============================================================================


class TestTrain:
    def test_writes_all_artifacts(self, run_dir):
        for name in ("model.dpw", "history.log", "config.resolved",
                     "history.csv", "accuracy.png", "levels.png"):
            assert (run_dir / name).exists(), name

    def test_history_is_json_lines(self, run_dir):
        records = [json.loads(line) for line in
                   (run_dir / "history.log").read_text().splitlines()]
        assert len(records) == 4
        assert records[0]["epoch"] == 1
        assert {"phase", "trainable", "train_loss", "acc_low", "acc_high",
                "levels_low", "levels_high"} <= records[0].keys()

    def test_resolved_config_reloads(self, run_dir):
        from dualprec.config import load_config_file

        config = load_config_file(run_dir / "config.resolved")
        assert config.epochs == 4
        assert config.synth_train == 500

    def test_default_config_hyperparameters(self, tmp_path):
        from dualprec.config import format_config

        text = format_config(TrainConfig())
        assert "batch_size = 125" in text
        assert "eta = 0.01" in text
        assert "lr_phase1_odd = 0.0003" in text
        assert "lr_phase1_even = 3e-05" in text
        assert "lr_phase2 = 0.004" in text
        assert "phase1_epochs = 50" in text

    def test_missing_config_file_exits_2_naming_path(self, tmp_path, capsys):
        code = main(["train", str(tmp_path / "nope.cfg")])
        assert code == 2
        assert "nope.cfg" in capsys.readouterr().err

    def test_unknown_config_key_exits_2_naming_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("batsh_size = 125\n")
        code = main(["train", str(cfg)])
        assert code == 2
        assert "batsh_size" in capsys.readouterr().err

    def test_bad_override_value_exits_2(self, tmp_path, capsys):
        code = main(["train", *SMOKE, "--set", "bits=9",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "bits" in capsys.readouterr().err

    def test_config_file_plus_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("dataset = synth\nepochs = 3\nphase1_epochs = 1\n"
                       "synth_train = 250\nsynth_test = 125\n")
        out = tmp_path / "r"
        assert main(["train", str(cfg), "--epochs", "2", "--out", str(out)]) == 0
        lines = (out / "history.log").read_text().splitlines()
        assert len(lines) == 2


# ============================================================================
# eval
# ============================================================================


class TestEval:
    def eval_json(self, capsys, args):
        assert main(["eval", *args]) == 0
        return json.loads(capsys.readouterr().out)

    def test_eval_both_modes(self, run_dir, capsys):
        model = str(run_dir / "model.dpw")
        cfg = str(run_dir / "config.resolved")
        low = self.eval_json(capsys, [model, "--precision", "low", "--config", cfg])
        high = self.eval_json(capsys, [model, "--precision", "high", "--config", cfg])
        assert 0 <= low["accuracy"] <= 1
        assert low["levels"].keys() == {"fc1.weight", "fc2.weight", "fc3.weight"}
        assert high["precision"] == "high"

    def test_eval_matches_history(self, run_dir, capsys):
        model = str(run_dir / "model.dpw")
        cfg = str(run_dir / "config.resolved")
        got = self.eval_json(capsys, [model, "--precision", "low", "--config", cfg])
        last = json.loads((run_dir / "history.log").read_text().splitlines()[-1])
        assert got["accuracy"] == pytest.approx(last["acc_low"], abs=1e-9)

    def test_missing_model_exits_2(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "no.dpw")]) == 2

    def test_high_precision_on_stripped_stream_exits_2(self, run_dir, tmp_path, capsys):
        model = str(run_dir / "model.dpw")
        low_path = tmp_path / "low.dpw"
        assert main(["switch", model, "--direction", "down",
                     "--out", str(low_path), "--bitplane", str(tmp_path / "p.dpb")]) == 0
        capsys.readouterr()
        code = main(["eval", str(low_path), "--precision", "high",
                     "--config", str(run_dir / "config.resolved")])
        assert code == 2

    def test_untrained_model_is_chance_level(self, tmp_path, capsys):
        config = TrainConfig(dataset="synth", seed=7, synth_train=500, synth_test=2000)
        state = DualPrecisionTrainer(config).export_state()
        path = tmp_path / "fresh.dpw"
        path.write_bytes(packstore.pack(state))
        cfg = tmp_path / "c.cfg"
        cfg.write_text("dataset = synth\nseed = 7\nsynth_train = 500\nsynth_test = 2000\n")
        got = self.eval_json(capsys, [str(path), "--config", str(cfg)])
        sigma = (0.1 * 0.9 / 2000) ** 0.5
        assert abs(got["accuracy"] - 0.1) <= 3 * sigma

    def test_eval_low_unchanged_after_strip(self, run_dir, tmp_path, capsys):
        model = str(run_dir / "model.dpw")
        cfg = str(run_dir / "config.resolved")
        before = self.eval_json(capsys, [model, "--precision", "low", "--config", cfg])
        low_path = tmp_path / "low.dpw"
        assert main(["switch", model, "--direction", "down", "--out", str(low_path),
                     "--bitplane", str(tmp_path / "p.dpb")]) == 0
        capsys.readouterr()
        after = self.eval_json(capsys, [str(low_path), "--config", cfg])
        assert before["accuracy"] == after["accuracy"]


# ============================================================================
# switch
# ============================================================================


class TestSwitch:
    def test_down_then_up_byte_identical(self, run_dir, tmp_path, capsys):
        model = run_dir / "model.dpw"
        low = tmp_path / "low.dpw"
        plane = tmp_path / "plane.dpb"
        assert main(["switch", str(model), "--direction", "down",
                     "--out", str(low), "--bitplane", str(plane)]) == 0
        restored = tmp_path / "back.dpw"
        assert main(["switch", str(low), "--direction", "up",
                     "--bitplane", str(plane), "--out", str(restored)]) == 0
        assert restored.read_bytes() == model.read_bytes()

    def test_down_size_shrinks_by_bitplane_bytes(self, run_dir, tmp_path, capsys):
        model = run_dir / "model.dpw"
        low = tmp_path / "low.dpw"
        assert main(["switch", str(model), "--direction", "down",
                     "--out", str(low), "--bitplane", str(tmp_path / "p.dpb")]) == 0
        state = packstore.unpack(model.read_bytes())
        expect = 4 + sum(4 + (e.count + 7) // 8 for e in state.quant_entries())
        assert len(model.read_bytes()) - len(low.read_bytes()) == expect

    def test_cross_model_bitplane_exits_2(self, run_dir, tmp_path, capsys):
        other = run_train(tmp_path / "other", extra=["--seed", "5"])
        plane = tmp_path / "a.dpb"
        low = tmp_path / "a_low.dpw"
        assert main(["switch", str(run_dir / "model.dpw"), "--direction", "down",
                     "--out", str(low), "--bitplane", str(plane)]) == 0
        low_b = tmp_path / "b_low.dpw"
        assert main(["switch", str(other / "model.dpw"), "--direction", "down",
                     "--out", str(low_b), "--bitplane", str(tmp_path / "b.dpb")]) == 0
        code = main(["switch", str(low_b), "--direction", "up",
                     "--bitplane", str(plane), "--out", str(tmp_path / "bad.dpw")])
        assert code == 2

    def test_up_without_bitplane_exits_2(self, run_dir, tmp_path, capsys):
        assert main(["switch", str(run_dir / "model.dpw"), "--direction", "up",
                     "--out", str(tmp_path / "x.dpw")]) == 2


# ============================================================================
# inspect / report
# ============================================================================


class TestInspect:
    def test_histogram_bounds(self, run_dir, capsys):
        assert main(["inspect", str(run_dir / "model.dpw")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["bits"] == 2
        for layer in doc["layers"]:
            assert len(layer["histogram_low"]) == 4
            assert len(layer["histogram_high"]) == 8
            assert layer["distinct_low"] <= 4
            assert layer["distinct_high"] <= 8

    def test_invalid_stream_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.dpw"
        bad.write_bytes(b"definitely not a model")
        assert main(["inspect", str(bad)]) == 2

    def test_all_zero_bits_occupy_even_levels_only(self, tmp_path, capsys):
        config = TrainConfig(dataset="synth", seed=3, synth_train=400, synth_test=100)
        state = DualPrecisionTrainer(config).export_state()
        for entry in state.quant_entries():
            entry.lam = np.zeros_like(entry.lam)
        path = tmp_path / "even.dpw"
        path.write_bytes(packstore.pack(state))
        assert main(["inspect", str(path)]) == 0
        doc = json.loads(capsys.readouterr().out)
        for layer in doc["layers"]:
            for level, count in layer["histogram_high"].items():
                if int(level) % 2 != 0:
                    assert count == 0

    def test_plot_option_writes_figure(self, run_dir, tmp_path, capsys):
        fig = tmp_path / "hist.png"
        assert main(["inspect", str(run_dir / "model.dpw"), "--plot", str(fig)]) == 0
        assert fig.stat().st_size > 0

    def test_report_from_history(self, run_dir, tmp_path, capsys):
        out = tmp_path / "rep"
        assert main(["report", str(run_dir / "history.log"), "--out", str(out)]) == 0
        for name in ("history.csv", "accuracy.png", "levels.png"):
            assert (out / name).exists()


# ============================================================================
# determinism across identical invocations
# ============================================================================


class TestDeterminism:
    def test_byte_identical_model_and_history(self, run_dir, tmp_path):
        again = run_train(tmp_path / "again")
        assert (again / "model.dpw").read_bytes() == (run_dir / "model.dpw").read_bytes()
        assert (again / "history.log").read_bytes() == \
            (run_dir / "history.log").read_bytes()
