import json

import numpy as np
import pytest

from tfmcl.cli import main
from tfmcl.config import config_from_dict, load_config
from tfmcl.errors import ConfigError
from tfmcl.signal import psd
from tfmcl.train import read_jsonl

TINY_RUN = {
    "data": {"n_subjects": 6, "windows_per_subject": 4, "n_channels": 2, "window_len": 64, "fs_hz": 64.0,
             "split_fractions": [0.5, 0.25, 0.25]},
    "encoder": {"time_kernel": 8, "freq_kernel": 4, "n_time_filters": 4, "n_channel_filters": 4,
                "ffn_hidden": 8, "repr_dim": 8, "fusion_dim": 8, "fmh_hidden": 8},
    "train": {"batch_size": 8, "epochs_pretrain": 1, "epochs_finetune": 2, "learning_rate": 1e-3},
    "seed": 5,
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


@pytest.fixture
def data_dir(tmp_path, cfg_file, capsys):
    out = tmp_path / "data"
    code, _, _ = run(capsys, "gen-synth", "--out", out, "--config", cfg_file)
    assert code == 0
    return out


def _error(err):
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["ok"] is False
    return payload


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert (cfg.loss.alpha, cfg.loss.beta, cfg.loss.tau) == (0.2, 1.0, 0.2)
        assert cfg.train.batch_size == 128 and cfg.train.learning_rate == 3e-4

    @pytest.mark.parametrize("doc", [{"loss": {"alpah": 0.2}}, {"extra": {}}, {"seed": -1},
                                     {"loss": {"alpha": 2.0}}, {"train": {"batch_size": 1}}])
    def test_rejected(self, doc):
        with pytest.raises(ConfigError):
            config_from_dict(doc)

    def test_echo_round_trip(self):
        cfg = config_from_dict(TINY_RUN)
        assert config_from_dict(cfg.to_dict()) == cfg


class TestCommands:
    def test_gen_synth_then_validate(self, data_dir, capsys):
        code, out, _ = run(capsys, "validate", data_dir)
        assert code == 0
        info = json.loads(out)
        assert info["n_windows"] == 24 and info["n_subjects"] == 6 and info["n_labeled"] == 24
        assert json.loads((data_dir / "run_info.json").read_text())["seed"] == 5

    def test_validate_reports_bad_file(self, data_dir, capsys):
        victim = sorted(data_dir.glob("*.f32"))[2]
        victim.write_bytes(b"\0" * 12)
        code, _, err = run(capsys, "validate", data_dir)
        assert code == 1
        payload = _error(err)
        assert payload["error"] == "dataset" and victim.name in payload["message"]

    def test_psd(self, tmp_path, rng, capsys):
        x = rng.standard_normal((3, 16)).astype("<f4")
        x.tofile(tmp_path / "w.f32")
        code, _, _ = run(capsys, "psd", "--in", tmp_path / "w.f32", "--channels", 3, "--len", 16,
                         "--fs", 32, "--out", tmp_path / "p.json")
        assert code == 0
        doc = json.loads((tmp_path / "p.json").read_text())
        np.testing.assert_allclose(doc["psd"][1], psd(x[1].astype(float)).psd, rtol=1e-12)
        assert doc["freqs_hz"][:3] == [0.0, 2.0, 4.0]

    def test_psd_wrong_size(self, tmp_path, capsys):
        (tmp_path / "w.f32").write_bytes(b"\0" * 20)
        code, _, err = run(capsys, "psd", "--in", tmp_path / "w.f32", "--channels", 1, "--len", 8,
                           "--out", tmp_path / "p.json")
        assert code == 1 and _error(err)["error"] == "invalid_argument"

    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"loss": {"gamma": 1}}))
        code, _, err = run(capsys, "gen-synth", "--out", tmp_path / "x", "--config", bad)
        assert code == 1
        assert _error(err)["error"] == "config"

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "validate", "--bogus", "d")
        assert code == 2 and _error(err)["error"] == "usage"

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "validate", tmp_path / "nowhere")
        assert code == 1 and _error(err)["error"] == "dataset"

    def test_pretrain_finetune_eval(self, tmp_path, data_dir, cfg_file, capsys):
        pre, fine = tmp_path / "pre", tmp_path / "fine"
        assert run(capsys, "pretrain", "--data", data_dir, "--config", cfg_file, "--out", pre)[0] == 0
        recs = read_jsonl(pre / "loss_log.jsonl")
        assert recs and set(recs[0]) == {"epoch", "batch", "l_t", "l_f", "l_z", "l_tf", "total"}
        assert config_from_dict(json.loads((pre / "config.json").read_text())) == load_config(str(cfg_file))

        code, out, _ = run(capsys, "finetune", "--data", data_dir, "--ckpt", pre / "checkpoint.ckpt",
                           "--config", cfg_file, "--out", fine)
        assert code == 0
        metrics = json.loads((fine / "metrics.json").read_text())
        assert set(metrics) == {"accuracy", "f1", "confusion_counts", "confusion_row_pct"}
        assert len(read_jsonl(fine / "finetune_log.jsonl")) == 2
        assert (fine / "run_info.json").exists()

        code, out, _ = run(capsys, "eval", "--data", data_dir, "--ckpt", fine / "model.ckpt",
                           "--out", tmp_path / "report.json")
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert sum(map(sum, report["confusion_counts"])) == 24

    def test_pretrain_is_reproducible(self, tmp_path, data_dir, cfg_file, capsys):
        for name in ("a", "b"):
            assert run(capsys, "pretrain", "--data", data_dir, "--config", cfg_file, "--out", tmp_path / name)[0] == 0
        assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()

    def test_sweep(self, tmp_path, cfg_file, capsys):
        code, _, _ = run(capsys, "sweep", "--param", "alpha", "--values", "0,0.5,1", "--config", cfg_file,
                         "--out", tmp_path / "sw")
        assert code == 0
        doc = json.loads((tmp_path / "sw" / "sweep.json").read_text())
        assert doc["param"] == "alpha" and list(doc["results"]) == ["0.0", "0.5", "1.0"]
        for key in doc["results"]:
            assert json.loads((tmp_path / "sw" / f"alpha_{key}" / "config.json").read_text())["loss"]["alpha"] == float(key)

    def test_sweep_rejects_bad_value(self, tmp_path, cfg_file, capsys):
        code, _, err = run(capsys, "sweep", "--param", "tau", "--values", "0", "--config", cfg_file,
                           "--out", tmp_path / "sw")
        assert code == 1 and _error(err)["error"] == "config"

    def test_gradcheck(self, capsys):
        code, out, _ = run(capsys, "gradcheck")
        doc = json.loads(out)
        assert code == 0 and doc["passed"] and doc["max_rel_error"] <= 1e-4
