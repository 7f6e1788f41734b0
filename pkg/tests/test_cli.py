import json

import pytest

from cmpocl import cli
from cmpocl import tensor as T
from cmpocl.config import ConfigError, ExperimentConfig
from cmpocl.experiment import aggregate

BASE = """\
# tiny run
data.classes = 4
data.dim = 6
data.samples_per_class = 20
stream.splits = 2
stream.b_s = 10
strategy.method = cmp
strategy.alpha = 1.0
strategy.beta = 0.1
strategy.eps_sq = 0.2
strategy.n_patches = 4
strategy.lr = 0.03
model.hidden = [16]
model.proj_hidden = 16
model.dim = 8
probe.max_epochs = 5
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(BASE)
    return p


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConfig:
    def test_parse(self):
        cfg = ExperimentConfig.parse(BASE)
        assert cfg["strategy.method"] == "cmp" and cfg["model.hidden"] == [16]
        assert cfg["strategy.alpha"] == 1.0 and isinstance(cfg["stream.b_s"], int)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.parse(BASE + "strategy.alhpa = 1\n")
        assert err.value.key == "strategy.alhpa"

    def test_missing_required_hyperparameter(self):
        text = "\n".join(l for l in BASE.splitlines() if not l.startswith("strategy.eps_sq"))
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.parse(text)
        assert err.value.key == "strategy.eps_sq"

    def test_duplicate_and_type(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse(BASE + "stream.b_s = 5\n")
        with pytest.raises(ConfigError):
            ExperimentConfig.parse(BASE.replace("stream.b_s = 10", "stream.b_s = ten"))

    def test_cross_field_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.parse(BASE + "strategy.buffer_size = 10\n")

    def test_text_round_trip_and_hash(self):
        cfg = ExperimentConfig.parse(BASE)
        again = ExperimentConfig.parse(cfg.to_text())
        assert again.values == cfg.values
        assert cfg.replace(seed=5).config_hash() == cfg.config_hash()
        assert cfg.replace(strategy__beta=0.0).config_hash() != cfg.config_hash()


class TestTrain:
    def test_artifacts(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "r"
        code, stdout, _ = run(["train", "--config", cfg_path, "--out", out], capsys)
        assert code == 0
        for name in ("steps.jsonl", "checkpoint.cmpc", "config.resolved", "summary.json", "probe.json"):
            assert (out / name).is_file(), name
        resolved = ExperimentConfig.load(out / "config.resolved")
        assert resolved.values == ExperimentConfig.parse(BASE).values
        assert json.loads(stdout)["steps"] == 7  # 64 stream samples after the 20% test split

    def test_byte_identical_rerun(self, cfg_path, tmp_path, capsys):
        for d in ("a", "b"):
            assert run(["train", "--config", cfg_path, "--out", tmp_path / d, "--no-probe"], capsys)[0] == 0
        assert (tmp_path / "a" / "steps.jsonl").read_bytes() == (tmp_path / "b" / "steps.jsonl").read_bytes()

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text(BASE + "alhpa = 1\n")
        code, _, err = run(["train", "--config", p, "--out", tmp_path / "x"], capsys)
        assert code == 2
        assert json.loads(err)["key"] == "alhpa"
        assert not (tmp_path / "x").exists()

    def test_abort_exit_3(self, tmp_path, capsys):
        p = tmp_path / "hot.cfg"
        p.write_text(BASE.replace("strategy.lr = 0.03", "strategy.lr = 1e200"))
        code, _, err = run(["train", "--config", p, "--out", tmp_path / "x"], capsys)
        assert code == 3
        assert json.loads(err)["error"] == "aborted"
        assert (tmp_path / "x" / "abort.json").is_file()

    def test_seed_sweep(self, cfg_path, tmp_path, capsys):
        code, _, _ = run(["train", "--config", cfg_path, "--out", tmp_path / "s", "--seeds", "3",
                          "--no-probe"], capsys)
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["seed_0", "seed_1", "seed_2"]


class TestProbe:
    def test_probe_and_corruption(self, cfg_path, tmp_path, capsys):
        run(["train", "--config", cfg_path, "--out", tmp_path / "r", "--no-probe"], capsys)
        ckpt = tmp_path / "r" / "checkpoint.cmpc"
        code, _, _ = run(["probe", "--checkpoint", ckpt, "--config", cfg_path, "--out", tmp_path / "p.json"], capsys)
        assert code == 0
        first = json.loads((tmp_path / "p.json").read_text())
        assert 0 <= first["accuracy"] <= 1
        run(["probe", "--checkpoint", ckpt, "--config", cfg_path, "--out", tmp_path / "q.json"], capsys)
        assert (tmp_path / "q.json").read_text() == (tmp_path / "p.json").read_text()

        raw = bytearray(ckpt.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        bad = tmp_path / "bad.cmpc"
        bad.write_bytes(bytes(raw))
        code, _, err = run(["probe", "--checkpoint", bad, "--config", cfg_path], capsys)
        assert code == 4 and "CRC" in json.loads(err)["message"]


def summary(hash_, seed, acc, method="cmp", base="byol", mem=0):
    return {"config_hash": hash_, "seed": seed, "method": method, "base_ssl": base, "buffer_size": mem,
            "accuracy": acc}


class TestTable:
    def test_three_seeds_one_row(self):
        rows = aggregate([summary("h", s, a) for s, a in enumerate([0.30, 0.34, 0.38])])
        assert len(rows) == 1
        assert rows[0]["mean"] == pytest.approx(34.0)
        assert rows[0]["std"] == pytest.approx(4.0)  # sample std over 3 runs
        text, csv_text = cli.format_table(rows)
        assert "BYOL" in text and "CMP" in text and "34.0 ± 4.0" in text
        assert csv_text.splitlines()[0] == "ssl,strategy,memory,runs,mean,std,config_hash"

    def test_single_seed_empty_std(self):
        rows = aggregate([summary("h", 0, 0.5)])
        assert rows[0]["std"] is None
        assert cli.format_table(rows)[1].splitlines()[1].split(",")[5] == ""

    def test_mixed_configs(self):
        rows = aggregate([summary("a", 0, 0.2, "finetune", "simsiam"), summary("b", 0, 0.3, "er-reservoir", mem=500),
                          summary("a", 1, 0.4, "finetune", "simsiam"), summary("c", 0, 0.1, "emp-ssl")])
        assert [(r["ssl"], r["strategy"], r["runs"]) for r in rows] == [
            ("EMP-SSL", "-", 1), ("SimSiam", "finetuning", 2), ("BYOL", "Reservoir ER", 1)]

    def test_cli_pure_function(self, cfg_path, tmp_path, capsys):
        run(["train", "--config", cfg_path, "--out", tmp_path / "r", "--seeds", "2"], capsys)
        code, a, _ = run(["table", tmp_path / "r", "--csv", tmp_path / "t.csv"], capsys)
        _, b, _ = run(["table", tmp_path / "r"], capsys)
        assert code == 0 and a == b
        assert len((tmp_path / "t.csv").read_text().splitlines()) == 2


class TestGradcheck:
    def test_passes(self, capsys):
        code, out, _ = run(["gradcheck", "--instances", "3"], capsys)
        report = json.loads(out)
        assert code == 0 and report["failed"] == []
        assert set(report["losses"]) == {"tcr_loss", "simsiam_loss", "byol_loss", "simsiam_cmp_loss",
                                         "byol_cmp_loss", "empssl_loss"}

    def test_injected_wrong_gradient(self, capsys, monkeypatch):
        real = T.l2_normalize_rows

        def broken(x, eps=1e-12):
            out = real(x, eps)
            # right value, but the backward pass is scaled by two
            return T.add(T.scale(out, 2.0), T.scale(T.stop_gradient(out), -1.0))

        monkeypatch.setattr(T, "l2_normalize_rows", broken)
        code, _, err = run(["gradcheck", "--instances", "2"], capsys)
        assert code == 1
        assert "l2_normalize_rows" in json.loads(err)["failed"]


def test_synth_data(tmp_path, capsys):
    code, _, _ = run(["synth-data", "--out", tmp_path / "d.csv", "--classes", "3", "--dim", "4",
                      "--samples-per-class", "5"], capsys)
    assert code == 0
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "4,3"
