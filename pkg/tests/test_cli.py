import json

import numpy as np
import pytest

from wsal.cli import main
from wsal.config import build_config, load_config, parse_config_text
from wsal.dataio import read_dataset
from wsal.inference import read_proposals
from wsal.model import load_checkpoint

TINY = """
seed = 9
data.num_classes = 2
data.feature_dim = 6
data.frames_per_video = 40
data.videos_per_class = 6
data.segments_min = 1
data.segments_max = 1
data.segment_len_min = 8
data.segment_len_max = 10
data.flank_min = 2
data.flank_max = 4
model.attention_hidden = 8
model.cvae_hidden = 8
model.latent_dim = 4
train.epochs = 3
train.batch_size = 4
train.warmup_epochs = 1
train.frames_per_video = 40
split.train_fraction = 0.67
eval.thresholds = 0.3,0.5
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY)
    return tmp_path, cfg


def run(*argv):
    return main([str(a) for a in argv])


class TestGenerate:
    def test_writes_and_rereads(self, workdir, capsys):
        tmp, cfg = workdir
        out = tmp / "data.bin"
        assert run("generate", "--config", cfg, "--out", out) == 0
        sequences, segments = read_dataset(out)
        assert len(sequences) == 18
        printed = capsys.readouterr().out
        assert "videos: 18" in printed

    def test_byte_identical_reruns(self, workdir):
        tmp, cfg = workdir
        a, b = tmp / "a.bin", tmp / "b.bin"
        run("generate", "--config", cfg, "--out", a)
        run("generate", "--config", cfg, "--out", b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp / "a.bin.gt").read_text() == (tmp / "b.bin.gt").read_text()

    def test_histogram_matches_sidecar_recount(self, workdir, capsys):
        tmp, cfg = workdir
        out = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", out)
        printed = capsys.readouterr().out
        histogram = {}
        for token in printed.splitlines()[-1].split(":", 1)[1].split():
            label, count = token.split(":")
            histogram[int(label)] = int(count)
        sequences, _ = read_dataset(out)
        recount = {}
        for seq in sequences:
            recount[seq.label] = recount.get(seq.label, 0) + 1
        assert histogram == recount

    def test_unknown_key_rejected(self, workdir, capsys):
        tmp, cfg = workdir
        code = run("generate", "--config", cfg, "--set", "data.bananas=3",
                   "--out", tmp / "x.bin")
        assert code == 1
        assert "data.bananas" in capsys.readouterr().err

    def test_invalid_value_names_field(self, workdir, capsys):
        tmp, cfg = workdir
        code = run("generate", "--config", cfg, "--set", "data.noise=-1",
                   "--out", tmp / "x.bin")
        assert code == 1
        assert "noise" in capsys.readouterr().err


class TestTrain:
    def test_zero_epochs_writes_initial_model(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        ckpt = tmp / "model.ckpt"
        run("generate", "--config", cfg, "--out", data)
        assert run("train", "--config", cfg, "--set", "train.epochs=0",
                   "--set", "train.warmup_epochs=0",
                   "--dataset", data, "--out", ckpt) == 0
        _, epoch, _ = load_checkpoint(ckpt)
        assert epoch == 0

    def test_deterministic_checkpoints(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", data)
        a, b = tmp / "a.ckpt", tmp / "b.ckpt"
        run("train", "--config", cfg, "--dataset", data, "--out", a)
        run("train", "--config", cfg, "--dataset", data, "--out", b)
        assert a.read_bytes() == b.read_bytes()

    def test_multi_seed_suffixes(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", data)
        ckpt = tmp / "model.ckpt"
        assert run("train", "--config", cfg, "--dataset", data, "--out", ckpt,
                   "--seeds", 3, "--set", "train.epochs=1") == 0
        for seed in (9, 10, 11):
            assert (tmp / f"model.s{seed}.ckpt").exists()

    def test_log_has_header_and_epochs(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        log = tmp / "train.jsonl"
        run("generate", "--config", cfg, "--out", data)
        run("train", "--config", cfg, "--dataset", data,
            "--out", tmp / "m.ckpt", "--log", log)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines[0]["record"] == "header" and "timestamp" in lines[0]
        assert [r["epoch"] for r in lines[1:]] == [0, 1, 2]
        assert all("attention_auc" in r for r in lines[1:])

    def test_log_identical_modulo_timestamp_header(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", data)
        l1, l2 = tmp / "l1.jsonl", tmp / "l2.jsonl"
        run("train", "--config", cfg, "--dataset", data, "--out", tmp / "m1.ckpt", "--log", l1)
        run("train", "--config", cfg, "--dataset", data, "--out", tmp / "m2.ckpt", "--log", l2)
        assert l1.read_text().splitlines()[1:] == l2.read_text().splitlines()[1:]

    def test_resume_continues_epochs(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", data)
        first = tmp / "first.ckpt"
        run("train", "--config", cfg, "--dataset", data, "--out", first,
            "--set", "train.epochs=2")
        second = tmp / "second.ckpt"
        assert run("train", "--config", cfg, "--dataset", data, "--out", second,
                   "--set", "train.epochs=2", "--resume-from", first) == 0
        _, epoch, _ = load_checkpoint(second)
        assert epoch == 4


class TestPredictAndEval:
    @pytest.fixture
    def trained(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        ckpt = tmp / "model.ckpt"
        run("generate", "--config", cfg, "--out", data)
        run("train", "--config", cfg, "--dataset", data, "--out", ckpt)
        return tmp, cfg, data, ckpt

    def test_predict_writes_header_and_is_deterministic(self, trained):
        tmp, cfg, data, ckpt = trained
        a, b = tmp / "a.jsonl", tmp / "b.jsonl"
        assert run("predict", "--config", cfg, "--dataset", data,
                   "--checkpoint", ckpt, "--out", a) == 0
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", b)
        assert a.read_bytes() == b.read_bytes()
        _, header = read_proposals(a)
        assert header["split"] == "test"

    def test_config_echo_roundtrips(self, trained):
        tmp, cfg, data, ckpt = trained
        out = tmp / "p.jsonl"
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", out)
        _, header = read_proposals(out)
        echoed = build_config(parse_config_text(header["config"]))
        assert echoed == load_config(cfg)

    def test_dimension_mismatch_names_both_dims(self, trained, capsys):
        tmp, cfg, data, ckpt = trained
        other = tmp / "other.bin"
        run("generate", "--config", cfg, "--set", "data.feature_dim=8", "--out", other)
        code = run("predict", "--config", cfg, "--dataset", other,
                   "--checkpoint", ckpt, "--out", tmp / "x.jsonl")
        assert code == 1
        err = capsys.readouterr().err
        assert "6" in err and "8" in err

    def test_eval_writes_metrics(self, trained, capsys):
        tmp, cfg, data, ckpt = trained
        props = tmp / "p.jsonl"
        metrics = tmp / "m.jsonl"
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", props)
        assert run("eval", "--config", cfg, "--dataset", data, "--proposals", props,
                   "--checkpoint", ckpt, "--out", metrics) == 0
        records = [json.loads(l) for l in metrics.read_text().splitlines()]
        kinds = {r["record"] for r in records}
        assert {"header", "map", "summary", "attention_stats"} <= kinds
        maps = [r for r in records if r["record"] == "map"]
        assert {r["threshold"] for r in maps} == {0.3, 0.5}

    def test_eval_multiple_runs_averages(self, trained):
        tmp, cfg, data, ckpt = trained
        p1, p2 = tmp / "p1.jsonl", tmp / "p2.jsonl"
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", p1)
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", p2)
        metrics = tmp / "m.jsonl"
        assert run("eval", "--config", cfg, "--dataset", data,
                   "--proposals", p1, p2, "--out", metrics) == 0
        records = [json.loads(l) for l in metrics.read_text().splitlines()]
        summary = [r for r in records if r["record"] == "summary"][0]
        assert summary["runs"] == 2

    def test_eval_unknown_unit_rejected(self, trained, capsys):
        tmp, cfg, data, ckpt = trained
        props = tmp / "p.jsonl"
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", props)
        lines = props.read_text().splitlines()
        header = json.loads(lines[0])
        header["unit"] = "fortnights"
        props.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        assert run("eval", "--config", cfg, "--dataset", data, "--proposals", props) == 1
        assert "unit" in capsys.readouterr().err


class TestAblateAndSweep:
    def test_ablate_emits_all_variants(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        out = tmp / "ablate.jsonl"
        run("generate", "--config", cfg, "--out", data)
        assert run("ablate", "--config", cfg, "--dataset", data, "--seeds", 1,
                   "--set", "train.epochs=1", "--out", out) == 0
        records = [json.loads(l) for l in out.read_text().splitlines()]
        rows = [r for r in records if r["record"] == "ablate"]
        assert {r["variant"] for r in rows} == {"fg-only", "+bg", "+guide", "+re"}
        assert len(rows) == 4  # 4 variants x 1 threshold x 1 seed
        increments = [r for r in records if r["record"] == "ablate_increment"]
        assert len(increments) == 1 and "mean_diff" in increments[0]

    def test_ablate_row_count_scales_with_thresholds(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        out = tmp / "ablate.jsonl"
        run("generate", "--config", cfg, "--out", data)
        run("ablate", "--config", cfg, "--dataset", data, "--seeds", 1,
            "--thresholds", "0.3,0.5", "--set", "train.epochs=1", "--out", out)
        records = [json.loads(l) for l in out.read_text().splitlines()]
        rows = [r for r in records if r["record"] == "ablate"]
        assert len(rows) == 4 * 2

    def test_sweep_single_value_equals_train_eval(self, workdir):
        tmp, cfg = workdir
        data = tmp / "data.bin"
        run("generate", "--config", cfg, "--out", data)
        out = tmp / "sweep.jsonl"
        assert run("sweep", "--config", cfg, "--dataset", data, "--parameter", "r",
                   "--values", "1.0", "--seeds", 1, "--out", out) == 0
        records = [json.loads(l) for l in out.read_text().splitlines()]
        sweep_map = [r for r in records if r["record"] == "sweep"][0]["map"]

        ckpt = tmp / "m.ckpt"
        props = tmp / "p.jsonl"
        metrics = tmp / "e.jsonl"
        run("train", "--config", cfg, "--dataset", data, "--out", ckpt)
        run("predict", "--config", cfg, "--dataset", data, "--checkpoint", ckpt, "--out", props)
        run("eval", "--config", cfg, "--dataset", data, "--proposals", props,
            "--thresholds", "0.5", "--out", metrics)
        eval_map = [
            json.loads(l) for l in metrics.read_text().splitlines()
            if json.loads(l)["record"] == "map"
        ][0]["map"]
        assert abs(sweep_map - eval_map) < 1e-12

    def test_sweep_unknown_parameter_rejected(self, workdir, capsys):
        tmp, cfg = workdir
        with pytest.raises(SystemExit):
            main(["sweep", "--config", str(cfg), "--dataset", "x",
                  "--parameter", "bananas"])
        assert "invalid choice" in capsys.readouterr().err


class TestConfigModule:
    def test_defaults_roundtrip(self):
        config = load_config(None)
        rebuilt = build_config(parse_config_text(config.to_text()))
        assert rebuilt == config

    def test_override_precedence(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 3\ndata.noise = 0.5\n")
        config = load_config(cfg, ["data.noise=0.8"])
        assert config.data.noise == 0.8
        assert config.seed == 3

    def test_duplicate_key_rejected(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 3\nseed = 4\n")
        with pytest.raises(Exception, match="duplicate"):
            load_config(cfg)

    def test_threshold_range_parsing(self):
        from wsal.config import parse_threshold_list

        values = parse_threshold_list("0.1:0.1:0.9")
        assert values == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
        assert parse_threshold_list("0.5:0.05:0.95")[-1] == pytest.approx(0.95)
        assert parse_threshold_list("0.25,0.75") == [0.25, 0.75]
