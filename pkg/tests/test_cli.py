import json

import pytest

from attrseg.cli import ConfigError, load_run_config, run


TRAIN_OVERRIDES = [
    "--set", "model.embed_dim=16", "--set", "model.fusion_layers=1",
    "--set", "model.decoder_layers=1", "--set", "model.num_queries=6",
    "--set", "model.num_heads=2", "--set", "model.ffn_dim=24",
    "--set", "train.max_steps=2", "--set", "train.batch_size=2",
    "--set", "train.learning_rate=0.002",
    "--set", "data.num_images=4", "--set", "data.height=32",
    "--set", "data.width=32", "--set", "data.seed=5",
]


class TestConfigLoading:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="no.such.key"):
            load_run_config(None, ["no.such.key=1"])

    def test_override_without_equals(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["model.embed_dim"])

    def test_json_file_plus_overrides(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model.embed_dim": 32}))
        merged = load_run_config(str(cfg), ["model.embed_dim=16",
                                            "train.seed=3"])
        assert merged == {"model.embed_dim": 16, "train.seed": 3}

    def test_non_object_config_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_run_config(str(cfg), [])

    def test_string_values_pass_through(self):
        merged = load_run_config(None, ["eval.kind=bbox"])
        assert merged["eval.kind"] == "bbox"


class TestExitCodes:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        assert run(["gen", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_subcommand_exits_2(self):
        assert run([]) == 2

    def test_validate_bad_file_exits_1(self, tmp_path, capsys):
        bad = tmp_path / "ann.json"
        bad.write_text('{"images": []}')
        assert run(["validate", str(bad)]) == 1


class TestPipeline:
    def test_gen_validate_train_infer_eval_bench(self, tmp_path, capsys):
        data = tmp_path / "data"
        out = tmp_path / "run"

        assert run(["gen", "--out", str(data),
                    "--set", "data.num_images=4", "--set", "data.height=32",
                    "--set", "data.width=32", "--set", "data.seed=5"]) == 0
        ann = data / "annotations.json"
        assert ann.exists()

        assert run(["validate", str(ann)]) == 0

        assert run(["train", "--out", str(out), "--ann", str(ann),
                    "--images", str(data)] + TRAIN_OVERRIDES) == 0
        ckpt = out / "checkpoint.gsa2"
        assert ckpt.exists()
        metrics = (out / "metrics.jsonl").read_text().splitlines()
        assert len(metrics) == 2

        preds = out / "preds.json"
        assert run(["infer", "--ckpt", str(ckpt), "--ann", str(ann),
                    "--images", str(data), "--out", str(preds),
                    "--set", "eval.score_threshold=0.0"]) == 0
        assert preds.exists()

        report = out / "report.json"
        assert run(["eval", "--ann", str(ann), "--pred", str(preds),
                    "--out", str(report), "--set", "eval.kind=bbox"]) == 0
        doc = json.loads(report.read_text())
        assert 0.0 <= doc["ap50"] <= 1.0

        assert run(["bench", "--ckpt", str(ckpt),
                    "--images", str(data)]) == 0
        stats = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert stats["fps"] > 0
        assert len(stats["durations"]) == 3

    def test_train_resume_flag(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train", "--out", str(out)] + TRAIN_OVERRIDES) == 0
        more = TRAIN_OVERRIDES.copy()
        more[more.index("train.max_steps=2")] = "train.max_steps=4"
        assert run(["train", "--out", str(out), "--resume",
                    str(out / "checkpoint.gsa2")] + more) == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        steps = [json.loads(l)["step"] for l in lines]
        assert steps == [3, 4]

    def test_bench_no_images_exits_1(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train", "--out", str(out)] + TRAIN_OVERRIDES) == 0
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run(["bench", "--ckpt", str(out / "checkpoint.gsa2"),
                    "--images", str(empty)]) == 1
