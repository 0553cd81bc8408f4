import json

import pytest

from hlkit.cli import run
from hlkit.training import load_train_config, save_train_config

SPEC = {
    "n_videos": 3,
    "clips_per_video": 4,
    "tokens_per_item": 4,
    "model_dim": 8,
    "joint_dim": 4,
    "seed": 1,
    "planted_correlation": 1.0,
}


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(SPEC))
    return path


def generate(tmp_path, spec_file, name="data"):
    out = tmp_path / name
    assert run(["gen-synth", "--spec", str(spec_file), "--out", str(out)]) == 0
    return out


def shrink_config(data_dir, steps=25, learning_rate=1e-3):
    path = data_dir / "train_config.txt"
    config = load_train_config(path)
    config.steps = steps
    config.learning_rate = learning_rate
    save_train_config(path, config)
    return path


class TestUsage:
    def test_no_arguments_prints_usage_nonzero(self, capsys):
        assert run([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_flag_rejected(self, capsys, spec_file, tmp_path):
        assert run(["gen-synth", "--spec", str(spec_file), "--out",
                    str(tmp_path / "d"), "--bogus"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_file_is_one_line_error(self, capsys, tmp_path):
        assert run(["eval", "--predictions", str(tmp_path / "nope.jsonl"),
                    "--annotations", str(tmp_path / "nope2.jsonl")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert err.count("\n") == 1

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0


class TestGenSynth:
    def test_writes_dataset_and_suggested_config(self, tmp_path, spec_file):
        data = generate(tmp_path, spec_file)
        for name in ("activations.hlca", "manifest.json", "annotations.jsonl",
                     "train_config.txt"):
            assert (data / name).exists()

    def test_rerun_is_byte_identical(self, tmp_path, spec_file):
        a = generate(tmp_path, spec_file, "a")
        b = generate(tmp_path, spec_file, "b")
        for name in ("activations.hlca", "manifest.json", "annotations.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_bad_spec_field(self, capsys, tmp_path):
        spec = tmp_path / "bad.json"
        spec.write_text('{"n_videos": 0}')
        assert run(["gen-synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 1
        assert "error:" in capsys.readouterr().err


class TestPipeline:
    def test_train_predict_eval_compare(self, tmp_path, spec_file, capsys):
        data = generate(tmp_path, spec_file)
        config = shrink_config(data)
        run_dir = tmp_path / "run"
        assert run(["train", "--config", str(config), "--data", str(data),
                    "--out", str(run_dir)]) == 0
        checkpoint = run_dir / "checkpoint_final.hlck"
        assert checkpoint.exists()
        assert (run_dir / "train_log.jsonl").exists()

        preds = tmp_path / "preds.jsonl"
        assert run(["predict", "--checkpoint", str(checkpoint), "--data", str(data),
                    "--pool-radius", "0", "--out", str(preds)]) == 0
        assert len(preds.read_text().splitlines()) == SPEC["n_videos"]

        report = tmp_path / "report.json"
        assert run(["eval", "--predictions", str(preds),
                    "--annotations", str(data / "annotations.jsonl"),
                    "--report", str(report)]) == 0
        doc = json.loads(report.read_text())
        assert set(doc) >= {"map", "hit_at_1", "map_x100", "hit_at_1_x100",
                            "pool_radius", "n_queries", "per_query"}
        assert doc["n_queries"] == SPEC["n_videos"]
        out = capsys.readouterr().out
        assert "mAP=" in out and "HIT@1=" in out

        table = tmp_path / "pooling.csv"
        assert run(["compare-sp", "--checkpoint", str(checkpoint), "--data", str(data),
                    "--radii", "0,1,2", "--report", str(table)]) == 0
        rows = table.read_text().splitlines()
        assert rows[0].startswith("variant,pool_radius,map")
        assert [r.split(",")[0] for r in rows[1:]] == ["r=0", "r=1", "r=2"]

    def test_predict_rerun_byte_identical(self, tmp_path, spec_file):
        data = generate(tmp_path, spec_file)
        config = shrink_config(data, steps=5)
        run_dir = tmp_path / "run"
        assert run(["train", "--config", str(config), "--data", str(data),
                    "--out", str(run_dir)]) == 0
        checkpoint = str(run_dir / "checkpoint_final.hlck")
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (a, b):
            assert run(["predict", "--checkpoint", checkpoint, "--data", str(data),
                        "--pool-radius", "1", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_train_rerun_identical_checkpoints_and_logs(self, tmp_path, spec_file):
        data = generate(tmp_path, spec_file)
        config = shrink_config(data, steps=6)
        runs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run(["train", "--config", str(config), "--data", str(data),
                        "--out", str(out)]) == 0
            runs.append(out)
        assert (runs[0] / "checkpoint_final.hlck").read_bytes() == \
               (runs[1] / "checkpoint_final.hlck").read_bytes()

        def stripped(path):
            out = []
            for line in path.read_text().splitlines():
                obj = json.loads(line)
                obj.pop("wall_time_ms")
                out.append(obj)
            return out

        assert stripped(runs[0] / "train_log.jsonl") == \
               stripped(runs[1] / "train_log.jsonl")

    def test_eval_is_pure_file_handoff(self, tmp_path):
        # an eval run needs nothing but the two input files
        island = tmp_path / "island"
        island.mkdir()
        (island / "preds.jsonl").write_text(json.dumps(
            {"qid": 0, "vid": "v", "pred_saliency_scores": [0.9, 0.1, 0.2]}) + "\n")
        (island / "ann.jsonl").write_text(json.dumps(
            {"qid": 0, "query": "q", "vid": "v", "duration": 6.0,
             "relevant_clip_ids": [0, 2], "saliency_scores": [[4], [0]]}) + "\n")
        assert run(["eval", "--predictions", str(island / "preds.jsonl"),
                    "--annotations", str(island / "ann.jsonl")]) == 0
        assert sorted(p.name for p in island.iterdir()) == ["ann.jsonl", "preds.jsonl"]

    def test_eval_pool_radius_applies_to_file_scores(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        ann = tmp_path / "a.jsonl"
        preds.write_text(json.dumps(
            {"qid": 0, "vid": "v", "pred_saliency_scores": [0.0, 1.0, 0.0, 0.0]}) + "\n")
        ann.write_text(json.dumps(
            {"qid": 0, "query": "q", "vid": "v", "duration": 8.0,
             "relevant_clip_ids": [0, 1], "saliency_scores": [[0], [4]]}) + "\n")
        assert run(["eval", "--predictions", str(preds), "--annotations", str(ann),
                    "--pool-radius", "1"]) == 0
        assert "pool_radius=1" in capsys.readouterr().out

    def test_compare_sp_on_prediction_file(self, tmp_path, capsys):
        preds = tmp_path / "p.jsonl"
        ann = tmp_path / "a.jsonl"
        preds.write_text(json.dumps(
            {"qid": 0, "vid": "v", "pred_saliency_scores": [0.9, 0.8, 0.1, 0.0]}) + "\n")
        ann.write_text(json.dumps(
            {"qid": 0, "query": "q", "vid": "v", "duration": 8.0,
             "relevant_clip_ids": [0, 1, 3],
             "saliency_scores": [[4], [2], [0]]}) + "\n")
        assert run(["compare-sp", "--predictions", str(preds),
                    "--annotations", str(ann), "--radii", "0,1"]) == 0
        out = capsys.readouterr().out
        assert "r=0" in out and "r=1" in out

    def test_compare_sp_requires_an_input_mode(self, capsys):
        assert run(["compare-sp", "--radii", "0"]) == 2
        assert "error:" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_default_sweep_prints_pass(self, capsys):
        assert run(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_err" in out
        assert out.strip().endswith("gradcheck PASS")
        assert out.count("PASS") == 4  # one per depth plus the summary

    def test_explicit_config(self, tmp_path, capsys):
        config = tmp_path / "c.txt"
        config.write_text("top_depth=1\nvision.model_dim=6\nvision.num_heads=2\n"
                          "vision.mlp_dim=8\nvision.joint_dim=4\nvision.seq_len_max=3\n"
                          "text.model_dim=6\ntext.num_heads=2\ntext.mlp_dim=8\n"
                          "text.joint_dim=4\ntext.seq_len_max=3\n")
        assert run(["gradcheck", "--config", str(config)]) == 0
        assert "L=1" in capsys.readouterr().out


class TestBenchCommand:
    def test_bench_reports_rates(self, tmp_path, spec_file, capsys):
        data = generate(tmp_path, spec_file)
        config = shrink_config(data, steps=2)
        run_dir = tmp_path / "run"
        assert run(["train", "--config", str(config), "--data", str(data),
                    "--out", str(run_dir)]) == 0
        assert run(["bench", "--checkpoint", str(run_dir / "checkpoint_final.hlck"),
                    "--data", str(data), "--workers", "2"]) == 0
        out = capsys.readouterr().out
        assert "clips/s" in out
        assert "d_e=512" in out
        assert "workers=1" in out and "workers=2" in out
