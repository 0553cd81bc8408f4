import json

import numpy as np
import pytest

from hlkit.data import HighlightDataset
from hlkit.encoder import checkpoint_load

from hlexport.cli import run
from hlexport.export import ExportSpec, check_export, export_activations


def make_spec(video_dir, annotations_file, weights_dir, out_dir, cut_depth=1,
              videos=None):
    if videos is None:
        videos = [
            {"path": str(video_dir / "vidA.mp4"), "vid": "vidA"},
            {"path": str(video_dir / "vidB.mp4"), "vid": "vidB"},
        ]
    return ExportSpec(videos=videos, annotations=str(annotations_file),
                      cut_depth=cut_depth, out_dir=str(out_dir),
                      weights=str(weights_dir))


class TestExport:
    def test_full_export_opens_in_the_engine(self, tmp_path, video_dir,
                                             annotations_file, weights_dir, encoder):
        spec = make_spec(video_dir, annotations_file, weights_dir, tmp_path / "out")
        result = export_activations(spec, encoder=encoder)
        assert result.ok, result.summary()
        assert result.n_videos == 2
        assert result.n_queries == 4
        assert result.n_clips == 4 + 3  # ceil(8/2) + ceil(6/2)

        dataset = HighlightDataset.open(tmp_path / "out")
        assert dataset.store.model_dim == 32
        assert dataset.query_store.model_dim == 24
        assert len(dataset.manifest.items) == 4
        assert dataset.manifest.meta["cut_depth"] == 1
        bundle = checkpoint_load(tmp_path / "out" / "pretrained_top.hlck")
        assert bundle.config_vision.num_layers == 1
        assert check_export(tmp_path / "out") == []

    def test_export_is_deterministic(self, tmp_path, video_dir, annotations_file,
                                     weights_dir, encoder):
        for name in ("a", "b"):
            export_activations(make_spec(video_dir, annotations_file, weights_dir,
                                         tmp_path / name), encoder=encoder)
        for artifact in ("frames.hlca", "queries.hlca", "manifest.json",
                         "annotations.jsonl", "pretrained_top.hlck"):
            assert (tmp_path / "a" / artifact).read_bytes() == \
                   (tmp_path / "b" / artifact).read_bytes(), artifact

    def test_undecodable_video_recorded_export_continues(self, tmp_path, video_dir,
                                                         annotations_file,
                                                         weights_dir, encoder):
        garbage = tmp_path / "broken.mp4"
        garbage.write_bytes(b"not a video")
        videos = [
            {"path": str(garbage), "vid": "vidA"},
            {"path": str(video_dir / "vidB.mp4"), "vid": "vidB"},
        ]
        spec = make_spec(video_dir, annotations_file, weights_dir,
                         tmp_path / "out", videos=videos)
        result = export_activations(spec, encoder=encoder)
        kinds = {(f.kind, f.item) for f in result.failures}
        assert ("video", "vidA") in kinds
        assert ("record", "qid 0") in kinds and ("record", "qid 1") in kinds
        assert result.n_videos == 1
        assert result.n_queries == 2  # vidB's two queries still exported
        dataset = HighlightDataset.open(tmp_path / "out")
        assert {item.vid for item in dataset.manifest.items} == {"vidB"}

    def test_overlong_query_recorded_export_continues(self, tmp_path, video_dir,
                                                      weights_dir, encoder,
                                                      annotations_file):
        ann = tmp_path / "ann.jsonl"
        lines = list(open(annotations_file))
        record = json.loads(lines[0])
        record["qid"] = 9
        record["query"] = "a monstrously overlong query that cannot possibly fit " * 3
        lines.append(json.dumps(record) + "\n")
        ann.write_text("".join(lines))
        spec = make_spec(video_dir, ann, weights_dir, tmp_path / "out")
        result = export_activations(spec, encoder=encoder)
        assert any(f.kind == "query" and f.item == "qid 9" for f in result.failures)
        assert result.n_queries == 4
        assert check_export(tmp_path / "out") == []

    def test_record_without_video_recorded(self, tmp_path, video_dir, weights_dir,
                                           encoder, annotations_file):
        videos = [{"path": str(video_dir / "vidA.mp4"), "vid": "vidA"}]
        spec = make_spec(video_dir, annotations_file, weights_dir,
                         tmp_path / "out", videos=videos)
        result = export_activations(spec, encoder=encoder)
        assert any(f.kind == "record" and "vidB" in f.reason
                   for f in result.failures)
        assert result.n_queries == 2

    def test_empty_video_list_yields_valid_empty_manifest(self, tmp_path,
                                                          weights_dir, encoder,
                                                          annotations_file):
        from hlkit.data import load_manifest

        spec = ExportSpec(videos=[], annotations=str(annotations_file),
                          cut_depth=1, out_dir=str(tmp_path / "out"),
                          weights=str(weights_dir))
        result = export_activations(spec, encoder=encoder)
        assert result.n_videos == 0 and result.n_clips == 0
        manifest = load_manifest(tmp_path / "out" / "manifest.json")
        assert manifest.items == []
        assert manifest.activation_files == []
        assert (tmp_path / "out" / "pretrained_top.hlck").exists()

    def test_check_flags_tampering(self, tmp_path, video_dir, annotations_file,
                                   weights_dir, encoder):
        out = tmp_path / "out"
        export_activations(make_spec(video_dir, annotations_file, weights_dir, out),
                           encoder=encoder)
        (out / "pretrained_top.hlck").unlink()
        problems = check_export(out)
        assert any("checkpoint" in p for p in problems)


class TestCli:
    def test_run_then_check(self, tmp_path, videos_json, annotations_file,
                            weights_dir, capsys):
        out = tmp_path / "out"
        status = run(["run", "--weights", str(weights_dir),
                      "--videos", str(videos_json),
                      "--annotations", str(annotations_file),
                      "--cut-depth", "1", "--out", str(out)])
        assert status == 0
        assert "exported 2 videos" in capsys.readouterr().out
        assert run(["check", "--data", str(out)]) == 0
        assert "check PASS" in capsys.readouterr().out

    def test_no_arguments_usage(self, capsys):
        assert run([]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_weights_single_error_line(self, tmp_path, videos_json,
                                               annotations_file, capsys):
        status = run(["run", "--weights", str(tmp_path / "absent"),
                      "--videos", str(videos_json),
                      "--annotations", str(annotations_file),
                      "--cut-depth", "1", "--out", str(tmp_path / "out")])
        assert status == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
