import json
import string

import cv2
import numpy as np
import pytest
import torch
from transformers import (
    CLIPConfig,
    CLIPImageProcessor,
    CLIPModel,
    CLIPTextConfig,
    CLIPTokenizer,
    CLIPVisionConfig,
)

from hlexport.trunk import load_dual_encoder


def build_tiny_dual_encoder(out_dir, seed=0):
    """A small, locally constructed dual encoder in the standard on-disk
    layout: randomly initialized but architecturally identical to the
    ViT-B/32 family (pre-norm blocks, quick GELU, shared projection dim)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for ch in string.ascii_lowercase + string.digits:
        vocab[ch] = len(vocab)
        vocab[ch + "</w>"] = len(vocab)
    (out_dir / "vocab.json").write_text(json.dumps(vocab))
    (out_dir / "merges.txt").write_text("#version: 0.2\n")
    tokenizer = CLIPTokenizer(str(out_dir / "vocab.json"), str(out_dir / "merges.txt"))
    tokenizer.save_pretrained(out_dir)

    vision = CLIPVisionConfig(hidden_size=32, intermediate_size=64,
                              num_hidden_layers=3, num_attention_heads=2,
                              image_size=32, patch_size=16, hidden_act="quick_gelu")
    text = CLIPTextConfig(hidden_size=24, intermediate_size=48,
                          num_hidden_layers=3, num_attention_heads=2,
                          max_position_embeddings=32, vocab_size=len(vocab),
                          hidden_act="quick_gelu", bos_token_id=0,
                          eos_token_id=1, pad_token_id=1)
    config = CLIPConfig(text_config=text.to_dict(), vision_config=vision.to_dict(),
                        projection_dim=20)
    torch.manual_seed(seed)
    model = CLIPModel(config)
    model.eval()
    model.save_pretrained(out_dir)

    CLIPImageProcessor(size={"shortest_edge": 32},
                       crop_size={"height": 32, "width": 32}).save_pretrained(out_dir)
    return out_dir


def write_clip_video(path, num_clips, fps=8.0, clip_len=2.0, size=64):
    """A real mp4 whose every frame is a flat color encoding its clip index,
    so sampled frames can be attributed even after lossy compression."""
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"),
                             fps, (size, size))
    assert writer.isOpened(), "mp4v encoder unavailable"
    frames_per_clip = int(round(fps * clip_len))
    for clip in range(num_clips):
        value = 30 + clip * 45
        for _ in range(frames_per_clip):
            frame = np.full((size, size, 3), 0, dtype=np.uint8)
            frame[:, :, 0] = value % 256
            frame[:, :, 1] = 255 - (value % 256)
            writer.write(frame)
    writer.release()
    return path


@pytest.fixture(scope="session")
def weights_dir(tmp_path_factory):
    return build_tiny_dual_encoder(tmp_path_factory.mktemp("weights"))


@pytest.fixture(scope="session")
def encoder(weights_dir):
    return load_dual_encoder(weights_dir)


@pytest.fixture(scope="session")
def video_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("videos")
    write_clip_video(out / "vidA.mp4", num_clips=4)   # 8 s
    write_clip_video(out / "vidB.mp4", num_clips=3)   # 6 s
    return out


@pytest.fixture(scope="session")
def videos_json(video_dir):
    path = video_dir / "videos.json"
    path.write_text(json.dumps([
        {"path": str(video_dir / "vidA.mp4"), "vid": "vidA"},
        {"path": str(video_dir / "vidB.mp4"), "vid": "vidB"},
    ]))
    return path


@pytest.fixture(scope="session")
def annotations_file(tmp_path_factory):
    # 2 videos x 2 queries = the 4-query fixture
    path = tmp_path_factory.mktemp("ann") / "annotations.jsonl"
    records = [
        {"qid": 0, "query": "a bright red block", "vid": "vidA", "duration": 8.0,
         "relevant_clip_ids": [0, 1], "saliency_scores": [[4, 4, 3], [2, 3, 2]]},
        {"qid": 1, "query": "green area", "vid": "vidA", "duration": 8.0,
         "relevant_clip_ids": [2, 3], "saliency_scores": [[4, 3, 4], [1, 2, 2]]},
        {"qid": 2, "query": "dark scene", "vid": "vidB", "duration": 6.0,
         "relevant_clip_ids": [0], "saliency_scores": [[4, 4, 4]]},
        {"qid": 3, "query": "the last part", "vid": "vidB", "duration": 6.0,
         "relevant_clip_ids": [1, 2], "saliency_scores": [[3, 2, 2], [4, 4, 2]]},
    ]
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return path
