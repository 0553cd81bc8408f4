"""Video decoding: one center frame per clip."""

import math

import cv2
import numpy as np


class VideoDecodeError(RuntimeError):
    pass


def probe_duration(path) -> float:
    """Duration in seconds from the container's frame count and rate."""
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise VideoDecodeError(f"{path}: cannot open video")
        fps = cap.get(cv2.CAP_PROP_FPS)
        frames = cap.get(cv2.CAP_PROP_FRAME_COUNT)
        if fps <= 0 or frames <= 0:
            raise VideoDecodeError(f"{path}: no decodable frames")
        return frames / fps
    finally:
        cap.release()


def sample_center_frames(path, duration: float, clip_len: float) -> list:
    """RGB center frame of each ``clip_len``-second clip.

    Returns exactly ``ceil(duration / clip_len)`` frames; center timestamps
    beyond the decodable range clamp to the last frame.
    """
    num_clips = math.ceil(duration / clip_len)
    cap = cv2.VideoCapture(str(path))
    try:
        if not cap.isOpened():
            raise VideoDecodeError(f"{path}: cannot open video")
        fps = cap.get(cv2.CAP_PROP_FPS)
        total = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
        if fps <= 0 or total <= 0:
            raise VideoDecodeError(f"{path}: no decodable frames")
        frames = []
        for clip in range(num_clips):
            center = (clip + 0.5) * clip_len
            index = min(max(int(round(center * fps)), 0), total - 1)
            cap.set(cv2.CAP_PROP_POS_FRAMES, index)
            got, frame = cap.read()
            if not got:
                raise VideoDecodeError(f"{path}: failed to decode frame {index}")
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
        return frames
    finally:
        cap.release()
