"""Clip partitioning for inference and random-start clip sampling for training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ActivitySegment, DatasetManifest, SplitSpec


@dataclass(frozen=True)
class ClipRange:
    video_id: str
    start_frame: int
    length: int
    # frames the consumer must produce; > length means loop-pad the last frame
    target_length: int | None = None

    def __post_init__(self):
        if self.start_frame < 0:
            raise ValueError("start_frame must be >= 0")
        if self.length <= 0:
            raise ValueError("length must be > 0")
        if self.target_length is None:
            object.__setattr__(self, "target_length", self.length)

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.length

    @property
    def needs_padding(self) -> bool:
        return self.target_length > self.length

    def frame_indices(self) -> np.ndarray:
        """Absolute frame indices, repeating the final frame up to ``target_length``."""
        idx = np.arange(self.start_frame, self.end_frame)
        if self.needs_padding:
            pad = np.full(self.target_length - self.length, self.end_frame - 1)
            idx = np.concatenate([idx, pad])
        return idx


def partition_uniform(num_frames: int, clip_len: int, video_id: str = "") -> list[ClipRange]:
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    if num_frames < clip_len:
        raise ValueError(f"video shorter than one clip ({num_frames} < {clip_len} frames)")
    return [ClipRange(video_id, t * clip_len, clip_len) for t in range(num_frames // clip_len)]


def sample_training_clip(segment: ActivitySegment, clip_len: int, rng: np.random.Generator,
                         video_id: str = "") -> ClipRange:
    """Draw one training clip lying entirely inside ``segment``.

    Starts are uniform over every position that keeps the clip inside the
    segment. Segments shorter than ``clip_len`` yield the whole segment,
    flagged for loop-padding to ``clip_len``.
    """
    if clip_len < 1:
        raise ValueError("clip_len must be >= 1")
    n = segment.length
    if n < clip_len:
        return ClipRange(video_id, segment.start_frame, n, target_length=clip_len)
    start = segment.start_frame + int(rng.integers(0, n - clip_len + 1))
    return ClipRange(video_id, start, clip_len)


def epoch_training_set(manifest: DatasetManifest, split: SplitSpec, clip_len: int,
                       rng: np.random.Generator) -> list[tuple[ClipRange, int]]:
    """One freshly sampled clip per (train video, annotated segment)."""
    if not split.train_video_ids:
        raise ValueError("split has no training videos")
    videos = {v.video_id: v for v in manifest.videos}
    samples = []
    for vid in split.train_video_ids:
        for seg in videos[vid].segments:
            samples.append((sample_training_clip(seg, clip_len, rng, vid), seg.class_id))
    return samples
