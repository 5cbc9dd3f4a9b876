"""Per-clip feature extraction.

Two sources of clip features share one contract (clip in, D-dim feature out):
precomputed feature files (e.g. exported I3D features, D=1024) and a small
trainable 3D-conv network used for desk-scale end-to-end runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .clipper import partition_uniform

FEATURE_MAGIC = b"ORFEAT01"
_HEADER = struct.Struct("<8sII")


class FeatureFormatError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray  # (T, D) float32
    clip_len: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError(f"features must be T x D, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"non-finite features in {self.video_id!r}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_features(seq: FeatureSequence, path) -> Path:
    """Write ``ORFEAT01`` + uint32 T + uint32 D + row-major float32 payload (LE)."""
    path = Path(path)
    payload = seq.features.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, seq.T, seq.D))
        fh.write(payload)
    _sidecar(path).write_text(
        json.dumps({"video_id": seq.video_id, "clip_len": seq.clip_len}, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path


def load_features(path, video_id: str | None = None, clip_len: int | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, T, D = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    expected = T * D * 4
    got = len(raw) - _HEADER.size
    if got < expected:
        raise FeatureFormatError(f"{path}: truncated payload ({got} of {expected} bytes)")
    if got > expected:
        raise FeatureFormatError(f"{path}: payload of {got} bytes inconsistent with T={T}, D={D}")
    feats = np.frombuffer(raw, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    meta = {}
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    return FeatureSequence(
        video_id=video_id if video_id is not None else meta.get("video_id", path.stem),
        features=feats.astype(np.float32),
        clip_len=clip_len if clip_len is not None else int(meta.get("clip_len", 16)),
    )


def feature_file_name(video_id: str) -> str:
    return f"{video_id}.orfeat"


# --------------------------------------------------------------------------
# toy spatio-temporal backbone


class ToyBackbone(nn.Module):
    """Three 3x3x3 conv stages (spatial stride 2) + ReLU, global pooling, linear head.

    The pooled activations of the last stage are the clip feature; the head
    maps them to class logits.
    """

    def __init__(self, num_classes: int, feature_dim: int = 64, in_channels: int = 1,
                 input_size: int = 64, widths: tuple[int, int] = (8, 16)):
        super().__init__()
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.in_channels = in_channels
        self.input_size = input_size
        self.widths = tuple(widths)
        chans = [in_channels, *self.widths, feature_dim]
        stages = []
        for cin, cout in zip(chans, chans[1:]):
            stages.append(nn.Conv3d(cin, cout, kernel_size=3, stride=(1, 2, 2), padding=1))
            stages.append(nn.ReLU())
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(feature_dim, num_classes)

    def config(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "widths": list(self.widths),
        }

    def _to_ncdhw(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.ndim == 4:
            clips = clips.unsqueeze(0)
        if clips.ndim != 5:
            raise ValueError(f"expected (B,) L x H x W x C clips, got shape {tuple(clips.shape)}")
        _, _, h, w, c = clips.shape
        if (h, w, c) != (self.input_size, self.input_size, self.in_channels):
            raise ValueError(
                f"clip frames are {h}x{w}x{c}, backbone expects "
                f"{self.input_size}x{self.input_size}x{self.in_channels}"
            )
        return clips.permute(0, 4, 1, 2, 3)

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        x = self.stages(self._to_ncdhw(clips).to(self.head.weight.dtype))
        return x.mean(dim=(2, 3, 4))

    def forward(self, clips: torch.Tensor):
        """Return ``(features, logits)``, shapes (B, D) and (B, K); unbatched input drops B."""
        squeeze = clips.ndim == 4
        feats = self.features(clips)
        logits = self.head(feats)
        if not (torch.isfinite(feats).all() and torch.isfinite(logits).all()):
            raise FloatingPointError("non-finite activations in toy backbone")
        if squeeze:
            return feats[0], logits[0]
        return feats, logits


def toy_backbone_forward(clip, model: ToyBackbone):
    """Feature and logits for one L x H x W x C clip, as numpy arrays."""
    clip = torch.as_tensor(np.asarray(clip))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feat, logits = model(clip)
    finally:
        model.train(was_training)
    return feat.numpy(), logits.numpy()


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """uint8 intensities -> float32 in [-1, 1]; float input is assumed normalized."""
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float32) / 127.5 - 1.0
    return frames.astype(np.float32, copy=False)


def backbone_extractor(model: ToyBackbone, batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a backbone as ``clips (B, L, H, W, C) -> features (B, D)`` in eval mode."""

    def extract(clips: np.ndarray) -> np.ndarray:
        model.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(clips), batch_size):
                out.append(model.features(torch.as_tensor(clips[i:i + batch_size])).cpu().numpy())
        return np.concatenate(out, axis=0)

    extract.feature_dim = model.feature_dim
    return extract


def extract_features(frames: np.ndarray, extractor, clip_len: int, video_id: str = "",
                     feature_dim: int | None = None) -> FeatureSequence:
    """Apply ``extractor`` to every uniform clip of ``frames`` (N x H x W x C)."""
    frames = normalize_frames(frames)
    clips = partition_uniform(len(frames), clip_len, video_id)
    batch = np.stack([frames[c.start_frame:c.end_frame] for c in clips])
    feats = np.asarray(extractor(batch))
    declared = feature_dim if feature_dim is not None else getattr(extractor, "feature_dim", None)
    if feats.ndim != 2 or feats.shape[0] != len(clips):
        raise ValueError(f"extractor returned shape {feats.shape} for {len(clips)} clips")
    if declared is not None and feats.shape[1] != declared:
        raise ValueError(f"extractor produced D={feats.shape[1]}, declared D={declared}")
    return FeatureSequence(video_id, feats, clip_len)
