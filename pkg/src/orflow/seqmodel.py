"""Full-video tagger: TGM stack, pre-head, bidirectional LSTM, post-head.

The pre-head classifies the concatenation of TGM context features and raw
clip features; its logits feed the LSTM (``lstm_input="pre_logits"``), or the
concatenated features do (``lstm_input="concat_features"``). The post-head
classifies the recurrent states. Both heads output logits; probabilities are
only formed inside losses and metrics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import ActivitySegment
from .tgm import TGMLayer, tgm_stack_forward


class ConfigurationError(ValueError):
    pass


@dataclass
class TGMLayerConfig:
    L: int = 9
    M: int = 16


@dataclass
class SequenceModelConfig:
    num_classes: int
    feature_dim: int
    proj_dim: int = 64
    tgm: list[TGMLayerConfig] = field(default_factory=lambda: [TGMLayerConfig() for _ in range(3)])
    lstm_hidden: int = 32
    bidirectional: bool = True
    head_kernel: int = 1
    lstm_input: str = "pre_logits"

    def __post_init__(self):
        self.tgm = [t if isinstance(t, TGMLayerConfig) else TGMLayerConfig(**t) for t in self.tgm]
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.lstm_hidden < 1:
            raise ConfigurationError("lstm_hidden must be >= 1")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ConfigurationError(f"head_kernel must be odd, got {self.head_kernel}")
        if self.lstm_input not in ("pre_logits", "concat_features"):
            raise ConfigurationError(f"unknown lstm_input {self.lstm_input!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SequenceOutputs:
    pre_logits: torch.Tensor | None  # (T, K); None for single-head models
    post_logits: torch.Tensor        # (T, K)
    hidden: torch.Tensor | None = None  # (T, H)


def _as_tensor(f, dtype) -> torch.Tensor:
    if hasattr(f, "features"):
        f = f.features
    return torch.as_tensor(np.asarray(f) if not isinstance(f, torch.Tensor) else f).to(dtype)


class SequenceModel(nn.Module):
    kind = "sequence"

    def __init__(self, config: SequenceModelConfig, dtype=torch.float64):
        super().__init__()
        self.config = config
        K, D = config.num_classes, config.feature_dim
        self.proj = nn.Linear(D, config.proj_dim, dtype=dtype)
        layers, c_in = [], 1
        for t in config.tgm:
            layers.append(TGMLayer(c_in, K, L=t.L, M=t.M, dtype=dtype))
            c_in = K
        self.tgm = nn.ModuleList(layers)
        tgm_width = K * config.proj_dim if layers else config.proj_dim
        pad = (config.head_kernel - 1) // 2
        self.pre_head = nn.Conv1d(tgm_width + D, K, config.head_kernel, padding=pad, dtype=dtype)
        lstm_in = K if config.lstm_input == "pre_logits" else tgm_width + D
        self.lstm = nn.LSTM(lstm_in, config.lstm_hidden, batch_first=True,
                            bidirectional=config.bidirectional, dtype=dtype)
        H = config.lstm_hidden * (2 if config.bidirectional else 1)
        self.post_head = nn.Conv1d(H, K, config.head_kernel, padding=pad, dtype=dtype)

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def forward(self, f) -> SequenceOutputs:
        f = _as_tensor(f, self.dtype)
        if f.ndim != 2 or f.shape[1] != self.config.feature_dim:
            raise ConfigurationError(
                f"features have shape {tuple(f.shape)}, model expects T x {self.config.feature_dim}"
            )
        g = tgm_stack_forward(f, self.tgm, self.proj)
        z = torch.cat([g, f], dim=1)
        pre = self.pre_head(z.T[None])[0].T
        lstm_in = pre if self.config.lstm_input == "pre_logits" else z
        hidden, _ = self.lstm(lstm_in[None])
        hidden = hidden[0]
        post = self.post_head(hidden.T[None])[0].T
        return SequenceOutputs(pre, post, hidden)


def sequence_forward(f, model: SequenceModel) -> SequenceOutputs:
    """Evaluation-mode forward pass without gradient tracking."""
    model.eval()
    with torch.no_grad():
        return model(f)


class BaselineModel(nn.Module):
    """Per-clip classifier: one kernel-size-1 temporal convolution on clip features."""

    kind = "baseline"

    def __init__(self, num_classes: int, feature_dim: int, dtype=torch.float64):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        self.config = {"num_classes": num_classes, "feature_dim": feature_dim}
        self.head = nn.Conv1d(feature_dim, num_classes, kernel_size=1, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def forward(self, f) -> SequenceOutputs:
        f = _as_tensor(f, self.dtype)
        if f.ndim != 2 or f.shape[1] != self.config["feature_dim"]:
            raise ConfigurationError(
                f"features have shape {tuple(f.shape)}, head expects T x {self.config['feature_dim']}"
            )
        return SequenceOutputs(None, self.head(f.T[None])[0].T)


def baseline_forward(f, head: BaselineModel) -> torch.Tensor:
    head.eval()
    with torch.no_grad():
        return head(f).post_logits


def predict_segments(post_logits, clip_len: int) -> list[ActivitySegment]:
    """Run-length encode per-clip argmax into frame-bounded segments."""
    labels = np.asarray(torch.as_tensor(post_logits).argmax(dim=1))
    if labels.size == 0:
        raise ValueError("need at least one clip")
    segments = []
    start = 0
    for t in range(1, len(labels) + 1):
        if t == len(labels) or labels[t] != labels[start]:
            segments.append(ActivitySegment(int(labels[start]), start * clip_len, t * clip_len))
            start = t
    return segments


def segments_to_clip_labels(segments, clip_len: int) -> list[int]:
    out = []
    for s in segments:
        out.extend([s.class_id] * ((s.end_frame - s.start_frame) // clip_len))
    return out
