"""Losses, training loops and checkpoints.

Two loops: ``clip_fit`` fine-tunes a clip backbone on randomly positioned
training clips (fresh positions every epoch), and ``sequence_fit`` trains a
full-video model with one optimizer step per video, summing the cross-entropy
of both heads. Background clips (label -1) never contribute to a loss.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import ToyBackbone, normalize_frames
from .clipper import epoch_training_set
from .seqmodel import (BaselineModel, ConfigurationError, SequenceModel, SequenceModelConfig,
                       SequenceOutputs)

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, history=None, checkpoint_path=None):
        super().__init__(message)
        self.history = history
        self.checkpoint_path = checkpoint_path


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits, target: int) -> float:
    """``-log softmax(logits)[target]``; a background target (-1) costs 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if target == -1:
        return 0.0
    if not 0 <= target < logits.shape[-1]:
        raise ValueError(f"target {target} outside [0, {logits.shape[-1]})")
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    return float(lse - logits[target])


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean CE over clips whose label is not -1 (0 when every clip is background)."""
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    labels = torch.as_tensor(labels, dtype=torch.long)
    keep = labels >= 0
    if not keep.any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits[keep], labels[keep])


def dual_head_loss(outputs: SequenceOutputs, labels, weights=(1.0, 1.0)):
    """Return ``(total, pre_term, post_term)``; single-head outputs have pre_term 0."""
    w_pre, w_post = weights
    post = masked_cross_entropy(outputs.post_logits, labels)
    if outputs.pre_logits is None:
        return w_post * post, torch.zeros((), dtype=post.dtype), post
    pre = masked_cross_entropy(outputs.pre_logits, labels)
    return w_pre * pre + w_post * post, pre, post


# --------------------------------------------------------------------------
# config / history


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    grad_clip_norm: float | None = None
    loss_weights: tuple[float, float] = (1.0, 1.0)
    momentum: float = 0.9
    batch_size: int = 16

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        w_pre, w_post = self.loss_weights
        if w_pre < 0 or w_post < 0 or (w_pre == 0 and w_post == 0):
            raise ValueError("loss weights must be >= 0 and not both 0")

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict):
        for k, v in record.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"non-finite history value {k}={v}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)


def build_model(kind: str, config, seed: int = 0, dtype=torch.float64):
    """Construct a model with parameters initialized from ``seed`` only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == "sequence":
            cfg = config if isinstance(config, SequenceModelConfig) else SequenceModelConfig(**config)
            return SequenceModel(cfg, dtype=dtype)
        if kind == "baseline":
            return BaselineModel(dtype=dtype, **config)
        if kind == "backbone":
            return ToyBackbone(**config).to(dtype)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def model_config(model) -> dict:
    if isinstance(model, SequenceModel):
        return model.config.to_dict()
    if isinstance(model, BaselineModel):
        return dict(model.config)
    if isinstance(model, ToyBackbone):
        return model.config()
    raise ConfigurationError(f"cannot describe model of type {type(model).__name__}")


def model_kind(model) -> str:
    if isinstance(model, ToyBackbone):
        return "backbone"
    return model.kind


# --------------------------------------------------------------------------
# sequence training


def video_loss(model, features, labels, weights=(1.0, 1.0)):
    out = model(features)
    return dual_head_loss(out, torch.as_tensor(labels, dtype=torch.long), weights)


def _clip_gradients(model, cfg):
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)


def sequence_fit(videos: Sequence[tuple], model, cfg: TrainConfig,
                 eval_fn: Callable[[object], dict] | None = None,
                 optimizer_state: dict | None = None, start_epoch: int = 0,
                 history: TrainHistory | None = None,
                 checkpoint_path=None):
    """Train on ``[(features T x D, labels T), ...]``, one step per video.

    Videos are shuffled per epoch by ``(cfg.seed, epoch)``, so resuming at
    ``start_epoch`` with the saved optimizer state replays an uninterrupted
    run exactly. ``eval_fn(model)`` may add held-out metrics to each record.
    Returns ``(model, history, optimizer)``.
    """
    if not videos:
        raise ValueError("need at least one training video")
    prepared = [(torch.as_tensor(np.asarray(f), dtype=model.dtype), torch.as_tensor(np.asarray(y), dtype=torch.long))
                for f, y in videos]
    optimizer = make_optimizer(model, cfg)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    history = history if history is not None else TrainHistory()

    for epoch in range(start_epoch, cfg.epochs):
        last_good = copy.deepcopy(model.state_dict())
        last_good_opt = copy.deepcopy(optimizer.state_dict())
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(prepared))
        totals = np.zeros(3)
        for i in order:
            f, y = prepared[i]
            optimizer.zero_grad()
            out = model(f)
            finite = torch.isfinite(out.post_logits).all() and (
                out.pre_logits is None or torch.isfinite(out.pre_logits).all())
            if finite:
                total, pre, post = dual_head_loss(out, y, cfg.loss_weights)
            if not finite or not torch.isfinite(total):
                model.load_state_dict(last_good)
                optimizer.load_state_dict(last_good_opt)
                path = None
                if checkpoint_path is not None:
                    path = save_checkpoint(model, checkpoint_path, optimizer=optimizer,
                                           state={"epoch": epoch, "train_config": cfg.to_dict()})
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", history, path)
            total.backward()
            _clip_gradients(model, cfg)
            optimizer.step()
            totals += [total.item(), pre.item(), post.item()]
        totals /= len(prepared)
        record = {"epoch": epoch, "loss": float(totals[0]), "loss_pre": float(totals[1]),
                  "loss_post": float(totals[2])}
        if eval_fn is not None:
            record.update(eval_fn(model))
        history.append(record)
        logger.info("epoch %d loss %.5f", epoch, record["loss"])
    return model, history, optimizer


def predict_logits(model, features) -> np.ndarray:
    """Post-head logits of one video as a T x K numpy array."""
    model.eval()
    with torch.no_grad():
        return model(features).post_logits.cpu().numpy()


def collect_predictions(model, videos):
    """Concatenate post-head logits and labels over ``[(features, labels), ...]``."""
    scores = [predict_logits(model, f) for f, _ in videos]
    labels = [np.asarray(y) for _, y in videos]
    return np.concatenate(scores), np.concatenate(labels)


# --------------------------------------------------------------------------
# clip training


def gather_clip(frames: np.ndarray, clip) -> np.ndarray:
    return frames[clip.frame_indices()]


def clip_fit(manifest, split, frames: dict, backbone: ToyBackbone, cfg: TrainConfig,
             clip_len: int = 64):
    """Fine-tune ``backbone`` on per-segment clips resampled every epoch.

    ``frames`` maps video_id -> N x H x W x C array (uint8 or [-1, 1] floats).
    Returns ``(backbone, history)``.
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(backbone, cfg)
    history = TrainHistory()
    dtype = backbone.head.weight.dtype
    for epoch in range(cfg.epochs):
        samples = epoch_training_set(manifest, split, clip_len, rng)
        if not samples:
            raise ValueError("no training samples")
        last_good = copy.deepcopy(backbone.state_dict())
        order = rng.permutation(len(samples))
        backbone.train()
        total, correct = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            clips = np.stack([normalize_frames(gather_clip(frames[samples[i][0].video_id], samples[i][0]))
                              for i in idx])
            target = torch.as_tensor([samples[i][1] for i in idx], dtype=torch.long)
            optimizer.zero_grad()
            _, logits = backbone(torch.as_tensor(clips, dtype=dtype))
            loss = F.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                backbone.load_state_dict(last_good)
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", history)
            loss.backward()
            _clip_gradients(backbone, cfg)
            optimizer.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == target).sum())
        history.append({"epoch": epoch, "loss": total / len(samples), "train_accuracy": correct / len(samples)})
        logger.info("clip epoch %d loss %.5f", epoch, history.records[-1]["loss"])
    return backbone, history


# --------------------------------------------------------------------------
# checkpoints
#
# layout: b"ORCKPT\0\0" | uint32 format_version | uint64 header_len | JSON header | payload
# header lists every array (name, dtype, shape, offset, nbytes) and a crc32 of the payload.

CHECKPOINT_MAGIC = b"ORCKPT\x00\x00"
CHECKPOINT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    model: torch.nn.Module
    optimizer_state: dict | None
    state: dict


def _flatten_optimizer(opt_state: dict):
    arrays, meta = {}, {"param_groups": opt_state["param_groups"], "state": {}}
    for idx, entry in opt_state["state"].items():
        scalars = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                arrays[f"optim/{idx}/{key}"] = value
            else:
                scalars[key] = value
        meta["state"][str(idx)] = scalars
    return arrays, meta


def save_checkpoint(model, path, optimizer=None, state: dict | None = None) -> Path:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": model_kind(model),
        "config": model_config(model),
        "state": state or {},
        "optimizer": None,
    }
    if optimizer is not None:
        opt_arrays, opt_meta = _flatten_optimizer(optimizer.state_dict())
        arrays.update(opt_arrays)
        header["optimizer"] = opt_meta
    entries, chunks, offset = [], [], 0
    for name, tensor in arrays.items():
        a = tensor.detach().cpu().numpy()
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(a).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header["arrays"] = entries
    header["payload_nbytes"] = len(payload)
    header["payload_crc32"] = zlib.crc32(payload)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def load_checkpoint(path, num_classes: int | None = None, expected_kind: str | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated header")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}")
    start = _CKPT_PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError(f"corrupt checkpoint {path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable header ({exc})") from None
    payload = raw[start + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(
            f"corrupt checkpoint {path}: payload is {len(payload)} bytes, header says {header['payload_nbytes']}"
        )
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch")

    kind, config = header["kind"], header["config"]
    if expected_kind is not None and kind != expected_kind:
        raise ConfigurationError(f"checkpoint holds a {kind} model, expected {expected_kind}")
    if num_classes is not None and config["num_classes"] != num_classes:
        raise ConfigurationError(
            f"checkpoint has num_classes={config['num_classes']}, expected num_classes={num_classes}"
        )
    tensors = {}
    for e in header["arrays"]:
        a = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.copy())
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    dtype = next((v.dtype for v in model_state.values() if v.is_floating_point()), torch.float64)
    model = build_model(kind, config, dtype=dtype)
    model.load_state_dict(model_state)

    opt_state = None
    if header.get("optimizer") is not None:
        meta = header["optimizer"]
        groups = meta["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        state = {}
        for idx, scalars in meta["state"].items():
            entry = dict(scalars)
            prefix = f"optim/{idx}/"
            entry.update({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
            state[int(idx)] = entry
        opt_state = {"state": state, "param_groups": groups}
    return Checkpoint(kind, config, model, opt_state, header.get("state", {}))
